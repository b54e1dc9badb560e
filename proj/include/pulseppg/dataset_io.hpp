#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pulseppg/signal.hpp"

namespace pulseppg {

struct DatasetSplits {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  // "train", "val", "test", or empty when the subject is unassigned.
  std::string split_of(const std::string& subject_id) const;
};

// Per-segment annotations (synthetic ground truth or task labels).
struct SegmentLabel {
  std::string subject_id;
  std::size_t segment = 0;
  std::map<std::string, double> values;
};

struct Dataset {
  std::vector<SubjectSeries> subjects;
  DatasetSplits splits;
  std::vector<SegmentLabel> labels;

  const SubjectSeries* find(const std::string& subject_id) const;
};

// Layout:
//   <root>/splits.txt                      train=a,b  val=c  test=d
//   <root>/subjects/<id>/manifest.txt      subject_id, rate_hz, segment.<i>.start_s, segment.<i>.file
//   <root>/subjects/<id>/segment_<i>.f32   little-endian float32 samples
//   <root>/labels.csv                      subject_id,segment,<label columns...> (optional)
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& root);

void write_f32(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_f32(const std::filesystem::path& file);

}  // namespace pulseppg
