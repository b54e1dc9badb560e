#include "pulseppg/dataset_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pulseppg/config.hpp"
#include "pulseppg/errors.hpp"

namespace fs = std::filesystem;

namespace pulseppg {

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

std::string number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

std::string DatasetSplits::split_of(const std::string& subject_id) const {
  auto in = [&](const std::vector<std::string>& v) {
    return std::find(v.begin(), v.end(), subject_id) != v.end();
  };
  if (in(train)) return "train";
  if (in(val)) return "val";
  if (in(test)) return "test";
  return {};
}

const SubjectSeries* Dataset::find(const std::string& subject_id) const {
  for (const auto& s : subjects)
    if (s.subject_id == subject_id) return &s;
  return nullptr;
}

void write_f32(const fs::path& file, std::span<const float> values) {
  std::string bytes(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t word = to_le(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &word, 4);
  }
  write_file_atomic(file, bytes);
}

std::vector<float> read_f32(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::data_not_found, "cannot open " + file.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) fail(ErrorKind::io, file.string() + " is not a float32 array");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t word = 0;
    std::memcpy(&word, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_le(word));
  }
  return out;
}

void write_dataset(const fs::path& root, const Dataset& dataset) {
  fs::create_directories(root / "subjects");
  for (const auto& subject : dataset.subjects) {
    subject.validate();
    const fs::path dir = root / "subjects" / subject.subject_id;
    fs::create_directories(dir);
    KeyValues manifest;
    manifest.set("subject_id", subject.subject_id);
    manifest.set("segments", std::to_string(subject.segments.size()));
    for (std::size_t i = 0; i < subject.segments.size(); ++i) {
      const auto& seg = subject.segments[i];
      const std::string file = "segment_" + std::to_string(i) + ".f32";
      const std::string prefix = "segment." + std::to_string(i) + ".";
      manifest.set(prefix + "start_s", number(seg.start_time_s));
      manifest.set(prefix + "rate_hz", number(seg.rate_hz));
      manifest.set(prefix + "file", file);
      std::vector<float> samples(seg.values.begin(), seg.values.end());
      write_f32(dir / file, samples);
    }
    if (!subject.segments.empty()) manifest.set("rate_hz", number(subject.segments.front().rate_hz));
    manifest.save(dir / "manifest.txt");
  }

  KeyValues splits;
  splits.set("train", join(dataset.splits.train));
  splits.set("val", join(dataset.splits.val));
  splits.set("test", join(dataset.splits.test));
  splits.save(root / "splits.txt");

  if (!dataset.labels.empty()) {
    std::vector<std::string> columns;
    for (const auto& [k, v] : dataset.labels.front().values) columns.push_back(k);
    std::string csv = "subject_id,segment";
    for (const auto& c : columns) csv += "," + c;
    csv += "\n";
    for (const auto& row : dataset.labels) {
      csv += row.subject_id + "," + std::to_string(row.segment);
      for (const auto& c : columns) csv += "," + number(row.values.at(c));
      csv += "\n";
    }
    write_file_atomic(root / "labels.csv", csv);
  }
}

Dataset read_dataset(const fs::path& root) {
  if (!fs::is_directory(root / "subjects"))
    fail(ErrorKind::data_not_found, "no dataset at " + root.string());
  Dataset ds;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root / "subjects"))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& dir : dirs) {
    const auto manifest = KeyValues::load(dir / "manifest.txt");
    SubjectSeries subject;
    subject.subject_id = manifest.get("subject_id");
    const double default_rate = manifest.has("rate_hz") ? manifest.get_double("rate_hz") : 0.0;
    const long count = manifest.get_int("segments");
    for (long i = 0; i < count; ++i) {
      const std::string prefix = "segment." + std::to_string(i) + ".";
      Segment seg;
      seg.start_time_s = manifest.get_double(prefix + "start_s");
      seg.rate_hz = manifest.has(prefix + "rate_hz") ? manifest.get_double(prefix + "rate_hz") : default_rate;
      const auto samples = read_f32(dir / manifest.get(prefix + "file"));
      seg.values.assign(samples.begin(), samples.end());
      subject.segments.push_back(std::move(seg));
    }
    subject.validate();
    ds.subjects.push_back(std::move(subject));
  }

  if (fs::exists(root / "splits.txt")) {
    const auto splits = KeyValues::load(root / "splits.txt");
    ds.splits.train = split_list(splits.get_or("train", ""));
    ds.splits.val = split_list(splits.get_or("val", ""));
    ds.splits.test = split_list(splits.get_or("test", ""));
  }

  if (fs::exists(root / "labels.csv")) {
    std::ifstream in(root / "labels.csv");
    std::string line;
    std::getline(in, line);
    const auto header = split_list(line);
    if (header.size() < 2 || header[0] != "subject_id" || header[1] != "segment")
      fail(ErrorKind::io, "labels.csv: unexpected header");
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto cells = split_list(line);
      if (cells.size() != header.size()) fail(ErrorKind::io, "labels.csv: ragged row");
      SegmentLabel row;
      row.subject_id = cells[0];
      row.segment = std::stoul(cells[1]);
      for (std::size_t c = 2; c < cells.size(); ++c) row.values[header[c]] = std::stod(cells[c]);
      ds.labels.push_back(std::move(row));
    }
  }
  return ds;
}

}  // namespace pulseppg
