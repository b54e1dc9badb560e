#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "pulseppg/signal.hpp"

namespace pulseppg {

enum class Provenance { within_subject_same_hour, between_subject_batch };
enum class Similarity { cosine, dot };

struct LossConfig {
  double temperature = 0.1;
  Similarity similarity = Similarity::cosine;
};

// Candidates are indices into the corpus the SubjectIndex was built from.
struct CandidateSet {
  std::size_t anchor = 0;
  std::vector<std::size_t> candidates;
  std::vector<Provenance> provenance;
  std::vector<double> distances;  // filled from the frozen distance model
};

// Buckets corpus windows by (subject, clock hour of start time).
class SubjectIndex {
 public:
  explicit SubjectIndex(std::span<const PpgWindow> corpus);

  const std::string& subject(std::size_t window) const { return subject_[window]; }
  std::int64_t hour(std::size_t window) const { return hour_[window]; }
  // Same subject, same hour, excluding the window itself; ascending order.
  std::vector<std::size_t> same_hour_siblings(std::size_t window) const;
  std::size_t size() const { return subject_.size(); }

 private:
  std::vector<std::string> subject_;
  std::vector<std::int64_t> hour_;
  std::map<std::pair<std::string, std::int64_t>, std::vector<std::size_t>> buckets_;
};

// One uniformly drawn same-hour sibling plus every batch window from another
// subject. Returns nullopt (skip this anchor) when the anchor has no same-hour
// sibling; throws degenerate_batch when the batch holds a single subject.
std::optional<CandidateSet> sample_candidates(std::size_t anchor, std::span<const std::size_t> batch,
                                              const SubjectIndex& index, std::mt19937_64& rng);

// -log(exp(pos/tau) / (sum_neg exp(neg/tau) + exp(pos/tau))), log-sum-exp stabilized.
double ntxent(double sim_pos, std::span<const double> sims_neg, double tau);

// Candidates strictly farther from the anchor than candidate i_pos.
std::vector<std::size_t> build_negatives(std::size_t i_pos, std::span<const double> distances);

// Similarities between one anchor embedding [D] and candidate embeddings [C, D].
torch::Tensor embedding_similarity(const torch::Tensor& anchor, const torch::Tensor& candidates,
                                   Similarity similarity);

// Sum over candidates i of ntxent(sim(anchor, i), sims of build_negatives(i)).
torch::Tensor relcon_loss(const torch::Tensor& anchor, const torch::Tensor& candidates,
                          std::span<const double> distances, const LossConfig& config);

}  // namespace pulseppg
