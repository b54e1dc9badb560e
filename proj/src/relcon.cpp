#include "pulseppg/relcon.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pulseppg/errors.hpp"

namespace pulseppg {

SubjectIndex::SubjectIndex(std::span<const PpgWindow> corpus) {
  subject_.reserve(corpus.size());
  hour_.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto hour = static_cast<std::int64_t>(std::floor(corpus[i].start_time_s / 3600.0));
    subject_.push_back(corpus[i].subject_id);
    hour_.push_back(hour);
    buckets_[{corpus[i].subject_id, hour}].push_back(i);
  }
}

std::vector<std::size_t> SubjectIndex::same_hour_siblings(std::size_t window) const {
  std::vector<std::size_t> out;
  const auto& bucket = buckets_.at({subject_[window], hour_[window]});
  for (auto i : bucket)
    if (i != window) out.push_back(i);
  return out;
}

std::optional<CandidateSet> sample_candidates(std::size_t anchor, std::span<const std::size_t> batch,
                                              const SubjectIndex& index, std::mt19937_64& rng) {
  const auto& who = index.subject(anchor);
  CandidateSet set;
  set.anchor = anchor;
  std::vector<std::size_t> between;
  for (auto b : batch)
    if (index.subject(b) != who) between.push_back(b);
  if (between.empty()) fail(ErrorKind::degenerate_batch, "batch holds windows of a single subject ('" + who + "')");

  const auto siblings = index.same_hour_siblings(anchor);
  if (siblings.empty()) return std::nullopt;
  const auto pick = std::uniform_int_distribution<std::size_t>(0, siblings.size() - 1)(rng);
  set.candidates.push_back(siblings[pick]);
  set.provenance.push_back(Provenance::within_subject_same_hour);
  for (auto b : between) {
    set.candidates.push_back(b);
    set.provenance.push_back(Provenance::between_subject_batch);
  }
  return set;
}

double ntxent(double sim_pos, std::span<const double> sims_neg, double tau) {
  require(tau > 0.0, "ntxent: temperature must be positive");
  double top = sim_pos / tau;
  for (double s : sims_neg) top = std::max(top, s / tau);
  double sum = std::exp(sim_pos / tau - top);
  for (double s : sims_neg) sum += std::exp(s / tau - top);
  return top + std::log(sum) - sim_pos / tau;
}

std::vector<std::size_t> build_negatives(std::size_t i_pos, std::span<const double> distances) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < distances.size(); ++j)
    if (distances[j] > distances[i_pos]) out.push_back(j);
  return out;
}

torch::Tensor embedding_similarity(const torch::Tensor& anchor, const torch::Tensor& candidates,
                                   Similarity similarity) {
  if (similarity == Similarity::dot) return torch::matmul(candidates, anchor);
  namespace F = torch::nn::functional;
  auto a = F::normalize(anchor.unsqueeze(0), F::NormalizeFuncOptions().dim(1)).squeeze(0);
  auto c = F::normalize(candidates, F::NormalizeFuncOptions().dim(1));
  return torch::matmul(c, a);
}

torch::Tensor relcon_loss(const torch::Tensor& anchor, const torch::Tensor& candidates,
                          std::span<const double> distances, const LossConfig& config) {
  require(config.temperature > 0.0, "relcon: temperature must be positive");
  const auto n = candidates.size(0);
  require(n >= 1 && static_cast<std::size_t>(n) == distances.size(), "relcon: candidates and distances misaligned");
  require(candidates.size(1) == anchor.size(0), "relcon: embedding dimensions differ");

  auto logits = embedding_similarity(anchor, candidates, config.similarity) / config.temperature;  // [C]
  // allowed[i][j]: j enters the denominator when i is the positive.
  auto allowed = torch::zeros({n, n}, torch::kBool);
  auto acc = allowed.accessor<bool, 2>();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j)
      acc[i][j] = i == j || distances[static_cast<std::size_t>(j)] > distances[static_cast<std::size_t>(i)];
  auto table = logits.unsqueeze(0).expand({n, n}).masked_fill(allowed.logical_not(),
                                                              -std::numeric_limits<double>::infinity());
  return (torch::logsumexp(table, 1) - logits).sum();
}

}  // namespace pulseppg
