#pragma once

#include <span>
#include <vector>

#include "fedalign/numeric.hpp"

namespace fedalign {

struct SampleTrace;

enum class MaskPolicy {
  /// Experts in Top-k of the local routing probabilities or Top-k of the global reference.
  topk_union,
  /// Every expert participates.
  all_experts,
};

/// Client-side alignment target and weights for one local round.
struct RegContext {
  Vector p_global;  // global routing reference, sums to 1
  double eta = 0.1;
  double lambda = 0.0;
  Vector alpha;  // per-expert adaptive weights
  MaskPolicy mask = MaskPolicy::topk_union;
  std::size_t top_k = 1;

  /// Throws std::invalid_argument when the invariants fail.
  void validate(std::size_t num_experts) const;
};

/// Experts over which the divergence is evaluated for one sample.
std::vector<std::size_t> regularization_mask(std::span<const double> full_probs,
                                             const RegContext& ctx);

/// Masked, alpha-weighted KL of the sample's routing distribution against the reference.
/// Both distributions are renormalised over the mask first.
double reg_loss(const SampleTrace& sample, const RegContext& ctx);

/// d reg_loss / d gate scores for one sample (length S).
Vector reg_loss_score_grad(const SampleTrace& sample, const RegContext& ctx);

}  // namespace fedalign
