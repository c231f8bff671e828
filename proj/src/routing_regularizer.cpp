#include "fedalign/routing_regularizer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedalign/moe_model.hpp"

namespace fedalign {

void RegContext::validate(std::size_t num_experts) const {
  if (p_global.size() != num_experts) {
    throw std::invalid_argument("RegContext: p_global has " + std::to_string(p_global.size()) +
                                " entries, expected " + std::to_string(num_experts));
  }
  if (alpha.size() != num_experts) {
    throw std::invalid_argument("RegContext: alpha has wrong length");
  }
  double total = 0.0;
  for (double v : p_global) {
    if (!(v >= 0.0)) throw std::invalid_argument("RegContext: p_global entry negative or NaN");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("RegContext: p_global sums to " + std::to_string(total));
  }
  if (!(lambda >= 0.0)) throw std::invalid_argument("RegContext: lambda must be >= 0");
  if (top_k == 0 || top_k > num_experts) throw std::invalid_argument("RegContext: bad top_k");
}

std::vector<std::size_t> regularization_mask(std::span<const double> full_probs,
                                             const RegContext& ctx) {
  const std::size_t s = full_probs.size();
  std::vector<std::size_t> mask;
  if (ctx.mask == MaskPolicy::all_experts) {
    mask.resize(s);
    for (std::size_t e = 0; e < s; ++e) mask[e] = e;
    return mask;
  }
  std::vector<bool> in(s, false);
  for (auto e : top_k_select(full_probs, ctx.top_k)) in[e] = true;
  for (auto e : top_k_select(ctx.p_global, ctx.top_k)) in[e] = true;
  for (std::size_t e = 0; e < s; ++e) {
    if (in[e]) mask.push_back(e);
  }
  return mask;
}

namespace {

struct MaskedPair {
  std::vector<std::size_t> mask;
  Vector local;   // renormalised local routing over the mask
  Vector global;  // renormalised reference over the mask
};

MaskedPair masked_pair(const SampleTrace& sample, const RegContext& ctx) {
  MaskedPair out;
  out.mask = regularization_mask(sample.full_probs, ctx);
  // Renormalised full_probs over the mask equal the softmax of the masked scores.
  Vector masked_scores;
  masked_scores.reserve(out.mask.size());
  double global_total = 0.0;
  for (auto e : out.mask) {
    masked_scores.push_back(sample.scores[e]);
    global_total += ctx.p_global[e];
  }
  out.local = softmax(masked_scores);
  out.global.reserve(out.mask.size());
  for (auto e : out.mask) {
    out.global.push_back(global_total > 0.0 ? ctx.p_global[e] / global_total : 0.0);
  }
  return out;
}

}  // namespace

double reg_loss(const SampleTrace& sample, const RegContext& ctx) {
  const auto pair = masked_pair(sample, ctx);
  double loss = 0.0;
  for (std::size_t j = 0; j < pair.mask.size(); ++j) {
    loss += ctx.alpha[pair.mask[j]] * kl_term(pair.local[j], pair.global[j]);
  }
  return loss;
}

Vector reg_loss_score_grad(const SampleTrace& sample, const RegContext& ctx) {
  const auto pair = masked_pair(sample, ctx);
  const std::size_t m = pair.mask.size();
  // dL/dp for each masked entry, then back through the masked softmax.
  Vector g(m, 0.0);
  double weighted = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    const double p = pair.local[j];
    if (p <= 0.0) continue;
    const double q = std::max(pair.global[j], kEpsilon);
    g[j] = ctx.alpha[pair.mask[j]] * (std::log(p / q) + 1.0);
    weighted += p * g[j];
  }
  Vector grad(sample.scores.size(), 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    grad[pair.mask[j]] = pair.local[j] * (g[j] - weighted);
  }
  return grad;
}

}  // namespace fedalign
