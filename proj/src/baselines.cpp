#include "fedalign/baselines.hpp"

#include <numeric>
#include <stdexcept>

#include "fedalign/server_aggregator.hpp"

namespace fedalign {

ProxTerm prox_term(const ModelParams& local, const ModelParams& anchor, double mu) {
  if (!(mu >= 0.0)) throw std::invalid_argument("prox_term: mu must be >= 0");
  if (!local.same_shape(anchor)) throw std::invalid_argument("prox_term: shape mismatch");
  ProxTerm out{0.0, ModelParams::zeros(local.config)};
  const auto lb = local.blocks();
  const auto ab = anchor.blocks();
  auto gb = out.gradient.blocks();
  double sq = 0.0;
  for (std::size_t b = 0; b < lb.size(); ++b) {
    for (std::size_t i = 0; i < lb[b].size(); ++i) {
      const double d = lb[b][i] - ab[b][i];
      sq += d * d;
      gb[b][i] = mu * d;
    }
  }
  out.loss = 0.5 * mu * sq;
  return out;
}

Vector size_weights(std::span<const std::size_t> sizes) {
  if (sizes.empty()) throw std::invalid_argument("size_weights: no clients");
  const double total =
      static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  if (total <= 0.0) throw std::invalid_argument("size_weights: total dataset size is zero");
  Vector w(sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) w[i] = static_cast<double>(sizes[i]) / total;
  return w;
}

void weighted_average_into(std::span<double> out, const std::vector<std::span<const double>>& inputs,
                           std::span<const double> weights) {
  if (inputs.size() != weights.size()) throw std::invalid_argument("weighted_average: count mismatch");
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != out.size()) throw std::invalid_argument("weighted_average: shape mismatch");
    axpy(weights[i], inputs[i], out);
  }
}

ModelParams fedavg_aggregate(const ModelParams& global, const std::vector<ModelParams>& locals,
                             std::span<const std::size_t> sizes) {
  if (locals.empty() || locals.size() != sizes.size()) {
    throw std::invalid_argument("fedavg_aggregate: need one size per client");
  }
  for (const auto& l : locals) {
    if (!l.same_shape(global)) throw std::invalid_argument("fedavg_aggregate: shape mismatch");
  }
  const auto& cfg = global.config;
  const Vector w = size_weights(sizes);
  ModelParams out = global;

  auto average = [&](auto select) {
    std::vector<std::span<const double>> inputs;
    for (const auto& l : locals) inputs.push_back(select(l));
    weighted_average_into(select(out), inputs, w);
  };
  average([](auto& p) { return std::span(p.embed.values()); });
  average([](auto& p) { return std::span(p.gate.values()); });
  average([](auto& p) { return std::span(p.head.values()); });

  std::vector<ExpertDelta> deltas(locals.size());
  for (std::size_t i = 0; i < locals.size(); ++i) {
    deltas[i].client_id = i;
    deltas[i].delta.resize(cfg.num_experts);
    deltas[i].activated.assign(cfg.num_experts, true);
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
      Vector d = locals[i].experts[e].flatten();
      const Vector g = global.experts[e].flatten();
      for (std::size_t k = 0; k < d.size(); ++k) d[k] -= g[k];
      deltas[i].delta[e] = std::move(d);
    }
  }
  aggregate_experts(out, deltas, size_proportional_gamma(sizes, cfg.num_experts));
  return out;
}

}  // namespace fedalign
