#include "fedalign/server_aggregator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fedalign/baselines.hpp"

namespace fedalign {

namespace {

std::size_t expert_count(const std::vector<RoutingStats>& stats) {
  if (stats.empty()) throw std::invalid_argument("aggregation needs at least one client");
  const std::size_t s = stats.front().p_bar.size();
  for (const auto& st : stats) {
    if (st.p_bar.size() != s || st.margin.size() != s) {
      throw std::invalid_argument("client " + std::to_string(st.client_id) +
                                  " uploaded statistics for the wrong expert count");
    }
  }
  return s;
}

bool is_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

}  // namespace

Vector mean_routing(const std::vector<RoutingStats>& stats) {
  const std::size_t s = expert_count(stats);
  Vector mean(s, 0.0);
  for (const auto& st : stats) axpy(1.0, st.p_bar, mean);
  for (auto& v : mean) v /= static_cast<double>(stats.size());
  return mean;
}

ConsistencyWeights consistency_weights(const std::vector<RoutingStats>& stats) {
  const std::size_t s = expert_count(stats);
  const std::size_t n = stats.size();
  const Vector consensus = mean_routing(stats);
  ConsistencyWeights w{Matrix(n, s), Matrix(n, s), Matrix(n, s), std::vector<bool>(s, false)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < s; ++e) {
      w.overlap(i, e) = stats[i].p_bar[e] * consensus[e];
      w.score(i, e) = w.overlap(i, e) * stats[i].margin[e];
    }
  }
  for (std::size_t e = 0; e < s; ++e) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += w.score(i, e);
    if (total < kDegenerateSum) {
      w.fallback[e] = true;
      for (std::size_t i = 0; i < n; ++i) w.omega(i, e) = 1.0 / static_cast<double>(n);
    } else {
      for (std::size_t i = 0; i < n; ++i) w.omega(i, e) = w.score(i, e) / total;
    }
  }
  return w;
}

ConsistencyWeights uniform_weights(std::size_t num_clients, std::size_t num_experts) {
  return {Matrix(num_clients, num_experts, 1.0 / static_cast<double>(num_clients)),
          Matrix(num_clients, num_experts), Matrix(num_clients, num_experts),
          std::vector<bool>(num_experts, false)};
}

Vector global_routing(const std::vector<RoutingStats>& stats, const Matrix& omega) {
  const std::size_t s = expert_count(stats);
  if (omega.rows() != stats.size() || omega.cols() != s) {
    throw std::invalid_argument("global_routing: omega shape mismatch");
  }
  Vector raw(s, 0.0);
  for (std::size_t e = 0; e < s; ++e) {
    for (std::size_t i = 0; i < stats.size(); ++i) raw[e] += omega(i, e) * stats[i].p_bar[e];
  }
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  if (total <= 0.0) return Vector(s, 1.0 / static_cast<double>(s));
  for (auto& v : raw) v /= total;
  return raw;
}

PairwiseSemantics pairwise_semantics(const std::vector<RoutingStats>& stats,
                                     const std::vector<ExpertDelta>& deltas) {
  const std::size_t s = expert_count(stats);
  const std::size_t n = stats.size();
  if (deltas.size() != n) throw std::invalid_argument("pairwise_semantics: client count mismatch");
  PairwiseSemantics out;
  out.similarity.assign(s, Matrix(n, n));
  out.direction.assign(s, Matrix(n, n));
  out.valid.assign(s, std::vector<bool>(n, false));
  for (std::size_t e = 0; e < s; ++e) {
    auto& valid = out.valid[e];
    for (std::size_t i = 0; i < n; ++i) {
      if (deltas[i].delta.size() != s) {
        throw std::invalid_argument("pairwise_semantics: delta expert count mismatch");
      }
      if (deltas[i].delta[e].size() != deltas[0].delta[e].size()) {
        throw std::invalid_argument("pairwise_semantics: inconsistent delta length for expert " +
                                    std::to_string(e));
      }
      valid[i] = !stats[i].mu_empty[e] && !is_zero(deltas[i].delta[e]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!valid[i]) continue;
      for (std::size_t j = i; j < n; ++j) {
        if (!valid[j]) continue;
        const double sim = cosine_sim(stats[i].mu.row(e), stats[j].mu.row(e));
        const double dir = cosine_sim(deltas[i].delta[e], deltas[j].delta[e]);
        out.similarity[e](i, j) = out.similarity[e](j, i) = sim;
        out.direction[e](i, j) = out.direction[e](j, i) = dir;
      }
    }
  }
  return out;
}

ThresholdStats adaptive_threshold(const std::vector<Matrix>& similarity, double beta) {
  if (!(beta >= 0.0)) throw std::invalid_argument("adaptive_threshold: beta must be >= 0");
  ThresholdStats out;
  for (const auto& sim : similarity) {
    const auto values = sim.values();
    const double count = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= count;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double dispersion = std::sqrt(var / count);
    out.mean.push_back(mean);
    out.dispersion.push_back(dispersion);
    out.tau.push_back(mean - beta * dispersion);
  }
  return out;
}

std::vector<Matrix> gated_weights(const std::vector<Matrix>& similarity,
                                  const std::vector<Matrix>& direction,
                                  std::span<const double> tau) {
  if (similarity.size() != direction.size() || similarity.size() != tau.size()) {
    throw std::invalid_argument("gated_weights: expert count mismatch");
  }
  std::vector<Matrix> gamma;
  gamma.reserve(similarity.size());
  for (std::size_t e = 0; e < similarity.size(); ++e) {
    const auto& sim = similarity[e];
    const auto& dir = direction[e];
    Matrix g(sim.rows(), sim.cols());
    for (std::size_t i = 0; i < sim.rows(); ++i) {
      for (std::size_t j = 0; j < sim.cols(); ++j) {
        g(i, j) = sigmoid(sim(i, j) - tau[e]) * std::max(0.0, dir(i, j));
      }
    }
    gamma.push_back(std::move(g));
  }
  return gamma;
}

std::vector<Matrix> size_proportional_gamma(std::span<const std::size_t> sizes,
                                            std::size_t num_experts) {
  const Vector w = size_weights(sizes);
  Matrix g(sizes.size(), sizes.size());
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    for (std::size_t j = 0; j < sizes.size(); ++j) g(i, j) = w[i];
  }
  return std::vector<Matrix>(num_experts, g);
}

std::vector<double> effective_weights(const Matrix& gamma) {
  std::vector<double> rows(gamma.rows(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < gamma.rows(); ++i) {
    for (double v : gamma.row(i)) rows[i] += v;
    total += rows[i];
  }
  if (total < kDegenerateSum) return {};
  for (auto& r : rows) r /= total;
  return rows;
}

std::vector<bool> aggregate_experts(ModelParams& global, const std::vector<ExpertDelta>& deltas,
                                    const std::vector<Matrix>& gamma) {
  const std::size_t s = global.config.num_experts;
  if (gamma.size() != s) throw std::invalid_argument("aggregate_experts: gamma expert count");
  std::vector<bool> updated(s, false);
  for (std::size_t e = 0; e < s; ++e) {
    if (gamma[e].rows() != deltas.size()) {
      throw std::invalid_argument("aggregate_experts: gamma/client count mismatch");
    }
    const auto w = effective_weights(gamma[e]);
    if (w.empty()) continue;
    Vector update(global.experts[e].flat_size(), 0.0);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (deltas[i].delta[e].size() != update.size()) {
        throw std::invalid_argument("aggregate_experts: delta shape mismatch for expert " +
                                    std::to_string(e));
      }
      axpy(w[i], deltas[i].delta[e], update);
    }
    Vector theta = global.experts[e].flatten();
    axpy(1.0, update, theta);
    global.experts[e].assign_flat(theta);
    updated[e] = true;
  }
  return updated;
}

Matrix aggregate_gating(const std::vector<const Matrix*>& gates, std::span<const std::size_t> sizes) {
  if (gates.empty() || gates.size() != sizes.size()) {
    throw std::invalid_argument("aggregate_gating: need one size per client");
  }
  Matrix out(gates.front()->rows(), gates.front()->cols());
  std::vector<std::span<const double>> inputs;
  for (const auto* g : gates) {
    if (!g->same_shape(out)) throw std::invalid_argument("aggregate_gating: shape mismatch");
    inputs.push_back(g->values());
  }
  weighted_average_into(out.values(), inputs, size_weights(sizes));
  return out;
}

ServerRoundResult aggregate_round(const ModelParams& global, std::span<const ClientUpload> uploads,
                                  const AggregationOptions& options, std::size_t round) {
  if (uploads.empty()) throw std::invalid_argument("aggregate_round: no uploads");
  const auto& cfg = global.config;
  std::vector<std::size_t> order(uploads.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&uploads](std::size_t a, std::size_t b) {
    return uploads[a].stats.client_id < uploads[b].stats.client_id;
  });

  std::vector<RoutingStats> stats;
  std::vector<ExpertDelta> deltas;
  std::vector<std::size_t> sizes;
  ServerRoundResult out;
  auto& report = out.report;
  report.round = round;
  for (auto idx : order) {
    stats.push_back(uploads[idx].stats);
    deltas.push_back(uploads[idx].delta);
    sizes.push_back(uploads[idx].stats.dataset_size);
    report.client_ids.push_back(uploads[idx].stats.client_id);
  }

  const auto weights = options.consistency_weighting
                           ? consistency_weights(stats)
                           : uniform_weights(stats.size(), cfg.num_experts);
  report.omega = weights.omega;
  report.omega_fallback = weights.fallback;
  report.consensus = mean_routing(stats);
  report.p_global = global_routing(stats, weights.omega);

  auto semantics = pairwise_semantics(stats, deltas);
  if (!options.direction_consensus) {
    for (std::size_t e = 0; e < cfg.num_experts; ++e) {
      auto& dir = semantics.direction[e];
      for (std::size_t i = 0; i < dir.rows(); ++i) {
        for (std::size_t j = 0; j < dir.cols(); ++j) {
          dir(i, j) = semantics.valid[e][i] && semantics.valid[e][j] ? 1.0 : 0.0;
        }
      }
    }
  }
  const auto threshold = adaptive_threshold(semantics.similarity, options.beta);
  report.mean_similarity = threshold.mean;
  report.dispersion = threshold.dispersion;
  report.tau = options.fixed_threshold ? Vector(cfg.num_experts, *options.fixed_threshold)
                                       : threshold.tau;
  report.similarity = semantics.similarity;
  report.gamma = options.gamma_mode == GammaMode::size_proportional
                     ? size_proportional_gamma(sizes, cfg.num_experts)
                     : gated_weights(semantics.similarity, semantics.direction, report.tau);

  out.global = global;
  std::vector<std::span<const double>> embeds;
  std::vector<std::span<const double>> heads;
  std::vector<const Matrix*> gates;
  for (auto idx : order) {
    embeds.push_back(uploads[idx].params.embed.values());
    heads.push_back(uploads[idx].params.head.values());
    gates.push_back(&uploads[idx].params.gate);
  }
  const Vector w = size_weights(sizes);
  weighted_average_into(out.global.embed.values(), embeds, w);
  weighted_average_into(out.global.head.values(), heads, w);
  out.global.gate = aggregate_gating(gates, sizes);
  report.expert_updated = aggregate_experts(out.global, deltas, report.gamma);

  out.reference.p_global = report.p_global;
  out.reference.tau = report.tau;
  out.reference.round = round + 1;
  return out;
}

}  // namespace fedalign
