#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fedalign/client_trainer.hpp"
#include "fedalign/moe_model.hpp"
#include "fedalign/numeric.hpp"

namespace fedalign {

/// Below this, a sum of weights counts as zero and the documented fallback applies.
inline constexpr double kDegenerateSum = 1e-12;

struct GlobalReference {
  Vector p_global;
  Vector tau;
  std::size_t round = 0;
};

struct ConsistencyWeights {
  Matrix omega;                // N x S, columns sum to 1
  Matrix score;                // N x S, s_i(e) = o_i(e) * m_i(e)
  Matrix overlap;              // N x S, o_i(e) against the current round's unweighted mean
  std::vector<bool> fallback;  // per expert: uniform 1/N used because sum_j s_j(e) ~ 0
};

/// Unweighted mean of the uploaded p_bar vectors.
Vector mean_routing(const std::vector<RoutingStats>& stats);

ConsistencyWeights consistency_weights(const std::vector<RoutingStats>& stats);

/// Uniform omega (1/N everywhere) for the no-consistency-weighting variant.
ConsistencyWeights uniform_weights(std::size_t num_clients, std::size_t num_experts);

/// sum_i omega_i(e) p_bar_i(e), renormalised over experts. Uniform if every entry is zero.
Vector global_routing(const std::vector<RoutingStats>& stats, const Matrix& omega);

struct PairwiseSemantics {
  std::vector<Matrix> similarity;  // per expert, N x N cosine of mu
  std::vector<Matrix> direction;   // per expert, N x N cosine of deltas
  /// per expert, per client: mu non-empty and delta non-zero
  std::vector<std::vector<bool>> valid;
};

/// Pairs with an empty mu or a zero delta on either side get S = D = 0.
PairwiseSemantics pairwise_semantics(const std::vector<RoutingStats>& stats,
                                     const std::vector<ExpertDelta>& deltas);

struct ThresholdStats {
  Vector mean;        // M(e)
  Vector dispersion;  // Sigma(e), population standard deviation
  Vector tau;         // M(e) - beta * Sigma(e)
};

ThresholdStats adaptive_threshold(const std::vector<Matrix>& similarity, double beta);

/// gamma_ij(e) = sigmoid(S_ij(e) - tau_e) * max(0, D_ij(e)).
std::vector<Matrix> gated_weights(const std::vector<Matrix>& similarity,
                                  const std::vector<Matrix>& direction, std::span<const double> tau);

/// gamma_ij(e) = |D_i| / |D| for every partner j: collapses the expert update to size-weighted
/// averaging of deltas.
std::vector<Matrix> size_proportional_gamma(std::span<const std::size_t> sizes,
                                            std::size_t num_experts);

/// Effective per-client weights w_i(e) = row_sum_i / total. Empty when total < kDegenerateSum.
std::vector<double> effective_weights(const Matrix& gamma);

/// theta_e += sum_i w_i(e) delta_i(e). Returns per-expert "was updated" flags; experts with
/// no consensus mass are left untouched.
std::vector<bool> aggregate_experts(ModelParams& global, const std::vector<ExpertDelta>& deltas,
                                    const std::vector<Matrix>& gamma);

/// Dataset-size weighted average of gating matrices.
Matrix aggregate_gating(const std::vector<const Matrix*>& gates, std::span<const std::size_t> sizes);

enum class GammaMode {
  semantic,            // region-conditioned gating
  size_proportional,   // forced: reproduces size-weighted delta averaging
};

struct AggregationOptions {
  double beta = 0.5;
  bool consistency_weighting = true;
  bool direction_consensus = true;
  std::optional<double> fixed_threshold;
  GammaMode gamma_mode = GammaMode::semantic;
};

struct AggregationReport {
  std::size_t round = 0;
  std::vector<std::size_t> client_ids;  // canonical (ascending id) row order
  Matrix omega;
  std::vector<bool> omega_fallback;
  std::vector<Matrix> gamma;
  std::vector<Matrix> similarity;
  Vector mean_similarity;
  Vector dispersion;
  Vector tau;
  std::vector<bool> expert_updated;
  Vector consensus;  // unweighted mean routing this round
  Vector p_global;
};

struct ServerRoundResult {
  ModelParams global;
  GlobalReference reference;
  AggregationReport report;
};

/// Full server step. Inputs may arrive in any order; they are processed by ascending client id.
/// Embedding and head are size-weight averaged; gating via aggregate_gating; experts via the
/// gated delta aggregation.
ServerRoundResult aggregate_round(const ModelParams& global,
                                  std::span<const ClientUpload> uploads,
                                  const AggregationOptions& options, std::size_t round);

}  // namespace fedalign
