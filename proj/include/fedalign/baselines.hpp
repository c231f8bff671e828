#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedalign/moe_model.hpp"

namespace fedalign {

enum class BaselineKind { fedavg, fedprox };

struct ProxTerm {
  double loss = 0.0;
  ModelParams gradient;
};

/// (mu / 2) * |theta - anchor|^2 and its gradient mu * (theta - anchor).
ProxTerm prox_term(const ModelParams& local, const ModelParams& anchor, double mu);

/// Normalised dataset-size weights |D_i| / |D|.
Vector size_weights(std::span<const std::size_t> sizes);

/// out = sum_i w_i * blocks_i for a single block, accumulated in index order.
void weighted_average_into(std::span<double> out, const std::vector<std::span<const double>>& inputs,
                           std::span<const double> weights);

/// Size-weighted average of every parameter block. Experts go through the delta-form
/// aggregation path (global + sum_i w_i * delta_i) shared with the semantic aggregator.
ModelParams fedavg_aggregate(const ModelParams& global, const std::vector<ModelParams>& locals,
                             std::span<const std::size_t> sizes);

}  // namespace fedalign
