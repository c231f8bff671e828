#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "fedalign/data_synth.hpp"
#include "fedalign/moe_model.hpp"
#include "fedalign/routing_regularizer.hpp"

namespace fedalign {

/// Per-client routing statistics uploaded after local training.
struct RoutingStats {
  std::size_t client_id = 0;
  Vector p_bar;    // mean sparse routing probability per expert
  Vector overlap;  // p_bar * consensus mean (client-side, against the previous round's mean)
  Vector margin;   // mean top-1 dominance per expert over full_probs
  Matrix mu;       // num_experts x hidden_dim, mean hidden state by argmax assignment
  std::vector<bool> mu_empty;
  std::size_t dataset_size = 0;
};

/// Flattened per-expert parameter change (w1, b1, w2, b2 order).
struct ExpertDelta {
  std::size_t client_id = 0;
  std::vector<Vector> delta;
  std::vector<bool> activated;
};

class ClientRoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Vector compute_p_bar(const std::vector<SampleTrace>& traces, std::size_t num_experts);
Vector compute_margin(const std::vector<SampleTrace>& traces, std::size_t num_experts);

struct InputAssignment {
  Matrix mu;
  std::vector<bool> empty;
};
InputAssignment compute_mu(const std::vector<SampleTrace>& traces, std::size_t num_experts,
                           std::size_t hidden_dim);

/// Elementwise sigmoid(o - eta).
Vector compute_alpha(const Vector& overlap, double eta);

/// Elementwise p_bar * consensus.
Vector compute_overlap(const Vector& p_bar, const Vector& consensus);

/// Evaluation-only pass over a shard. `consensus` feeds the overlap field.
RoutingStats compute_routing_stats(const ModelParams& params, const ClientDataset& shard,
                                   const Vector& consensus);

/// What the server sends a client at the start of a round.
struct ServerBroadcast {
  Vector p_global;        // routing reference for the KL regulariser
  Vector prior_consensus; // previous round's unweighted mean routing (uniform at round 0)
};

struct LocalTrainingOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double lambda = 0.0;
  double eta = 0.1;
  bool adaptive_alpha = true;
  MaskPolicy mask = MaskPolicy::topk_union;
  /// FedProx proximal coefficient; 0 disables.
  double prox_mu = 0.0;
  std::uint64_t shuffle_seed = 0;
};

/// Everything a client sends back after a local round.
struct ClientUpload {
  RoutingStats stats;
  ExpertDelta delta;
  ModelParams params;  // locally trained model (gating, embed and head included)
};

struct LocalRoundResult {
  ClientUpload upload;
  RegContext reg;  // context used during training
  double mean_task_loss = 0.0;
  double mean_reg_loss = 0.0;
};

/// Builds the regulariser context for a client from the broadcast and its current model.
RegContext make_reg_context(const ModelParams& params, const ClientDataset& shard,
                            const ServerBroadcast& broadcast, const LocalTrainingOptions& opts);

/// Runs E epochs of mini-batch SGD on task loss + lambda * routing regulariser, then measures
/// routing statistics on the final model and the expert deltas against `params_in`.
LocalRoundResult local_round(const ModelParams& params_in, const ClientDataset& shard,
                             const ServerBroadcast& broadcast, const LocalTrainingOptions& opts);

/// Upload payload: binary deltas + mu (format in docs/formats.md) and a JSON sidecar.
void write_upload(const RoutingStats& stats, const ExpertDelta& delta,
                  const std::filesystem::path& binary_path,
                  const std::filesystem::path& json_path);
void read_upload(const std::filesystem::path& binary_path, const std::filesystem::path& json_path,
                 RoutingStats& stats, ExpertDelta& delta);

}  // namespace fedalign
