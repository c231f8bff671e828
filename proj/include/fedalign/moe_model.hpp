#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "fedalign/numeric.hpp"
#include "fedalign/rng.hpp"

namespace fedalign {

struct RegContext;

struct MoEConfig {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t num_classes = 8;
  std::size_t expert_hidden = 32;

  /// Throws std::invalid_argument on violated invariants.
  void validate() const;

  friend bool operator==(const MoEConfig&, const MoEConfig&) = default;
};

/// Two-layer tanh MLP expert: out = tanh(h W1 + b1) W2 + b2.
struct ExpertParams {
  Matrix w1;  // hidden_dim x expert_hidden
  Vector b1;  // expert_hidden
  Matrix w2;  // expert_hidden x hidden_dim
  Vector b2;  // hidden_dim

  std::size_t flat_size() const { return w1.size() + b1.size() + w2.size() + b2.size(); }

  /// Concatenation in the order w1, b1, w2, b2 (row-major matrices).
  Vector flatten() const;
  void assign_flat(std::span<const double> flat);

  friend bool operator==(const ExpertParams&, const ExpertParams&) = default;
};

struct ModelParams {
  MoEConfig config;
  Matrix embed;  // input_dim x hidden_dim
  Matrix gate;   // hidden_dim x num_experts
  std::vector<ExpertParams> experts;
  Matrix head;  // hidden_dim x num_classes

  static ModelParams zeros(const MoEConfig& config);
  /// Gaussian fan-in scaled initialisation.
  static ModelParams initialize(const MoEConfig& config, Rng& rng);

  /// Every trainable block in canonical order: embed, gate, experts (w1, b1, w2, b2), head.
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;

  std::size_t parameter_count() const;
  Vector flatten() const;
  void assign_flat(std::span<const double> flat);

  bool same_shape(const ModelParams& other) const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct Batch {
  Matrix features;  // samples x input_dim
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Everything one sample's forward pass produces.
struct SampleTrace {
  Vector input;
  std::size_t label = 0;
  Vector hidden;      // h = x W_embed
  Vector scores;      // gate scores G(x) over all experts
  Vector full_probs;  // softmax over all experts
  std::vector<std::size_t> topk_set;  // activated experts, ascending index
  Vector topk_probs;                  // softmax over the activated scores, aligned with topk_set
  std::vector<Vector> expert_act;     // tanh activations per activated expert
  std::vector<Vector> expert_out;     // expert outputs per activated expert
  Vector moe_out;                     // y = sum p * E(h)
  Vector logits;
  Vector class_probs;

  /// topk_probs scattered to a length-S vector (zeros for inactive experts).
  Vector sparse_probs(std::size_t num_experts) const;
};

struct ForwardTrace {
  std::vector<SampleTrace> samples;
  double loss = 0.0;  // mean cross-entropy
};

/// Indices of the k largest scores, ties broken by ascending index.
std::vector<std::size_t> top_k_select(std::span<const double> scores, std::size_t k);

ForwardTrace forward(const ModelParams& params, const Batch& batch);

/// Gradient of mean cross-entropy + lambda * mean routing regulariser. Pass nullptr or
/// lambda = 0 for the plain task loss.
ModelParams backward(const ForwardTrace& trace, const ModelParams& params,
                     const RegContext* reg = nullptr);

/// Scalar objective matching backward(): mean CE + lambda * mean reg loss.
double total_loss(const ModelParams& params, const Batch& batch, const RegContext* reg = nullptr);

std::size_t predict(const SampleTrace& sample);

/// Checkpoint I/O (see docs/formats.md).
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace fedalign
