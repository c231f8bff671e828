#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fedalign/moe_model.hpp"
#include "fedalign/numeric.hpp"

namespace fedalign {

/// Gaussian-cluster classification task.
struct SyntheticTask {
  std::size_t num_classes = 8;
  std::size_t input_dim = 16;
  Matrix class_means;  // num_classes x input_dim
  double noise_std = 1.0;
  std::size_t samples_per_class = 200;

  void validate() const;
};

/// Draws class means i.i.d. N(0, (separation^2 / input_dim) I) so the expected distance between
/// two means is about separation * sqrt(2).
SyntheticTask make_task(std::size_t num_classes, std::size_t input_dim, double separation,
                        double noise_std, std::size_t samples_per_class, std::uint64_t seed);

/// Class-major labelled pool: sample = class_mean + N(0, noise_std^2 I).
Batch generate(const SyntheticTask& task, std::uint64_t seed);

struct ClientDataset {
  std::size_t client_id = 0;
  Batch data;
  /// Pool row index of each local sample.
  std::vector<std::size_t> pool_indices;

  std::size_t size() const { return data.size(); }
  std::vector<std::size_t> label_counts(std::size_t num_classes) const;
};

/// Draws one Dirichlet(concentration * 1) vector of length n.
Vector sample_dirichlet(std::size_t n, double concentration, Rng& rng);

/// Label-skew split: each class is divided across clients according to its own Dirichlet draw.
/// Redraws up to `max_retries` times if a client ends up empty.
std::vector<ClientDataset> dirichlet_partition(const Batch& pool, std::size_t num_clients,
                                               double concentration, std::uint64_t seed,
                                               std::size_t max_retries = 100);

/// CSV columns: client_id,label,f0..f{d-1}.
void write_clients_csv(const std::vector<ClientDataset>& clients,
                       const std::filesystem::path& path);
std::vector<ClientDataset> read_clients_csv(const std::filesystem::path& path);

}  // namespace fedalign
