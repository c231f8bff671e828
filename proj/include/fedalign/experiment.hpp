#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedalign/data_synth.hpp"
#include "fedalign/moe_model.hpp"
#include "fedalign/routing_regularizer.hpp"
#include "fedalign/server_aggregator.hpp"

namespace fedalign {

enum class Method { fedalign, fedavg, fedprox };

std::string to_string(Method m);
Method parse_method(const std::string& name);

struct Ablations {
  bool no_consistency_weighting = false;
  bool no_adaptive_alpha = false;
  bool no_direction_consensus = false;
  bool no_gating_broadcast = false;
  std::optional<double> fixed_threshold;
  /// Replace the semantic gate weights with size-proportional ones (FedAvg expert update).
  bool uniform_gamma = false;

  /// Canonical flag names, e.g. "no_adaptive_alpha", "fixed_threshold=0.3".
  std::vector<std::string> names() const;
  /// Applies one flag; throws std::invalid_argument on an unknown name.
  void apply(const std::string& flag);
};

struct TaskConfig {
  std::size_t num_classes = 8;
  std::size_t input_dim = 16;
  double separation = 3.0;
  double noise_std = 1.0;
  std::size_t samples_per_class = 200;
  std::size_t test_samples_per_class = 200;
};

struct ExperimentConfig {
  Method method = Method::fedalign;
  MoEConfig model;
  TaskConfig task;
  std::size_t num_clients = 10;
  std::size_t rounds = 25;
  std::size_t local_epochs = 5;
  std::size_t batch_size = 16;
  double lr = 0.1;
  double dirichlet_alpha = 0.1;
  double lambda = 0.1;
  double eta = 0.1;
  double beta = 0.5;
  double prox_mu = 0.01;
  std::uint64_t seed = 1;
  MaskPolicy mask = MaskPolicy::topk_union;
  Ablations ablations;
  std::size_t threads = 1;

  /// Every violated constraint, empty when valid.
  std::vector<std::string> validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::vector<std::string> issues);
  const std::vector<std::string>& issues() const { return issues_; }

 private:
  std::vector<std::string> issues_;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  double global_test_accuracy = 0.0;
  double local_accuracy_mean = 0.0;
  double local_accuracy_std = 0.0;
  double mean_local_loss = 0.0;
  double mean_reg_loss = 0.0;
  /// Mean TV between client routing and the reference, with the models clients hold after
  /// aggregation.
  double routing_disagreement = 0.0;
  /// Same metric with the locally trained (pre-aggregation) models.
  double routing_disagreement_pre = 0.0;
  /// Mean over experts of 1 - M(e).
  double semantic_divergence = 0.0;
  std::size_t experts_updated = 0;
};

nlohmann::json to_json(const RoundRecord& r);

struct ExperimentData {
  Batch train_pool;
  Batch test_set;
  std::vector<ClientDataset> clients;
};

/// Task, pools and partition derived from the config's seed.
ExperimentData build_data(const ExperimentConfig& config);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  std::vector<AggregationReport> reports;
  /// Global model after every round (index 0 = initial model).
  std::vector<ModelParams> trajectory;
  ModelParams final_model;
};

struct RunOptions {
  bool keep_trajectory = false;
};

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Fraction of samples whose argmax prediction matches the label.
double evaluate(const ModelParams& params, const Batch& test_set);

/// Per-class accuracy on the test set weighted by the given class histogram.
double weighted_accuracy(const ModelParams& params, const Batch& test_set,
                         std::span<const std::size_t> class_counts);

/// Writes metrics.jsonl and summary.csv into `dir`. Header line first in both.
void emit_metrics(const std::vector<RoundRecord>& records, const std::filesystem::path& dir);

/// One JSON object per round: omega, tau, M, Sigma and gamma row sums per expert.
nlohmann::json report_to_json(const AggregationReport& report);
void emit_reports(const std::vector<AggregationReport>& reports, const std::filesystem::path& path);

}  // namespace fedalign
