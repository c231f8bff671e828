#include "fedalign/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "fedalign/baselines.hpp"
#include "fedalign/client_trainer.hpp"

namespace fedalign {

using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::fedalign: return "fedalign";
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "fedalign") return Method::fedalign;
  if (name == "fedavg") return Method::fedavg;
  if (name == "fedprox") return Method::fedprox;
  throw std::invalid_argument("unknown method '" + name + "' (expected fedalign, fedavg, fedprox)");
}

std::vector<std::string> Ablations::names() const {
  std::vector<std::string> out;
  if (no_consistency_weighting) out.emplace_back("no_consistency_weighting");
  if (no_adaptive_alpha) out.emplace_back("no_adaptive_alpha");
  if (no_direction_consensus) out.emplace_back("no_direction_consensus");
  if (no_gating_broadcast) out.emplace_back("no_gating_broadcast");
  if (fixed_threshold) {
    std::ostringstream os;
    os << "fixed_threshold=" << *fixed_threshold;
    out.push_back(os.str());
  }
  if (uniform_gamma) out.emplace_back("uniform_gamma");
  return out;
}

void Ablations::apply(const std::string& flag) {
  if (flag == "no_consistency_weighting") {
    no_consistency_weighting = true;
  } else if (flag == "no_adaptive_alpha") {
    no_adaptive_alpha = true;
  } else if (flag == "no_direction_consensus") {
    no_direction_consensus = true;
  } else if (flag == "no_gating_broadcast") {
    no_gating_broadcast = true;
  } else if (flag == "uniform_gamma") {
    uniform_gamma = true;
  } else if (flag.rfind("fixed_threshold", 0) == 0) {
    const auto eq = flag.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("fixed_threshold needs a value, e.g. fixed_threshold=0.5");
    }
    std::size_t used = 0;
    const std::string value = flag.substr(eq + 1);
    double tau = 0.0;
    try {
      tau = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) {
      throw std::invalid_argument("fixed_threshold value is not a number: '" + value + "'");
    }
    fixed_threshold = tau;
  } else {
    throw std::invalid_argument("unknown ablation '" + flag + "'");
  }
}

std::vector<std::string> ExperimentConfig::validate() const {
  std::vector<std::string> issues;
  auto check = [&issues](bool ok, const std::string& msg) {
    if (!ok) issues.push_back(msg);
  };
  check(model.input_dim >= 1 && model.hidden_dim >= 1 && model.num_experts >= 1 &&
            model.num_classes >= 1 && model.expert_hidden >= 1,
        "model: all dimensions must be >= 1");
  check(model.top_k >= 1 && model.top_k <= model.num_experts,
        "model.top_k must satisfy 1 <= top_k <= num_experts");
  check(task.num_classes == model.num_classes, "task.num_classes must equal model.num_classes");
  check(task.input_dim == model.input_dim, "task.input_dim must equal model.input_dim");
  check(task.samples_per_class >= 1, "task.samples_per_class must be >= 1");
  check(task.test_samples_per_class >= 1, "task.test_samples_per_class must be >= 1");
  check(task.noise_std >= 0.0, "task.noise_std must be >= 0");
  check(task.separation > 0.0, "task.separation must be > 0");
  check(num_clients >= 1, "num_clients must be >= 1");
  check(rounds >= 1, "rounds must be >= 1");
  check(local_epochs >= 1, "local_epochs must be >= 1");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(lr >= 0.0 && std::isfinite(lr), "lr must be finite and >= 0");
  check(dirichlet_alpha > 0.0, "dirichlet_alpha must be > 0");
  check(lambda >= 0.0, "lambda must be >= 0");
  check(std::isfinite(eta), "eta must be finite");
  check(beta >= 0.0, "beta must be >= 0");
  check(prox_mu >= 0.0, "prox_mu must be >= 0");
  check(method != Method::fedprox || prox_mu > 0.0, "fedprox requires prox_mu > 0");
  check(threads >= 1, "threads must be >= 1");
  check(num_clients <= task.num_classes * task.samples_per_class,
        "num_clients exceeds the number of training samples");
  return issues;
}

ConfigError::ConfigError(std::vector<std::string> issues)
    : std::runtime_error([&issues] {
        std::string msg = "invalid experiment config:";
        for (const auto& i : issues) msg += "\n  - " + i;
        return msg;
      }()),
      issues_(std::move(issues)) {}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out, std::vector<std::string>& issues,
                const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    issues.push_back(prefix + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known,
                    std::vector<std::string>& issues, const std::string& prefix) {
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) issues.push_back("unknown field " + prefix + key);
  }
}

std::string mask_name(MaskPolicy m) {
  return m == MaskPolicy::topk_union ? "topk_union" : "all_experts";
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  std::vector<std::string> issues;
  if (!j.is_object()) throw ConfigError({"config root must be a JSON object"});
  reject_unknown(j,
                 {"method", "seed", "num_clients", "rounds", "local_epochs", "batch_size", "lr",
                  "dirichlet_alpha", "lambda", "eta", "beta", "prox_mu", "mask", "threads",
                  "model", "task", "ablations"},
                 issues, "");
  if (j.contains("method")) {
    try {
      c.method = parse_method(j.at("method").get<std::string>());
    } catch (const std::exception& e) {
      issues.push_back(std::string("method: ") + e.what());
    }
  }
  read_field(j, "seed", c.seed, issues, "");
  read_field(j, "num_clients", c.num_clients, issues, "");
  read_field(j, "rounds", c.rounds, issues, "");
  read_field(j, "local_epochs", c.local_epochs, issues, "");
  read_field(j, "batch_size", c.batch_size, issues, "");
  read_field(j, "lr", c.lr, issues, "");
  read_field(j, "dirichlet_alpha", c.dirichlet_alpha, issues, "");
  read_field(j, "lambda", c.lambda, issues, "");
  read_field(j, "eta", c.eta, issues, "");
  read_field(j, "beta", c.beta, issues, "");
  read_field(j, "prox_mu", c.prox_mu, issues, "");
  read_field(j, "threads", c.threads, issues, "");
  if (j.contains("mask")) {
    const auto m = j.at("mask").is_string() ? j.at("mask").get<std::string>() : std::string();
    if (m == "topk_union") {
      c.mask = MaskPolicy::topk_union;
    } else if (m == "all_experts") {
      c.mask = MaskPolicy::all_experts;
    } else {
      issues.push_back("mask: expected \"topk_union\" or \"all_experts\"");
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, {"input_dim", "hidden_dim", "num_experts", "top_k", "num_classes",
                       "expert_hidden"},
                   issues, "model.");
    read_field(m, "input_dim", c.model.input_dim, issues, "model.");
    read_field(m, "hidden_dim", c.model.hidden_dim, issues, "model.");
    read_field(m, "num_experts", c.model.num_experts, issues, "model.");
    read_field(m, "top_k", c.model.top_k, issues, "model.");
    read_field(m, "num_classes", c.model.num_classes, issues, "model.");
    read_field(m, "expert_hidden", c.model.expert_hidden, issues, "model.");
  }
  // The task shares the model's class count and width unless set explicitly.
  c.task.num_classes = c.model.num_classes;
  c.task.input_dim = c.model.input_dim;
  if (j.contains("task")) {
    const auto& t = j.at("task");
    reject_unknown(t, {"num_classes", "input_dim", "separation", "noise_std", "samples_per_class",
                       "test_samples_per_class"},
                   issues, "task.");
    read_field(t, "num_classes", c.task.num_classes, issues, "task.");
    read_field(t, "input_dim", c.task.input_dim, issues, "task.");
    read_field(t, "separation", c.task.separation, issues, "task.");
    read_field(t, "noise_std", c.task.noise_std, issues, "task.");
    read_field(t, "samples_per_class", c.task.samples_per_class, issues, "task.");
    read_field(t, "test_samples_per_class", c.task.test_samples_per_class, issues, "task.");
  }
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    if (!a.is_array()) {
      issues.push_back("ablations: expected an array of flag names");
    } else {
      for (const auto& flag : a) {
        try {
          c.ablations.apply(flag.get<std::string>());
        } catch (const std::exception& e) {
          issues.push_back(std::string("ablations: ") + e.what());
        }
      }
    }
  }
  if (!issues.empty()) throw ConfigError(std::move(issues));
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  j["num_clients"] = c.num_clients;
  j["rounds"] = c.rounds;
  j["local_epochs"] = c.local_epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["dirichlet_alpha"] = c.dirichlet_alpha;
  j["lambda"] = c.lambda;
  j["eta"] = c.eta;
  j["beta"] = c.beta;
  j["prox_mu"] = c.prox_mu;
  j["mask"] = mask_name(c.mask);
  j["threads"] = c.threads;
  j["model"] = {{"input_dim", c.model.input_dim},     {"hidden_dim", c.model.hidden_dim},
                {"num_experts", c.model.num_experts}, {"top_k", c.model.top_k},
                {"num_classes", c.model.num_classes}, {"expert_hidden", c.model.expert_hidden}};
  j["task"] = {{"num_classes", c.task.num_classes},
               {"input_dim", c.task.input_dim},
               {"separation", c.task.separation},
               {"noise_std", c.task.noise_std},
               {"samples_per_class", c.task.samples_per_class},
               {"test_samples_per_class", c.task.test_samples_per_class}};
  j["ablations"] = c.ablations.names();
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({"config " + path.string() + " is not valid JSON: " + e.what()});
  }
  return config_from_json(j);
}

json to_json(const RoundRecord& r) {
  return {{"round", r.round},
          {"global_test_accuracy", r.global_test_accuracy},
          {"local_accuracy_mean", r.local_accuracy_mean},
          {"local_accuracy_std", r.local_accuracy_std},
          {"mean_local_loss", r.mean_local_loss},
          {"mean_reg_loss", r.mean_reg_loss},
          {"routing_disagreement", r.routing_disagreement},
          {"routing_disagreement_pre", r.routing_disagreement_pre},
          {"semantic_divergence", r.semantic_divergence},
          {"experts_updated", r.experts_updated}};
}

ExperimentData build_data(const ExperimentConfig& config) {
  const auto& t = config.task;
  const auto task = make_task(t.num_classes, t.input_dim, t.separation, t.noise_std,
                              t.samples_per_class, derive_seed(config.seed, "task"));
  ExperimentData data;
  data.train_pool = generate(task, derive_seed(config.seed, "data.train"));
  auto test_task = task;
  test_task.samples_per_class = t.test_samples_per_class;
  data.test_set = generate(test_task, derive_seed(config.seed, "data.test"));
  data.clients = dirichlet_partition(data.train_pool, config.num_clients, config.dirichlet_alpha,
                                     derive_seed(config.seed, "partition"));
  return data;
}

double evaluate(const ModelParams& params, const Batch& test_set) {
  if (test_set.size() == 0) return 0.0;
  const auto trace = forward(params, test_set);
  std::size_t correct = 0;
  for (const auto& s : trace.samples) correct += predict(s) == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

double weighted_accuracy(const ModelParams& params, const Batch& test_set,
                         std::span<const std::size_t> class_counts) {
  const auto trace = forward(params, test_set);
  std::vector<std::size_t> correct(class_counts.size(), 0);
  std::vector<std::size_t> seen(class_counts.size(), 0);
  for (const auto& s : trace.samples) {
    if (s.label >= class_counts.size()) continue;
    ++seen[s.label];
    correct[s.label] += predict(s) == s.label ? 1 : 0;
  }
  double acc = 0.0;
  double mass = 0.0;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    if (seen[c] == 0 || class_counts[c] == 0) continue;
    const double w = static_cast<double>(class_counts[c]);
    acc += w * static_cast<double>(correct[c]) / static_cast<double>(seen[c]);
    mass += w;
  }
  return mass > 0.0 ? acc / mass : 0.0;
}

namespace {

template <typename Fn>
void for_each_client(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double routing_tv(const ModelParams& params, const ClientDataset& shard, const Vector& reference) {
  const auto stats = compute_routing_stats(params, shard, reference);
  return total_variation(stats.p_bar, reference);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  if (auto issues = config.validate(); !issues.empty()) throw ConfigError(std::move(issues));
  const auto data = build_data(config);
  const auto& cfg = config.model;
  const std::size_t n = config.num_clients;
  const std::size_t s = cfg.num_experts;
  const auto& ab = config.ablations;
  const bool aligned = config.method == Method::fedalign;

  auto init_rng = make_stream(config.seed, "model.init");
  ModelParams global = ModelParams::initialize(cfg, init_rng);

  Vector p_global(s, 1.0 / static_cast<double>(s));
  Vector consensus = p_global;
  std::vector<Matrix> client_gates(n, global.gate);

  AggregationOptions agg;
  agg.beta = config.beta;
  agg.consistency_weighting = !ab.no_consistency_weighting;
  agg.direction_consensus = !ab.no_direction_consensus;
  agg.fixed_threshold = ab.fixed_threshold;
  agg.gamma_mode = ab.uniform_gamma ? GammaMode::size_proportional : GammaMode::semantic;
  const AggregationOptions diagnostics_only{};

  ExperimentResult result;
  if (options.keep_trajectory) result.trajectory.push_back(global);

  std::vector<std::size_t> sizes(n);
  for (std::size_t i = 0; i < n; ++i) sizes[i] = data.clients[i].size();

  for (std::size_t round = 0; round < config.rounds; ++round) {
    LocalTrainingOptions opts;
    opts.epochs = config.local_epochs;
    opts.batch_size = config.batch_size;
    opts.lr = config.lr;
    opts.lambda = aligned ? config.lambda : 0.0;
    opts.eta = config.eta;
    opts.adaptive_alpha = !ab.no_adaptive_alpha;
    opts.mask = config.mask;
    opts.prox_mu = config.method == Method::fedprox ? config.prox_mu : 0.0;
    const ServerBroadcast broadcast{p_global, consensus};

    std::vector<LocalRoundResult> local(n);
    for_each_client(n, config.threads, [&](std::size_t i) {
      ModelParams start = global;
      if (aligned && ab.no_gating_broadcast) start.gate = client_gates[i];
      auto o = opts;
      o.shuffle_seed = derive_seed(config.seed, "client.shuffle", {round, i});
      local[i] = local_round(start, data.clients[i], broadcast, o);
    });

    std::vector<ClientUpload> uploads;
    uploads.reserve(n);
    for (auto& l : local) uploads.push_back(l.upload);

    ModelParams next;
    AggregationReport report;
    if (aligned) {
      auto srv = aggregate_round(global, uploads, agg, round);
      next = std::move(srv.global);
      report = std::move(srv.report);
      p_global = report.p_global;
    } else {
      std::vector<ModelParams> locals;
      for (const auto& u : uploads) locals.push_back(u.params);
      next = fedavg_aggregate(global, locals, sizes);
      report = aggregate_round(global, uploads, diagnostics_only, round).report;
      p_global = report.p_global;
    }
    consensus = report.consensus;

    // Models each client holds going into the next round.
    std::vector<ModelParams> held(n, next);
    if (aligned && ab.no_gating_broadcast) {
      for (std::size_t i = 0; i < n; ++i) {
        client_gates[i] = uploads[i].params.gate;
        held[i].gate = client_gates[i];
      }
    }

    RoundRecord rec;
    rec.round = round + 1;
    rec.global_test_accuracy = evaluate(next, data.test_set);
    std::vector<double> local_acc(n);
    std::vector<double> tv_post(n);
    std::vector<double> tv_pre(n);
    for_each_client(n, config.threads, [&](std::size_t i) {
      local_acc[i] = weighted_accuracy(held[i], data.test_set,
                                       data.clients[i].label_counts(cfg.num_classes));
      tv_post[i] = routing_tv(held[i], data.clients[i], p_global);
      tv_pre[i] = total_variation(uploads[i].stats.p_bar, p_global);
    });
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      rec.local_accuracy_mean += local_acc[i] * inv_n;
      rec.routing_disagreement += tv_post[i] * inv_n;
      rec.routing_disagreement_pre += tv_pre[i] * inv_n;
      rec.mean_local_loss += local[i].mean_task_loss * inv_n;
      rec.mean_reg_loss += local[i].mean_reg_loss * inv_n;
    }
    double var = 0.0;
    for (double a : local_acc) var += (a - rec.local_accuracy_mean) * (a - rec.local_accuracy_mean);
    rec.local_accuracy_std = std::sqrt(var * inv_n);
    for (double m : report.mean_similarity) {
      rec.semantic_divergence += (1.0 - m) / static_cast<double>(s);
    }
    rec.experts_updated = static_cast<std::size_t>(
        std::count(report.expert_updated.begin(), report.expert_updated.end(), true));

    result.records.push_back(rec);
    result.reports.push_back(std::move(report));
    global = std::move(next);
    if (options.keep_trajectory) result.trajectory.push_back(global);
  }
  result.final_model = global;
  return result;
}

namespace {

constexpr const char* kMetricsSchema = "fedalign.round_record";
constexpr int kMetricsVersion = 1;

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  return out;
}

}  // namespace

void emit_metrics(const std::vector<RoundRecord>& records, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
  {
    const auto path = dir / "metrics.jsonl";
    auto out = open_for_write(path);
    out << json{{"schema", kMetricsSchema}, {"version", kMetricsVersion}}.dump() << '\n';
    for (const auto& r : records) out << to_json(r).dump() << '\n';
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }
  {
    const auto path = dir / "summary.csv";
    auto out = open_for_write(path);
    out << "# schema=" << kMetricsSchema << " version=" << kMetricsVersion << '\n';
    out << "round,global_test_accuracy,local_accuracy_mean,local_accuracy_std,mean_local_loss,"
           "mean_reg_loss,routing_disagreement,routing_disagreement_pre,semantic_divergence,"
           "experts_updated\n";
    for (const auto& r : records) {
      // json number formatting gives shortest round-trip output
      out << r.round << ',' << json(r.global_test_accuracy).dump() << ','
          << json(r.local_accuracy_mean).dump() << ',' << json(r.local_accuracy_std).dump() << ','
          << json(r.mean_local_loss).dump() << ',' << json(r.mean_reg_loss).dump() << ','
          << json(r.routing_disagreement).dump() << ',' << json(r.routing_disagreement_pre).dump()
          << ',' << json(r.semantic_divergence).dump() << ',' << r.experts_updated << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path.string());
  }
}

json report_to_json(const AggregationReport& report) {
  const std::size_t s = report.tau.size();
  json omega = json::array();
  json gamma_rows = json::array();
  for (std::size_t e = 0; e < s; ++e) {
    json col = json::array();
    for (std::size_t i = 0; i < report.omega.rows(); ++i) col.push_back(report.omega(i, e));
    omega.push_back(std::move(col));
    json rows = json::array();
    for (std::size_t i = 0; i < report.gamma[e].rows(); ++i) {
      double sum = 0.0;
      for (double v : report.gamma[e].row(i)) sum += v;
      rows.push_back(sum);
    }
    gamma_rows.push_back(std::move(rows));
  }
  return {{"round", report.round},
          {"client_ids", report.client_ids},
          {"omega", omega},
          {"omega_fallback", report.omega_fallback},
          {"tau", report.tau},
          {"M", report.mean_similarity},
          {"Sigma", report.dispersion},
          {"gamma_row_sums", gamma_rows},
          {"expert_updated", report.expert_updated},
          {"p_global", report.p_global}};
}

void emit_reports(const std::vector<AggregationReport>& reports, const std::filesystem::path& path) {
  auto out = open_for_write(path);
  for (const auto& r : reports) out << report_to_json(r).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace fedalign
