#include "fedalign/client_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include <json.hpp>

#include "binary_io.hpp"
#include "fedalign/baselines.hpp"

namespace fedalign {

namespace {

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

constexpr std::size_t kEvalChunk = 256;

Batch slice(const Batch& data, std::span<const std::size_t> rows) {
  Batch b;
  b.features = Matrix(rows.size(), data.features.cols());
  b.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = data.features.row(rows[r]);
    std::copy(src.begin(), src.end(), b.features.row(r).begin());
    b.labels[r] = data.labels[rows[r]];
  }
  return b;
}

std::vector<SampleTrace> evaluate_traces(const ModelParams& params, const Batch& data) {
  std::vector<SampleTrace> traces;
  traces.reserve(data.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    auto t = forward(params, slice(data, rows));
    for (auto& s : t.samples) traces.push_back(std::move(s));
  }
  return traces;
}

}  // namespace

Vector compute_p_bar(const std::vector<SampleTrace>& traces, std::size_t num_experts) {
  Vector p(num_experts, 0.0);
  if (traces.empty()) return p;
  for (const auto& s : traces) {
    for (std::size_t j = 0; j < s.topk_set.size(); ++j) p[s.topk_set[j]] += s.topk_probs[j];
  }
  for (auto& v : p) v /= static_cast<double>(traces.size());
  return p;
}

Vector compute_margin(const std::vector<SampleTrace>& traces, std::size_t num_experts) {
  Vector m(num_experts, 0.0);
  if (traces.empty()) return m;
  for (const auto& s : traces) {
    const auto& fp = s.full_probs;
    // Only the strict maximum can have a positive margin.
    const std::size_t top = argmax_lowest(fp);
    double runner_up = -1.0;
    for (std::size_t e = 0; e < fp.size(); ++e) {
      if (e != top) runner_up = std::max(runner_up, fp[e]);
    }
    if (fp.size() == 1) runner_up = 0.0;
    m[top] += std::max(0.0, fp[top] - runner_up);
  }
  for (auto& v : m) v /= static_cast<double>(traces.size());
  return m;
}

InputAssignment compute_mu(const std::vector<SampleTrace>& traces, std::size_t num_experts,
                           std::size_t hidden_dim) {
  InputAssignment out{Matrix(num_experts, hidden_dim), std::vector<bool>(num_experts, true)};
  std::vector<std::size_t> counts(num_experts, 0);
  for (const auto& s : traces) {
    const std::size_t e = argmax_lowest(s.scores);
    axpy(1.0, s.hidden, out.mu.row(e));
    ++counts[e];
  }
  for (std::size_t e = 0; e < num_experts; ++e) {
    if (counts[e] == 0) continue;
    out.empty[e] = false;
    for (auto& v : out.mu.row(e)) v /= static_cast<double>(counts[e]);
  }
  return out;
}

Vector compute_alpha(const Vector& overlap, double eta) {
  Vector a(overlap.size());
  for (std::size_t e = 0; e < overlap.size(); ++e) a[e] = sigmoid(overlap[e] - eta);
  return a;
}

Vector compute_overlap(const Vector& p_bar, const Vector& consensus) {
  if (p_bar.size() != consensus.size()) throw std::invalid_argument("compute_overlap: length");
  Vector o(p_bar.size());
  for (std::size_t e = 0; e < o.size(); ++e) o[e] = p_bar[e] * consensus[e];
  return o;
}

RoutingStats compute_routing_stats(const ModelParams& params, const ClientDataset& shard,
                                   const Vector& consensus) {
  const auto& cfg = params.config;
  const auto traces = evaluate_traces(params, shard.data);
  RoutingStats st;
  st.client_id = shard.client_id;
  st.dataset_size = shard.size();
  st.p_bar = compute_p_bar(traces, cfg.num_experts);
  st.overlap = compute_overlap(st.p_bar, consensus);
  st.margin = compute_margin(traces, cfg.num_experts);
  auto assignment = compute_mu(traces, cfg.num_experts, cfg.hidden_dim);
  st.mu = std::move(assignment.mu);
  st.mu_empty = std::move(assignment.empty);
  return st;
}

RegContext make_reg_context(const ModelParams& params, const ClientDataset& shard,
                            const ServerBroadcast& broadcast, const LocalTrainingOptions& opts) {
  const std::size_t s = params.config.num_experts;
  RegContext ctx;
  ctx.p_global = broadcast.p_global;
  ctx.eta = opts.eta;
  ctx.lambda = opts.lambda;
  ctx.mask = opts.mask;
  ctx.top_k = params.config.top_k;
  if (opts.adaptive_alpha && opts.lambda > 0.0) {
    // Overlap of the received model's routing on this shard with last round's consensus.
    const auto traces = evaluate_traces(params, shard.data);
    ctx.alpha = compute_alpha(compute_overlap(compute_p_bar(traces, s), broadcast.prior_consensus),
                              opts.eta);
  } else {
    ctx.alpha.assign(s, 1.0);
  }
  ctx.validate(s);
  return ctx;
}

LocalRoundResult local_round(const ModelParams& params_in, const ClientDataset& shard,
                             const ServerBroadcast& broadcast, const LocalTrainingOptions& opts) {
  if (!(opts.lr >= 0.0)) throw std::invalid_argument("local_round: lr must be >= 0");
  if (opts.batch_size == 0) throw std::invalid_argument("local_round: batch_size must be >= 1");
  if (shard.size() == 0) throw std::invalid_argument("local_round: empty shard");
  const auto& cfg = params_in.config;

  LocalRoundResult result;
  result.reg = make_reg_context(params_in, shard, broadcast, opts);
  const RegContext* reg = opts.lambda > 0.0 ? &result.reg : nullptr;

  ModelParams params = params_in;
  std::vector<bool> activated(cfg.num_experts, false);
  Rng rng(opts.shuffle_seed);
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  double task_sum = 0.0;
  double reg_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      const Batch batch =
          slice(shard.data, std::span<const std::size_t>(order).subspan(start, end - start));
      const auto trace = forward(params, batch);
      if (!std::isfinite(trace.loss)) {
        throw ClientRoundError("client " + std::to_string(shard.client_id) +
                               ": task loss is not finite at epoch " + std::to_string(epoch));
      }
      task_sum += trace.loss;
      if (reg != nullptr) {
        double r = 0.0;
        for (const auto& s : trace.samples) r += reg_loss(s, *reg);
        reg_sum += r / static_cast<double>(trace.samples.size());
      }
      ++steps;
      for (const auto& s : trace.samples) {
        for (auto e : s.topk_set) activated[e] = true;
      }

      ModelParams grad = backward(trace, params, reg);
      if (opts.prox_mu > 0.0) {
        const auto prox = prox_term(params, params_in, opts.prox_mu);
        auto gb = grad.blocks();
        const auto pb = prox.gradient.blocks();
        for (std::size_t b = 0; b < gb.size(); ++b) axpy(1.0, pb[b], gb[b]);
      }
      auto pblocks = params.blocks();
      const auto gblocks = grad.blocks();
      for (std::size_t b = 0; b < pblocks.size(); ++b) axpy(-opts.lr, gblocks[b], pblocks[b]);
    }
  }
  for (auto b : params.blocks()) {
    require_finite(b, "client " + std::to_string(shard.client_id) + " parameters");
  }

  auto& up = result.upload;
  up.delta.client_id = shard.client_id;
  up.delta.activated = activated;
  up.delta.delta.resize(cfg.num_experts);
  for (std::size_t e = 0; e < cfg.num_experts; ++e) {
    Vector after = params.experts[e].flatten();
    const Vector before = params_in.experts[e].flatten();
    for (std::size_t i = 0; i < after.size(); ++i) after[i] -= before[i];
    up.delta.delta[e] = std::move(after);
  }
  up.stats = compute_routing_stats(params, shard, broadcast.prior_consensus);
  up.params = std::move(params);
  if (steps > 0) {
    result.mean_task_loss = task_sum / static_cast<double>(steps);
    result.mean_reg_loss = reg_sum / static_cast<double>(steps);
  }
  return result;
}

namespace {

constexpr char kUploadMagic[8] = {'F', 'A', 'M', 'O', 'E', 'U', 'P', '1'};
constexpr std::uint32_t kUploadVersion = 1;

}  // namespace

void write_upload(const RoutingStats& stats, const ExpertDelta& delta,
                  const std::filesystem::path& binary_path,
                  const std::filesystem::path& json_path) {
  const std::size_t s = stats.p_bar.size();
  if (delta.delta.size() != s || stats.mu.rows() != s) {
    throw std::invalid_argument("write_upload: expert count mismatch");
  }
  {
    std::ofstream out(binary_path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + binary_path.string());
    out.write(kUploadMagic, sizeof(kUploadMagic));
    detail::put_u32(out, kUploadVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(stats.client_id));
    detail::put_u32(out, static_cast<std::uint32_t>(s));
    detail::put_u32(out, static_cast<std::uint32_t>(stats.mu.cols()));
    for (const auto& d : delta.delta) {
      detail::put_u32(out, static_cast<std::uint32_t>(d.size()));
      for (double v : d) detail::put_f64(out, v);
    }
    for (double v : stats.mu.values()) detail::put_f64(out, v);
    if (!out) throw std::runtime_error("failed writing " + binary_path.string());
  }
  nlohmann::json j;
  j["schema"] = "fedalign.upload";
  j["version"] = kUploadVersion;
  j["client_id"] = stats.client_id;
  j["dataset_size"] = stats.dataset_size;
  j["p_bar"] = stats.p_bar;
  j["overlap"] = stats.overlap;
  j["margin"] = stats.margin;
  j["mu_empty"] = stats.mu_empty;
  j["activated"] = delta.activated;
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + json_path.string());
  out << j.dump() << '\n';
  if (!out) throw std::runtime_error("failed writing " + json_path.string());
}

void read_upload(const std::filesystem::path& binary_path, const std::filesystem::path& json_path,
                 RoutingStats& stats, ExpertDelta& delta) {
  std::ifstream in(binary_path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open upload: " + binary_path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kUploadMagic))) {
    throw std::runtime_error("not an upload file: " + binary_path.string());
  }
  const std::string what = "upload " + binary_path.string();
  if (detail::get_u32(in, what) != kUploadVersion) {
    throw std::runtime_error(what + ": unsupported version");
  }
  const std::size_t client_id = detail::get_u32(in, what);
  const std::size_t s = detail::get_u32(in, what);
  const std::size_t hidden = detail::get_u32(in, what);
  delta = ExpertDelta{};
  delta.client_id = client_id;
  delta.delta.resize(s);
  for (auto& d : delta.delta) {
    d.resize(detail::get_u32(in, what));
    for (auto& v : d) v = detail::get_f64(in, what);
  }
  stats = RoutingStats{};
  stats.client_id = client_id;
  stats.mu = Matrix(s, hidden);
  for (auto& v : stats.mu.values()) v = detail::get_f64(in, what);

  std::ifstream jin(json_path);
  if (!jin) throw std::runtime_error("cannot open upload sidecar: " + json_path.string());
  const auto j = nlohmann::json::parse(jin);
  if (j.at("client_id").get<std::size_t>() != client_id) {
    throw std::runtime_error("upload sidecar client_id does not match " + binary_path.string());
  }
  stats.dataset_size = j.at("dataset_size").get<std::size_t>();
  stats.p_bar = j.at("p_bar").get<Vector>();
  stats.overlap = j.at("overlap").get<Vector>();
  stats.margin = j.at("margin").get<Vector>();
  stats.mu_empty = j.at("mu_empty").get<std::vector<bool>>();
  delta.activated = j.at("activated").get<std::vector<bool>>();
  if (stats.p_bar.size() != s || stats.mu_empty.size() != s || delta.activated.size() != s) {
    throw std::runtime_error("upload sidecar expert count mismatch: " + json_path.string());
  }
}

}  // namespace fedalign
