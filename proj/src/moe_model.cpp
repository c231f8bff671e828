#include "fedalign/moe_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"
#include "fedalign/routing_regularizer.hpp"

namespace fedalign {

void MoEConfig::validate() const {
  if (input_dim == 0 || hidden_dim == 0 || num_experts == 0 || num_classes == 0 ||
      expert_hidden == 0) {
    throw std::invalid_argument("MoEConfig: all dimensions must be >= 1");
  }
  if (top_k < 1 || top_k > num_experts) {
    throw std::invalid_argument("MoEConfig: top_k must satisfy 1 <= k <= num_experts");
  }
}

Vector ExpertParams::flatten() const {
  Vector out;
  out.reserve(flat_size());
  out.insert(out.end(), w1.values().begin(), w1.values().end());
  out.insert(out.end(), b1.begin(), b1.end());
  out.insert(out.end(), w2.values().begin(), w2.values().end());
  out.insert(out.end(), b2.begin(), b2.end());
  return out;
}

void ExpertParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != flat_size()) throw std::invalid_argument("expert flat size mismatch");
  auto it = flat.begin();
  auto take = [&it](std::span<double> dst) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(dst.size()), dst.begin());
    it += static_cast<std::ptrdiff_t>(dst.size());
  };
  take(w1.values());
  take(b1);
  take(w2.values());
  take(b2);
}

ModelParams ModelParams::zeros(const MoEConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  p.embed = Matrix(config.input_dim, config.hidden_dim);
  p.gate = Matrix(config.hidden_dim, config.num_experts);
  p.experts.resize(config.num_experts);
  for (auto& e : p.experts) {
    e.w1 = Matrix(config.hidden_dim, config.expert_hidden);
    e.b1 = Vector(config.expert_hidden, 0.0);
    e.w2 = Matrix(config.expert_hidden, config.hidden_dim);
    e.b2 = Vector(config.hidden_dim, 0.0);
  }
  p.head = Matrix(config.hidden_dim, config.num_classes);
  return p;
}

ModelParams ModelParams::initialize(const MoEConfig& config, Rng& rng) {
  ModelParams p = zeros(config);
  auto fill = [&rng](Matrix& m) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(m.rows())));
    for (auto& v : m.values()) v = dist(rng);
  };
  fill(p.embed);
  fill(p.gate);
  for (auto& e : p.experts) {
    fill(e.w1);
    fill(e.w2);
  }
  fill(p.head);
  return p;
}

std::vector<std::span<double>> ModelParams::blocks() {
  std::vector<std::span<double>> out{embed.values(), gate.values()};
  for (auto& e : experts) {
    out.push_back(e.w1.values());
    out.push_back(e.b1);
    out.push_back(e.w2.values());
    out.push_back(e.b2);
  }
  out.push_back(head.values());
  return out;
}

std::vector<std::span<const double>> ModelParams::blocks() const {
  std::vector<std::span<const double>> out{embed.values(), gate.values()};
  for (const auto& e : experts) {
    out.push_back(e.w1.values());
    out.push_back(e.b1);
    out.push_back(e.w2.values());
    out.push_back(e.b2);
  }
  out.push_back(head.values());
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto b : blocks()) n += b.size();
  return n;
}

Vector ModelParams::flatten() const {
  Vector out;
  out.reserve(parameter_count());
  for (auto b : blocks()) out.insert(out.end(), b.begin(), b.end());
  return out;
}

void ModelParams::assign_flat(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("model flat size mismatch");
  std::size_t offset = 0;
  for (auto b : blocks()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), b.size(), b.begin());
    offset += b.size();
  }
}

bool ModelParams::same_shape(const ModelParams& other) const {
  if (!(config == other.config)) return false;
  const auto a = blocks();
  const auto b = other.blocks();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
  }
  return true;
}

Vector SampleTrace::sparse_probs(std::size_t num_experts) const {
  Vector out(num_experts, 0.0);
  for (std::size_t j = 0; j < topk_set.size(); ++j) out[topk_set[j]] = topk_probs[j];
  return out;
}

std::vector<std::size_t> top_k_select(std::span<const double> scores, std::size_t k) {
  if (k == 0 || k > scores.size()) {
    throw std::invalid_argument("top_k_select: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

double cross_entropy(const Vector& class_probs, std::size_t label) {
  return -std::log(std::max(class_probs[label], 1e-300));
}

}  // namespace

ForwardTrace forward(const ModelParams& params, const Batch& batch) {
  const auto& cfg = params.config;
  if (batch.features.cols() != cfg.input_dim) {
    throw std::invalid_argument("forward: batch width " + std::to_string(batch.features.cols()) +
                                " != input_dim " + std::to_string(cfg.input_dim));
  }
  if (batch.features.rows() != batch.labels.size()) {
    throw std::invalid_argument("forward: features/labels row count mismatch");
  }
  ForwardTrace trace;
  trace.samples.resize(batch.size());
  double total = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    auto& s = trace.samples[n];
    s.label = batch.labels[n];
    if (s.label >= cfg.num_classes) {
      throw std::invalid_argument("forward: label " + std::to_string(s.label) + " out of range");
    }
    const auto x = batch.features.row(n);
    s.input.assign(x.begin(), x.end());
    s.hidden = vec_mat(x, params.embed);
    require_finite(s.hidden, "hidden state");
    s.scores = vec_mat(s.hidden, params.gate);
    require_finite(s.scores, "gate scores");
    s.full_probs = softmax(s.scores);
    s.topk_set = top_k_select(s.scores, cfg.top_k);
    Vector active_scores;
    for (auto e : s.topk_set) active_scores.push_back(s.scores[e]);
    s.topk_probs = softmax(active_scores);

    s.moe_out.assign(cfg.hidden_dim, 0.0);
    for (std::size_t j = 0; j < s.topk_set.size(); ++j) {
      const auto& ex = params.experts[s.topk_set[j]];
      Vector act = vec_mat(s.hidden, ex.w1);
      for (std::size_t u = 0; u < act.size(); ++u) act[u] = std::tanh(act[u] + ex.b1[u]);
      Vector out = vec_mat(act, ex.w2);
      for (std::size_t u = 0; u < out.size(); ++u) out[u] += ex.b2[u];
      require_finite(out, "expert " + std::to_string(s.topk_set[j]) + " output");
      axpy(s.topk_probs[j], out, s.moe_out);
      s.expert_act.push_back(std::move(act));
      s.expert_out.push_back(std::move(out));
    }
    Vector z = s.moe_out;
    axpy(1.0, s.hidden, z);
    s.logits = vec_mat(z, params.head);
    require_finite(s.logits, "logits");
    s.class_probs = softmax(s.logits);
    total += cross_entropy(s.class_probs, s.label);
  }
  trace.loss = batch.size() > 0 ? total / static_cast<double>(batch.size()) : 0.0;
  return trace;
}

ModelParams backward(const ForwardTrace& trace, const ModelParams& params,
                     const RegContext* reg) {
  const auto& cfg = params.config;
  ModelParams grad = ModelParams::zeros(cfg);
  const std::size_t batch = trace.samples.size();
  if (batch == 0) return grad;
  const bool use_reg = reg != nullptr && reg->lambda != 0.0;
  if (use_reg) reg->validate(cfg.num_experts);
  const double inv_b = 1.0 / static_cast<double>(batch);

  for (const auto& s : trace.samples) {
    if (s.input.size() != cfg.input_dim || s.hidden.size() != cfg.hidden_dim ||
        s.scores.size() != cfg.num_experts) {
      throw std::invalid_argument("backward: trace does not match parameter shapes");
    }
    Vector z = s.moe_out;
    axpy(1.0, s.hidden, z);

    Vector dlogits = s.class_probs;
    dlogits[s.label] -= 1.0;
    for (auto& v : dlogits) v *= inv_b;
    add_outer(grad.head, z, dlogits);
    const Vector dz = mat_vec(params.head, dlogits);

    Vector dh = dz;  // residual path
    Vector dscores(cfg.num_experts, 0.0);

    const std::size_t k = s.topk_set.size();
    Vector dprob(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = s.topk_set[j];
      const auto& ex = params.experts[e];
      auto& gx = grad.experts[e];
      dprob[j] = dot(dz, s.expert_out[j]);
      const double p = s.topk_probs[j];
      // out = act W2 + b2, scaled by p in the mixture
      add_outer(gx.w2, s.expert_act[j], dz, p);
      axpy(p, dz, gx.b2);
      Vector dpre = mat_vec(ex.w2, dz);
      for (std::size_t u = 0; u < dpre.size(); ++u) {
        const double a = s.expert_act[j][u];
        dpre[u] *= p * (1.0 - a * a);
      }
      add_outer(gx.w1, s.hidden, dpre);
      axpy(1.0, dpre, gx.b1);
      axpy(1.0, mat_vec(ex.w1, dpre), dh);
    }
    double mean_dprob = 0.0;
    for (std::size_t j = 0; j < k; ++j) mean_dprob += s.topk_probs[j] * dprob[j];
    for (std::size_t j = 0; j < k; ++j) {
      dscores[s.topk_set[j]] += s.topk_probs[j] * (dprob[j] - mean_dprob);
    }

    if (use_reg) axpy(reg->lambda * inv_b, reg_loss_score_grad(s, *reg), dscores);

    add_outer(grad.gate, s.hidden, dscores);
    axpy(1.0, mat_vec(params.gate, dscores), dh);
    add_outer(grad.embed, s.input, dh);
  }
  return grad;
}

double total_loss(const ModelParams& params, const Batch& batch, const RegContext* reg) {
  const auto trace = forward(params, batch);
  double loss = trace.loss;
  if (reg != nullptr && reg->lambda != 0.0 && !trace.samples.empty()) {
    double r = 0.0;
    for (const auto& s : trace.samples) r += reg_loss(s, *reg);
    loss += reg->lambda * r / static_cast<double>(trace.samples.size());
  }
  return loss;
}

std::size_t predict(const SampleTrace& sample) {
  return static_cast<std::size_t>(
      std::distance(sample.logits.begin(), std::max_element(sample.logits.begin(), sample.logits.end())));
}

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'A', 'M', 'O', 'E', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const auto& c = params.config;
  detail::put_u32(out, kCheckpointVersion);
  for (auto v : {c.input_dim, c.hidden_dim, c.num_experts, c.top_k, c.num_classes,
                 c.expert_hidden}) {
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  }
  for (auto b : params.blocks()) {
    for (double v : b) detail::put_f64(out, v);
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kCheckpointMagic))) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  if (const auto version = detail::get_u32(in, "checkpoint"); version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  MoEConfig c;
  c.input_dim = detail::get_u32(in, "checkpoint");
  c.hidden_dim = detail::get_u32(in, "checkpoint");
  c.num_experts = detail::get_u32(in, "checkpoint");
  c.top_k = detail::get_u32(in, "checkpoint");
  c.num_classes = detail::get_u32(in, "checkpoint");
  c.expert_hidden = detail::get_u32(in, "checkpoint");
  ModelParams p = ModelParams::zeros(c);
  for (auto b : p.blocks()) {
    for (auto& v : b) v = detail::get_f64(in, "checkpoint");
  }
  if (in.peek() != EOF) throw std::runtime_error("checkpoint has trailing bytes: " + path.string());
  return p;
}

}  // namespace fedalign
