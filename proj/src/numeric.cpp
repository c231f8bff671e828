#include "fedalign/numeric.hpp"

#include <algorithm>
#include <cmath>

namespace fedalign {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw NumericError("matrix data length " + std::to_string(data_.size()) +
                       " does not match shape " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
  }
}

Vector vec_mat(std::span<const double> x, const Matrix& w) {
  if (x.size() != w.rows()) {
    throw NumericError("vec_mat: vector length " + std::to_string(x.size()) +
                       " != matrix rows " + std::to_string(w.rows()));
  }
  Vector out(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) out[c] += xr * row[c];
  }
  return out;
}

Vector mat_vec(const Matrix& w, std::span<const double> y) {
  if (y.size() != w.cols()) {
    throw NumericError("mat_vec: vector length " + std::to_string(y.size()) +
                       " != matrix cols " + std::to_string(w.cols()));
  }
  Vector out(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = dot(w.row(r), y);
  return out;
}

void add_outer(Matrix& w, std::span<const double> a, std::span<const double> b, double scale) {
  if (a.size() != w.rows() || b.size() != w.cols()) {
    throw NumericError("add_outer: shape mismatch");
  }
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const double ar = scale * a[r];
    if (ar == 0.0) continue;
    auto row = w.row(r);
    for (std::size_t c = 0; c < w.cols(); ++c) row[c] += ar * b[c];
  }
}

void axpy(double scale, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw NumericError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += scale * x[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw NumericError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void require_finite(std::span<const double> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError("non-finite value in " + what + " at index " + std::to_string(i));
    }
  }
}

Vector softmax(std::span<const double> scores) {
  if (scores.empty()) throw NumericError("softmax of empty vector");
  require_finite(scores, "softmax input");
  const double mx = *std::max_element(scores.begin(), scores.end());
  Vector out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

double kl_term(double p, double q) {
  if (std::isnan(p) || std::isnan(q)) throw NumericError("kl_term: NaN argument");
  if (p <= 0.0) return 0.0;
  return p * std::log(p / std::max(q, kEpsilon));
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw NumericError("cosine_sim: length mismatch (" + std::to_string(a.size()) + " vs " +
                       std::to_string(b.size()) + ")");
  }
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na < kNormFloor || nb < kNormFloor) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double z = std::exp(x);
  return z / (1.0 + z);
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw NumericError("total_variation: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> params, std::span<const double> analytic,
                           double eps, double rel_floor) {
  if (!(eps > 0.0)) throw NumericError("grad_check: eps must be positive");
  if (params.size() != analytic.size()) throw NumericError("grad_check: length mismatch");
  std::vector<double> theta(params.begin(), params.end());
  GradCheckResult result;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + eps;
    const double up = f(theta);
    theta[i] = saved - eps;
    const double down = f(theta);
    theta[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double diff = std::abs(analytic[i] - numeric);
    const double rel =
        diff / std::max({std::abs(analytic[i]), std::abs(numeric), rel_floor});
    if (diff > result.max_abs) result.max_abs = diff;
    if (rel > result.max_rel) {
      result.max_rel = rel;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace fedalign
