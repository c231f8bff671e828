#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedalign {

/// Floor applied to every log/division denominator in the library.
inline constexpr double kEpsilon = 1e-8;

/// Norms below this are treated as zero vectors by cosine_sim.
inline constexpr double kNormFloor = 1e-12;

using Vector = std::vector<double>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// out = x^T W, where x has W.rows() entries. Result has W.cols() entries.
Vector vec_mat(std::span<const double> x, const Matrix& w);

/// out = W y, where y has W.cols() entries. Result has W.rows() entries.
Vector mat_vec(const Matrix& w, std::span<const double> y);

/// W += scale * outer(a, b).
void add_outer(Matrix& w, std::span<const double> a, std::span<const double> b,
               double scale = 1.0);

/// y += scale * x
void axpy(double scale, std::span<const double> x, std::span<double> y);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

/// Throws NumericError naming `what` if any entry is NaN or infinite.
void require_finite(std::span<const double> values, const std::string& what);

/// Numerically stable softmax (max-subtracted).
Vector softmax(std::span<const double> scores);

/// p * log(p / max(q, kEpsilon)), with 0 * log(0 / q) = 0.
double kl_term(double p, double q);

/// a.b / (|a||b|); 0 when either norm is below kNormFloor.
double cosine_sim(std::span<const double> a, std::span<const double> b);

double sigmoid(double x);

/// Total variation distance 0.5 * sum |p - q|.
double total_variation(std::span<const double> p, std::span<const double> q);

struct GradCheckResult {
  double max_abs = 0.0;
  /// |analytic - numeric| / max(|analytic|, |numeric|, floor), maximised.
  double max_rel = 0.0;
  std::size_t worst_index = 0;
};

/// Compares `analytic` against central differences of `f` around `params`.
GradCheckResult grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> params, std::span<const double> analytic,
                           double eps, double rel_floor = 1e-4);

}  // namespace fedalign
