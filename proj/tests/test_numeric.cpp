#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fedalign/numeric.hpp"
#include "fedalign/rng.hpp"
#include "oracle.hpp"

namespace fedalign {
namespace {

TEST(Softmax, SymmetricInputIsUniform) {
  const auto p = softmax(Vector{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeEqualScoresDoNotOverflow) {
  const auto p = softmax(Vector{1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LogTwoGivesTwoThirds) {
  const auto ref = oracle::softmax({std::log(2.0L), 0.0L});
  ASSERT_NEAR(static_cast<double>(ref[0]), 2.0 / 3.0, 1e-15);
  const auto p = softmax(Vector{std::log(2.0), 0.0});
  EXPECT_NEAR(p[0], static_cast<double>(ref[0]), 1e-9);
  EXPECT_NEAR(p[1], static_cast<double>(ref[1]), 1e-9);
}

TEST(Softmax, RejectsNonFiniteAndEmpty) {
  EXPECT_THROW(softmax(Vector{}), NumericError);
  EXPECT_THROW(softmax(Vector{1.0, std::numeric_limits<double>::quiet_NaN()}), NumericError);
  EXPECT_THROW(softmax(Vector{std::numeric_limits<double>::infinity(), 0.0}), NumericError);
}

TEST(Softmax, PropertySumsToOneAndShiftInvariant) {
  Rng rng(7);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    Vector s(1 + trial % 9);
    for (auto& v : s) v = n(rng);
    const auto p = softmax(s);
    double total = 0.0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    Vector shifted = s;
    for (auto& v : shifted) v += 123.0;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(KlTerm, IdenticalAndZeroMass) {
  EXPECT_DOUBLE_EQ(kl_term(0.5, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(kl_term(0.0, 0.3), 0.0);
}

TEST(KlTerm, HandValue) {
  const long double ref = oracle::kl({0.8L}, {0.2L}, {1.0L});
  ASSERT_NEAR(static_cast<double>(ref), 1.10904, 1e-5);
  EXPECT_NEAR(kl_term(0.8, 0.2), static_cast<double>(ref), 1e-9);
}

TEST(KlTerm, ClampsReferenceAndRejectsNan) {
  EXPECT_TRUE(std::isfinite(kl_term(0.5, 0.0)));
  EXPECT_NEAR(kl_term(0.5, 0.0), 0.5 * std::log(0.5 / kEpsilon), 1e-12);
  EXPECT_THROW(kl_term(std::nan(""), 0.5), NumericError);
}

TEST(Cosine, Cases) {
  EXPECT_NEAR(cosine_sim(Vector{1, 2, 3}, Vector{1, 2, 3}), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_sim(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Vector{1, 0}, Vector{-1, 0}), -1.0);
  EXPECT_DOUBLE_EQ(cosine_sim(Vector{0, 0}, Vector{1, 1}), 0.0);
  EXPECT_THROW(cosine_sim(Vector{1, 0}, Vector{1}), NumericError);
}

TEST(Cosine, PropertyBoundedAndSymmetric) {
  Rng rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    Vector a(5), b(5);
    for (auto& v : a) v = n(rng);
    for (auto& v : b) v = n(rng);
    const double c = cosine_sim(a, b);
    EXPECT_LE(std::abs(c), 1.0);
    EXPECT_DOUBLE_EQ(c, cosine_sim(b, a));
  }
}

TEST(Sigmoid, Cases) {
  EXPECT_DOUBLE_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(50.0), 1.0, 1e-12);
  EXPECT_GT(sigmoid(-800.0), -1e-300);
  const long double ref = oracle::sigmoid(-std::log(3.0L));
  ASSERT_NEAR(static_cast<double>(ref), 0.25, 1e-15);
  EXPECT_NEAR(sigmoid(-std::log(3.0)), static_cast<double>(ref), 1e-9);
}

TEST(TotalVariation, Basic) {
  EXPECT_DOUBLE_EQ(total_variation(Vector{1, 0}, Vector{0, 1}), 1.0);
  EXPECT_DOUBLE_EQ(total_variation(Vector{0.5, 0.5}, Vector{0.5, 0.5}), 0.0);
}

TEST(Matrix, VecMatAndOuter) {
  Matrix w(2, 3, {1, 2, 3, 4, 5, 6});
  const auto y = vec_mat(Vector{1, 1}, w);
  EXPECT_EQ(y, (Vector{5, 7, 9}));
  const auto z = mat_vec(w, Vector{1, 0, 1});
  EXPECT_EQ(z, (Vector{4, 10}));
  add_outer(w, Vector{1, 0}, Vector{1, 1, 1}, 2.0);
  EXPECT_EQ(w(0, 0), 3.0);
  EXPECT_EQ(w(1, 0), 4.0);
  EXPECT_THROW(Matrix(2, 2, Vector{1, 2, 3}), NumericError);
}

TEST(RequireFinite, NamesTheOffender) {
  try {
    require_finite(Vector{1.0, std::numeric_limits<double>::infinity()}, "gate scores");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("gate scores"), std::string::npos);
  }
}

TEST(GradCheck, QuadraticIsExact) {
  const Vector theta{3.0};
  const Vector analytic{6.0};
  const auto r = grad_check([](std::span<const double> t) { return t[0] * t[0]; }, theta,
                            analytic, 1e-4);
  EXPECT_LT(r.max_abs, 1e-8);
}

TEST(GradCheck, CrossEntropyOfSoftmax) {
  // CE(softmax(z), y) has gradient softmax(z) - onehot(y).
  const Vector z{0.3, -1.2, 2.0, 0.1};
  const std::size_t label = 1;
  auto ce = [label](std::span<const double> s) { return -std::log(softmax(s)[label]); };
  Vector analytic = softmax(z);
  analytic[label] -= 1.0;
  const auto r = grad_check(ce, z, analytic, 1e-5);
  EXPECT_LT(r.max_rel, 1e-6);
}

TEST(GradCheck, DetectsWrongGradient) {
  const Vector theta{1.0, 2.0};
  const Vector wrong{2.0, 5.0};
  const auto r = grad_check(
      [](std::span<const double> t) { return t[0] * t[0] + t[1] * t[1]; }, theta, wrong, 1e-5);
  EXPECT_EQ(r.worst_index, 1u);
  EXPECT_GT(r.max_rel, 0.1);
}

TEST(Rng, DerivedStreamsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
  EXPECT_NE(derive_seed(1, "a", {0, 1}), derive_seed(1, "a", {1, 0}));
}

}  // namespace
}  // namespace fedalign
