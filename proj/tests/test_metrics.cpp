#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tpkd/metrics.hpp"

using namespace tpkd;

namespace {

// Direct ||Xc^T Yc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on feature-space
// cross products, independent of the Gram-matrix route.
double cka_direct(const std::vector<double>& x, int n, int p, const std::vector<double>& y, int q) {
  auto center = [n](std::vector<double> m, int cols) {
    for (int j = 0; j < cols; ++j) {
      double mu = 0;
      for (int i = 0; i < n; ++i) mu += m[i * cols + j];
      for (int i = 0; i < n; ++i) m[i * cols + j] -= mu / n;
    }
    return m;
  };
  auto cross_norm2 = [n](const std::vector<double>& a, int pa, const std::vector<double>& b, int pb) {
    double s = 0;
    for (int u = 0; u < pa; ++u)
      for (int v = 0; v < pb; ++v) {
        double c = 0;
        for (int i = 0; i < n; ++i) c += a[i * pa + u] * b[i * pb + v];
        s += c * c;
      }
    return s;
  };
  auto xc = center(x, p), yc = center(y, q);
  return cross_norm2(xc, p, yc, q) / std::sqrt(cross_norm2(xc, p, xc, p) * cross_norm2(yc, q, yc, q));
}

std::vector<double> gaussian(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST(Evaluate, NllOfHalfProbability) {
  std::vector<double> p{0.5, 0.5};
  std::vector<int> y{1};
  EXPECT_NEAR(evaluate_probs(p, y, 2).nll, std::log(2.0), 1e-12);
}

TEST(Evaluate, EceOfSingleConfidentCorrectSample) {
  std::vector<double> p{0.8, 0.2};
  std::vector<int> y{0};
  auto r = evaluate_probs(p, y, 2);
  EXPECT_NEAR(r.ece, 0.2, 1e-12);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Evaluate, EceZeroWhenCalibrated) {
  // ten predictions at confidence 0.8 of which eight are right, and four at
  // 0.5 of which two are right
  std::vector<double> p;
  std::vector<int> y;
  for (int i = 0; i < 10; ++i) {
    p.insert(p.end(), {0.8, 0.2});
    y.push_back(i < 8 ? 0 : 1);
  }
  for (int i = 0; i < 4; ++i) {
    p.insert(p.end(), {0.5, 0.5});
    y.push_back(i % 2);
  }
  EXPECT_NEAR(evaluate_probs(p, y, 2).ece, 0.0, 1e-12);
}

TEST(Evaluate, ConfusionAndRecall) {
  std::vector<double> p{0.9, 0.1, 0.0, 0.2, 0.7, 0.1, 0.6, 0.3, 0.1, 0.1, 0.1, 0.8};
  std::vector<int> y{0, 1, 1, 2};
  auto r = evaluate_probs(p, y, 3);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  EXPECT_EQ(r.confusion[1][0], 1);
  EXPECT_EQ(r.confusion[1][1], 1);
  EXPECT_DOUBLE_EQ(r.per_class_recall[1], 0.5);
  EXPECT_EQ(r.samples, 4u);
}

TEST(Evaluate, InputChecks) {
  std::vector<double> p{0.5, 0.5};
  std::vector<int> none, bad{2};
  EXPECT_THROW(evaluate_probs(p, none, 2), InputError);
  EXPECT_THROW(evaluate_probs(p, bad, 2), InputError);
  std::vector<int> two{0, 1};
  EXPECT_THROW(evaluate_probs(p, two, 2), ShapeError);
}

TEST(Evaluate, ZeroProbabilityTrueClassStaysFinite) {
  std::vector<double> p{1.0, 0.0};
  std::vector<int> y{1};
  EXPECT_TRUE(std::isfinite(evaluate_probs(p, y, 2).nll));
}

TEST(SoftmaxRows, NormalizesEachRow) {
  std::vector<float> logits{0, 0, 1000, 0};
  auto p = softmax_rows(logits, 2);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[2], 1.0);
  EXPECT_DOUBLE_EQ(p[3], 0.0);
}

TEST(Pearson, HandCase) {
  std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8.5};
  // means 2.5 and 5.125; deviations -1.5,-.5,.5,1.5 and -3.125,-1.125,.875,3.375
  const double sab = 1.5 * 3.125 + 0.5 * 1.125 + 0.5 * 0.875 + 1.5 * 3.375;
  const double saa = 5.0;
  const double sbb = 3.125 * 3.125 + 1.125 * 1.125 + 0.875 * 0.875 + 3.375 * 3.375;
  EXPECT_NEAR(pearson(a, b), sab / std::sqrt(saa * sbb), 1e-12);
  bool degenerate = false;
  std::vector<double> flat{1, 1, 1, 1};
  EXPECT_EQ(pearson(a, flat, &degenerate), 0.0);
  EXPECT_TRUE(degenerate);
}

TEST(PearsonProfile, CountsEveryColumnPair) {
  std::mt19937_64 rng(1);
  const int b = 8, k = 4;
  auto m = gaussian(b * b, rng);
  auto prof = pearson_patch_profile(m, b, k);
  size_t total = prof.skipped;
  for (auto c : prof.counts) total += c;
  EXPECT_EQ(total, static_cast<size_t>(b * k * (k - 1) / 2));
  EXPECT_EQ(prof.edges.size(), 21u);
  EXPECT_THROW(pearson_patch_profile(m, b, 3), ShapeError);
}

TEST(LinearCka, MatchesDirectFormula) {
  std::mt19937_64 rng(2);
  const int n = 64, p = 32, q = 32;
  auto x = gaussian(n * p, rng), y = gaussian(n * q, rng);
  const double cka = linear_cka(x, n, p, y, q);
  EXPECT_NEAR(cka, cka_direct(x, n, p, y, q), 1e-10);
  EXPECT_GT(cka, 0.0);
  EXPECT_LT(cka, 0.5);
}

TEST(LinearCka, InvariantToOrthogonalMapAndScale) {
  std::mt19937_64 rng(3);
  const int n = 20, p = 5;
  auto x = gaussian(n * p, rng);
  std::vector<double> y(x.size());
  // y = 3 * x with columns permuted and one sign flip
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j) y[i * p + j] = (j == 0 ? -3.0 : 3.0) * x[i * p + (j + 2) % p];
  EXPECT_NEAR(linear_cka(x, n, p, y, p), 1.0, 1e-12);
  std::vector<double> zero(n * p, 0.0);
  EXPECT_EQ(linear_cka(x, n, p, zero, p), 0.0);
}
