#pragma once
// Classification and calibration metrics; representation analysis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <json.hpp>

#include "tpkd/data.hpp"
#include "tpkd/error.hpp"
#include "tpkd/model.hpp"

namespace tpkd {

inline constexpr int kEceBins = 15;

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<int>> confusion;  // [true][predicted]
  double ece = 0.0;
  double nll = 0.0;
  std::vector<double> per_class_recall;
  size_t samples = 0;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"accuracy", r.accuracy}, {"confusion", r.confusion}, {"ece", r.ece},
                     {"nll", r.nll},           {"per_class_recall", r.per_class_recall}, {"samples", r.samples}};
}

/// Report from row-major class probabilities [n x classes].
inline EvalReport evaluate_probs(std::span<const double> probs, std::span<const int> labels, int classes) {
  const size_t n = labels.size();
  if (n == 0) throw InputError("evaluate: empty dataset");
  if (probs.size() != n * static_cast<size_t>(classes)) throw ShapeError("evaluate: probability matrix shape mismatch");
  EvalReport r;
  r.samples = n;
  r.confusion.assign(classes, std::vector<int>(classes, 0));
  std::vector<double> bin_conf(kEceBins, 0.0), bin_acc(kEceBins, 0.0);
  std::vector<size_t> bin_n(kEceBins, 0);
  size_t correct = 0;
  double nll = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double* p = probs.data() + i * classes;
    const int pred = static_cast<int>(std::max_element(p, p + classes) - p);
    const double conf = p[pred];
    const int y = labels[i];
    if (y < 0 || y >= classes) throw InputError("evaluate: label out of range");
    r.confusion[y][pred] += 1;
    const bool hit = pred == y;
    correct += hit;
    nll -= std::log(std::max(p[y], std::numeric_limits<double>::min()));
    // bins are (b/15, (b+1)/15]; confidence 0 falls into the first
    int b = static_cast<int>(std::ceil(conf * kEceBins)) - 1;
    b = std::clamp(b, 0, kEceBins - 1);
    bin_n[b] += 1;
    bin_conf[b] += conf;
    bin_acc[b] += hit ? 1.0 : 0.0;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  r.nll = nll / static_cast<double>(n);
  for (int b = 0; b < kEceBins; ++b) {
    if (bin_n[b] == 0) continue;
    const double nb = static_cast<double>(bin_n[b]);
    r.ece += nb / static_cast<double>(n) * std::abs(bin_acc[b] / nb - bin_conf[b] / nb);
  }
  r.per_class_recall.resize(classes);
  for (int c = 0; c < classes; ++c) {
    int total = 0;
    for (int v : r.confusion[c]) total += v;
    r.per_class_recall[c] = total ? static_cast<double>(r.confusion[c][c]) / total : 0.0;
  }
  return r;
}

/// Softmax of row-major logits, in double precision.
inline std::vector<double> softmax_rows(std::span<const float> logits, int classes) {
  std::vector<double> probs(logits.size());
  for (size_t i = 0; i < logits.size(); i += classes) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < classes; ++j) mx = std::max(mx, static_cast<double>(logits[i + j]));
    double s = 0.0;
    for (int j = 0; j < classes; ++j) s += (probs[i + j] = std::exp(logits[i + j] - mx));
    for (int j = 0; j < classes; ++j) probs[i + j] /= s;
  }
  return probs;
}

/// Batched eval-mode logits for every sample of `data`.
template <typename T>
std::vector<float> predict_logits(Model<T>& model, const LabeledArray& data, int batch_size = 128) {
  NoGradGuard guard;
  const bool was_training = model.training();
  model.set_training(false);
  std::vector<float> out;
  out.reserve(data.size() * model.spec().classes);
  const size_t per = data.sample_numel();
  for (size_t start = 0; start < data.size(); start += batch_size) {
    const size_t end = std::min(data.size(), start + batch_size);
    std::vector<int> shape{static_cast<int>(end - start)};
    shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
    std::vector<T> buf(data.values.begin() + static_cast<std::ptrdiff_t>(start * per),
                       data.values.begin() + static_cast<std::ptrdiff_t>(end * per));
    auto logits = model.forward(Tensor<T>::from(shape, std::move(buf))).logits;
    for (T v : logits.data()) out.push_back(static_cast<float>(v));
  }
  model.set_training(was_training);
  return out;
}

template <typename T>
EvalReport evaluate(Model<T>& model, const LabeledArray& data) {
  if (data.size() == 0) throw InputError("evaluate: empty dataset");
  const int classes = model.spec().classes;
  auto probs = softmax_rows(predict_logits(model, data), classes);
  return evaluate_probs(probs, data.labels, classes);
}

// ------------------------------------------------------------ analysis

inline double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr) {
  const size_t n = a.size();
  double ma = 0, mb = 0;
  for (size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct PearsonProfile {
  std::vector<double> edges;        // bins + 1 edges over [-1, 1]
  std::vector<size_t> counts;       // one per bin
  std::vector<double> coefficients;  // every computed r, in sample/pair order
  size_t skipped = 0;               // pairs with a zero-variance column
};

/// Pearson r between every unordered pair of patch columns of each sample's
/// row-normalized map row, binned over [-1, 1].
inline PearsonProfile pearson_patch_profile(std::span<const double> map, int b, int k, int bins = 20) {
  if (map.size() != static_cast<size_t>(b) * b) throw ShapeError("pearson_patch_profile: map must be b x b");
  if (k < 2 || b % k != 0) throw ShapeError("pearson_patch_profile: b must be divisible by k (k >= 2)");
  const int d = b / k;
  PearsonProfile prof;
  prof.counts.assign(bins, 0);
  for (int i = 0; i <= bins; ++i) prof.edges.push_back(-1.0 + 2.0 * i / bins);
  for (int i = 0; i < b; ++i) {
    const double* row = map.data() + static_cast<size_t>(i) * b;
    double norm = 0.0;
    for (int j = 0; j < b; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    std::vector<double> v(row, row + b);
    if (norm > 0.0)
      for (auto& x : v) x /= norm;
    for (int c1 = 0; c1 < k; ++c1)
      for (int c2 = c1 + 1; c2 < k; ++c2) {
        bool degenerate = false;
        double r = pearson(std::span<const double>(v.data() + c1 * d, d), std::span<const double>(v.data() + c2 * d, d),
                           &degenerate);
        if (degenerate) {
          ++prof.skipped;
          continue;
        }
        prof.coefficients.push_back(r);
        int bin = static_cast<int>((r + 1.0) / 2.0 * bins);
        prof.counts[std::clamp(bin, 0, bins - 1)] += 1;
      }
  }
  return prof;
}

/// Linear CKA between feature matrices x [n x p] and y [n x q] (row-major),
/// with plain column centering. Zero feature matrices give 0.
inline double linear_cka(std::span<const double> x, int n, int p, std::span<const double> y, int q) {
  if (x.size() != static_cast<size_t>(n) * p || y.size() != static_cast<size_t>(n) * q)
    throw ShapeError("linear_cka: feature matrices must share the sample dimension");
  auto center = [n](std::span<const double> m, int cols) {
    std::vector<double> c(m.begin(), m.end());
    for (int j = 0; j < cols; ++j) {
      double mu = 0;
      for (int i = 0; i < n; ++i) mu += c[static_cast<size_t>(i) * cols + j];
      mu /= n;
      for (int i = 0; i < n; ++i) c[static_cast<size_t>(i) * cols + j] -= mu;
    }
    return c;
  };
  auto xc = center(x, p), yc = center(y, q);
  // Work with n x n Gram matrices: ||Xc^T Yc||_F^2 = <Kx, Ky>.
  auto gram = [n](const std::vector<double>& m, int cols) {
    std::vector<double> g(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        double s = 0;
        for (int c = 0; c < cols; ++c) s += m[static_cast<size_t>(i) * cols + c] * m[static_cast<size_t>(j) * cols + c];
        g[static_cast<size_t>(i) * n + j] = g[static_cast<size_t>(j) * n + i] = s;
      }
    return g;
  };
  auto kx = gram(xc, p), ky = gram(yc, q);
  double xy = 0, xx = 0, yy = 0;
  for (size_t i = 0; i < kx.size(); ++i) {
    xy += kx[i] * ky[i];
    xx += kx[i] * kx[i];
    yy += ky[i] * ky[i];
  }
  if (xx <= 0.0 || yy <= 0.0) return 0.0;
  return xy / std::sqrt(xx * yy);
}

}  // namespace tpkd
