#pragma once
// 0-dimensional sublevel-set persistence of sampled signals and its
// rasterization into persistence images.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <exception>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tpkd/error.hpp"

namespace tpkd {

/// One multichannel window of a time series, stored channel-major.
struct SignalWindow {
  int channels = 0;
  int length = 0;
  std::vector<float> values;  // channels * length
  double sample_rate_hz = 100.0;
  std::optional<int> label;

  float at(int c, int t) const { return values[static_cast<size_t>(c) * length + t]; }
  float& at(int c, int t) { return values[static_cast<size_t>(c) * length + t]; }

  const float* channel(int c) const { return values.data() + static_cast<size_t>(c) * length; }

  bool operator==(const SignalWindow&) const = default;
};

struct PersistencePair {
  double birth = 0.0;
  double death = 0.0;
  double lifetime() const { return death - birth; }
  bool operator==(const PersistencePair&) const = default;
};

struct PersistenceDiagram {
  std::vector<std::vector<PersistencePair>> pairs;  // per channel
  std::vector<double> essential_births;             // global minimum per channel
  std::vector<double> channel_max;                  // used by EssentialPolicy::kCapAtMax

  int channels() const { return static_cast<int>(pairs.size()); }
};

enum class Weighting { kLinear, kConstant };
enum class EssentialPolicy { kDrop, kCapAtMax };

struct Range {
  double lo = 0.0;
  double hi = 1.0;
  double width() const { return hi - lo; }
};

struct PiConfig {
  int resolution = 16;
  double gaussian_sigma = 0.25;
  Range birth_range{-10.0, 10.0};
  Range persistence_range{0.0, 20.0};
  Weighting weighting = Weighting::kLinear;
  EssentialPolicy essential_policy = EssentialPolicy::kDrop;

  /// Default persistence range spans the width of the birth range.
  static PiConfig with_birth_range(double lo, double hi, double sigma) {
    PiConfig cfg;
    cfg.gaussian_sigma = sigma;
    cfg.birth_range = {lo, hi};
    cfg.persistence_range = {0.0, hi - lo};
    return cfg;
  }

  void validate() const {
    if (resolution < 2) throw ConfigError("pi.resolution must be >= 2");
    if (!(gaussian_sigma > 0.0)) throw ConfigError("pi.gaussian_sigma must be positive");
    if (!(birth_range.lo < birth_range.hi)) throw ConfigError("pi.birth_range requires lo < hi");
    if (!(persistence_range.lo < persistence_range.hi))
      throw ConfigError("pi.persistence_range requires lo < hi");
  }
};

/// Raster of shape [channels x resolution x resolution]. Row index runs
/// along persistence, column index along birth.
struct PersistenceImage {
  int channels = 0;
  int resolution = 0;
  std::vector<double> pixels;

  PersistenceImage() = default;
  PersistenceImage(int c, int r)
      : channels(c), resolution(r), pixels(static_cast<size_t>(c) * r * r, 0.0) {}

  double at(int c, int row, int col) const {
    return pixels[(static_cast<size_t>(c) * resolution + row) * resolution + col];
  }
  double& at(int c, int row, int col) {
    return pixels[(static_cast<size_t>(c) * resolution + row) * resolution + col];
  }
  double max() const {
    return pixels.empty() ? 0.0 : *std::max_element(pixels.begin(), pixels.end());
  }
  bool operator==(const PersistenceImage&) const = default;
};

inline void validate_window(const SignalWindow& w) {
  if (w.channels < 1) throw InputError("window has no channels");
  if (w.length < 2) throw InputError("window length must be >= 2");
  if (w.values.size() != static_cast<size_t>(w.channels) * w.length)
    throw ShapeError("window value count does not match channels x length");
  for (int c = 0; c < w.channels; ++c) {
    for (int t = 0; t < w.length; ++t) {
      if (!std::isfinite(w.at(c, t))) {
        std::ostringstream os;
        os << "non-finite sample at channel " << c << ", index " << t;
        throw InputError(os.str());
      }
    }
  }
}

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
};

}  // namespace detail

/// Finite pairs of a single channel under the elder rule. Runs of equal
/// values are contracted to their first sample, so no zero-persistence
/// pairs appear. Returns the global minimum through `essential`.
template <typename Real>
std::vector<PersistencePair> channel_persistence(const Real* x, int n, double* essential) {
  std::vector<double> v;
  v.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (v.empty() || static_cast<double>(x[i]) != v.back()) v.push_back(static_cast<double>(x[i]));
  }
  const int m = static_cast<int>(v.size());

  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  // (value, index) ordering: lower index is older on ties.
  std::sort(order.begin(), order.end(), [&](int a, int b) { return v[a] < v[b] || (v[a] == v[b] && a < b); });

  detail::UnionFind uf(m);
  std::vector<int> root_birth(m);  // contracted index of the component's minimum
  std::vector<char> added(m, 0);
  std::vector<PersistencePair> out;

  auto older = [&](int a, int b) { return v[a] < v[b] || (v[a] == v[b] && a < b); };

  for (int i : order) {
    added[i] = 1;
    root_birth[i] = i;
    for (int nb : {i - 1, i + 1}) {
      if (nb < 0 || nb >= m || !added[nb]) continue;
      int ra = uf.find(i);
      int rb = uf.find(nb);
      if (ra == rb) continue;
      int ba = root_birth[ra];
      int bb = root_birth[rb];
      int survivor = older(ba, bb) ? ba : bb;
      int victim = survivor == ba ? bb : ba;
      if (v[i] > v[victim]) out.push_back({v[victim], v[i]});
      uf.parent[rb] = ra;
      root_birth[ra] = survivor;
    }
  }
  if (essential) *essential = v[order.front()];
  return out;
}

/// Sublevel-set persistence diagram of every channel of a window.
inline PersistenceDiagram sublevel_diagram(const SignalWindow& window) {
  validate_window(window);
  PersistenceDiagram pd;
  pd.pairs.resize(window.channels);
  pd.essential_births.resize(window.channels);
  pd.channel_max.resize(window.channels);
  for (int c = 0; c < window.channels; ++c) {
    const float* x = window.channel(c);
    pd.pairs[c] = channel_persistence(x, window.length, &pd.essential_births[c]);
    pd.channel_max[c] = *std::max_element(x, x + window.length);
  }
  return pd;
}

namespace detail {

inline void splat(PersistenceImage& img, int c, double birth, double pers, const PiConfig& cfg) {
  double weight = 1.0;
  if (cfg.weighting == Weighting::kLinear) weight = std::clamp(pers / cfg.persistence_range.hi, 0.0, 1.0);
  if (weight == 0.0) return;

  const int r = cfg.resolution;
  const double s2 = cfg.gaussian_sigma * cfg.gaussian_sigma;
  const double norm = weight / (2.0 * std::numbers::pi * s2);
  const double bw = cfg.birth_range.width() / r;
  const double pw = cfg.persistence_range.width() / r;

  std::vector<double> gx(r), gy(r);
  for (int j = 0; j < r; ++j) {
    double cx = cfg.birth_range.lo + (j + 0.5) * bw - birth;
    double cy = cfg.persistence_range.lo + (j + 0.5) * pw - pers;
    gx[j] = std::exp(-cx * cx / (2.0 * s2));
    gy[j] = std::exp(-cy * cy / (2.0 * s2));
  }
  for (int row = 0; row < r; ++row) {
    for (int col = 0; col < r; ++col) img.at(c, row, col) += norm * gy[row] * gx[col];
  }
}

}  // namespace detail

/// Sum of weighted isotropic Gaussians over (birth, persistence), point
/// sampled at grid-cell centers.
inline PersistenceImage diagram_to_image(const PersistenceDiagram& pd, const PiConfig& cfg) {
  cfg.validate();
  PersistenceImage img(pd.channels(), cfg.resolution);
  for (int c = 0; c < pd.channels(); ++c) {
    for (const auto& p : pd.pairs[c]) detail::splat(img, c, p.birth, p.lifetime(), cfg);
    if (cfg.essential_policy == EssentialPolicy::kCapAtMax && c < static_cast<int>(pd.essential_births.size()) &&
        c < static_cast<int>(pd.channel_max.size())) {
      double b = pd.essential_births[c];
      detail::splat(img, c, b, pd.channel_max[c] - b, cfg);
    }
  }
  return img;
}

inline PersistenceImage normalize_image(PersistenceImage pi) {
  const double m = pi.max();
  if (m > 0.0) {
    for (auto& p : pi.pixels) p /= m;
  }
  return pi;
}

/// Extracts one normalized image per window. With `parallel`, windows are
/// distributed across hardware threads; output order always matches input.
inline std::vector<PersistenceImage> batch_extract(const std::vector<SignalWindow>& windows, const PiConfig& cfg,
                                                   bool parallel = true) {
  cfg.validate();
  std::vector<PersistenceImage> out(windows.size());
  if (windows.empty()) return out;
  const int channels = windows.front().channels;
  for (size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].channels != channels) {
      std::ostringstream os;
      os << "window " << i << " has " << windows[i].channels << " channels, expected " << channels;
      throw InputError(os.str());
    }
  }

  std::vector<std::exception_ptr> errors(windows.size());
  auto work = [&](size_t begin, size_t step) {
    for (size_t i = begin; i < windows.size(); i += step) {
      try {
        out[i] = normalize_image(diagram_to_image(sublevel_diagram(windows[i]), cfg));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  size_t threads = parallel ? std::max(1u, std::thread::hardware_concurrency()) : 1;
  threads = std::min(threads, windows.size());
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  }

  for (size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      std::ostringstream os;
      os << "window " << i << ": " << e.what();
      throw InputError(os.str());
    }
  }
  return out;
}

}  // namespace tpkd
