#pragma once
// Reference implementations shared by the unit tests and the acceptance
// suite. Each one is written independently of the library code it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tpkd/ops.hpp"
#include "tpkd/tensor.hpp"
#include "tpkd/topology.hpp"

namespace tpkd::testing {

/// Finite 0-dim pairs by sweeping every distinct value as a threshold and
/// tracking the connected runs of {i : x[i] <= t}. When runs merge, every
/// run except the oldest (lowest minimum, then lowest index) dies at t.
inline std::vector<PersistencePair> brute_force_pairs(const std::vector<double>& x) {
  std::vector<double> levels(x);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());

  struct Run {
    int lo, hi;
    double birth;
    int birth_index;
  };
  std::vector<Run> prev;
  std::vector<PersistencePair> pairs;
  const int n = static_cast<int>(x.size());
  for (double t : levels) {
    std::vector<Run> cur;
    for (int i = 0; i < n;) {
      if (x[i] > t) {
        ++i;
        continue;
      }
      int j = i;
      while (j + 1 < n && x[j + 1] <= t) ++j;
      cur.push_back({i, j, 0.0, -1});
      i = j + 1;
    }
    for (auto& r : cur) {
      std::vector<const Run*> inside;
      for (const auto& p : prev)
        if (p.lo >= r.lo && p.hi <= r.hi) inside.push_back(&p);
      if (inside.empty()) {
        // newborn: its minimum is t, first attained at the lowest index
        r.birth = t;
        for (int i = r.lo; i <= r.hi; ++i)
          if (x[i] == t) {
            r.birth_index = i;
            break;
          }
        continue;
      }
      auto older = [](const Run* a, const Run* b) {
        return a->birth < b->birth || (a->birth == b->birth && a->birth_index < b->birth_index);
      };
      const Run* eldest = *std::min_element(inside.begin(), inside.end(), older);
      for (const Run* p : inside)
        if (p != eldest && t > p->birth) pairs.push_back({p->birth, t});
      r.birth = eldest->birth;
      r.birth_index = eldest->birth_index;
    }
    prev = std::move(cur);
  }
  return pairs;
}

inline std::vector<PersistencePair> sorted(std::vector<PersistencePair> v) {
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
    return a.birth < b.birth || (a.birth == b.birth && a.death < b.death);
  });
  return v;
}

/// Number of strict local minima after contracting plateaus; boundary
/// samples count when their only neighbour is higher.
inline int local_minima(const std::vector<double>& x) {
  std::vector<double> v;
  for (double a : x)
    if (v.empty() || a != v.back()) v.push_back(a);
  const int m = static_cast<int>(v.size());
  if (m == 1) return 1;
  int count = 0;
  for (int i = 0; i < m; ++i) {
    const bool left = i == 0 || v[i - 1] > v[i];
    const bool right = i == m - 1 || v[i + 1] > v[i];
    count += left && right;
  }
  return count;
}

/// Direct evaluation of one weighted Gaussian at a cell center.
inline double gaussian_pixel(double birth, double pers, int row, int col, const PiConfig& cfg) {
  const double bw = cfg.birth_range.width() / cfg.resolution;
  const double pw = cfg.persistence_range.width() / cfg.resolution;
  const double cx = cfg.birth_range.lo + (col + 0.5) * bw;
  const double cy = cfg.persistence_range.lo + (row + 0.5) * pw;
  const double s2 = cfg.gaussian_sigma * cfg.gaussian_sigma;
  double w = 1.0;
  if (cfg.weighting == Weighting::kLinear) w = std::clamp(pers / cfg.persistence_range.hi, 0.0, 1.0);
  const double d2 = (cx - birth) * (cx - birth) + (cy - pers) * (cy - pers);
  return w * std::exp(-d2 / (2.0 * s2)) / (2.0 * std::numbers::pi * s2);
}

inline Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, bool grad = true, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor<double>::from(std::move(shape), std::move(v), grad);
}

struct GradReport {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Central finite differences of a scalar function against its analytic
/// gradient for every element of `inputs`. Elements whose analytic and
/// numeric derivatives are both below `floor` in magnitude are compared
/// against `floor` instead of their own size.
inline GradReport grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                             const std::vector<std::string>& names = {}, double eps = 1e-4, double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  auto loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad())
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    else
      analytic.emplace_back(t.numel(), 0.0);
  }
  GradReport rep;
  NoGradGuard guard;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].data();
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = f().item();
      data[i] = orig - eps;
      const double down = f().item();
      data[i] = orig;
      const double num = (up - down) / (2.0 * eps);
      const double ana = analytic[k][i];
      const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor});
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst = (k < names.size() ? names[k] : "input" + std::to_string(k)) + "[" + std::to_string(i) +
                    "] analytic " + std::to_string(ana) + " numeric " + std::to_string(num);
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return rep;
}

}  // namespace tpkd::testing
