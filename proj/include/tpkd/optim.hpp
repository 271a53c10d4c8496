#pragma once
// SGD with momentum and weight decay; step learning-rate schedules.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tpkd/error.hpp"
#include "tpkd/model.hpp"

namespace tpkd {

struct OptimizerState {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::map<std::string, std::vector<double>> velocity;
};

/// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
template <typename T>
void sgd_step(OptimizerState& state, std::vector<NamedTensor<T>>& params) {
  for (auto& p : params) {
    if (!p.trainable) continue;
    if (!p.tensor.has_grad()) throw std::logic_error("sgd_step: parameter '" + p.name + "' has no gradient");
    auto& v = state.velocity[p.name];
    if (v.empty()) v.assign(p.tensor.numel(), 0.0);
    if (v.size() != p.tensor.numel()) throw ShapeError("sgd_step: velocity shape differs for '" + p.name + "'");
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    for (size_t i = 0; i < v.size(); ++i) {
      v[i] = state.momentum * v[i] + static_cast<double>(grad[i]) + state.weight_decay * static_cast<double>(data[i]);
      data[i] = static_cast<T>(static_cast<double>(data[i]) - state.lr * v[i]);
    }
  }
}

struct Milestone {
  int epoch = 0;
  double factor = 1.0;
  bool operator==(const Milestone&) const = default;
};

struct LrSchedule {
  double initial = 0.05;
  std::vector<Milestone> milestones;

  void validate() const {
    if (!(initial > 0.0)) throw ConfigError("schedule.initial must be positive");
    for (size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i].epoch <= milestones[i - 1].epoch)
        throw ConfigError("schedule milestones must have strictly increasing epochs");
      if (!(milestones[i].factor > 0.0 && milestones[i].factor <= 1.0))
        throw ConfigError("schedule milestone factors must lie in (0, 1]");
    }
  }

  /// Time-series schedule: 0.05, x0.2 at epoch 10, then x0.1 every
  /// floor(total/3) epochs.
  static LrSchedule series(int total_epochs) {
    std::map<int, double> at{{10, 0.2}};
    int every = total_epochs / 3;
    if (every > 0) {
      for (int e = every; e < total_epochs; e += every) {
        auto [it, fresh] = at.emplace(e, 0.1);
        if (!fresh) it->second *= 0.1;
      }
    }
    LrSchedule s{0.05, {}};
    for (auto [e, f] : at) s.milestones.push_back({e, f});
    return s;
  }

  /// Image schedule: 0.1, x0.5 at epoch 10, x0.2 at 40, 80, 120 and 160.
  static LrSchedule image() { return {0.1, {{10, 0.5}, {40, 0.2}, {80, 0.2}, {120, 0.2}, {160, 0.2}}}; }
};

inline double lr_at_epoch(const LrSchedule& schedule, int epoch) {
  double lr = schedule.initial;
  for (const auto& m : schedule.milestones)
    if (m.epoch <= epoch) lr *= m.factor;
  return lr;
}

inline void to_json(nlohmann::json& j, const LrSchedule& s) {
  j = nlohmann::json{{"initial", s.initial}, {"milestones", nlohmann::json::array()}};
  for (const auto& m : s.milestones) j["milestones"].push_back({m.epoch, m.factor});
}

inline void from_json(const nlohmann::json& j, LrSchedule& s) {
  if (j.contains("initial")) s.initial = j.at("initial").get<double>();
  if (j.contains("milestones")) {
    s.milestones.clear();
    for (const auto& m : j.at("milestones")) s.milestones.push_back({m.at(0).get<int>(), m.at(1).get<double>()});
  }
}

}  // namespace tpkd
