#pragma once
// Training loops: supervised teachers with best-validation selection,
// annealing initialization and the distilled student.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tpkd/container.hpp"
#include "tpkd/data.hpp"
#include "tpkd/distill.hpp"
#include "tpkd/metrics.hpp"
#include "tpkd/model.hpp"
#include "tpkd/optim.hpp"

namespace tpkd {

struct HistoryRow {
  int epoch = 0;
  double lr = 0, train_loss = 0, train_ce = 0, train_kd = 0, train_orth = 0;
  double val_acc = 0, val_ece = 0, val_nll = 0;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,lr,train_loss,train_ce,train_kd,train_orth,val_acc,val_ece,val_nll\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss,
                  r.train_ce, r.train_kd, r.train_orth, r.val_acc, r.val_ece, r.val_nll);
    out += buf;
  }
  return out;
}

struct TrainSplits {
  LabeledArray train;
  LabeledArray val;
};

struct TrainOptions {
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::function<void(const HistoryRow&)> on_epoch;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint final;
  std::vector<HistoryRow> history;
  int best_epoch = -1;  // -1: no epoch ran, best is the initialization
};

namespace detail {

template <typename T>
Tensor<T> gather_batch(const LabeledArray& data, std::span<const int> idx, std::vector<int>& labels) {
  const size_t per = data.sample_numel();
  std::vector<T> buf(idx.size() * per);
  labels.resize(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(data.values.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                buf.begin() + static_cast<std::ptrdiff_t>(i * per));
    labels[i] = data.labels[idx[i]];
  }
  std::vector<int> shape{static_cast<int>(idx.size())};
  shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
  return Tensor<T>::from(std::move(shape), std::move(buf));
}

/// Shuffled drop-last batches for one epoch.
inline std::vector<std::vector<int>> epoch_batches(size_t n, int batch_size, std::mt19937_64& rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (size_t s = 0; s + batch_size <= n; s += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(s + batch_size));
  return batches;
}

inline uint64_t shuffle_seed(uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL; }

template <typename T>
void record_epoch(Model<T>& model, const LabeledArray& val, HistoryRow& row) {
  if (val.size() == 0) return;
  auto rep = evaluate(model, val);
  row.val_acc = rep.accuracy;
  row.val_ece = rep.ece;
  row.val_nll = rep.nll;
}

inline void require_batches(size_t n, int batch_size) {
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (n < static_cast<size_t>(batch_size))
    throw ConfigError("training split (" + std::to_string(n) + " samples) is smaller than one batch of " +
                      std::to_string(batch_size));
}

}  // namespace detail

/// Supervised cross-entropy training from a seeded random (or given)
/// initialization. `best` is the checkpoint of the epoch with the highest
/// validation accuracy, earliest on ties.
template <typename T = float>
TrainResult train_classifier(const TrainSplits& data, const ModelSpec& spec, const LrSchedule& schedule, int epochs,
                             uint64_t seed, const TrainOptions& opts = {}, const Checkpoint* init = nullptr) {
  schedule.validate();
  Model<T> model(spec, seed);
  if (init) model.load_state(init->arrays);
  TrainResult res;
  res.best = make_checkpoint(model);
  if (epochs > 0) detail::require_batches(data.train.size(), opts.batch_size);

  OptimizerState opt{schedule.initial, opts.momentum, opts.weight_decay, {}};
  std::mt19937_64 rng(detail::shuffle_seed(seed));
  auto params = model.parameters();
  double best_acc = -1.0;
  std::vector<int> labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.lr = opt.lr = lr_at_epoch(schedule, epoch);
    model.set_training(true);
    auto batches = detail::epoch_batches(data.train.size(), opts.batch_size, rng);
    for (const auto& idx : batches) {
      auto x = detail::gather_batch<T>(data.train, idx, labels);
      auto logits = model.forward(x).logits;
      auto loss = ops::cross_entropy(logits, std::span<const int>(labels));
      const double lv = loss.item();
      if (!std::isfinite(lv)) throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch), epoch);
      row.train_loss += lv;
      row.train_ce += lv;
      backward(loss);
      sgd_step(opt, params);
      model.zero_grad();
    }
    row.train_loss /= static_cast<double>(batches.size());
    row.train_ce /= static_cast<double>(batches.size());
    detail::record_epoch(model, data.val, row);
    if (row.val_acc > best_acc) {
      best_acc = row.val_acc;
      res.best = make_checkpoint(model, {{"epoch", epoch}, {"val_acc", row.val_acc}});
      res.best_epoch = epoch;
    }
    res.history.push_back(row);
    if (opts.on_epoch) opts.on_epoch(row);
  }
  res.final = make_checkpoint(model, {{"epoch", epochs - 1}});
  if (epochs == 0) res.best = res.final;
  return res;
}

/// Student initialized from a scratch-trained model of the same
/// architecture.
template <typename T = float>
Model<T> anneal_init(const ModelSpec& student_spec, const Checkpoint& scratch) {
  Model<T> model(student_spec, 0);
  model.load_state(scratch.arrays);
  return model;
}

/// Frozen-teacher outputs over the training split: logits and, per layer
/// pair, the merged similarity map between any two training samples.
/// Teachers run in eval mode, so every sample's outputs are independent of
/// batch composition and can be computed once.
template <typename T>
class TeacherCache {
 public:
  TeacherCache(Model<T>& teacher1, Model<T>& teacher2, const LabeledArray& series, const LabeledArray& images,
               const DistillConfig& cfg, size_t full_map_limit = 3000)
      : alpha_(static_cast<T>(cfg.alpha)), n_(series.size()) {
    std::set<int> l1, l2;
    for (const auto& p : cfg.layer_pairs) {
      l1.insert(p.teacher1);
      l2.insert(p.teacher2);
    }
    const bool maps = cfg.uses_feature_term();
    run(teacher1, series, maps ? l1 : std::set<int>{}, logits1_, acts1_, dims1_);
    run(teacher2, images, maps ? l2 : std::set<int>{}, logits2_, acts2_, dims2_);
    classes_ = teacher1.spec().classes;
    if (!maps) return;
    for (const auto& p : cfg.layer_pairs) pairs_.push_back(p);
    if (n_ <= full_map_limit) {
      std::vector<int> all(n_);
      std::iota(all.begin(), all.end(), 0);
      for (size_t i = 0; i < pairs_.size(); ++i) full_.push_back(compute(i, all));
    }
  }

  size_t size() const { return n_; }
  bool has_full_maps() const { return !full_.empty(); }

  Tensor<T> logits1(std::span<const int> idx) const { return rows(logits1_, classes_, idx); }
  Tensor<T> logits2(std::span<const int> idx) const { return rows(logits2_, classes_, idx); }

  /// Merged teacher map [b, b] of layer pair `pair` for the given samples.
  Tensor<T> merged_map(size_t pair, std::span<const int> idx) const {
    const int b = static_cast<int>(idx.size());
    std::vector<T> out(static_cast<size_t>(b) * b);
    if (has_full_maps()) {
      const auto& m = full_[pair];
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) out[static_cast<size_t>(i) * b + j] = m[static_cast<size_t>(idx[i]) * n_ + idx[j]];
      return Tensor<T>::from({b, b}, std::move(out));
    }
    return Tensor<T>::from({b, b}, compute(pair, idx));
  }

 private:
  static void run(Model<T>& model, const LabeledArray& data, const std::set<int>& layers, std::vector<T>& logits,
                  std::map<int, std::vector<T>>& acts, std::map<int, size_t>& dims) {
    NoGradGuard guard;
    const bool was = model.training();
    model.set_training(false);
    const size_t per = data.sample_numel();
    for (size_t start = 0; start < data.size(); start += 128) {
      const size_t end = std::min(data.size(), start + 128);
      std::vector<int> shape{static_cast<int>(end - start)};
      shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
      std::vector<T> buf(data.values.begin() + static_cast<std::ptrdiff_t>(start * per),
                         data.values.begin() + static_cast<std::ptrdiff_t>(end * per));
      auto f = model.forward(Tensor<T>::from(shape, std::move(buf)), layers);
      logits.insert(logits.end(), f.logits.data().begin(), f.logits.data().end());
      for (auto& [layer, t] : f.activations) {
        dims[layer] = t.numel() / (end - start);
        acts[layer].insert(acts[layer].end(), t.data().begin(), t.data().end());
      }
    }
    model.set_training(was);
  }

  Tensor<T> rows(const std::vector<T>& src, int width, std::span<const int> idx) const {
    std::vector<T> out(idx.size() * width);
    for (size_t i = 0; i < idx.size(); ++i)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(idx[i]) * width), width,
                  out.begin() + static_cast<std::ptrdiff_t>(i * width));
    return Tensor<T>::from({static_cast<int>(idx.size()), width}, std::move(out));
  }

  std::vector<T> compute(size_t pair, std::span<const int> idx) const {
    const auto& p = pairs_[pair];
    const auto& a1 = acts1_.at(p.teacher1);
    const auto& a2 = acts2_.at(p.teacher2);
    const size_t d1 = dims1_.at(p.teacher1), d2 = dims2_.at(p.teacher2);
    const size_t b = idx.size();
    std::vector<T> out(b * b);
    for (size_t i = 0; i < b; ++i)
      for (size_t j = i; j < b; ++j) {
        const T g1 = ops::detail::dot(a1.data() + idx[i] * d1, a1.data() + idx[j] * d1, d1);
        const T g2 = ops::detail::dot(a2.data() + idx[i] * d2, a2.data() + idx[j] * d2, d2);
        out[i * b + j] = out[j * b + i] = alpha_ * g1 + (T(1) - alpha_) * g2;
      }
    return out;
  }

  T alpha_;
  size_t n_;
  int classes_ = 0;
  std::vector<T> logits1_, logits2_;
  std::map<int, std::vector<T>> acts1_, acts2_;
  std::map<int, size_t> dims1_, dims2_;
  std::vector<LayerPair> pairs_;
  std::vector<std::vector<T>> full_;
};

struct StudentInputs {
  TrainSplits series;         // student and teacher 1 input
  LabeledArray train_images;  // teacher 2 input, aligned with series.train
};

/// Distills a series-only student from a series teacher and an image
/// teacher. With `init` the student starts from that checkpoint (annealing
/// initialization); otherwise from a seeded random initialization.
template <typename T = float>
TrainResult train_student(const StudentInputs& data, const Checkpoint& teacher1_ckpt, const Checkpoint& teacher2_ckpt,
                          const ModelSpec& student_spec, const DistillConfig& cfg, const LrSchedule& schedule,
                          int epochs, uint64_t seed, const TrainOptions& opts = {}, const Checkpoint* init = nullptr) {
  cfg.validate();
  schedule.validate();
  const auto& train = data.series.train;
  if (data.train_images.size() != train.size() || data.train_images.labels != train.labels)
    throw InputError("series and image training sets are not aligned sample-for-sample");
  if (cfg.uses_feature_term() && opts.batch_size % cfg.k != 0)
    throw ConfigError("batch size " + std::to_string(opts.batch_size) + " is not divisible by k=" + std::to_string(cfg.k));
  for (const auto& p : cfg.uses_feature_term() ? cfg.layer_pairs : std::vector<LayerPair>{}) {
    if (p.student < 0 || p.student >= student_spec.stages || p.teacher1 < 0 || p.teacher1 >= teacher1_ckpt.spec.stages ||
        p.teacher2 < 0 || p.teacher2 >= teacher2_ckpt.spec.stages)
      throw ConfigError("layer pair references a stage the model does not have");
  }

  Model<T> student = init ? anneal_init<T>(student_spec, *init) : Model<T>(student_spec, seed);
  TrainResult res;
  res.best = make_checkpoint(student);
  if (epochs > 0) detail::require_batches(train.size(), opts.batch_size);

  const bool needs_teachers = cfg.lambda > 0.0 || cfg.uses_feature_term();
  std::optional<TeacherCache<T>> cache;
  if (needs_teachers && epochs > 0) {
    auto t1 = model_from_checkpoint<T>(teacher1_ckpt);
    auto t2 = model_from_checkpoint<T>(teacher2_ckpt);
    cache.emplace(t1, t2, train, data.train_images, cfg);
  }
  std::set<int> s_layers;
  for (const auto& p : cfg.layer_pairs) s_layers.insert(p.student);

  OptimizerState opt{schedule.initial, opts.momentum, opts.weight_decay, {}};
  std::mt19937_64 rng(detail::shuffle_seed(seed));
  auto params = student.parameters();
  double best_acc = -1.0;
  std::vector<int> labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    HistoryRow row;
    row.epoch = epoch;
    row.lr = opt.lr = lr_at_epoch(schedule, epoch);
    student.set_training(true);
    auto batches = detail::epoch_batches(train.size(), opts.batch_size, rng);
    for (const auto& idx : batches) {
      auto x = detail::gather_batch<T>(train, idx, labels);
      TeacherSignals<T> signals;
      if (cache) {
        signals.logits1 = cache->logits1(idx);
        signals.logits2 = cache->logits2(idx);
        if (cfg.uses_feature_term())
          for (size_t p = 0; p < cfg.layer_pairs.size(); ++p) signals.merged_maps.push_back(cache->merged_map(p, idx));
      }
      auto fs = student.forward(x, cfg.uses_feature_term() ? s_layers : std::set<int>{});
      std::vector<Tensor<T>> student_maps;
      if (cfg.uses_feature_term())
        for (const auto& p : cfg.layer_pairs) student_maps.push_back(similarity_map(fs.activations.at(p.student)));
      auto parts = total_loss(fs.logits, std::span<const int>(labels), student_maps, signals, cfg);
      const double lv = parts.total.item();
      if (!std::isfinite(lv)) throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch), epoch);
      row.train_loss += lv;
      row.train_ce += parts.ce;
      row.train_kd += parts.kd;
      row.train_orth += parts.feature;
      backward(parts.total);
      sgd_step(opt, params);
      student.zero_grad();
    }
    const double nb = static_cast<double>(batches.size());
    row.train_loss /= nb;
    row.train_ce /= nb;
    row.train_kd /= nb;
    row.train_orth /= nb;
    detail::record_epoch(student, data.series.val, row);
    if (row.val_acc > best_acc) {
      best_acc = row.val_acc;
      res.best = make_checkpoint(student, {{"epoch", epoch}, {"val_acc", row.val_acc}});
      res.best_epoch = epoch;
    }
    res.history.push_back(row);
    if (opts.on_epoch) opts.on_epoch(row);
  }
  res.final = make_checkpoint(student, {{"epoch", epochs - 1}});
  if (epochs == 0) res.best = res.final;
  return res;
}

}  // namespace tpkd
