#pragma once
// Distillation objectives: temperature-softened KL against one or two
// teachers, batch similarity maps, merged teacher maps, patch-Gram
// orthogonality knowledge and the combined training objective.

#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpkd/error.hpp"
#include "tpkd/model.hpp"
#include "tpkd/ops.hpp"

namespace tpkd {

/// Which layers are compared: stage ids of teacher 1, teacher 2, student.
struct LayerPair {
  int teacher1 = 0;
  int teacher2 = 0;
  int student = 0;
  bool operator==(const LayerPair&) const = default;
};

enum class MapNormalization { kRow, kWhole };

/// How orth_loss reduces the squared gram differences of one layer pair:
/// summed over every slice and entry, or averaged over them.
enum class OrthReduction { kSum, kMean };

struct DistillConfig {
  double tau = 4.0;
  double lambda = 0.7;
  double alpha = 0.7;
  double beta = 900.0;
  int k = 4;
  std::vector<LayerPair> layer_pairs{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
  bool use_orth = true;
  /// Match merged teacher maps to student maps by mean squared error
  /// instead of patch grams. Ignored when use_orth is set.
  bool direct_map_mse = false;
  bool anneal = true;
  MapNormalization normalization = MapNormalization::kRow;
  OrthReduction orth_reduction = OrthReduction::kMean;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("distill.tau must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("distill.lambda must lie in [0, 1]");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill.alpha must lie in [0, 1]");
    if (!(beta >= 0.0)) throw ConfigError("distill.beta must be non-negative");
    if (k < 1) throw ConfigError("distill.k must be positive");
  }

  bool uses_feature_term() const { return beta > 0.0 && (use_orth || direct_map_mse) && !layer_pairs.empty(); }
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"tau", c.tau},
                     {"lambda", c.lambda},
                     {"alpha", c.alpha},
                     {"beta", c.beta},
                     {"k", c.k},
                     {"use_orth", c.use_orth},
                     {"direct_map_mse", c.direct_map_mse},
                     {"anneal", c.anneal},
                     {"normalization", c.normalization == MapNormalization::kRow ? "row" : "whole"},
                     {"orth_reduction", c.orth_reduction == OrthReduction::kMean ? "mean" : "sum"},
                     {"layer_pairs", nlohmann::json::array()}};
  for (const auto& p : c.layer_pairs) j["layer_pairs"].push_back({p.teacher1, p.teacher2, p.student});
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  if (j.contains("tau")) c.tau = j.at("tau").get<double>();
  if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  if (j.contains("beta")) c.beta = j.at("beta").get<double>();
  if (j.contains("k")) c.k = j.at("k").get<int>();
  if (j.contains("use_orth")) c.use_orth = j.at("use_orth").get<bool>();
  if (j.contains("direct_map_mse")) c.direct_map_mse = j.at("direct_map_mse").get<bool>();
  if (j.contains("anneal")) c.anneal = j.at("anneal").get<bool>();
  if (j.contains("normalization")) {
    auto n = j.at("normalization").get<std::string>();
    if (n != "row" && n != "whole") throw ConfigError("distill.normalization must be 'row' or 'whole'");
    c.normalization = n == "row" ? MapNormalization::kRow : MapNormalization::kWhole;
  }
  if (j.contains("orth_reduction")) {
    auto r = j.at("orth_reduction").get<std::string>();
    if (r != "mean" && r != "sum") throw ConfigError("distill.orth_reduction must be 'mean' or 'sum'");
    c.orth_reduction = r == "mean" ? OrthReduction::kMean : OrthReduction::kSum;
  }
  if (j.contains("layer_pairs")) {
    c.layer_pairs.clear();
    for (const auto& p : j.at("layer_pairs")) c.layer_pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()});
  }
}

// ------------------------------------------------------------------- logits

template <typename T>
Tensor<T> softened_probs(const Tensor<T>& logits, T tau) {
  return ops::softmax(ops::scale(logits, T(1) / tau));
}

/// Batch mean of KL(p_T || p_S) at temperature tau. The teacher side is
/// treated as a constant.
template <typename T>
Tensor<T> softened_kl(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, T tau) {
  ops::detail::require_same_shape(teacher_logits.shape(), student_logits.shape(), "softened_kl");
  Tensor<T> log_pt;
  {
    NoGradGuard guard;
    log_pt = ops::log_softmax(ops::scale(teacher_logits.detach(), T(1) / tau));
  }
  std::vector<T> pt(log_pt.numel());
  for (size_t i = 0; i < pt.size(); ++i) pt[i] = std::exp(log_pt.data()[i]);
  auto p = Tensor<T>::from(log_pt.shape(), std::move(pt));
  auto log_ps = ops::log_softmax(ops::scale(student_logits, T(1) / tau));
  auto kl = ops::sum(ops::mul(p, ops::sub(log_pt, log_ps)));
  return ops::scale(kl, T(1) / static_cast<T>(teacher_logits.dim(0)));
}

/// tau^2 * KL(p_T || p_S)
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, T tau) {
  return ops::scale(softened_kl(teacher_logits, student_logits, tau), tau * tau);
}

/// tau^2 * (alpha * KL(p_T1 || p_S) + (1 - alpha) * KL(p_T2 || p_S))
template <typename T>
Tensor<T> multi_teacher_kd_loss(const Tensor<T>& teacher1_logits, const Tensor<T>& teacher2_logits,
                                const Tensor<T>& student_logits, T tau, T alpha) {
  auto kl1 = softened_kl(teacher1_logits, student_logits, tau);
  auto kl2 = softened_kl(teacher2_logits, student_logits, tau);
  return ops::scale(ops::add(ops::scale(kl1, alpha), ops::scale(kl2, T(1) - alpha)), tau * tau);
}

// ---------------------------------------------------------- similarity maps

/// A A^T for activations flattened to one row per sample: [b, ...] -> [b, b].
template <typename T>
Tensor<T> similarity_map(const Tensor<T>& activation) {
  if (activation.rank() < 1 || activation.dim(0) < 2)
    throw ShapeError("similarity_map needs a batch of at least 2 samples, got " + shape_str(activation.shape()));
  return ops::row_gram(ops::flatten_rows(activation));
}

template <typename T>
Tensor<T> merge_maps(const Tensor<T>& g1, const Tensor<T>& g2, T alpha) {
  if (g1.shape() != g2.shape())
    throw ShapeError("merge_maps: shape mismatch " + shape_str(g1.shape()) + " vs " + shape_str(g2.shape()));
  return ops::add(ops::scale(g1, alpha), ops::scale(g2, T(1) - alpha));
}

template <typename T>
Tensor<T> normalize_map(const Tensor<T>& g, MapNormalization mode = MapNormalization::kRow) {
  return mode == MapNormalization::kRow ? ops::row_l2_normalize(g) : ops::frobenius_normalize(g);
}

/// Normalizes the map, cuts each row into k contiguous segments of length
/// d = b/k (the columns of a d x k patch matrix P) and returns P^T P - I per
/// row, stacked as [b, k, k].
template <typename T>
Tensor<T> patch_grams(const Tensor<T>& g, int k, MapNormalization mode = MapNormalization::kRow) {
  if (g.rank() != 2 || g.dim(0) != g.dim(1)) throw ShapeError("patch_grams expects a square map, got " + shape_str(g.shape()));
  if (k < 1 || g.dim(0) % k != 0)
    throw ShapeError("patch_grams: batch size " + std::to_string(g.dim(0)) + " is not divisible by k=" +
                     std::to_string(k) + "; use drop-last batching with a batch size that is a multiple of k");
  return ops::patch_gram(normalize_map(g, mode), k);
}

/// (1/|L|) * sum over layer pairs of the squared Frobenius distance between
/// gram stacks. kSum adds up all b slices; kMean divides by the b*k*k
/// entries of the stack.
template <typename T>
Tensor<T> orth_loss(std::span<const Tensor<T>> teacher_grams, std::span<const Tensor<T>> student_grams,
                    OrthReduction reduction = OrthReduction::kSum) {
  if (teacher_grams.size() != student_grams.size())
    throw ShapeError("orth_loss: " + std::to_string(teacher_grams.size()) + " teacher gram stacks vs " +
                     std::to_string(student_grams.size()) + " student stacks");
  if (teacher_grams.empty()) throw ShapeError("orth_loss: no layer pairs");
  Tensor<T> total;
  for (size_t i = 0; i < teacher_grams.size(); ++i) {
    if (teacher_grams[i].shape() != student_grams[i].shape())
      throw ShapeError("orth_loss: layer pair " + std::to_string(i) + " has teacher grams " +
                       shape_str(teacher_grams[i].shape()) + " vs student grams " + shape_str(student_grams[i].shape()));
    auto diff = ops::sub(teacher_grams[i], student_grams[i]);
    auto sq = ops::mul(diff, diff);
    auto term = reduction == OrthReduction::kSum ? ops::sum(sq) : ops::mean(sq);
    total = i == 0 ? term : ops::add(total, term);
  }
  return ops::scale(total, T(1) / static_cast<T>(teacher_grams.size()));
}

/// Mean over layer pairs of the mean squared difference between normalized
/// merged-teacher and student maps.
template <typename T>
Tensor<T> direct_map_loss(std::span<const Tensor<T>> teacher_maps, std::span<const Tensor<T>> student_maps,
                          MapNormalization mode = MapNormalization::kRow) {
  if (teacher_maps.size() != student_maps.size() || teacher_maps.empty())
    throw ShapeError("direct_map_loss: layer pair count mismatch");
  Tensor<T> total;
  for (size_t i = 0; i < teacher_maps.size(); ++i) {
    if (teacher_maps[i].shape() != student_maps[i].shape())
      throw ShapeError("direct_map_loss: layer pair " + std::to_string(i) + " map shapes differ");
    auto diff = ops::sub(normalize_map(teacher_maps[i], mode), normalize_map(student_maps[i], mode));
    auto term = ops::mean(ops::mul(diff, diff));
    total = i == 0 ? term : ops::add(total, term);
  }
  return ops::scale(total, T(1) / static_cast<T>(teacher_maps.size()));
}

// ---------------------------------------------------------- full objective

/// What the frozen teachers contribute for one batch.
template <typename T>
struct TeacherSignals {
  Tensor<T> logits1;
  Tensor<T> logits2;
  std::vector<Tensor<T>> merged_maps;  // one [b, b] map per layer pair
};

template <typename T>
struct LossParts {
  Tensor<T> total;
  T ce = 0;
  T kd = 0;
  T feature = 0;
};

/// (1 - lambda) * CE + lambda * multi-teacher KD + beta * feature term.
/// Zero-weighted terms are not evaluated. `student_maps` holds the
/// student's similarity map per layer pair.
template <typename T>
LossParts<T> total_loss(const Tensor<T>& student_logits, std::span<const int> labels,
                        const std::vector<Tensor<T>>& student_maps, const TeacherSignals<T>& teachers,
                        const DistillConfig& cfg) {
  LossParts<T> parts;
  const T lambda = static_cast<T>(cfg.lambda);
  auto ce = ops::cross_entropy(student_logits, labels);
  parts.ce = ce.item();
  Tensor<T> total = ops::scale(ce, T(1) - lambda);
  if (cfg.lambda > 0.0) {
    auto kd = multi_teacher_kd_loss(teachers.logits1, teachers.logits2, student_logits, static_cast<T>(cfg.tau),
                                    static_cast<T>(cfg.alpha));
    parts.kd = kd.item();
    total = ops::add(total, ops::scale(kd, lambda));
  }
  if (cfg.uses_feature_term()) {
    if (student_maps.size() != teachers.merged_maps.size())
      throw ShapeError("total_loss: student and teacher map counts differ");
    Tensor<T> feat;
    if (cfg.use_orth) {
      std::vector<Tensor<T>> tg, sg;
      for (size_t i = 0; i < student_maps.size(); ++i) {
        {
          NoGradGuard guard;
          tg.push_back(patch_grams(teachers.merged_maps[i], cfg.k, cfg.normalization));
        }
        sg.push_back(patch_grams(student_maps[i], cfg.k, cfg.normalization));
      }
      feat = orth_loss<T>(tg, sg, cfg.orth_reduction);
    } else {
      feat = direct_map_loss<T>(teachers.merged_maps, student_maps, cfg.normalization);
    }
    parts.feature = feat.item();
    total = ops::add(total, ops::scale(feat, static_cast<T>(cfg.beta)));
  }
  parts.total = total;
  return parts;
}

/// Runs both frozen teachers and the student on one batch and evaluates the
/// objective. Teachers run in eval mode without recording a graph.
template <typename T>
LossParts<T> total_loss(const Tensor<T>& series_batch, const Tensor<T>& image_batch, std::span<const int> labels,
                        Model<T>& teacher1, Model<T>& teacher2, Model<T>& student, const DistillConfig& cfg) {
  std::set<int> t1_layers, t2_layers, s_layers;
  for (const auto& p : cfg.layer_pairs) {
    t1_layers.insert(p.teacher1);
    t2_layers.insert(p.teacher2);
    s_layers.insert(p.student);
  }
  TeacherSignals<T> signals;
  {
    NoGradGuard guard;
    const bool tr1 = teacher1.training(), tr2 = teacher2.training();
    teacher1.set_training(false);
    teacher2.set_training(false);
    auto f1 = teacher1.forward(series_batch, t1_layers);
    auto f2 = teacher2.forward(image_batch, t2_layers);
    teacher1.set_training(tr1);
    teacher2.set_training(tr2);
    signals.logits1 = f1.logits;
    signals.logits2 = f2.logits;
    if (cfg.uses_feature_term()) {
      for (const auto& p : cfg.layer_pairs)
        signals.merged_maps.push_back(merge_maps(similarity_map(f1.activations.at(p.teacher1)),
                                                 similarity_map(f2.activations.at(p.teacher2)), static_cast<T>(cfg.alpha)));
    }
  }
  auto fs = student.forward(series_batch, cfg.uses_feature_term() ? s_layers : std::set<int>{});
  std::vector<Tensor<T>> student_maps;
  if (cfg.uses_feature_term()) {
    for (const auto& p : cfg.layer_pairs) student_maps.push_back(similarity_map(fs.activations.at(p.student)));
  }
  return total_loss(fs.logits, labels, student_maps, signals, cfg);
}

}  // namespace tpkd
