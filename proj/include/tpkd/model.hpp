#pragma once
// Reduced-scale pre-activation wide residual networks over 1-D series or
// 2-D images, plus the layer building blocks they are made of.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpkd/error.hpp"
#include "tpkd/ops.hpp"
#include "tpkd/tensor.hpp"

namespace tpkd {

enum class InputKind { kSeries1d, kImage2d };

inline std::string to_string(InputKind k) { return k == InputKind::kSeries1d ? "series_1d" : "image_2d"; }

inline InputKind input_kind_from_string(const std::string& s) {
  if (s == "series_1d") return InputKind::kSeries1d;
  if (s == "image_2d") return InputKind::kImage2d;
  throw ConfigError("unknown input_kind '" + s + "' (expected series_1d or image_2d)");
}

struct ModelSpec {
  InputKind input_kind = InputKind::kSeries1d;
  int channels_in = 3;
  int stages = 3;
  int blocks_per_stage = 2;
  std::vector<int> width{8, 16, 32};
  int classes = 4;
  bool batch_norm = true;

  void validate() const {
    if (channels_in < 1) throw ConfigError("model.channels_in must be positive");
    if (stages < 1) throw ConfigError("model.stages must be positive");
    if (blocks_per_stage < 1) throw ConfigError("model.blocks_per_stage must be positive");
    if (static_cast<int>(width.size()) != stages) throw ConfigError("model.width must list one width per stage");
    for (int w : width)
      if (w < 1) throw ConfigError("model.width entries must be positive");
    if (classes < 2) throw ConfigError("model.classes must be >= 2");
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"input_kind", to_string(s.input_kind)}, {"channels_in", s.channels_in},
                     {"stages", s.stages},                   {"blocks_per_stage", s.blocks_per_stage},
                     {"width", s.width},                     {"classes", s.classes},
                     {"batch_norm", s.batch_norm}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  if (j.contains("input_kind")) s.input_kind = input_kind_from_string(j.at("input_kind").get<std::string>());
  if (j.contains("channels_in")) s.channels_in = j.at("channels_in").get<int>();
  if (j.contains("stages")) s.stages = j.at("stages").get<int>();
  if (j.contains("blocks_per_stage")) s.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  if (j.contains("width")) s.width = j.at("width").get<std::vector<int>>();
  if (j.contains("classes")) s.classes = j.at("classes").get<int>();
  if (j.contains("batch_norm")) s.batch_norm = j.at("batch_norm").get<bool>();
}

/// Float32 array with a name, the unit of checkpoint storage.
struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

// ------------------------------------------------------------------- layers

template <typename T>
struct Conv {
  Tensor<T> weight;
  int stride = 1;
  int pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return weight.rank() == 3 ? ops::conv1d(x, weight, stride, pad) : ops::conv2d(x, weight, stride, pad);
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;

  explicit BatchNorm(int channels = 1)
      : gamma(Tensor<T>::from({channels}, std::vector<T>(channels, T(1)), true)),
        beta(Tensor<T>::zeros({channels}, true)),
        running_mean(Tensor<T>::zeros({channels})),
        running_var(Tensor<T>::from({channels}, std::vector<T>(channels, T(1)))) {}

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return ops::batch_norm(x, gamma, beta, running_mean, running_var, training);
  }
};

template <typename T>
struct Dense {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

// -------------------------------------------------------------------- model

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::map<int, Tensor<T>> activations;  // stage index -> captured activation
};

/// Pre-activation WRN: stem conv, `stages` groups of residual blocks (first
/// block of every later stage downsamples by 2), then BN-ReLU, global
/// average pooling and a dense classifier.
///
/// The activation captured for stage s is the post-activation tensor that
/// leaves the stage: the BN-ReLU applied by the first block of stage s+1,
/// or the head's BN-ReLU for the last stage.
template <typename T>
class Model {
 public:
  explicit Model(ModelSpec spec, uint64_t seed = 0) : spec_(std::move(spec)) {
    spec_.validate();
    build();
    initialize(seed);
  }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  std::vector<NamedTensor<T>>& registry() { return registry_; }
  const std::vector<NamedTensor<T>>& registry() const { return registry_; }

  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& p : registry_)
      if (p.trainable) out.push_back(p);
    return out;
  }

  void zero_grad() {
    for (auto& p : registry_) p.tensor.zero_grad();
  }

  /// Expected input shape with -1 for free dimensions.
  std::vector<int> expected_input_shape() const {
    if (spec_.input_kind == InputKind::kSeries1d) return {-1, spec_.channels_in, -1};
    return {-1, spec_.channels_in, -1, -1};
  }

  ForwardResult<T> forward(const Tensor<T>& batch, const std::set<int>& capture = {}) {
    check_input(batch);
    ForwardResult<T> result;
    Tensor<T> x = stem_(batch);
    for (int s = 0; s < spec_.stages; ++s) {
      for (int blk = 0; blk < spec_.blocks_per_stage; ++blk) {
        Block& block = blocks_[static_cast<size_t>(s) * spec_.blocks_per_stage + blk];
        Tensor<T> act = activate(block.bn1, x);
        if (blk == 0 && s > 0 && capture.count(s - 1)) result.activations[s - 1] = act;
        Tensor<T> h = block.conv1(act);
        h = activate(block.bn2, h);
        h = block.conv2(h);
        Tensor<T> shortcut = block.projection ? (*block.projection)(act) : x;
        x = ops::add(h, shortcut);
      }
    }
    Tensor<T> act = activate(head_bn_, x);
    if (capture.count(spec_.stages - 1)) result.activations[spec_.stages - 1] = act;
    result.logits = fc_(ops::global_avg_pool(act));
    return result;
  }

  /// Checkpoint view of every parameter and buffer, in registry order.
  std::vector<NamedArray> state() const {
    std::vector<NamedArray> out;
    out.reserve(registry_.size());
    for (const auto& p : registry_) {
      NamedArray a{p.name, p.tensor.shape(), {}};
      a.values.reserve(p.tensor.numel());
      for (T v : p.tensor.data()) a.values.push_back(static_cast<float>(v));
      out.push_back(std::move(a));
    }
    return out;
  }

  /// Replaces all parameters and buffers. Every registry entry must be
  /// present with an identical shape; otherwise the differing entries are
  /// listed in the error.
  void load_state(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    std::ostringstream diffs;
    for (const auto& p : registry_) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) {
        diffs << "\n  " << p.name << ": missing (expected " << shape_str(p.tensor.shape()) << ")";
      } else if (it->second->shape != p.tensor.shape()) {
        diffs << "\n  " << p.name << ": checkpoint " << shape_str(it->second->shape) << " vs model "
              << shape_str(p.tensor.shape());
      }
    }
    if (arrays.size() != registry_.size()) {
      std::set<std::string> known;
      for (const auto& p : registry_) known.insert(p.name);
      for (const auto& a : arrays)
        if (!known.count(a.name)) diffs << "\n  " << a.name << ": not part of this architecture";
    }
    if (!diffs.str().empty()) throw ShapeError("checkpoint does not match model architecture:" + diffs.str());
    for (auto& p : registry_) {
      const auto& src = by_name.at(p.name)->values;
      auto dst = p.tensor.data();
      for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& p : registry_)
      if (p.trainable) n += p.tensor.numel();
    return n;
  }

 private:
  struct Block {
    BatchNorm<T> bn1, bn2;
    Conv<T> conv1, conv2;
    std::optional<Conv<T>> projection;
  };

  Tensor<T> activate(BatchNorm<T>& bn, const Tensor<T>& x) {
    return spec_.batch_norm ? ops::relu(bn(x, training_)) : ops::relu(x);
  }

  void check_input(const Tensor<T>& batch) const {
    auto expected = expected_input_shape();
    bool ok = batch.rank() == static_cast<int>(expected.size()) && batch.dim(1) == spec_.channels_in;
    if (!ok) {
      std::ostringstream os;
      os << "model input: expected shape " << shape_str(expected) << " (-1 = any), got " << shape_str(batch.shape());
      throw ShapeError(os.str());
    }
  }

  Tensor<T> conv_weight(int out, int in, int k) const {
    if (spec_.input_kind == InputKind::kSeries1d) return Tensor<T>::zeros({out, in, k}, true);
    return Tensor<T>::zeros({out, in, k, k}, true);
  }

  void add_bn(const std::string& prefix, BatchNorm<T>& bn) {
    registry_.push_back({prefix + ".gamma", bn.gamma, true});
    registry_.push_back({prefix + ".beta", bn.beta, true});
    registry_.push_back({prefix + ".running_mean", bn.running_mean, false});
    registry_.push_back({prefix + ".running_var", bn.running_var, false});
  }

  void build() {
    stem_ = Conv<T>{conv_weight(spec_.width[0], spec_.channels_in, 3), 1, 1};
    registry_.push_back({"stem.weight", stem_.weight, true});
    int in = spec_.width[0];
    for (int s = 0; s < spec_.stages; ++s) {
      const int out = spec_.width[s];
      for (int blk = 0; blk < spec_.blocks_per_stage; ++blk) {
        const int stride = (blk == 0 && s > 0) ? 2 : 1;
        const int cin = blk == 0 ? in : out;
        Block b{BatchNorm<T>(cin), BatchNorm<T>(out), Conv<T>{conv_weight(out, cin, 3), stride, 1},
                Conv<T>{conv_weight(out, out, 3), 1, 1}, std::nullopt};
        if (cin != out || stride != 1) b.projection = Conv<T>{conv_weight(out, cin, 1), stride, 0};
        blocks_.push_back(std::move(b));
      }
      in = out;
    }
    // Registry after blocks_ stops reallocating so handles stay shared.
    for (int s = 0; s < spec_.stages; ++s) {
      for (int blk = 0; blk < spec_.blocks_per_stage; ++blk) {
        Block& b = blocks_[static_cast<size_t>(s) * spec_.blocks_per_stage + blk];
        const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(blk);
        if (spec_.batch_norm) add_bn(p + ".bn1", b.bn1);
        registry_.push_back({p + ".conv1.weight", b.conv1.weight, true});
        if (spec_.batch_norm) add_bn(p + ".bn2", b.bn2);
        registry_.push_back({p + ".conv2.weight", b.conv2.weight, true});
        if (b.projection) registry_.push_back({p + ".shortcut.weight", b.projection->weight, true});
      }
    }
    head_bn_ = BatchNorm<T>(in);
    if (spec_.batch_norm) add_bn("head.bn", head_bn_);
    fc_ = Dense<T>{Tensor<T>::zeros({spec_.classes, in}, true), Tensor<T>::zeros({spec_.classes}, true)};
    registry_.push_back({"fc.weight", fc_.weight, true});
    registry_.push_back({"fc.bias", fc_.bias, true});
  }

  // He-normal convolutions, uniform(+-1/sqrt(fan_in)) classifier, zero bias.
  void initialize(uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : registry_) {
      if (p.name.ends_with("conv1.weight") || p.name.ends_with("conv2.weight") ||
          p.name.ends_with("shortcut.weight") || p.name == "stem.weight") {
        const auto& sh = p.tensor.shape();
        size_t fan_in = p.tensor.numel() / static_cast<size_t>(sh[0]);
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : p.tensor.data()) v = static_cast<T>(nd(rng));
      } else if (p.name == "fc.weight") {
        double bound = 1.0 / std::sqrt(static_cast<double>(p.tensor.dim(1)));
        std::uniform_real_distribution<double> ud(-bound, bound);
        for (auto& v : p.tensor.data()) v = static_cast<T>(ud(rng));
      }
    }
  }

  ModelSpec spec_;
  bool training_ = false;
  Conv<T> stem_;
  std::vector<Block> blocks_;
  BatchNorm<T> head_bn_;
  Dense<T> fc_;
  std::vector<NamedTensor<T>> registry_;
};

}  // namespace tpkd
