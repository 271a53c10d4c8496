#pragma once
// Synthetic activity-style series, dataset containers, CSV import and
// test-time corruption.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpkd/container.hpp"
#include "tpkd/error.hpp"
#include "tpkd/topology.hpp"

namespace tpkd {

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError(FormatError::Kind::kMalformedHeader, "unknown split '" + s + "'");
}

struct DatasetMeta {
  int channels = 0;
  int window_length = 0;
  double sample_rate_hz = 100.0;
  uint64_t generator_seed = 0;
  bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
  std::vector<SignalWindow> windows;  // every window carries a label
  int classes = 0;
  Split split = Split::kTrain;
  DatasetMeta meta;

  size_t size() const { return windows.size(); }
  bool operator==(const Dataset&) const = default;
};

/// Dense labeled samples of identical shape; the input side of training.
struct LabeledArray {
  std::vector<int> sample_shape;
  std::vector<float> values;
  std::vector<int> labels;
  int classes = 0;

  size_t size() const { return labels.size(); }
  size_t sample_numel() const { return shape_numel(sample_shape); }
  bool operator==(const LabeledArray&) const = default;
};

inline LabeledArray to_array(const Dataset& ds) {
  LabeledArray a;
  a.sample_shape = {ds.meta.channels, ds.meta.window_length};
  a.classes = ds.classes;
  a.values.reserve(ds.size() * a.sample_numel());
  for (const auto& w : ds.windows) {
    a.values.insert(a.values.end(), w.values.begin(), w.values.end());
    a.labels.push_back(w.label.value_or(0));
  }
  return a;
}

inline void validate_dataset(const Dataset& ds) {
  for (size_t i = 0; i < ds.windows.size(); ++i) {
    const auto& w = ds.windows[i];
    if (w.channels != ds.meta.channels || w.length != ds.meta.window_length)
      throw ShapeError("window " + std::to_string(i) + " shape differs from dataset metadata");
    if (!w.label || *w.label < 0 || *w.label >= ds.classes)
      throw InputError("window " + std::to_string(i) + " has a missing or out-of-range label");
  }
}

// ---------------------------------------------------------------- generator

struct SyntheticSpec {
  int classes = 4;
  int samples_per_class = 200;
  int channels = 3;
  int length = 128;
  uint64_t seed = 0;
  double sample_rate_hz = 100.0;
  double sinusoid_amplitude = 0.3;
  double bump_amplitude = 1.5;
  double noise_std = 0.1;
};

/// Class j: sinusoid with j/2 + 1 cycles per window and random phase, plus
/// j Gaussian bumps (width length/40) at random positions, plus white noise.
/// Channels are drawn independently; sample i has label i % classes.
inline Dataset gen_synthetic(const SyntheticSpec& spec, Split split = Split::kTrain) {
  if (spec.classes < 2) throw ConfigError("data.classes must be >= 2");
  if (spec.length < 32) throw ConfigError("data.length must be >= 32");
  if (spec.channels < 1) throw ConfigError("data.channels must be positive");
  if (spec.samples_per_class < 0) throw ConfigError("data.samples_per_class must be non-negative");

  Dataset ds;
  ds.classes = spec.classes;
  ds.split = split;
  ds.meta = {spec.channels, spec.length, spec.sample_rate_hz, spec.seed};

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> position(0.0, static_cast<double>(spec.length));
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  const double width = spec.length / 40.0;

  const int total = spec.classes * spec.samples_per_class;
  ds.windows.reserve(total);
  for (int i = 0; i < total; ++i) {
    const int j = i % spec.classes;
    const double freq = 1.0 + j / 2.0;
    SignalWindow w;
    w.channels = spec.channels;
    w.length = spec.length;
    w.sample_rate_hz = spec.sample_rate_hz;
    w.label = j;
    w.values.resize(static_cast<size_t>(spec.channels) * spec.length);
    for (int c = 0; c < spec.channels; ++c) {
      const double ph = phase(rng);
      std::vector<double> centers(j);
      for (auto& m : centers) m = position(rng);
      for (int t = 0; t < spec.length; ++t) {
        double v = spec.sinusoid_amplitude * std::sin(2.0 * std::numbers::pi * freq * t / spec.length + ph);
        for (double m : centers) v += spec.bump_amplitude * std::exp(-(t - m) * (t - m) / (2.0 * width * width));
        v += noise(rng);
        w.at(c, t) = static_cast<float>(v);
      }
    }
    ds.windows.push_back(std::move(w));
  }
  return ds;
}

// ---------------------------------------------------------------- corruption

struct CorruptionLevel {
  double kappa_r = 0.0;  // fraction of the window zeroed
  double sigma_g = 0.0;  // additive Gaussian noise std

  void validate() const {
    if (!(kappa_r >= 0.0 && kappa_r < 1.0)) throw ConfigError("corruption kappa_r must lie in [0, 1)");
    if (!(sigma_g >= 0.0)) throw ConfigError("corruption sigma_g must be non-negative");
  }

  static CorruptionLevel level(int n) {
    switch (n) {
      case 0: return {0.0, 0.0};
      case 1: return {0.15, 0.06};
      case 2: return {0.22, 0.09};
      case 3: return {0.30, 0.12};
      default: throw ConfigError("corruption level must be 0..3");
    }
  }
};

inline int missing_length(const CorruptionLevel& level, int length) {
  return static_cast<int>(std::lround(level.kappa_r * length));
}

/// Zeroes one contiguous segment (all channels) of every window, then adds
/// i.i.d. Gaussian noise to every sample. Noise also lands in the zeroed
/// segment.
inline Dataset corrupt(const Dataset& ds, const CorruptionLevel& level, uint64_t seed) {
  level.validate();
  Dataset out = ds;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, level.sigma_g > 0.0 ? level.sigma_g : 1.0);
  for (auto& w : out.windows) {
    const int seg = missing_length(level, w.length);
    if (seg > 0) {
      std::uniform_int_distribution<int> start_dist(0, w.length - seg);
      const int start = start_dist(rng);
      for (int c = 0; c < w.channels; ++c)
        for (int t = start; t < start + seg; ++t) w.at(c, t) = 0.0f;
    }
    if (level.sigma_g > 0.0) {
      for (auto& v : w.values) v = static_cast<float>(v + noise(rng));
    }
  }
  return out;
}

// ---------------------------------------------------------------------- I/O

namespace detail {

inline Container labeled_container(const std::string& kind, const std::vector<int>& sample_shape,
                                   const std::vector<float>& values, const std::vector<int>& labels,
                                   nlohmann::json extra) {
  Container c;
  c.header = std::move(extra);
  c.header["format"] = kDataFormat;
  c.header["kind"] = kind;
  c.header["count"] = labels.size();
  c.header["sample_shape"] = sample_shape;
  c.header["values"] = {{"dtype", "float32-le"}, {"offset", 0}, {"nbytes", values.size() * 4}};
  append_f32(c.blob, values);
  c.header["labels"] = {{"dtype", "int32-le"}, {"offset", c.blob.size()}, {"nbytes", labels.size() * 4}};
  for (int l : labels) append_le<int32_t>(c.blob, l);
  return c;
}

struct DecodedArrays {
  nlohmann::json header;
  std::vector<int> sample_shape;
  std::vector<float> values;
  std::vector<int> labels;
};

inline DecodedArrays decode_labeled(const std::vector<uint8_t>& bytes, const std::string& kind) {
  using K = FormatError::Kind;
  Container c = decode_container(bytes, kDataFormat);
  DecodedArrays d;
  uint64_t count = 0, voff = 0, vbytes = 0, loff = 0, lbytes = 0;
  try {
    if (c.header.at("kind").get<std::string>() != kind)
      throw FormatError(K::kMalformedHeader, "expected a '" + kind + "' dataset, found '" +
                                                 c.header.at("kind").get<std::string>() + "'");
    count = c.header.at("count").get<uint64_t>();
    d.sample_shape = c.header.at("sample_shape").get<std::vector<int>>();
    voff = c.header.at("values").at("offset").get<uint64_t>();
    vbytes = c.header.at("values").at("nbytes").get<uint64_t>();
    loff = c.header.at("labels").at("offset").get<uint64_t>();
    lbytes = c.header.at("labels").at("nbytes").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::kMalformedHeader, std::string("malformed dataset header: ") + e.what());
  }
  for (int s : d.sample_shape)
    if (s <= 0) throw FormatError(K::kShapeMismatch, "dataset sample_shape must be positive");
  const uint64_t n_values = count * shape_numel(d.sample_shape);
  if (vbytes != n_values * 4 || lbytes != count * 4 || voff + vbytes > c.blob.size() || loff + lbytes > c.blob.size() ||
      vbytes + lbytes != c.blob.size())
    throw FormatError(K::kShapeMismatch, "dataset header disagrees with blob length");
  d.values = read_f32(c.blob, voff, n_values);
  d.labels.resize(count);
  for (uint64_t i = 0; i < count; ++i) d.labels[i] = read_le<int32_t>(c.blob.data() + loff + 4 * i);
  d.header = std::move(c.header);
  return d;
}

}  // namespace detail

inline std::vector<uint8_t> encode_dataset(const Dataset& ds) {
  validate_dataset(ds);
  LabeledArray a = to_array(ds);
  nlohmann::json extra{{"classes", ds.classes},
                       {"split", to_string(ds.split)},
                       {"sample_rate_hz", ds.meta.sample_rate_hz},
                       {"generator_seed", ds.meta.generator_seed}};
  return encode_container(detail::labeled_container("series", a.sample_shape, a.values, a.labels, std::move(extra)));
}

inline Dataset decode_dataset(const std::vector<uint8_t>& bytes) {
  auto d = detail::decode_labeled(bytes, "series");
  if (d.sample_shape.size() != 2) throw FormatError(FormatError::Kind::kShapeMismatch, "series sample_shape must be [channels, length]");
  Dataset ds;
  try {
    ds.classes = d.header.at("classes").get<int>();
    ds.split = split_from_string(d.header.at("split").get<std::string>());
    ds.meta = {d.sample_shape[0], d.sample_shape[1], d.header.at("sample_rate_hz").get<double>(),
               d.header.at("generator_seed").get<uint64_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, std::string("malformed dataset header: ") + e.what());
  }
  const size_t per = shape_numel(d.sample_shape);
  ds.windows.reserve(d.labels.size());
  for (size_t i = 0; i < d.labels.size(); ++i) {
    SignalWindow w;
    w.channels = ds.meta.channels;
    w.length = ds.meta.window_length;
    w.sample_rate_hz = ds.meta.sample_rate_hz;
    w.label = d.labels[i];
    w.values.assign(d.values.begin() + static_cast<std::ptrdiff_t>(i * per),
                    d.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    ds.windows.push_back(std::move(w));
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) { write_file(path, encode_dataset(ds)); }

inline Dataset load_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("dataset not found: " + path.string());
  return decode_dataset(read_file(path));
}

/// Persistence images aligned index-for-index with a series dataset.
struct ImageDataset {
  LabeledArray images;  // sample_shape = [channels, resolution, resolution]
  Split split = Split::kTrain;
  bool operator==(const ImageDataset&) const = default;
};

inline ImageDataset images_from(const Dataset& ds, const std::vector<PersistenceImage>& pis, int resolution) {
  ImageDataset out;
  out.split = ds.split;
  out.images.classes = ds.classes;
  out.images.sample_shape = {ds.meta.channels, resolution, resolution};
  out.images.values.reserve(pis.size() * out.images.sample_numel());
  for (size_t i = 0; i < pis.size(); ++i) {
    for (double v : pis[i].pixels) out.images.values.push_back(static_cast<float>(v));
    out.images.labels.push_back(ds.windows[i].label.value_or(0));
  }
  return out;
}

inline std::vector<uint8_t> encode_images(const ImageDataset& ds, nlohmann::json extra = nlohmann::json::object()) {
  extra["classes"] = ds.images.classes;
  extra["split"] = to_string(ds.split);
  return encode_container(detail::labeled_container("image", ds.images.sample_shape, ds.images.values,
                                                    ds.images.labels, std::move(extra)));
}

inline ImageDataset decode_images(const std::vector<uint8_t>& bytes) {
  auto d = detail::decode_labeled(bytes, "image");
  ImageDataset ds;
  ds.images.sample_shape = d.sample_shape;
  ds.images.values = std::move(d.values);
  ds.images.labels = std::move(d.labels);
  try {
    ds.images.classes = d.header.at("classes").get<int>();
    ds.split = split_from_string(d.header.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, std::string("malformed image header: ") + e.what());
  }
  return ds;
}

inline ImageDataset load_images(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("image dataset not found: " + path.string());
  return decode_images(read_file(path));
}

/// One row per window: label, then channel-major values.
inline Dataset load_csv(const std::filesystem::path& path, int channels, int length, int classes = 0,
                        Split split = Split::kTrain, double sample_rate_hz = 100.0) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot open CSV '" + path.string() + "'");
  Dataset ds;
  ds.split = split;
  ds.meta = {channels, length, sample_rate_hz, 0};
  std::string line;
  int row = 0, max_label = -1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> cells;
    while (std::getline(ss, cell, ',')) {
      try {
        size_t used = 0;
        cells.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw InputError("CSV row " + std::to_string(row) + ": cannot parse '" + cell + "'");
      }
      if (!std::isfinite(cells.back()))
        throw InputError("CSV row " + std::to_string(row) + ": non-finite value '" + cell + "'");
    }
    if (cells.size() != 1 + static_cast<size_t>(channels) * length)
      throw ShapeError("CSV row " + std::to_string(row) + ": expected " + std::to_string(1 + channels * length) +
                       " values, got " + std::to_string(cells.size()));
    SignalWindow w;
    w.channels = channels;
    w.length = length;
    w.sample_rate_hz = sample_rate_hz;
    w.label = static_cast<int>(cells[0]);
    if (*w.label < 0 || cells[0] != static_cast<double>(*w.label))
      throw InputError("CSV row " + std::to_string(row) + ": label must be a non-negative integer");
    max_label = std::max(max_label, *w.label);
    for (size_t i = 1; i < cells.size(); ++i) w.values.push_back(static_cast<float>(cells[i]));
    ds.windows.push_back(std::move(w));
  }
  ds.classes = classes > 0 ? classes : max_label + 1;
  validate_dataset(ds);
  return ds;
}

}  // namespace tpkd
