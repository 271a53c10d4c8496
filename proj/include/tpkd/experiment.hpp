#pragma once
// Config-driven experiment pipeline: data generation, persistence-image
// extraction, teacher and student training, evaluation, latency benchmark
// and representation analysis. Every phase records its inputs and outputs
// in a run manifest so unchanged phases can be skipped.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpkd/container.hpp"
#include "tpkd/data.hpp"
#include "tpkd/distill.hpp"
#include "tpkd/error.hpp"
#include "tpkd/metrics.hpp"
#include "tpkd/model.hpp"
#include "tpkd/optim.hpp"
#include "tpkd/topology.hpp"
#include "tpkd/train.hpp"

namespace tpkd {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ hashing

/// Hex SHA-1 of "blob <size>\0<bytes>", the object id git assigns a file.
inline std::string git_blob_hash(std::span<const uint8_t> bytes) {
  const std::string head = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) && EVP_DigestUpdate(ctx, head.data(), head.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) && EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string git_blob_hash(const std::string& text) {
  return git_blob_hash(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

inline std::string file_hash(const fs::path& path) { return git_blob_hash(read_file(path)); }

inline void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

// ------------------------------------------------------------------- config

inline void to_json(json& j, const PiConfig& c) {
  j = json{{"resolution", c.resolution},
           {"gaussian_sigma", c.gaussian_sigma},
           {"birth_range", {c.birth_range.lo, c.birth_range.hi}},
           {"persistence_range", {c.persistence_range.lo, c.persistence_range.hi}},
           {"weighting", c.weighting == Weighting::kLinear ? "linear" : "constant"},
           {"essential_policy", c.essential_policy == EssentialPolicy::kDrop ? "drop" : "cap_at_max"}};
}

inline void from_json(const json& j, PiConfig& c) {
  if (j.contains("resolution")) c.resolution = j.at("resolution").get<int>();
  if (j.contains("gaussian_sigma")) c.gaussian_sigma = j.at("gaussian_sigma").get<double>();
  if (j.contains("birth_range")) c.birth_range = {j.at("birth_range").at(0).get<double>(), j.at("birth_range").at(1).get<double>()};
  if (j.contains("persistence_range"))
    c.persistence_range = {j.at("persistence_range").at(0).get<double>(), j.at("persistence_range").at(1).get<double>()};
  if (j.contains("weighting")) {
    auto w = j.at("weighting").get<std::string>();
    if (w != "linear" && w != "constant") throw ConfigError("pi.weighting must be 'linear' or 'constant'");
    c.weighting = w == "linear" ? Weighting::kLinear : Weighting::kConstant;
  }
  if (j.contains("essential_policy")) {
    auto e = j.at("essential_policy").get<std::string>();
    if (e != "drop" && e != "cap_at_max") throw ConfigError("pi.essential_policy must be 'drop' or 'cap_at_max'");
    c.essential_policy = e == "drop" ? EssentialPolicy::kDrop : EssentialPolicy::kCapAtMax;
  }
}

struct DataConfig {
  SyntheticSpec synthetic;  // train split; val/test reuse it with their own counts and seeds
  int val_per_class = 50;
  int test_per_class = 100;
  // Optional user data, one CSV per split (label, then channel-major values).
  // When set, the split is loaded instead of generated.
  std::string csv_train, csv_val, csv_test;
};

inline void to_json(json& j, const DataConfig& d) {
  const auto& s = d.synthetic;
  j = json{{"classes", s.classes},
           {"samples_per_class", s.samples_per_class},
           {"val_per_class", d.val_per_class},
           {"test_per_class", d.test_per_class},
           {"channels", s.channels},
           {"length", s.length},
           {"seed", s.seed},
           {"sample_rate_hz", s.sample_rate_hz},
           {"sinusoid_amplitude", s.sinusoid_amplitude},
           {"bump_amplitude", s.bump_amplitude},
           {"noise_std", s.noise_std},
           {"csv", {{"train", d.csv_train}, {"val", d.csv_val}, {"test", d.csv_test}}}};
}

inline void from_json(const json& j, DataConfig& d) {
  auto& s = d.synthetic;
  if (j.contains("classes")) s.classes = j.at("classes").get<int>();
  if (j.contains("samples_per_class")) s.samples_per_class = j.at("samples_per_class").get<int>();
  if (j.contains("val_per_class")) d.val_per_class = j.at("val_per_class").get<int>();
  if (j.contains("test_per_class")) d.test_per_class = j.at("test_per_class").get<int>();
  if (j.contains("channels")) s.channels = j.at("channels").get<int>();
  if (j.contains("length")) s.length = j.at("length").get<int>();
  if (j.contains("seed")) s.seed = j.at("seed").get<uint64_t>();
  if (j.contains("sample_rate_hz")) s.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  if (j.contains("sinusoid_amplitude")) s.sinusoid_amplitude = j.at("sinusoid_amplitude").get<double>();
  if (j.contains("bump_amplitude")) s.bump_amplitude = j.at("bump_amplitude").get<double>();
  if (j.contains("noise_std")) s.noise_std = j.at("noise_std").get<double>();
  if (j.contains("csv")) {
    const auto& c = j.at("csv");
    if (c.contains("train")) d.csv_train = c.at("train").get<std::string>();
    if (c.contains("val")) d.csv_val = c.at("val").get<std::string>();
    if (c.contains("test")) d.csv_test = c.at("test").get<std::string>();
  }
}

struct ExperimentConfig {
  std::string output_dir = "runs/default";
  DataConfig data;
  PiConfig pi;
  ModelSpec teacher1;
  ModelSpec teacher2;
  ModelSpec student;
  DistillConfig distill;
  int epochs = 40;
  // Unset schedules resolve from `epochs` (series, student) or to the fixed
  // image-branch milestones.
  std::optional<LrSchedule> series_schedule, image_schedule, student_schedule;
  int batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  uint64_t corruption_seed = 7;
  int bench_samples = 200;  // 0 = whole test split
  int bench_warmup = 5;
  int analyze_batch = 64;

  LrSchedule series() const { return series_schedule.value_or(LrSchedule::series(epochs)); }
  LrSchedule image() const { return image_schedule.value_or(LrSchedule::image()); }
  LrSchedule student_lr() const { return student_schedule.value_or(LrSchedule::series(epochs)); }

  TrainOptions train_options() const {
    TrainOptions o;
    o.batch_size = batch_size;
    o.momentum = momentum;
    o.weight_decay = weight_decay;
    return o;
  }

  /// Copies the data-derived fields (class count, input channels, input
  /// kind) into the three model specs.
  void sync_models() {
    for (ModelSpec* m : {&teacher1, &teacher2, &student}) {
      m->classes = data.synthetic.classes;
      m->channels_in = data.synthetic.channels;
      m->input_kind = InputKind::kSeries1d;
    }
    teacher2.input_kind = InputKind::kImage2d;
  }

  void validate() const {
    const auto& s = data.synthetic;
    if (s.classes < 2) throw ConfigError("data.classes must be >= 2");
    if (s.channels < 1) throw ConfigError("data.channels must be positive");
    if (s.length < 32) throw ConfigError("data.length must be >= 32");
    if (s.samples_per_class < 0 || data.val_per_class < 0 || data.test_per_class < 0)
      throw ConfigError("per-class sample counts must be non-negative");
    pi.validate();
    teacher1.validate();
    teacher2.validate();
    student.validate();
    distill.validate();
    series().validate();
    image().validate();
    student_lr().validate();
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be non-negative");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (bench_samples < 0 || bench_warmup < 0) throw ConfigError("bench counts must be non-negative");
    if (analyze_batch < 2) throw ConfigError("analyze.batch must be >= 2");
  }
};

/// The desk-scale defaults.
inline ExperimentConfig default_config() {
  ExperimentConfig c;
  c.teacher1.width = {16, 32, 48};
  c.teacher2.width = {8, 16, 32};
  c.student.width = {8, 16, 32};
  // synthetic windows span roughly [-2, 2]; a +-10 grid would put every pair in one or two cells
  c.pi = PiConfig::with_birth_range(-3.0, 3.0, 0.25);
  c.sync_models();
  return c;
}

inline void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"output_dir", c.output_dir},
           {"data", c.data},
           {"pi", c.pi},
           {"teacher1", c.teacher1},
           {"teacher2", c.teacher2},
           {"student", c.student},
           {"distill", c.distill},
           {"epochs", c.epochs},
           {"schedules", {{"series", c.series()}, {"image", c.image()}, {"student", c.student_lr()}}},
           {"train", {{"batch_size", c.batch_size}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}}},
           {"seeds", c.seeds},
           {"eval", {{"corruption_seed", c.corruption_seed}}},
           {"bench", {{"samples", c.bench_samples}, {"warmup", c.bench_warmup}}},
           {"analyze", {{"batch", c.analyze_batch}}}};
}

namespace detail {

inline void reject_unknown_keys(const json& given, const json& known, const std::string& prefix) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    const auto& k = known.at(it.key());
    // free-form objects (model specs) are checked by their own parsers
    if (it->is_object() && k.is_object() && !k.empty()) reject_unknown_keys(*it, k, path);
  }
}

/// Parses "a.b.c=value"; the value is read as JSON when possible and as a
/// string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  std::string pointer;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    pointer += "/" + part;
  }
  doc[json::json_pointer(pointer)] = value;
}

}  // namespace detail

/// Builds a config from defaults, an optional JSON document, dotted-path
/// overrides and the TPKD_OUT environment variable, in that order.
inline ExperimentConfig make_config(const json& doc = json::object(), const std::vector<std::string>& overrides = {}) {
  if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");
  json merged = doc;
  for (const auto& o : overrides) detail::apply_override(merged, o);
  const json known = json(default_config());
  detail::reject_unknown_keys(merged, known, "");

  ExperimentConfig c = default_config();
  try {
    if (merged.contains("output_dir")) c.output_dir = merged.at("output_dir").get<std::string>();
    if (merged.contains("data")) from_json(merged.at("data"), c.data);
    if (merged.contains("pi")) from_json(merged.at("pi"), c.pi);
    if (merged.contains("teacher1")) from_json(merged.at("teacher1"), c.teacher1);
    if (merged.contains("teacher2")) from_json(merged.at("teacher2"), c.teacher2);
    if (merged.contains("student")) from_json(merged.at("student"), c.student);
    if (merged.contains("distill")) from_json(merged.at("distill"), c.distill);
    if (merged.contains("epochs")) c.epochs = merged.at("epochs").get<int>();
    if (merged.contains("schedules")) {
      const auto& s = merged.at("schedules");
      auto read = [&](const char* key, std::optional<LrSchedule>& out) {
        if (!s.contains(key)) return;
        LrSchedule sch;
        from_json(s.at(key), sch);
        out = sch;
      };
      read("series", c.series_schedule);
      read("image", c.image_schedule);
      read("student", c.student_schedule);
    }
    if (merged.contains("train")) {
      const auto& t = merged.at("train");
      if (t.contains("batch_size")) c.batch_size = t.at("batch_size").get<int>();
      if (t.contains("momentum")) c.momentum = t.at("momentum").get<double>();
      if (t.contains("weight_decay")) c.weight_decay = t.at("weight_decay").get<double>();
    }
    if (merged.contains("seeds")) c.seeds = merged.at("seeds").get<std::vector<uint64_t>>();
    if (merged.contains("eval") && merged.at("eval").contains("corruption_seed"))
      c.corruption_seed = merged.at("eval").at("corruption_seed").get<uint64_t>();
    if (merged.contains("bench")) {
      const auto& b = merged.at("bench");
      if (b.contains("samples")) c.bench_samples = b.at("samples").get<int>();
      if (b.contains("warmup")) c.bench_warmup = b.at("warmup").get<int>();
    }
    if (merged.contains("analyze") && merged.at("analyze").contains("batch"))
      c.analyze_batch = merged.at("analyze").at("batch").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  if (const char* out = std::getenv("TPKD_OUT"); out && *out) c.output_dir = out;
  c.sync_models();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  if (!fs::exists(path)) throw MissingArtifact("config file not found: " + path.string());
  std::ifstream in(path);
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file '" + path.string() + "' is not valid JSON");
  return make_config(doc, overrides);
}

// -------------------------------------------------------------------- roles

enum class Role { kTeacher1, kTeacher2, kScratch, kStudentKd, kStudentBase, kStudentAnn, kStudentTpkd, kStudentTpkdNoorth };

inline const std::vector<Role>& all_roles() {
  static const std::vector<Role> roles{Role::kTeacher1,     Role::kTeacher2,    Role::kScratch,
                                       Role::kStudentKd,    Role::kStudentBase, Role::kStudentAnn,
                                       Role::kStudentTpkdNoorth, Role::kStudentTpkd};
  return roles;
}

inline std::string to_string(Role r) {
  switch (r) {
    case Role::kTeacher1: return "teacher1";
    case Role::kTeacher2: return "teacher2";
    case Role::kScratch: return "scratch";
    case Role::kStudentKd: return "student-kd";
    case Role::kStudentBase: return "student-base";
    case Role::kStudentAnn: return "student-ann";
    case Role::kStudentTpkd: return "student-tpkd";
    case Role::kStudentTpkdNoorth: return "student-tpkd-noorth";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  for (Role r : all_roles())
    if (to_string(r) == s) return r;
  throw ConfigError("unknown role '" + s + "'");
}

inline bool is_distilled(Role r) { return r != Role::kTeacher1 && r != Role::kTeacher2 && r != Role::kScratch; }

/// Loss configuration of a student role, derived from the configured
/// distillation settings.
inline DistillConfig role_distill(const ExperimentConfig& c, Role r) {
  DistillConfig d = c.distill;
  switch (r) {
    case Role::kStudentKd:
      d.alpha = 1.0;
      d.use_orth = d.direct_map_mse = false;
      d.anneal = false;
      break;
    case Role::kStudentBase:
      d.use_orth = d.direct_map_mse = false;
      d.anneal = false;
      break;
    case Role::kStudentAnn:
      d.use_orth = d.direct_map_mse = false;
      d.anneal = true;
      break;
    case Role::kStudentTpkdNoorth:
      d.use_orth = false;
      d.direct_map_mse = true;
      break;
    case Role::kStudentTpkd:
      d.use_orth = true;
      d.direct_map_mse = false;
      break;
    default: break;
  }
  return d;
}

// -------------------------------------------------------------------- paths

struct Layout {
  fs::path root;

  fs::path series(Split s) const { return root / "data" / (to_string(s) + ".tpkd"); }
  fs::path images(Split s) const { return root / "data" / (to_string(s) + "_pi.tpkd"); }
  fs::path role_dir(uint64_t seed, Role r) const { return root / ("seed-" + std::to_string(seed)) / to_string(r); }
  fs::path best(uint64_t seed, Role r) const { return role_dir(seed, r) / "best.ckpt"; }
  fs::path final_ckpt(uint64_t seed, Role r) const { return role_dir(seed, r) / "final.ckpt"; }
  fs::path history(uint64_t seed, Role r) const { return role_dir(seed, r) / "history.csv"; }
  fs::path eval(uint64_t seed, Role r, int level) const {
    return role_dir(seed, r) / ("eval-L" + std::to_string(level) + ".json");
  }
  fs::path eval_summary() const { return root / "eval_summary.csv"; }
  fs::path bench() const { return root / "bench.csv"; }
  fs::path analysis(uint64_t seed) const { return root / "analysis" / ("seed-" + std::to_string(seed)); }
  fs::path manifest() const { return root / "manifest.json"; }
};

// ----------------------------------------------------------------- manifest

/// Record of every phase that ran: the hash of the config slice it
/// depends on, content hashes of its inputs and outputs, and timings.
class RunManifest {
 public:
  explicit RunManifest(fs::path path) : path_(std::move(path)) {
    if (fs::exists(path_)) {
      std::ifstream in(path_);
      doc_ = json::parse(in, nullptr, false);
      if (doc_.is_discarded() || !doc_.is_object()) doc_ = json::object();
    }
    if (!doc_.contains("phases")) doc_["phases"] = json::object();
  }

  const json& doc() const { return doc_; }
  const fs::path& path() const { return path_; }

  void set_config_hash(const std::string& h) { doc_["config_hash"] = h; }

  /// True when `phase` ran before with the same config slice and input
  /// hashes and every output it listed still has its recorded hash.
  bool up_to_date(const std::string& phase, const std::string& config_hash,
                  const std::map<std::string, std::string>& inputs) const {
    if (!doc_["phases"].contains(phase)) return false;
    const auto& p = doc_["phases"][phase];
    if (p.value("config_hash", "") != config_hash) return false;
    if (p.value("inputs", json::object()) != json(inputs)) return false;
    const json outputs = p.value("outputs", json::object());
    for (auto& [file, hash] : outputs.items()) {
      if (!fs::exists(path_.parent_path() / file)) return false;
      if (file_hash(path_.parent_path() / file) != hash.get<std::string>()) return false;
    }
    return true;
  }

  void record(const std::string& phase, const std::string& config_hash, const std::map<std::string, std::string>& inputs,
              const std::vector<fs::path>& outputs, double seconds, json extra = json::object()) {
    json p{{"config_hash", config_hash}, {"inputs", inputs}, {"seconds", seconds}, {"outputs", json::object()}};
    for (const auto& f : outputs) p["outputs"][relative(f)] = file_hash(f);
    for (auto& [k, v] : extra.items()) p[k] = v;
    doc_["phases"][phase] = std::move(p);
    save();
  }

  std::string relative(const fs::path& f) const {
    return fs::relative(f, path_.parent_path()).generic_string();
  }

  void save() const { write_text(path_, doc_.dump(2) + "\n"); }

 private:
  fs::path path_;
  json doc_;
};

// ------------------------------------------------------------------ context

/// Shared state of one CLI invocation.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, std::ostream* log = &std::clog)
      : cfg_(std::move(cfg)), layout_{fs::path(cfg_.output_dir)}, log_(log), manifest_(layout_.manifest()) {
    fs::create_directories(layout_.root);
    manifest_.set_config_hash(git_blob_hash(json(cfg_).dump()));
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Layout& layout() const { return layout_; }
  RunManifest& manifest() { return manifest_; }
  /// Phases skipped as up to date during this invocation.
  const std::vector<std::string>& skipped() const { return skipped_; }

  void log(const std::string& line) const {
    if (log_) *log_ << line << std::endl;
  }

  /// Runs `body` unless the phase is up to date. `body` returns the files
  /// it wrote and may fill `extra` with phase-specific manifest fields.
  bool run_phase(const std::string& phase, const json& slice, const std::vector<fs::path>& inputs,
                 const std::function<std::vector<fs::path>(json& extra)>& body) {
    const std::string chash = git_blob_hash(slice.dump());
    std::map<std::string, std::string> in;
    for (const auto& f : inputs) {
      if (!fs::exists(f)) throw MissingArtifact("phase '" + phase + "' requires " + f.string());
      in[manifest_.relative(f)] = file_hash(f);
    }
    if (manifest_.up_to_date(phase, chash, in)) {
      log(phase + ": up to date");
      skipped_.push_back(phase);
      return false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    json extra = json::object();
    auto outputs = body(extra);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest_.record(phase, chash, in, outputs, secs, std::move(extra));
    return true;
  }

 private:
  ExperimentConfig cfg_;
  Layout layout_;
  std::ostream* log_;
  RunManifest manifest_;
  std::vector<std::string> skipped_;
};

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- gen-data

inline Dataset make_split(const ExperimentConfig& c, Split split) {
  const auto& d = c.data;
  const std::string& csv = split == Split::kTrain ? d.csv_train : split == Split::kVal ? d.csv_val : d.csv_test;
  const auto& s = d.synthetic;
  if (!csv.empty()) return load_csv(csv, s.channels, s.length, s.classes, split, s.sample_rate_hz);
  SyntheticSpec spec = s;
  // independent streams per split
  if (split == Split::kVal) {
    spec.samples_per_class = d.val_per_class;
    spec.seed = s.seed + 1;
  } else if (split == Split::kTest) {
    spec.samples_per_class = d.test_per_class;
    spec.seed = s.seed + 2;
  }
  return gen_synthetic(spec, split);
}

inline void cmd_gen_data(Experiment& ex) {
  const auto& c = ex.config();
  ex.run_phase("gen-data", json(c.data), {}, [&](json&) {
    std::vector<fs::path> out;
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      Dataset ds = make_split(c, s);
      save_dataset(ds, ex.layout().series(s));
      out.push_back(ex.layout().series(s));
      ex.log("gen-data: " + to_string(s) + " " + std::to_string(ds.windows.size()) + " windows");
    }
    return out;
  });
}

// -------------------------------------------------------------- extract-pi

inline ImageDataset extract_images(const Dataset& ds, const PiConfig& pi) {
  return images_from(ds, batch_extract(ds.windows, pi), pi.resolution);
}

inline void cmd_extract_pi(Experiment& ex) {
  const auto& c = ex.config();
  const auto& L = ex.layout();
  std::vector<fs::path> inputs{L.series(Split::kTrain), L.series(Split::kVal), L.series(Split::kTest)};
  for (const auto& f : inputs)
    if (!fs::exists(f)) throw MissingArtifact("extract-pi requires " + f.string() + " (run gen-data first)");
  ex.run_phase("extract-pi", json(c.pi), inputs, [&](json& extra) {
    std::vector<fs::path> out;
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      Dataset ds = load_dataset(L.series(s));
      const auto t0 = std::chrono::steady_clock::now();
      ImageDataset img = extract_images(ds, c.pi);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      extra["extraction_seconds"][to_string(s)] = secs;
      write_file(L.images(s), encode_images(img, {{"pi", c.pi}}));
      out.push_back(L.images(s));
      ex.log("extract-pi: " + to_string(s) + " " + std::to_string(ds.windows.size()) + " images in " +
             fmt("%.2f", secs) + " s");
    }
    return out;
  });
}

// ------------------------------------------------------------------- train

inline std::vector<fs::path> role_prerequisites(const Layout& L, uint64_t seed, Role r, bool anneal) {
  std::vector<fs::path> p;
  const bool images = r == Role::kTeacher2 || (is_distilled(r) && r != Role::kStudentKd);
  p.push_back(L.series(Split::kTrain));
  p.push_back(L.series(Split::kVal));
  if (images) {
    p.push_back(L.images(Split::kTrain));
    p.push_back(L.images(Split::kVal));
  }
  if (is_distilled(r)) p.push_back(L.best(seed, Role::kTeacher1));
  if (is_distilled(r) && r != Role::kStudentKd) p.push_back(L.best(seed, Role::kTeacher2));
  if (anneal) p.push_back(L.final_ckpt(seed, Role::kScratch));
  return p;
}

inline std::string prerequisite_hint(const fs::path& f) {
  const std::string name = f.filename().string();
  if (name.find("_pi") != std::string::npos) return "run extract-pi first";
  if (f.extension() == ".tpkd") return "run gen-data first";
  return "train --role " + f.parent_path().filename().string() + " first";
}

/// The config fields a training role depends on.
inline json slice_for(const ExperimentConfig& c, Role role, const DistillConfig& dc, json base) {
  switch (role) {
    case Role::kTeacher1:
      base["model"] = c.teacher1;
      base["schedule"] = c.series();
      break;
    case Role::kTeacher2:
      base["model"] = c.teacher2;
      base["schedule"] = c.image();
      break;
    default:
      base["model"] = c.student;
      base["schedule"] = c.student_lr();
      if (is_distilled(role)) {
        json d = dc;
        if (!dc.uses_feature_term())
          for (const char* k : {"beta", "k", "layer_pairs", "normalization", "orth_reduction", "use_orth", "direct_map_mse"})
            d.erase(k);
        base["distill"] = d;
      }
      break;
  }
  return base;
}

inline void cmd_train(Experiment& ex, Role role, uint64_t seed) {
  const auto& c = ex.config();
  const auto& L = ex.layout();
  const DistillConfig dc = role_distill(c, role);
  const bool anneal = is_distilled(role) && dc.anneal;
  const auto prereq = role_prerequisites(L, seed, role, anneal);
  for (const auto& f : prereq)
    if (!fs::exists(f)) throw MissingArtifact(to_string(role) + " requires " + f.string() + " (" + prerequisite_hint(f) + ")");

  json slice{{"role", to_string(role)}, {"seed", seed}, {"epochs", c.epochs}, {"train", json(c)["train"]}};
  const std::string phase = "train/" + to_string(role) + "/seed-" + std::to_string(seed);
  ex.run_phase(phase, slice_for(c, role, dc, slice), prereq, [&](json& extra) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainOptions opts = c.train_options();
    const auto tag = to_string(role) + " seed " + std::to_string(seed);
    opts.on_epoch = [&](const HistoryRow& r) {
      ex.log("  " + tag + " epoch " + std::to_string(r.epoch) + " loss " + fmt("%.4f", r.train_loss) + " val_acc " +
             fmt("%.4f", r.val_acc));
    };
    TrainResult res;
    auto series_splits = [&] {
      return TrainSplits{to_array(load_dataset(L.series(Split::kTrain))), to_array(load_dataset(L.series(Split::kVal)))};
    };
    if (role == Role::kTeacher1) {
      res = train_classifier<float>(series_splits(), c.teacher1, c.series(), c.epochs, seed, opts);
    } else if (role == Role::kTeacher2) {
      TrainSplits img{load_images(L.images(Split::kTrain)).images, load_images(L.images(Split::kVal)).images};
      res = train_classifier<float>(img, c.teacher2, c.image(), c.epochs, seed, opts);
    } else if (role == Role::kScratch) {
      res = train_classifier<float>(series_splits(), c.student, c.student_lr(), c.epochs, seed, opts);
    } else {
      StudentInputs in{series_splits(), {}};
      Checkpoint t1 = load_checkpoint(L.best(seed, Role::kTeacher1));
      Checkpoint t2;
      if (role == Role::kStudentKd) {
        // teacher 2 carries zero weight; teacher 1 stands in so no image
        // artifacts are needed
        t2 = t1;
        in.train_images = in.series.train;
      } else {
        t2 = load_checkpoint(L.best(seed, Role::kTeacher2));
        in.train_images = load_images(L.images(Split::kTrain)).images;
      }
      std::optional<Checkpoint> init;
      if (anneal) init = load_checkpoint(L.final_ckpt(seed, Role::kScratch));
      res = train_student<float>(in, t1, t2, c.student, dc, c.student_lr(), c.epochs, seed, opts,
                                 init ? &*init : nullptr);
    }
    for (Checkpoint* ck : {&res.best, &res.final}) {
      ck->meta["role"] = to_string(role);
      ck->meta["seed"] = seed;
    }
    save_checkpoint(res.best, L.best(seed, role));
    save_checkpoint(res.final, L.final_ckpt(seed, role));
    write_text(L.history(seed, role), history_csv(res.history));
    extra["best_epoch"] = res.best_epoch;
    if (res.best_epoch >= 0) extra["best_val_acc"] = res.history[res.best_epoch].val_acc;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ex.log("train " + tag + ": best epoch " + std::to_string(res.best_epoch) +
           (res.best_epoch >= 0 ? " val_acc " + fmt("%.4f", res.history[res.best_epoch].val_acc) : "") + " (" +
           fmt("%.1f", secs) + " s)");
    return std::vector<fs::path>{L.best(seed, role), L.final_ckpt(seed, role), L.history(seed, role)};
  });
}

// -------------------------------------------------------------------- eval

inline uint64_t corruption_seed(const ExperimentConfig& c, uint64_t seed, int level) {
  return c.corruption_seed * 1000003ULL + seed * 101ULL + static_cast<uint64_t>(level);
}

/// Evaluates a checkpoint on the test split, optionally corrupted. Image
/// models see persistence images extracted from the (corrupted) windows.
inline EvalReport evaluate_checkpoint(const ExperimentConfig& c, const Checkpoint& ck, const Dataset& test,
                                      const CorruptionLevel& level, uint64_t seed) {
  Dataset ds = corrupt(test, level, seed);
  if (ds.windows.empty()) throw InputError("evaluate: empty dataset");
  auto model = model_from_checkpoint<float>(ck);
  if (ck.spec.input_kind == InputKind::kImage2d) return evaluate(model, extract_images(ds, c.pi).images);
  return evaluate(model, to_array(ds));
}

struct EvalRequest {
  std::vector<Role> roles;     // empty: every role with a checkpoint
  std::vector<uint64_t> seeds;  // empty: all configured seeds
  std::vector<int> levels{0, 1, 2, 3};
};

/// Evaluates best checkpoints and writes one JSON report per (role, seed,
/// level) plus a summary CSV over everything evaluated so far.
inline void cmd_eval(Experiment& ex, const EvalRequest& req) {
  const auto& c = ex.config();
  const auto& L = ex.layout();
  const auto test_path = L.series(Split::kTest);
  if (!fs::exists(test_path)) throw MissingArtifact("eval requires " + test_path.string() + " (run gen-data first)");
  std::optional<Dataset> test;
  const auto seeds = req.seeds.empty() ? c.seeds : req.seeds;
  const auto roles = req.roles.empty() ? all_roles() : req.roles;
  for (uint64_t seed : seeds)
    for (Role r : roles) {
      const auto ck_path = L.best(seed, r);
      if (!fs::exists(ck_path)) {
        if (!req.roles.empty())
          throw MissingArtifact("no checkpoint for " + to_string(r) + " seed " + std::to_string(seed) + ": " +
                                ck_path.string());
        continue;
      }
      for (int level : req.levels) {
        const auto lv = CorruptionLevel::level(level);
        const std::string phase = "eval/" + to_string(r) + "/seed-" + std::to_string(seed) + "/L" + std::to_string(level);
        json slice{{"level", {lv.kappa_r, lv.sigma_g}}, {"corruption_seed", corruption_seed(c, seed, level)}};
        if (r == Role::kTeacher2) slice["pi"] = c.pi;
        ex.run_phase(phase, slice, {ck_path, test_path}, [&](json&) {
          if (!test) test = load_dataset(test_path);
          auto rep = evaluate_checkpoint(c, load_checkpoint(ck_path), *test, lv, corruption_seed(c, seed, level));
          write_text(L.eval(seed, r, level), json(rep).dump(2) + "\n");
          ex.log("eval " + to_string(r) + " seed " + std::to_string(seed) + " L" + std::to_string(level) + ": acc " +
                 fmt("%.4f", rep.accuracy) + " ece " + fmt("%.4f", rep.ece) + " nll " + fmt("%.4f", rep.nll));
          return std::vector<fs::path>{L.eval(seed, r, level)};
        });
      }
    }
  // summary over every report on disk
  std::string csv = "role,seed,level,accuracy,ece,nll\n";
  for (uint64_t seed : c.seeds)
    for (Role r : all_roles())
      for (int level = 0; level <= 3; ++level) {
        const auto f = L.eval(seed, r, level);
        if (!fs::exists(f)) continue;
        std::ifstream in(f);
        json rep = json::parse(in);
        char buf[256];
        std::snprintf(buf, sizeof buf, "%s,%llu,%d,%.9g,%.9g,%.9g\n", to_string(r).c_str(),
                      static_cast<unsigned long long>(seed), level, rep.at("accuracy").get<double>(),
                      rep.at("ece").get<double>(), rep.at("nll").get<double>());
        csv += buf;
      }
  write_text(L.eval_summary(), csv);
}

/// Single-checkpoint evaluation, returned rather than written.
inline EvalReport eval_checkpoint_file(const Experiment& ex, const fs::path& ckpt, int level, uint64_t seed) {
  if (!fs::exists(ckpt)) throw MissingArtifact("checkpoint not found: " + ckpt.string());
  const auto test_path = ex.layout().series(Split::kTest);
  if (!fs::exists(test_path)) throw MissingArtifact("eval requires " + test_path.string() + " (run gen-data first)");
  return evaluate_checkpoint(ex.config(), load_checkpoint(ckpt), load_dataset(test_path), CorruptionLevel::level(level),
                             corruption_seed(ex.config(), seed, level));
}

// ------------------------------------------------------------------- bench

struct LatencyRow {
  std::string model;
  size_t samples = 0;
  double total_seconds = 0.0;
  double per_sample_ms = 0.0;
};

inline std::string latency_csv(const std::vector<LatencyRow>& rows) {
  std::string out = "model,samples,total_seconds,per_sample_ms\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.6f,%.6f\n", r.model.c_str(), r.samples, r.total_seconds, r.per_sample_ms);
    out += buf;
  }
  return out;
}

/// Per-sample (batch size 1) inference latency of the series teacher, the
/// image teacher including persistence-image extraction, and the student.
inline std::vector<LatencyRow> measure_latency(const ExperimentConfig& c, const Dataset& test, const Checkpoint& t1,
                                               const Checkpoint& t2, const Checkpoint& student) {
  std::vector<LatencyRow> rows;
  const size_t n = c.bench_samples > 0 ? std::min<size_t>(test.windows.size(), c.bench_samples) : test.windows.size();
  if (n == 0) return rows;
  NoGradGuard guard;
  auto m1 = model_from_checkpoint<float>(t1);
  auto m2 = model_from_checkpoint<float>(t2);
  auto ms = model_from_checkpoint<float>(student);
  for (auto* m : {&m1, &m2, &ms}) m->set_training(false);

  auto series_input = [](const SignalWindow& w) {
    return Tensor<float>::from({1, w.channels, w.length}, w.values);
  };
  auto run_series = [&](Model<float>& m, const SignalWindow& w) { return m.forward(series_input(w)).logits.data()[0]; };
  auto run_pipeline = [&](const SignalWindow& w) {
    PersistenceImage pi = normalize_image(diagram_to_image(sublevel_diagram(w), c.pi));
    std::vector<float> px(pi.pixels.begin(), pi.pixels.end());
    return m2.forward(Tensor<float>::from({1, pi.channels, pi.resolution, pi.resolution}, std::move(px))).logits.data()[0];
  };
  volatile float sink = 0.0f;
  auto time = [&](const std::string& name, const std::function<float(const SignalWindow&)>& fn) {
    for (int i = 0; i < c.bench_warmup; ++i) sink = sink + fn(test.windows[i % n]);
    const auto t0 = std::chrono::steady_clock::now();
    for (size_t i = 0; i < n; ++i) sink = sink + fn(test.windows[i]);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back({name, n, secs, 1e3 * secs / static_cast<double>(n)});
  };
  time("teacher1", [&](const SignalWindow& w) { return run_series(m1, w); });
  time("teacher2+pi", run_pipeline);
  time("student", [&](const SignalWindow& w) { return run_series(ms, w); });
  return rows;
}

/// Student checkpoint used by bench: the full method if trained, else the
/// first student role found.
inline fs::path bench_student(const Layout& L, uint64_t seed) {
  for (Role r : {Role::kStudentTpkd, Role::kStudentTpkdNoorth, Role::kStudentAnn, Role::kStudentBase, Role::kStudentKd,
                 Role::kScratch})
    if (fs::exists(L.best(seed, r))) return L.best(seed, r);
  throw MissingArtifact("bench requires a trained student or scratch checkpoint for seed " + std::to_string(seed));
}

inline std::vector<LatencyRow> cmd_bench(Experiment& ex, uint64_t seed) {
  const auto& c = ex.config();
  const auto& L = ex.layout();
  for (const auto& f : {L.series(Split::kTest), L.best(seed, Role::kTeacher1), L.best(seed, Role::kTeacher2)})
    if (!fs::exists(f)) throw MissingArtifact("bench requires " + f.string() + " (" + prerequisite_hint(f) + ")");
  const auto sp = bench_student(L, seed);
  auto rows = measure_latency(c, load_dataset(L.series(Split::kTest)), load_checkpoint(L.best(seed, Role::kTeacher1)),
                              load_checkpoint(L.best(seed, Role::kTeacher2)), load_checkpoint(sp));
  write_text(L.bench(), latency_csv(rows));
  for (const auto& r : rows)
    ex.log("bench " + r.model + ": " + fmt("%.4f", r.per_sample_ms) + " ms/sample over " + std::to_string(r.samples));
  return rows;
}

// ----------------------------------------------------------------- analyze

inline std::vector<double> to_double(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

/// Patch-Pearson histograms of the similarity maps and layer-by-layer
/// linear CKA between each trained student and the teachers, on the test
/// split.
inline void cmd_analyze(Experiment& ex, uint64_t seed) {
  const auto& c = ex.config();
  const auto& L = ex.layout();
  const int k = c.distill.k;
  for (const auto& f : {L.series(Split::kTest), L.images(Split::kTest), L.best(seed, Role::kTeacher1),
                        L.best(seed, Role::kTeacher2)})
    if (!fs::exists(f)) throw MissingArtifact("analyze requires " + f.string() + " (" + prerequisite_hint(f) + ")");
  auto series = to_array(load_dataset(L.series(Split::kTest)));
  auto images = load_images(L.images(Split::kTest)).images;
  const int n = static_cast<int>(series.size());
  const int b = std::min(c.analyze_batch, n) / k * k;
  if (b < std::max(2, k)) throw InputError("analyze: test split too small for one batch divisible by k");

  NoGradGuard guard;
  auto features = [](const Checkpoint& ck, const LabeledArray& data) {
    auto m = model_from_checkpoint<float>(ck);
    m.set_training(false);
    std::set<int> all;
    for (int s = 0; s < ck.spec.stages; ++s) all.insert(s);
    std::vector<int> shape{static_cast<int>(data.size())};
    shape.insert(shape.end(), data.sample_shape.begin(), data.sample_shape.end());
    auto f = m.forward(Tensor<float>::from(shape, data.values), all);
    std::map<int, Tensor<float>> out;
    for (auto& [s, t] : f.activations) out.emplace(s, ops::flatten_rows(t));
    return out;
  };
  auto batch_map = [b](const Tensor<float>& flat) {
    const int p = flat.dim(1);
    std::vector<float> first(flat.data().begin(), flat.data().begin() + static_cast<std::ptrdiff_t>(b) * p);
    return similarity_map(Tensor<float>::from({b, p}, std::move(first)));
  };

  std::map<std::string, std::map<int, Tensor<float>>> feats;
  feats["teacher1"] = features(load_checkpoint(L.best(seed, Role::kTeacher1)), series);
  feats["teacher2"] = features(load_checkpoint(L.best(seed, Role::kTeacher2)), images);
  std::vector<std::string> students;
  for (Role r : all_roles()) {
    if (r == Role::kTeacher1 || r == Role::kTeacher2 || !fs::exists(L.best(seed, r))) continue;
    feats[to_string(r)] = features(load_checkpoint(L.best(seed, r)), series);
    students.push_back(to_string(r));
  }

  std::string pearson = "model,layer,bin_lo,bin_hi,count,skipped_pairs\n";
  char buf[256];
  auto emit = [&](const std::string& name, int layer, const std::vector<double>& map) {
    auto prof = pearson_patch_profile(map, b, k);
    for (size_t i = 0; i < prof.counts.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.4f,%.4f,%zu,%zu\n", name.c_str(), layer, prof.edges[i], prof.edges[i + 1],
                    prof.counts[i], prof.skipped);
      pearson += buf;
    }
  };
  for (const auto& p : c.distill.layer_pairs) {
    if (!feats["teacher1"].count(p.teacher1) || !feats["teacher2"].count(p.teacher2)) continue;
    auto merged = merge_maps(batch_map(feats["teacher1"].at(p.teacher1)), batch_map(feats["teacher2"].at(p.teacher2)),
                             static_cast<float>(c.distill.alpha));
    emit("teacher-merged", p.student, to_double(merged));
  }
  for (const auto& s : students)
    for (const auto& [layer, f] : feats[s]) emit(s, layer, to_double(batch_map(f)));

  std::string cka = "model_a,layer_a,model_b,layer_b,cka\n";
  for (const auto& s : students)
    for (const auto& [la, fa] : feats[s])
      for (const char* t : {"teacher1", "teacher2"})
        for (const auto& [lb, fb] : feats[t]) {
          const double v = linear_cka(to_double(fa), n, fa.dim(1), to_double(fb), fb.dim(1));
          std::snprintf(buf, sizeof buf, "%s,%d,%s,%d,%.9g\n", s.c_str(), la, t, lb, v);
          cka += buf;
        }
  const auto dir = L.analysis(seed);
  write_text(dir / "pearson.csv", pearson);
  write_text(dir / "cka.csv", cka);
  ex.log("analyze seed " + std::to_string(seed) + ": wrote " + (dir / "pearson.csv").string() + " and " +
         (dir / "cka.csv").string());
}

}  // namespace tpkd
