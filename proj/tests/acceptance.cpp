// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.
//
//   acceptance [--work-dir DIR] [--only N ...]

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "tpkd/experiment.hpp"

namespace {

using namespace tpkd;
using tpkd::testing::brute_force_pairs;
using tpkd::testing::grad_check;
using tpkd::testing::random_tensor;
using tpkd::testing::sorted;
namespace fs = std::filesystem;
using Td = Tensor<double>;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmtd(const char* f, double v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool bitwise_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

// ------------------------------------------------------------- criterion 1

Outcome pd_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20261016);
  std::uniform_int_distribution<int> len(4, 64), val(0, 9);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> x(len(rng));
    for (auto& v : x) v = val(rng);
    SignalWindow w;
    w.channels = 1;
    w.length = static_cast<int>(x.size());
    w.values.assign(x.begin(), x.end());
    if (sorted(sublevel_diagram(w).pairs[0]) != sorted(brute_force_pairs(x))) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          std::to_string(1000 - mismatches) + "/1000 sequences match the threshold-sweep oracle in " +
              fmtd("%.2f", secs) + " s (limit 10 s)"};
}

// ------------------------------------------------------------- criterion 2

Outcome pi_correctness() {
  std::mt19937_64 rng(2);
  PiConfig cfg = PiConfig::with_birth_range(-3.0, 3.0, 0.25);
  std::uniform_real_distribution<double> birth(-3.0, 3.0), life(0.01, 6.0), coin(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 30);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    PersistenceDiagram a, b, ab;
    for (auto* pd : {&a, &b, &ab}) {
      pd->pairs.resize(2);
      pd->essential_births = {0, 0};
      pd->channel_max = {0, 0};
    }
    for (int c = 0; c < 2; ++c) {
      const int n = count(rng);
      for (int i = 0; i < n; ++i) {
        const double bi = birth(rng);
        PersistencePair p{bi, bi + life(rng)};
        (coin(rng) < 0.5 ? a : b).pairs[c].push_back(p);
        ab.pairs[c].push_back(p);
      }
    }
    auto ia = diagram_to_image(a, cfg), ib = diagram_to_image(b, cfg), iab = diagram_to_image(ab, cfg);
    for (size_t i = 0; i < iab.pixels.size(); ++i)
      worst = std::max(worst, std::abs(iab.pixels[i] - ia.pixels[i] - ib.pixels[i]));
  }

  int hits = 0;
  std::uniform_int_distribution<int> res(4, 24);
  std::uniform_real_distribution<double> lo(-5.0, 0.0), width(1.0, 10.0), frac(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    PiConfig c;
    c.resolution = res(rng);
    c.gaussian_sigma = 0.05 + 0.5 * frac(rng);
    c.birth_range = {lo(rng), 0.0};
    c.birth_range.hi = c.birth_range.lo + width(rng);
    c.persistence_range = {0.0, width(rng)};
    const double bx = c.birth_range.lo + frac(rng) * c.birth_range.width();
    const double py = c.persistence_range.lo + (0.05 + 0.95 * frac(rng)) * c.persistence_range.width();
    PersistenceDiagram pd;
    pd.pairs = {{{bx, bx + py}}};
    pd.essential_births = {bx};
    auto img = diagram_to_image(pd, c);
    const int arg = static_cast<int>(std::max_element(img.pixels.begin(), img.pixels.end()) - img.pixels.begin());
    // nearest cell center by Euclidean distance
    const double bw = c.birth_range.width() / c.resolution, pw = c.persistence_range.width() / c.resolution;
    int best = -1;
    double best_d = 1e300;
    for (int r = 0; r < c.resolution; ++r)
      for (int col = 0; col < c.resolution; ++col) {
        const double dx = c.birth_range.lo + (col + 0.5) * bw - bx, dy = c.persistence_range.lo + (r + 0.5) * pw - py;
        if (dx * dx + dy * dy < best_d) {
          best_d = dx * dx + dy * dy;
          best = r * c.resolution + col;
        }
      }
    hits += arg == best;
  }
  return {worst <= 1e-9 && hits == 100, "additivity max error " + fmtd("%.3g", worst) + " over 100 splits (limit 1e-9); " +
                                            std::to_string(hits) + "/100 single-point argmax at nearest cell"};
}

// ------------------------------------------------------------- criterion 3

ModelSpec toy_spec(InputKind kind, std::vector<int> width) {
  ModelSpec s;
  s.input_kind = kind;
  s.channels_in = 2;
  s.stages = static_cast<int>(width.size());
  s.blocks_per_stage = 1;
  s.width = std::move(width);
  s.classes = 3;
  return s;
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(3);
  std::map<std::string, double> layer_err;
  auto check = [&](const std::string& name, const std::function<Td()>& f, std::vector<Td> in) {
    layer_err[name] = grad_check(f, std::move(in)).max_rel_error;
  };
  auto proj = [&](std::vector<int> shape) { return random_tensor(std::move(shape), rng, false); };

  {
    auto x = random_tensor({3, 4}, rng), w = random_tensor({5, 4}, rng), b = random_tensor({5}, rng);
    auto p = proj({3, 5});
    check("dense", [&] { return ops::sum(ops::mul(ops::linear(x, w, b), p)); }, {x, w, b});
  }
  {
    auto x = random_tensor({2, 3, 11}, rng), w = random_tensor({4, 3, 3}, rng);
    auto p = proj({2, 4, 6});
    check("conv1d", [&] { return ops::sum(ops::mul(ops::conv1d(x, w, 2, 1), p)); }, {x, w});
  }
  {
    auto x = random_tensor({2, 2, 5, 6}, rng), w = random_tensor({3, 2, 3, 3}, rng);
    auto p = proj({2, 3, 3, 3});
    check("conv2d", [&] { return ops::sum(ops::mul(ops::conv2d(x, w, 2, 1), p)); }, {x, w});
  }
  {
    auto x = random_tensor({4, 3, 5}, rng), g = random_tensor({3}, rng), b = random_tensor({3}, rng);
    auto p = proj({4, 3, 5});
    check("batch_norm(train)",
          [&] {
            auto rm = Td::zeros({3}), rv = Td::from({3}, {1, 1, 1});
            return ops::sum(ops::mul(ops::batch_norm(x, g, b, rm, rv, true), p));
          },
          {x, g, b});
    auto rm = Td::from({3}, {0.2, -0.1, 0.3}), rv = Td::from({3}, {0.5, 1.5, 2.0});
    check("batch_norm(eval)", [&] { return ops::sum(ops::mul(ops::batch_norm(x, g, b, rm, rv, false), p)); }, {x, g, b});
  }
  {
    auto x = random_tensor({3, 7}, rng);
    for (auto& v : x.data()) v += v >= 0 ? 0.05 : -0.05;
    auto p = proj({3, 7});
    check("relu", [&] { return ops::sum(ops::mul(ops::relu(x), p)); }, {x});
  }
  {
    auto x = random_tensor({2, 3, 4, 5}, rng);
    auto p = proj({2, 3});
    check("global_avg_pool", [&] { return ops::sum(ops::mul(ops::global_avg_pool(x), p)); }, {x});
  }
  {
    auto x = random_tensor({4, 5}, rng, true, 2.0);
    auto p = proj({4, 5});
    std::vector<int> labels{0, 3, 4, 1};
    check("softmax", [&] { return ops::sum(ops::mul(ops::softmax(x), p)); }, {x});
    check("log_softmax", [&] { return ops::sum(ops::mul(ops::log_softmax(x), p)); }, {x});
    check("cross_entropy", [&] { return ops::cross_entropy(x, std::span<const int>(labels)); }, {x});
    auto t = proj({4, 5});
    check("kd_loss", [&] { return kd_loss(t, x, 4.0); }, {x});
  }
  {
    auto a = random_tensor({4, 6}, rng);
    auto p4 = proj({4, 4}), p6 = proj({4, 6}), pk = proj({4, 3, 3});
    check("row_gram", [&] { return ops::sum(ops::mul(ops::row_gram(a), p4)); }, {a});
    check("row_l2_normalize", [&] { return ops::sum(ops::mul(ops::row_l2_normalize(a), p6)); }, {a});
    check("frobenius_normalize", [&] { return ops::sum(ops::mul(ops::frobenius_normalize(a), p6)); }, {a});
    check("patch_gram", [&] { return ops::sum(ops::mul(ops::patch_gram(a, 3), pk)); }, {a});
  }

  // composite objective on toy models, gradients w.r.t. every student parameter
  Model<double> t1(toy_spec(InputKind::kSeries1d, {3, 4}), 1);
  Model<double> t2(toy_spec(InputKind::kImage2d, {2, 3}), 2);
  Model<double> s(toy_spec(InputKind::kSeries1d, {2, 3}), 3);
  for (auto& p : s.registry())
    if (p.name.find("beta") != std::string::npos)
      for (auto& v : p.tensor.data()) v = 0.1;
  s.set_training(true);
  auto series = random_tensor({4, 2, 12}, rng, false);
  auto images = random_tensor({4, 2, 6, 6}, rng, false);
  std::vector<int> labels{0, 1, 2, 0};
  DistillConfig cfg;
  cfg.k = 2;
  cfg.beta = 900.0;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};
  std::vector<Td> params;
  for (auto& p : s.parameters()) params.push_back(p.tensor);
  const double composite =
      grad_check([&] { return total_loss(series, images, std::span<const int>(labels), t1, t2, s, cfg).total; }, params)
          .max_rel_error;

  double worst_layer = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : layer_err)
    if (e >= worst_layer) {
      worst_layer = e;
      worst_name = name;
    }
  const double secs = seconds_since(t0);
  return {worst_layer < 1e-4 && composite < 1e-3 && secs < 60.0,
          std::to_string(layer_err.size()) + " layer types, worst " + worst_name + " " + fmtd("%.2g", worst_layer) +
              " (limit 1e-4); composite objective " + fmtd("%.2g", composite) + " (limit 1e-3); " +
              fmtd("%.1f", secs) + " s (limit 60 s)"};
}

// ------------------------------------------------------------- criterion 4

Outcome loss_identities() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> tau(0.5, 8.0), unit(0.0, 1.0);
  int kd_ok = 0, mix_ok = 0, orth_ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto t1 = random_tensor({6, 4}, rng, false, 3.0), t2 = random_tensor({6, 4}, rng, false, 3.0);
    auto s = random_tensor({6, 4}, rng, false, 3.0);
    const double tv = tau(rng);
    kd_ok += bitwise_equal(multi_teacher_kd_loss(t1, t2, s, tv, 1.0).item(), kd_loss(t1, s, tv).item());
  }
  for (int trial = 0; trial < 200; ++trial) {
    DistillConfig cfg;
    cfg.beta = 0.0;
    cfg.alpha = 1.0;
    cfg.lambda = unit(rng);
    cfg.tau = tau(rng);
    auto s = random_tensor({6, 4}, rng, false, 2.0);
    TeacherSignals<double> sig{random_tensor({6, 4}, rng, false, 2.0), random_tensor({6, 4}, rng, false, 2.0), {}};
    std::vector<int> labels{0, 1, 2, 3, 1, 0};
    const double got = total_loss<double>(s, labels, {}, sig, cfg).total.item();
    // (1 - lambda) CE + lambda tau^2 KL(p_T || p_S)
    auto ce = ops::cross_entropy(s, std::span<const int>(labels));
    const double want =
        ops::add(ops::scale(ce, 1.0 - cfg.lambda), ops::scale(kd_loss(sig.logits1, s, cfg.tau), cfg.lambda)).item();
    mix_ok += bitwise_equal(got, want);
  }
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Td> a, b;
    for (int l = 0; l < 3; ++l) {
      auto g = random_tensor({8, 4, 4}, rng, false);
      a.push_back(g);
      b.push_back(Td::from(g.shape(), g.storage()));
    }
    bool ok = orth_loss<double>(a, b, OrthReduction::kSum).item() == 0.0 &&
              orth_loss<double>(a, b, OrthReduction::kMean).item() == 0.0;
    const size_t layer = static_cast<size_t>(trial) % 3;
    b[layer].storage()[static_cast<size_t>(trial * 7) % b[layer].numel()] += 1e-4 * (1.0 + unit(rng));
    ok = ok && orth_loss<double>(a, b, OrthReduction::kSum).item() > 0.0 &&
         orth_loss<double>(a, b, OrthReduction::kMean).item() > 0.0;
    orth_ok += ok;
  }
  return {kd_ok == 200 && mix_ok == 200 && orth_ok == 200,
          "alpha=1 multi-teacher == kd bitwise " + std::to_string(kd_ok) + "/200; beta=0 objective == CE/KD mixture " +
              std::to_string(mix_ok) + "/200; orth zero iff equal " + std::to_string(orth_ok) + "/200"};
}

// ------------------------------------------------------------- criterion 5

Outcome annealing_contract() {
  ExperimentConfig c = default_config();
  c.data.synthetic.samples_per_class = 16;
  c.data.val_per_class = 8;
  SyntheticSpec spec = c.data.synthetic;
  auto train = to_array(gen_synthetic(spec));
  spec.seed += 1;
  spec.samples_per_class = 8;
  auto val = to_array(gen_synthetic(spec, Split::kVal));
  TrainOptions opts;
  opts.batch_size = 16;
  auto scratch = train_classifier<float>({train, val}, c.student, LrSchedule{0.05, {}}, 3, 0, opts);

  auto ann = anneal_init<float>(c.student, scratch.final);
  const bool params_equal = ann.state() == scratch.final.arrays;
  // the teacher terms play no part in where optimization starts
  DistillConfig plain;
  plain.lambda = 0.0;
  plain.beta = 0.0;
  auto zero = train_student<float>({{train, val}, train}, scratch.final, scratch.final, c.student, plain, LrSchedule{},
                                   0, 123, opts, &scratch.final);
  const bool student_start = zero.final.arrays == scratch.final.arrays;

  auto reference = model_from_checkpoint<float>(scratch.final);
  ann.set_training(false);
  reference.set_training(false);
  std::mt19937_64 rng(5);
  std::normal_distribution<float> d;
  int identical = 0;
  for (int batch = 0; batch < 10; ++batch) {
    std::vector<float> x(static_cast<size_t>(8) * 3 * 128);
    for (auto& v : x) v = d(rng);
    auto a = ann.forward(Tensor<float>::from({8, 3, 128}, x)).logits;
    auto b = reference.forward(Tensor<float>::from({8, 3, 128}, x)).logits;
    identical += std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
  }
  return {params_equal && student_start && identical == 10,
          std::string("initial parameters ") + (params_equal ? "bitwise equal" : "DIFFER") +
              "; distilled run starts from them: " + (student_start ? "yes" : "NO") + "; forward outputs identical on " +
              std::to_string(identical) + "/10 batches"};
}

// ------------------------------------------------------- criteria 6, 7, 8

struct DeskRun {
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  ExperimentConfig cfg;
  // role -> level -> per-seed test accuracy
  std::map<Role, std::map<int, std::vector<double>>> acc;
  std::map<Role, std::vector<double>> best_val;
  std::vector<LatencyRow> latency;
};

const std::vector<Role> kDeskRoles{Role::kTeacher1, Role::kTeacher2, Role::kScratch, Role::kStudentTpkdNoorth,
                                   Role::kStudentTpkd};

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

DeskRun desk_run(const fs::path& dir) {
  DeskRun run;
  fs::remove_all(dir);  // time a fresh run, not a manifest replay
  const auto t0 = std::chrono::steady_clock::now();
  try {
    run.cfg = make_config(nlohmann::json{{"output_dir", dir.string()}});
    Experiment ex(run.cfg, nullptr);
    cmd_gen_data(ex);
    cmd_extract_pi(ex);
    for (uint64_t seed : run.cfg.seeds)
      for (Role r : kDeskRoles) cmd_train(ex, r, seed);
    EvalRequest req;
    req.roles = kDeskRoles;
    cmd_eval(ex, req);
    run.seconds = seconds_since(t0);
    run.latency = cmd_bench(ex, run.cfg.seeds.front());

    const Layout& L = ex.layout();
    for (uint64_t seed : run.cfg.seeds)
      for (Role r : kDeskRoles) {
        for (int level = 0; level <= 3; ++level) {
          std::ifstream in(L.eval(seed, r, level));
          run.acc[r][level].push_back(nlohmann::json::parse(in).at("accuracy").get<double>());
        }
        run.best_val[r].push_back(load_checkpoint(L.best(seed, r)).meta.value("val_acc", 0.0));
      }
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  return run;
}

Outcome desk_directional(const DeskRun& run) {
  if (!run.ok) return {false, "desk run failed: " + run.error};
  const double tpkd = 100 * mean(run.acc.at(Role::kStudentTpkd).at(0));
  const double noorth = 100 * mean(run.acc.at(Role::kStudentTpkdNoorth).at(0));
  const double scratch = 100 * mean(run.acc.at(Role::kScratch).at(0));
  double t1_min = 1.0, t2_min = 1.0;
  for (double v : run.best_val.at(Role::kTeacher1)) t1_min = std::min(t1_min, v);
  for (double v : run.best_val.at(Role::kTeacher2)) t2_min = std::min(t2_min, v);
  const bool c_noorth = tpkd >= noorth - 0.5;
  const bool c_scratch = tpkd >= scratch + 1.0;
  const bool c_teachers = t1_min >= 0.85 && t2_min >= 0.85;
  const bool c_time = run.seconds < 30 * 60;
  std::string d = "test acc over " + std::to_string(run.cfg.seeds.size()) + " seeds: TPKD " + fmtd("%.2f", tpkd) +
                  ", TPKD w/o orth " + fmtd("%.2f", noorth) + ", scratch " + fmtd("%.2f", scratch) +
                  "; TPKD >= w/o orth - 0.5: " + (c_noorth ? "yes" : "NO") +
                  "; TPKD >= scratch + 1.0: " + (c_scratch ? "yes" : "NO") + "; min teacher val acc " +
                  fmtd("%.3f", t1_min) + " / " + fmtd("%.3f", t2_min) + " (>= 0.85: " + (c_teachers ? "yes" : "NO") +
                  "); " + fmtd("%.1f", run.seconds / 60) + " min (limit 30)";
  return {c_noorth && c_scratch && c_teachers && c_time, d};
}

Outcome corruption_sweep(const DeskRun& run) {
  if (!run.ok) return {false, "desk run failed: " + run.error};
  bool monotone = true, robust = true;
  std::string d;
  for (Role r : {Role::kScratch, Role::kStudentTpkdNoorth, Role::kStudentTpkd}) {
    d += to_string(r) + " [";
    double prev = 1e9;
    for (int level = 0; level <= 3; ++level) {
      const double m = 100 * mean(run.acc.at(r).at(level));
      d += (level ? " " : "") + fmtd("%.2f", m);
      if (m > prev) monotone = false;
      prev = m;
    }
    d += "]; ";
  }
  for (int level = 0; level <= 3; ++level)
    if (mean(run.acc.at(Role::kStudentTpkd).at(level)) < mean(run.acc.at(Role::kScratch).at(level)) - 0.005)
      robust = false;
  d += std::string("non-increasing: ") + (monotone ? "yes" : "NO") + "; TPKD >= scratch - 0.5 at every level: " +
       (robust ? "yes" : "NO");
  return {monotone && robust, d};
}

Outcome latency_structure(const DeskRun& run) {
  if (!run.ok) return {false, "desk run failed: " + run.error};
  double student = -1, pipeline = -1;
  for (const auto& r : run.latency) {
    if (r.model == "student") student = r.per_sample_ms;
    if (r.model == "teacher2+pi") pipeline = r.per_sample_ms;
  }
  if (student < 0 || pipeline <= 0) return {false, "latency rows missing"};
  const double ratio = student / pipeline;
  return {ratio < 0.25, "student " + fmtd("%.3f", student) + " ms vs teacher2 pipeline " + fmtd("%.3f", pipeline) +
                            " ms per sample, ratio " + fmtd("%.3f", ratio) + " (limit 0.25)"};
}

// ------------------------------------------------------------- criterion 9

Outcome calibration_plumbing() {
  std::vector<double> half{0.5, 0.5};
  std::vector<int> y1{1}, y0{0};
  const double nll = evaluate_probs(half, y1, 2).nll;
  std::vector<double> conf{0.8, 0.2};
  const double ece = evaluate_probs(conf, y0, 2).ece;
  const bool hand = std::abs(nll - std::log(2.0)) <= 1e-9 && std::abs(ece - 0.2) <= 1e-9;

  // calibrated sets: in every occupied bin the hit rate equals the confidence
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int set = 0; set < 20; ++set) {
    std::vector<double> probs;
    std::vector<int> labels;
    for (int c : {5, 6, 8, 10}) {  // confidence c/10, groups of 10 predictions
      const double p = c / 10.0;
      std::vector<int> hit(10, 0);
      std::fill(hit.begin(), hit.begin() + c, 1);
      std::shuffle(hit.begin(), hit.end(), rng);
      for (int h : hit) {
        probs.insert(probs.end(), {p, 1.0 - p});
        labels.push_back(h ? 0 : 1);
      }
    }
    worst = std::max(worst, evaluate_probs(probs, labels, 2).ece);
  }
  return {hand && worst <= 1e-9, "NLL(0.5) = " + fmtd("%.12f", nll) + ", ECE(0.8 correct) = " + fmtd("%.12f", ece) +
                                     "; max ECE on 20 calibrated sets " + fmtd("%.3g", worst)};
}

// ------------------------------------------------------------ criterion 10

std::map<std::string, std::string> artifact_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".ckpt" || ext == ".csv") out[fs::relative(e.path(), root).generic_string()] = file_hash(e.path());
  }
  return out;
}

Outcome determinism(const fs::path& dir) {
  const nlohmann::json doc = nlohmann::json::parse(R"({
    "data": {"samples_per_class": 24, "val_per_class": 8, "test_per_class": 8, "length": 64},
    "teacher1": {"width": [8, 12, 16], "blocks_per_stage": 1},
    "teacher2": {"width": [4, 8, 16], "blocks_per_stage": 1},
    "student": {"width": [4, 8, 16], "blocks_per_stage": 1},
    "epochs": 3,
    "train": {"batch_size": 16},
    "seeds": [0, 1],
    "analyze": {"batch": 16}
  })");
  std::vector<std::map<std::string, std::string>> hashes;
  for (const char* run : {"run-a", "run-b"}) {
    nlohmann::json d = doc;
    d["output_dir"] = (dir / run).string();
    fs::remove_all(dir / run);
    Experiment ex(make_config(d), nullptr);
    cmd_gen_data(ex);
    cmd_extract_pi(ex);
    for (uint64_t seed : ex.config().seeds)
      for (Role r : all_roles()) cmd_train(ex, r, seed);
    cmd_eval(ex, {});
    for (uint64_t seed : ex.config().seeds) cmd_analyze(ex, seed);
    hashes.push_back(artifact_hashes(dir / run));
  }
  int ckpts = 0, csvs = 0, differ = 0;
  for (const auto& [file, h] : hashes[0]) {
    (file.ends_with(".ckpt") ? ckpts : csvs) += 1;
    auto it = hashes[1].find(file);
    if (it == hashes[1].end() || it->second != h) ++differ;
  }
  const bool same_files = hashes[0].size() == hashes[1].size();
  return {differ == 0 && same_files && ckpts > 0,
          std::to_string(ckpts) + " checkpoints and " + std::to_string(csvs) + " CSV files compared, " +
              std::to_string(differ) + " differ" + (same_files ? "" : "; file sets differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance-runs";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Directory for experiment artifacts");
  app.add_option("--only", only, "Run only these criteria (1-10)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  unsetenv("TPKD_OUT");  // the suite picks its own output directories

  const fs::path root = fs::absolute(work);
  fs::create_directories(root);
  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

  int failures = 0;
  auto report = [&](int n, const std::string& title, const Outcome& o, double secs) {
    std::printf("criterion %2d %s: %s  (%s; %.1f s)\n", n, o.pass ? "PASS" : "FAIL", title.c_str(), o.detail.c_str(),
                secs);
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto run = [&](int n, const std::string& title, const std::function<Outcome()>& fn) {
    if (!wanted(n)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(n, title, o, seconds_since(t0));
  };

  run(1, "persistence diagrams match brute-force oracle", pd_oracle);
  run(2, "persistence image additivity and peak placement", pi_correctness);
  run(3, "gradient fidelity", gradient_fidelity);
  run(4, "loss identities", loss_identities);
  run(5, "annealing contract", annealing_contract);

  if (wanted(6) || wanted(7) || wanted(8)) {
    const auto t0 = std::chrono::steady_clock::now();
    DeskRun desk = desk_run(root / "desk");
    const double secs = seconds_since(t0);
    if (wanted(6)) report(6, "desk-scale directional result", desk_directional(desk), secs);
    if (wanted(7)) report(7, "corruption robustness sweep", corruption_sweep(desk), 0.0);
    if (wanted(8)) report(8, "latency structure", latency_structure(desk), 0.0);
  }

  run(9, "calibration plumbing", calibration_plumbing);
  run(10, "end-to-end determinism", [&] { return determinism(root / "determinism"); });

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
