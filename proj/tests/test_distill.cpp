#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "support.hpp"
#include "tpkd/distill.hpp"
#include "tpkd/train.hpp"

using namespace tpkd;
using tpkd::testing::grad_check;
using tpkd::testing::random_tensor;
using T = Tensor<double>;

namespace {

bool bitwise_equal(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

ModelSpec toy_spec(InputKind kind, int channels, std::vector<int> width) {
  ModelSpec s;
  s.input_kind = kind;
  s.channels_in = channels;
  s.stages = static_cast<int>(width.size());
  s.blocks_per_stage = 1;
  s.width = std::move(width);
  s.classes = 3;
  return s;
}

LabeledArray random_array(int n, std::vector<int> sample_shape, int classes, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  LabeledArray a;
  a.sample_shape = std::move(sample_shape);
  a.classes = classes;
  for (int i = 0; i < n; ++i) {
    a.labels.push_back(i % classes);
    for (size_t k = 0; k < a.sample_numel(); ++k) a.values.push_back(d(rng) + 0.5f * static_cast<float>(i % classes));
  }
  return a;
}

}  // namespace

TEST(SoftenedProbs, LargeTemperatureIsNearlyUniform) {
  auto p = softened_probs(T::from({1, 2}, {10, 0}), 100.0);
  EXPECT_NEAR(p.storage()[0], 0.5, 0.03);
  EXPECT_NEAR(p.storage()[1], 0.5, 0.03);
  EXPECT_EQ(DistillConfig{}.tau, 4.0);
}

TEST(SoftenedKl, HandCase) {
  auto kl = softened_kl(T::from({1, 2}, {std::log(3.0), 0}), T::from({1, 2}, {0, 0}), 1.0);
  EXPECT_NEAR(kl.item(), 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-12);
  EXPECT_NEAR(kl.item(), 0.13081, 1e-5);
}

TEST(SoftenedKl, TeacherSideReceivesNoGradient) {
  auto t = T::from({1, 2}, {1, 0}, true);
  auto s = T::from({1, 2}, {0, 1}, true);
  auto loss = kd_loss(t, s, 4.0);
  backward(loss);
  EXPECT_FALSE(t.has_grad());
  EXPECT_TRUE(s.has_grad());
}

TEST(SoftenedKl, GradCheck) {
  std::mt19937_64 rng(1);
  auto t = random_tensor({4, 3}, rng, false), s = random_tensor({4, 3}, rng);
  auto r = grad_check([&] { return kd_loss(t, s, 4.0); }, {s}, {"student"});
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(LossIdentities, SingleTeacherWeightReducesToKd) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> tau(0.5, 8.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto t1 = random_tensor({5, 4}, rng, false, 3.0), t2 = random_tensor({5, 4}, rng, false, 3.0);
    auto s = random_tensor({5, 4}, rng, false, 3.0);
    const double tv = tau(rng);
    ASSERT_TRUE(bitwise_equal(multi_teacher_kd_loss(t1, t2, s, tv, 1.0).item(), kd_loss(t1, s, tv).item()));
  }
}

TEST(LossIdentities, NoFeatureTermGivesCeKdMixture) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    DistillConfig cfg;
    cfg.beta = 0;
    cfg.alpha = 1;
    cfg.lambda = u(rng);
    auto s = random_tensor({4, 3}, rng, false, 2.0);
    TeacherSignals<double> sig{random_tensor({4, 3}, rng, false, 2.0), random_tensor({4, 3}, rng, false, 2.0), {}};
    std::vector<int> labels{0, 1, 2, 1};
    auto parts = total_loss<double>(s, labels, {}, sig, cfg);
    auto ce = ops::cross_entropy(s, std::span<const int>(labels));
    auto expected = ops::add(ops::scale(ce, 1.0 - cfg.lambda), ops::scale(kd_loss(sig.logits1, s, cfg.tau), cfg.lambda));
    ASSERT_TRUE(bitwise_equal(parts.total.item(), expected.item())) << "trial " << trial;
    ASSERT_EQ(parts.feature, 0.0);
  }
}

TEST(LossIdentities, OrthLossVanishesExactlyOnEqualStacks) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<T> a, b;
    for (int l = 0; l < 3; ++l) {
      auto g = random_tensor({8, 2, 2}, rng, false);
      a.push_back(g);
      b.push_back(T::from(g.shape(), g.storage()));
    }
    for (auto red : {OrthReduction::kSum, OrthReduction::kMean})
      ASSERT_EQ(orth_loss<double>(a, b, red).item(), 0.0);
    const size_t layer = trial % 3, entry = static_cast<size_t>(trial) % b[layer].numel();
    b[layer].storage()[entry] += 1e-3;
    for (auto red : {OrthReduction::kSum, OrthReduction::kMean}) ASSERT_GT(orth_loss<double>(a, b, red).item(), 0.0);
  }
}

TEST(SimilarityMap, DiagonalExample) {
  auto g = similarity_map(T::from({2, 2}, {1, 0, 0, 2}));
  EXPECT_EQ(g.storage(), (std::vector<double>{1, 0, 0, 4}));
  EXPECT_THROW(similarity_map(T::zeros({1, 4})), ShapeError);
}

TEST(MergeMaps, PsdInputsGivePsdMerge) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ua(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    auto g1 = similarity_map(random_tensor({6, 4}, rng, false));
    auto g2 = similarity_map(random_tensor({6, 9}, rng, false));
    auto m = merge_maps(g1, g2, ua(rng));
    // PSD: v^T M v >= 0 for random probes
    for (int probe = 0; probe < 20; ++probe) {
      auto v = random_tensor({6, 1}, rng, false);
      auto q = ops::matmul(ops::transpose(v), ops::matmul(m, v));
      EXPECT_GE(q.item(), -1e-10);
    }
  }
  EXPECT_THROW(merge_maps(T::zeros({2, 2}), T::zeros({3, 3}), 0.5), ShapeError);
}

TEST(PatchGrams, HandCase) {
  // row [1,0,0,1] normalizes to [1/sqrt2, 0, 0, 1/sqrt2]
  auto g = T::from({4, 4}, {1, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1});
  auto pg = patch_grams(g, 2);
  ASSERT_EQ(pg.shape(), (std::vector<int>{4, 2, 2}));
  EXPECT_NEAR(pg.storage()[0], -0.5, 1e-15);
  EXPECT_NEAR(pg.storage()[1], 0.0, 1e-15);
  EXPECT_NEAR(pg.storage()[2], 0.0, 1e-15);
  EXPECT_NEAR(pg.storage()[3], -0.5, 1e-15);
  EXPECT_THROW(patch_grams(g, 3), ShapeError);
  EXPECT_EQ(DistillConfig{}.k, 4);
}

TEST(OrthLoss, SumReductionHandCase) {
  // identical stacks except one slice whose diagonal differs by 1
  auto a = T::from({2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 0});
  auto b = T::from({2, 2, 2}, {1, 0, 0, 1, 0, 0, 0, 0});
  std::vector<T> ta{a}, sb{b};
  EXPECT_DOUBLE_EQ(orth_loss<double>(ta, sb, OrthReduction::kSum).item(), 2.0);
  EXPECT_DOUBLE_EQ(orth_loss<double>(ta, sb, OrthReduction::kMean).item(), 2.0 / 8.0);
  std::vector<T> two_a{a, a}, two_b{b, a};
  EXPECT_DOUBLE_EQ(orth_loss<double>(two_a, two_b, OrthReduction::kSum).item(), 1.0);
  std::vector<T> none;
  EXPECT_THROW(orth_loss<double>(none, none), ShapeError);
}

TEST(DistillConfig, Defaults) {
  DistillConfig c;
  EXPECT_EQ(c.lambda, 0.7);
  EXPECT_EQ(c.alpha, 0.7);
  EXPECT_EQ(c.beta, 900.0);
  c.lambda = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DistillConfig{};
  c.k = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  nlohmann::json j = DistillConfig{};
  DistillConfig back;
  from_json(j, back);
  EXPECT_EQ(back.layer_pairs, DistillConfig{}.layer_pairs);
  EXPECT_EQ(back.orth_reduction, OrthReduction::kMean);
  j["orth_reduction"] = "median";
  EXPECT_THROW(from_json(j, back), ConfigError);
}

TEST(CompositeLoss, FiniteDifferenceOnToyModels) {
  Model<double> t1(toy_spec(InputKind::kSeries1d, 2, {3, 4}), 1);
  Model<double> t2(toy_spec(InputKind::kImage2d, 2, {2, 3}), 2);
  Model<double> s(toy_spec(InputKind::kSeries1d, 2, {2, 3}), 3);
  for (auto& p : s.registry())
    if (p.name.find("beta") != std::string::npos)
      for (auto& v : p.tensor.data()) v = 0.1;
  s.set_training(true);
  std::mt19937_64 rng(6);
  auto series = random_tensor({4, 2, 12}, rng, false);
  auto images = random_tensor({4, 2, 6, 6}, rng, false);
  std::vector<int> labels{0, 1, 2, 0};
  DistillConfig cfg;
  cfg.k = 2;
  cfg.beta = 900;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};

  std::vector<T> inputs;
  std::vector<std::string> names;
  for (auto& p : s.parameters()) {
    inputs.push_back(p.tensor);
    names.push_back(p.name);
  }
  for (auto red : {OrthReduction::kMean, OrthReduction::kSum}) {
    cfg.orth_reduction = red;
    auto f = [&] { return total_loss(series, images, std::span<const int>(labels), t1, t2, s, cfg).total; };
    auto r = grad_check(f, inputs, names);
    EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  }
  cfg.use_orth = false;
  cfg.direct_map_mse = true;
  auto f = [&] { return total_loss(series, images, std::span<const int>(labels), t1, t2, s, cfg).total; };
  auto r = grad_check(f, inputs, names);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
}

TEST(CompositeLoss, TeachersAreNotModified) {
  Model<double> t1(toy_spec(InputKind::kSeries1d, 2, {3, 4}), 1);
  Model<double> t2(toy_spec(InputKind::kImage2d, 2, {2, 3}), 2);
  Model<double> s(toy_spec(InputKind::kSeries1d, 2, {2, 3}), 3);
  const auto before1 = t1.state(), before2 = t2.state();
  std::mt19937_64 rng(7);
  auto series = random_tensor({4, 2, 12}, rng, false);
  auto images = random_tensor({4, 2, 6, 6}, rng, false);
  std::vector<int> labels{0, 1, 2, 0};
  DistillConfig cfg;
  cfg.k = 2;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};
  s.set_training(true);
  auto parts = total_loss(series, images, std::span<const int>(labels), t1, t2, s, cfg);
  backward(parts.total);
  EXPECT_EQ(t1.state(), before1);
  EXPECT_EQ(t2.state(), before2);
  for (auto& p : t1.registry()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  for (auto& p : t2.registry()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  EXPECT_GT(parts.feature, 0.0);
}

// ----------------------------------------------------------- student runs

namespace {

struct StudentFixture {
  ModelSpec t1_spec = toy_spec(InputKind::kSeries1d, 2, {4, 6});
  ModelSpec t2_spec = toy_spec(InputKind::kImage2d, 2, {3, 4});
  ModelSpec s_spec = toy_spec(InputKind::kSeries1d, 2, {2, 4});
  StudentInputs data;
  Checkpoint t1, t2;
  TrainOptions opts;

  StudentFixture() {
    data.series.train = random_array(32, {2, 16}, 3, 1);
    data.series.val = random_array(12, {2, 16}, 3, 2);
    data.train_images = random_array(32, {2, 8, 8}, 3, 3);
    data.train_images.labels = data.series.train.labels;
    t1 = make_checkpoint(Model<float>(t1_spec, 10));
    t2 = make_checkpoint(Model<float>(t2_spec, 11));
    opts.batch_size = 8;
  }
};

}  // namespace

TEST(TrainStudent, WithoutTeacherTermsMatchesScratchBitwise) {
  StudentFixture fx;
  DistillConfig cfg;
  cfg.lambda = 0;
  cfg.beta = 0;
  auto student = train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{0.05, {}}, 3, 5, fx.opts);
  auto scratch = train_classifier<float>(fx.data.series, fx.s_spec, LrSchedule{0.05, {}}, 3, 5, fx.opts);
  EXPECT_EQ(encode_checkpoint(student.final), encode_checkpoint(scratch.final));
}

TEST(TrainStudent, FullObjectiveRunsAndIsDeterministic) {
  StudentFixture fx;
  DistillConfig cfg;
  cfg.k = 4;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};
  auto a = train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{0.05, {}}, 2, 5, fx.opts);
  auto b = train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{0.05, {}}, 2, 5, fx.opts);
  EXPECT_EQ(encode_checkpoint(a.final), encode_checkpoint(b.final));
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_GT(a.history[0].train_kd, 0.0);
  EXPECT_GT(a.history[0].train_orth, 0.0);
}

TEST(TrainStudent, RejectsBatchNotDivisibleByK) {
  StudentFixture fx;
  DistillConfig cfg;
  cfg.k = 3;
  cfg.layer_pairs = {{0, 0, 0}};
  EXPECT_THROW(train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{}, 1, 0, fx.opts), ConfigError);
}

TEST(TrainStudent, RejectsMisalignedImages) {
  StudentFixture fx;
  fx.data.train_images.labels[0] = (fx.data.train_images.labels[0] + 1) % 3;
  EXPECT_THROW(train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, DistillConfig{}, LrSchedule{}, 1, 0, fx.opts),
               InputError);
}

TEST(TrainStudent, RejectsUnknownStage) {
  StudentFixture fx;
  DistillConfig cfg;
  cfg.layer_pairs = {{0, 0, 5}};
  EXPECT_THROW(train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{}, 1, 0, fx.opts), ConfigError);
}

TEST(Anneal, StartsFromScratchFinalParameters) {
  StudentFixture fx;
  auto scratch = train_classifier<float>(fx.data.series, fx.s_spec, LrSchedule{0.05, {}}, 2, 1, fx.opts);
  auto model = anneal_init<float>(fx.s_spec, scratch.final);
  EXPECT_EQ(model.state(), scratch.final.arrays);
  DistillConfig cfg;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};
  auto zero_epochs =
      train_student<float>(fx.data, fx.t1, fx.t2, fx.s_spec, cfg, LrSchedule{}, 0, 99, fx.opts, &scratch.final);
  EXPECT_EQ(zero_epochs.final.arrays, scratch.final.arrays);
}

TEST(TeacherCache, MatchesDirectTeacherOutputs) {
  StudentFixture fx;
  DistillConfig cfg;
  cfg.layer_pairs = {{0, 0, 0}, {1, 1, 1}};
  auto m1 = model_from_checkpoint<double>(fx.t1);
  auto m2 = model_from_checkpoint<double>(fx.t2);
  TeacherCache<double> full(m1, m2, fx.data.series.train, fx.data.train_images, cfg);
  TeacherCache<double> lazy(m1, m2, fx.data.series.train, fx.data.train_images, cfg, 0);
  ASSERT_TRUE(full.has_full_maps());
  ASSERT_FALSE(lazy.has_full_maps());

  std::vector<int> idx{3, 17, 0, 9};
  std::vector<double> series, images;
  for (int i : idx) {
    series.insert(series.end(), fx.data.series.train.values.begin() + i * 32,
                  fx.data.series.train.values.begin() + (i + 1) * 32);
    images.insert(images.end(), fx.data.train_images.values.begin() + i * 128,
                  fx.data.train_images.values.begin() + (i + 1) * 128);
  }
  NoGradGuard guard;
  auto f1 = m1.forward(T::from({4, 2, 16}, series), {0, 1});
  auto f2 = m2.forward(T::from({4, 2, 8, 8}, images), {0, 1});
  auto l1 = full.logits1(idx), l2 = full.logits2(idx);
  for (size_t i = 0; i < l1.numel(); ++i) {
    EXPECT_NEAR(l1.storage()[i], f1.logits.storage()[i], 1e-9);
    EXPECT_NEAR(l2.storage()[i], f2.logits.storage()[i], 1e-9);
  }
  for (size_t p = 0; p < 2; ++p) {
    auto direct = merge_maps(similarity_map(f1.activations.at(static_cast<int>(p))),
                             similarity_map(f2.activations.at(static_cast<int>(p))), 0.7);
    auto a = full.merged_map(p, idx), b = lazy.merged_map(p, idx);
    for (size_t i = 0; i < direct.numel(); ++i) {
      EXPECT_NEAR(a.storage()[i], direct.storage()[i], 1e-9 * (1 + std::abs(direct.storage()[i])));
      EXPECT_EQ(a.storage()[i], b.storage()[i]);
    }
  }
}
