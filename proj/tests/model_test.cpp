#include <cstdlib>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "model_support.hpp"
#include "otfpf/model.hpp"
#include "reference.hpp"

using namespace otfpf;
using otfpf::testing::synthetic_sample;
using otfpf::testing::tiny_config;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("otfpf_model_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

void add_noise(SubjectSample& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 0.05f);
  for (auto* v : {&s.gm, &s.wm}) {
    for (auto& x : v->storage()) x += nd(rng);
  }
}

}  // namespace

TEST(OtfpfConfig, DescriptorLengths) {
  OtfpfConfig c;
  EXPECT_EQ(c.backbone_length(), 512u);
  EXPECT_EQ(c.descriptor_length(), 1032u);
  c.use_otem = false;
  EXPECT_EQ(c.descriptor_length(), 128u + 512u + 8u);
  c.use_fpfn = false;
  EXPECT_EQ(c.descriptor_length(), 256u + 512u + 8u);
  c.multi_pathway = false;
  EXPECT_EQ(c.descriptor_length(), 256u + 8u);
  c.use_sex = false;
  EXPECT_EQ(c.descriptor_length(), 256u);
  EXPECT_EQ(tiny_config().descriptor_length(), 4u * 4u * 8u + 2u * 64u + 8u);
}

TEST(OtfpfConfig, JsonRoundTripAndValidation) {
  OtfpfConfig c = tiny_config(17);
  c.downsample_mode = DownsampleMode::patchify;
  c.otem_sigma = 2.5;
  c.train.lr = 1e-3;
  nlohmann::json j = c;
  const auto back = j.get<OtfpfConfig>();
  EXPECT_EQ(nlohmann::json(back), j);

  j["unknown_flag"] = true;
  EXPECT_THROW(j.get<OtfpfConfig>(), ConfigError);
  EXPECT_THROW((nlohmann::json{{"train", {{"lr", 0.1}, {"momentum", 0.9}}}}.get<OtfpfConfig>()),
               ConfigError);
  EXPECT_THROW((nlohmann::json{{"downsample_mode", "strided"}}.get<OtfpfConfig>()), ConfigError);

  OtfpfConfig bad;
  bad.use_fpfn = false;  // use_otem still on
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.otem_epsilon = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = {};
  bad.train.batch_size = 0;
  EXPECT_THROW(Model{bad}, ConfigError);
}

TEST(Model, DefaultForwardShapesAndHeadBias) {
  OtfpfConfig c;
  c.otem_sigma = 5.0;
  Model m(c);
  auto s = synthetic_sample(24, 3, 0);
  Graph<float> g;
  auto r = m.forward(g, s);
  EXPECT_EQ(r.pyramid[0].shape(), (Shape{12, 12, 12, 32}));
  EXPECT_EQ(r.pyramid[1].shape(), (Shape{6, 6, 6, 64}));
  EXPECT_EQ(r.pyramid[2].shape(), (Shape{3, 3, 3, 128}));
  EXPECT_EQ(r.pyramid[3].shape(), (Shape{2, 2, 2, 256}));
  ASSERT_TRUE(r.fused.has_value());
  for (const auto& lv : *r.fused) EXPECT_EQ(lv.shape()[3], 32u);
  EXPECT_EQ(r.backbone.shape(), (Shape{1, 512}));
  EXPECT_EQ(r.descriptor.shape(), (Shape{1, 1032}));
  EXPECT_EQ(r.prediction.shape(), (Shape{1, 1}));
  EXPECT_TRUE(r.descriptor.value().all_finite());

  // With a zero output layer the head returns its bias: the cohort mean age.
  m.params().at("head.out.weight").value.fill(0.0f);
  EXPECT_EQ(m.predict(s), double(float(kDefaultHeadBias)));
}

TEST(Model, PyramidTakesFeaturesAfterFusionAddition) {
  auto c = tiny_config(2);
  c.use_otem = false;
  BasicModel<double> m(c);
  auto s = synthetic_sample(16, 4, 1);
  add_noise(s, 5);
  Graph<double> g;
  auto r = m.forward(g, s);

  // Rebuild stage by stage from the same parameters.
  Graph<double> g2;
  Scope<double> sc(g2, m.params());
  const auto st = c.stages();
  Var<double> h = g2.constant(s.t1.cast<double>()), hg = g2.constant(s.gm.cast<double>()),
              hw = g2.constant(s.wm.cast<double>());
  for (std::size_t i = 0; i < 4; ++i) {
    h = pathway_stage(sc.sub("t1"), h, st, i);
    hg = pathway_stage(sc.sub("gm"), hg, st, i);
    hw = pathway_stage(sc.sub("wm"), hw, st, i);
    const auto plain = h.value();
    h = add(h, fusion_module(sc.sub("fusion" + std::to_string(i + 1)), hg, hw));
    EXPECT_EQ(max_abs_diff(r.pyramid[i].value(), h.value()), 0.0);
    EXPECT_GT(max_abs_diff(r.pyramid[i].value(), plain), 0.0);
  }
  // The GM/WM descriptor halves are global pools of the last stage.
  const auto gm_pool = reference::global_avg_pool(hg.value());
  const std::size_t off = c.backbone_length();
  for (std::size_t k = 0; k < gm_pool.size(); ++k) {
    EXPECT_NEAR(r.descriptor.value()[off + k], gm_pool[k], 1e-12);
  }
}

TEST(Model, SexLabelOnlyMattersWhenEnabled) {
  auto c = tiny_config(6);
  c.otem_sigma = 2.0;
  Model with(c);
  c.use_sex = false;
  Model without(c);
  auto s = synthetic_sample(16, 7, 0);
  auto flipped = s;
  flipped.sex = 1 - s.sex;
  EXPECT_NE(with.predict(s), with.predict(flipped));
  EXPECT_EQ(without.predict(s), without.predict(flipped));
}

TEST(Model, RejectsBadSamples) {
  Model m(tiny_config());
  auto s = synthetic_sample(16, 8, 0);
  auto bad = s;
  bad.gm = Tensor({16, 16, 15, 1});
  EXPECT_THROW(m.predict(bad), ShapeError);
  bad = s;
  bad.sex = 2;
  EXPECT_THROW(m.predict(bad), DataError);
  bad = s;
  bad.age = 0.0;
  EXPECT_THROW(m.predict(bad), DataError);
  bad = s;
  bad.t1 = Tensor({4, 16, 16, 1});
  bad.gm = bad.t1;
  bad.wm = bad.t1;
  EXPECT_THROW(m.predict(bad), ShapeError);
}

TEST(Model, ParameterCountsShrinkWithEachRemoval) {
  auto c = tiny_config();
  const auto full = Model(c).parameter_count();
  auto no_otem = c;
  no_otem.use_otem = false;
  auto no_fpfn = no_otem;
  no_fpfn.use_fpfn = false;
  auto single = no_fpfn;
  single.multi_pathway = false;
  auto no_sex = c;
  no_sex.use_sex = false;
  auto patchify = c;
  patchify.downsample_mode = DownsampleMode::patchify;
  // Every removal is smaller than the full model. The cumulative chain is
  // not monotone: without pyramid fusion the backbone descriptor is the
  // final-stage pool, which is wider than the four pooled fused levels.
  const auto a = Model(no_otem).parameter_count();
  const auto b = Model(no_fpfn).parameter_count();
  const auto d = Model(single).parameter_count();
  EXPECT_LT(a, full);
  EXPECT_LT(b, full);
  EXPECT_LT(d, full);
  EXPECT_LT(d, b);
  EXPECT_LT(Model(no_sex).parameter_count(), full);
  EXPECT_LT(Model(patchify).parameter_count(), full);
}

TEST(Model, SameSeedSameParametersDifferentSeedDifferent) {
  Model a(tiny_config(9)), b(tiny_config(9)), c(tiny_config(10));
  auto s = synthetic_sample(16, 9, 0);
  EXPECT_EQ(a.predict(s), b.predict(s));
  EXPECT_NE(a.predict(s), c.predict(s));
}

TEST(Model, CalibratedBandwidthIsMedianAnchorDistance) {
  auto c = tiny_config(11);
  Model m(c);
  auto s0 = synthetic_sample(16, 12, 0), s1 = synthetic_sample(16, 12, 1);
  m.calibrate_sigma({&s0, &s1});
  const auto f0 = m.fused_sets(s0), f1 = m.fused_sets(s1);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& anchors = m.params().at("otfpf.level" + std::to_string(i + 1) + ".anchors").value;
    std::vector<double> d;
    for (const auto* f : {&f0[i], &f1[i]}) {
      for (std::size_t r = 0; r < f->extent(0); ++r) {
        for (std::size_t a = 0; a < anchors.extent(0); ++a) {
          double s = 0.0;
          for (std::size_t k = 0; k < anchors.extent(1); ++k) {
            const double t = double(f->at({r, k})) - double(anchors.at({a, k}));
            s += t * t;
          }
          d.push_back(std::sqrt(s));
        }
      }
    }
    std::sort(d.begin(), d.end());
    const double med = d.size() % 2 ? d[d.size() / 2]
                                    : 0.5 * (d[d.size() / 2 - 1] + d[d.size() / 2]);
    EXPECT_NEAR(m.otem_settings().sigma[i], med, 1e-4 * med) << "level " << i + 1;
  }
  // An explicit bandwidth is never overwritten.
  c.otem_sigma = 3.0;
  Model fixed(c);
  fixed.calibrate_sigma({&s0});
  EXPECT_EQ(fixed.otem_settings().sigma[0], 3.0);
}

TEST(AdamW, DecayOnlyWithZeroGradient) {
  ParameterStore<float> store;
  auto& p = store.add("w", Tensor({3}, {1.0f, -2.0f, 0.5f}));
  TrainConfig tc;
  tc.lr = 0.1;
  tc.weight_decay = 0.01;
  AdamW<float> opt(tc);
  store.zero_grad();
  opt.step(store);
  EXPECT_FLOAT_EQ(p.value[0], float(1.0 * (1 - 0.1 * 0.01)));
  EXPECT_FLOAT_EQ(p.value[1], float(-2.0 * (1 - 0.1 * 0.01)));
}

TEST(AdamW, MatchesHandIteratedUpdates) {
  ParameterStore<double> store;
  auto& p = store.add("w", BasicTensor<double>({2}, {0.3, -0.7}));
  TrainConfig tc;
  AdamW<double> opt(tc);
  double th[2] = {0.3, -0.7}, m[2] = {0, 0}, v[2] = {0, 0};
  const double grads[3][2] = {{0.5, -1.0}, {0.1, 2.0}, {-0.4, 0.0}};
  for (int t = 1; t <= 3; ++t) {
    p.grad = BasicTensor<double>({2}, {grads[t - 1][0], grads[t - 1][1]});
    opt.step(store);
    for (int i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      th[i] *= 1 - tc.lr * tc.weight_decay;
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      th[i] -= tc.lr * mh / (std::sqrt(vh) + tc.adam_eps);
      EXPECT_NEAR(p.value[i], th[i], 1e-15);
    }
  }
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  auto c = tiny_config(13);
  c.train.lr = 1e-3;
  Model m(c);
  std::vector<SubjectSample> samples;
  for (std::size_t i = 0; i < 4; ++i) samples.push_back(synthetic_sample(16, 14, i));
  std::vector<const SubjectSample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  m.calibrate_sigma(batch);
  AdamW<float> opt(c.train);
  const double first = train_step(m, batch, opt);
  double last = first;
  for (int i = 0; i < 29; ++i) {
    const double l = train_step(m, batch, opt);
    EXPECT_LE(l, last) << "step " << i + 2;
    last = l;
  }
  EXPECT_LT(last, 0.85 * first);
}

TEST(Training, NonFiniteLossLeavesParametersUntouched) {
  Model m(tiny_config(15));
  auto s = synthetic_sample(16, 16, 0);
  s.t1[10] = std::numeric_limits<float>::quiet_NaN();
  std::vector<Tensor> before;
  for (const auto& p : m.params()) before.push_back(p.value);
  AdamW<float> opt(m.config().train);
  EXPECT_THROW(train_step(m, {&s}, opt), NumericalError);
  std::size_t i = 0;
  for (const auto& p : m.params()) EXPECT_EQ(max_abs_diff(p.value, before[i++]), 0.0f);
  EXPECT_EQ(opt.steps(), 0u);
}

TEST(Training, BatchGradientIsMeanOfSampleGradients) {
  BasicModel<double> m(tiny_config(16));
  auto a = synthetic_sample(16, 17, 0), b = synthetic_sample(16, 17, 1);
  auto grad_of = [&](std::vector<const SubjectSample*> batch) {
    auto& ps = m.params();
    ps.zero_grad();
    const double seed = 1.0 / double(batch.size());
    for (const auto* s : batch) {
      Graph<double> g;
      g.backward(l1_loss(m.forward(g, *s).prediction, s->age), seed);
    }
    return ps.at("head.fc1.weight").grad;
  };
  const auto ga = grad_of({&a}), gb = grad_of({&b}), gab = grad_of({&a, &b});
  for (std::size_t i = 0; i < ga.numel(); ++i) {
    EXPECT_NEAR(gab[i], 0.5 * (ga[i] + gb[i]), 1e-12);
  }
}

TEST(Training, StepDoesNotDependOnThreadCount) {
  std::vector<SubjectSample> samples;
  for (std::size_t i = 0; i < 6; ++i) samples.push_back(synthetic_sample(16, 20, i));
  std::vector<const SubjectSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  auto run = [&](const char* threads) {
    ::setenv("OTFPF_THREADS", threads, 1);
    Model m(tiny_config(21));
    AdamW<float> opt(m.config().train);
    const double loss = train_step(m, ptrs, opt);
    ::unsetenv("OTFPF_THREADS");
    return std::make_pair(loss, m.params().at("head.fc1.weight").value);
  };
  const auto [l1, w1] = run("1");
  const auto [l3, w3] = run("3");
  EXPECT_EQ(l1, l3);
  EXPECT_EQ(max_abs_diff(w1, w3), 0.0f);
}

TEST(PredictBatch, PreservesOrderAcrossThreadCounts) {
  Model m(tiny_config(18));
  std::vector<SubjectSample> samples;
  for (std::size_t i = 0; i < 5; ++i) samples.push_back(synthetic_sample(16, 19, i));
  std::vector<const SubjectSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  ::setenv("OTFPF_THREADS", "1", 1);
  const auto serial = predict_batch(m, ptrs);
  ::setenv("OTFPF_THREADS", "3", 1);
  const auto parallel = predict_batch(m, ptrs);
  ::unsetenv("OTFPF_THREADS");
  ASSERT_EQ(serial.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(serial[i], m.predict(samples[i]));
    EXPECT_EQ(parallel[i], serial[i]);
  }
  samples[3].wm = Tensor({16, 16, 8, 1});
  try {
    predict_batch(m, ptrs);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("sample 3"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = temp_dir("ckpt");
  auto c = tiny_config(20);
  Model m(c);
  auto s = synthetic_sample(16, 21, 0);
  m.calibrate_sigma({&s});
  m.set_head_bias(51.25);
  save_checkpoint(dir / "model", m);
  EXPECT_TRUE(std::filesystem::exists(dir / "model.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "model.bin"));
  const Model back = load_checkpoint(dir / "model");
  EXPECT_EQ(nlohmann::json(back.config()), nlohmann::json(m.config()));
  EXPECT_EQ(back.otem_settings().sigma, m.otem_settings().sigma);
  auto it = back.params().begin();
  for (const auto& p : m.params()) {
    ASSERT_EQ(it->name, p.name);
    EXPECT_EQ(it->value.storage(), p.value.storage()) << p.name;
    ++it;
  }
  EXPECT_EQ(back.predict(s), m.predict(s));
}

TEST(Checkpoint, RejectsForeignOrTruncatedFiles) {
  const auto dir = temp_dir("ckpt_bad");
  Model m(tiny_config(22));
  save_checkpoint(dir / "model", m);
  {
    std::ifstream in(dir / "model.json");
    nlohmann::json j;
    in >> j;
    j["format"] = "something-else";
    std::ofstream(dir / "other.json") << j.dump();
    std::filesystem::copy_file(dir / "model.bin", dir / "other.bin");
  }
  EXPECT_THROW(load_checkpoint(dir / "other"), DataError);
  std::filesystem::resize_file(dir / "model.bin", 64);
  EXPECT_THROW(load_checkpoint(dir / "model"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), DataError);
}

// End-to-end loss gradient of a small model against central differences.
// GM/WM get a little noise: exactly constant backgrounds put the stem norm
// at zero variance, where finite differences are not meaningful.
TEST(ModelGradient, TinyModelDouble) {
  BasicModel<double> m(tiny_config(3));
  auto s = synthetic_sample(16, 11, 0);
  add_noise(s, 4);
  m.calibrate_sigma({&s});
  auto rep = otfpf::testing::check_model_gradients(m, s, 3, 1e-6);
  EXPECT_GT(rep.checked, 150u);
  EXPECT_LE(rep.relative_error, 1e-6);
}
