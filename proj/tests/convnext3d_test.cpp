#include <random>

#include <gtest/gtest.h>

#include "otfpf/convnext3d.hpp"
#include "reference.hpp"
#include "test_support.hpp"

using namespace otfpf;
using otfpf::testing::random_tensor;
namespace R = otfpf::reference;

namespace {

// Replaces every parameter with uniform noise so that zero-initialised
// biases and unit gains do not hide wiring mistakes.
void randomise(ParameterStore<double>& store, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  for (auto& p : store) p.value = random_tensor<double>(p.value.shape(), rng, -scale, scale);
}

const R::Vol& P(const ParameterStore<double>& s, const std::string& name) {
  return s.at(name).value;
}

R::Vol block_oracle(const ParameterStore<double>& s, const std::string& pre, const R::Vol& x) {
  auto h = R::depthwise(x, P(s, pre + "dw.weight"), P(s, pre + "dw.bias"));
  h = R::layer_norm(h, P(s, pre + "norm.gamma"), P(s, pre + "norm.beta"));
  h = R::gelu(R::mix(h, P(s, pre + "expand.weight"), &P(s, pre + "expand.bias")));
  h = R::mix(h, P(s, pre + "project.weight"), &P(s, pre + "project.bias"));
  return R::add(x, h);
}

}  // namespace

TEST(ConvNeXtBlock, ZeroProjectionIsIdentity) {
  ParameterStore<double> store;
  std::mt19937_64 rng(1);
  init_convnext_block(Initializer<double>(store, rng), 3);
  randomise(store, 2);
  store.at("project.weight").value.fill(0.0);
  store.at("project.bias").value.fill(0.0);
  std::mt19937_64 xr(3);
  auto x = random_tensor<double>({5, 4, 6, 3}, xr);
  Graph<double> g;
  auto y = convnext_block(Scope<double>(g, store), g.input(x));
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_EQ(max_abs_diff(y.value(), x), 0.0);
}

TEST(ConvNeXtBlock, MatchesCompositionOracle) {
  ParameterStore<double> store;
  std::mt19937_64 rng(4);
  init_convnext_block(Initializer<double>(store, rng), 4);
  randomise(store, 5);
  std::mt19937_64 xr(6);
  auto x = random_tensor<double>({6, 5, 7, 4}, xr);
  Graph<double> g;
  auto y = convnext_block(Scope<double>(g, store), g.input(x));
  EXPECT_LE(max_abs_diff(y.value(), block_oracle(store, "", x)), 1e-10);
}

TEST(ConvNeXtBlock, ParameterCountAndShapes) {
  ParameterStore<float> store;
  std::mt19937_64 rng(7);
  init_convnext_block(Initializer<float>(store, rng, "b."), 32);
  const std::size_t c = 32;
  EXPECT_EQ(store.scalar_count(), 343 * c + c + 2 * c + c * 4 * c + 4 * c + 4 * c * c + c);
  EXPECT_EQ(store.at("b.dw.weight").value.shape(), (Shape{7, 7, 7, 1, 32}));
  EXPECT_EQ(store.at("b.expand.weight").value.shape(), (Shape{32, 128}));
}

TEST(ConvNeXtBlock, RejectsChannelMismatch) {
  ParameterStore<float> store;
  std::mt19937_64 rng(8);
  init_convnext_block(Initializer<float>(store, rng), 8);
  Graph<float> g;
  EXPECT_THROW(convnext_block(Scope<float>(g, store), g.input(Tensor({5, 5, 5, 4}))), ShapeError);
}

TEST(Downsample, ExtentsPerMode) {
  StageConfig ov;
  StageConfig pf;
  pf.mode = DownsampleMode::patchify;
  std::size_t e_ov = 24, e_pf = 24;
  const std::size_t want_ov[] = {12, 6, 3, 2};
  const std::size_t want_pf[] = {12, 6, 3, 1};
  for (int s = 0; s < 4; ++s) {
    e_ov = kernels::conv_out_extent(e_ov, ov.downsample_spec());
    e_pf = kernels::conv_out_extent(e_pf, pf.downsample_spec());
    EXPECT_EQ(e_ov, want_ov[s]);
    EXPECT_EQ(e_pf, want_pf[s]);
  }
  StageConfig k5;
  k5.ds_kernel = 5;
  EXPECT_EQ(k5.downsample_spec().padding, 2u);
  EXPECT_EQ(kernels::conv_out_extent(24, k5.downsample_spec()), 12u);
}

// A single voxel on a window boundary reaches two neighbouring outputs only
// when windows overlap.
TEST(Downsample, OverlappedWindowsShareBoundaryVoxels) {
  auto touched = [](DownsampleMode mode) {
    StageConfig cfg;
    cfg.mode = mode;
    const auto spec = cfg.downsample_spec();
    ParameterStore<double> store;
    std::mt19937_64 rng(9);
    init_downsample(Initializer<double>(store, rng), 1, 1, spec, false);
    store.at("conv.weight").value.fill(1.0);
    BasicTensor<double> x({8, 8, 8, 1});
    x.at({3, 3, 3, 0}) = 1.0;  // odd index: edge of two stride-2 windows
    Graph<double> g;
    auto h = conv3d(g.input(x), Scope<double>(g, store)("conv.weight"), std::nullopt, spec);
    std::size_t n = 0;
    for (double v : h.value().data()) n += v != 0.0;
    return n;
  };
  EXPECT_EQ(touched(DownsampleMode::overlapped), 8u);  // 2 per axis
  EXPECT_EQ(touched(DownsampleMode::patchify), 1u);
}

TEST(Downsample, NormPlacementMatchesOracle) {
  for (bool norm_first : {true, false}) {
    Conv3dSpec spec{3, 2, 1, 1};
    ParameterStore<double> store;
    std::mt19937_64 rng(10);
    init_downsample(Initializer<double>(store, rng), 3, 5, spec, norm_first);
    randomise(store, 11);
    std::mt19937_64 xr(12);
    auto x = random_tensor<double>({7, 6, 5, 3}, xr);
    Graph<double> g;
    auto y = downsample(Scope<double>(g, store), g.input(x), spec, norm_first);
    R::Vol want;
    if (norm_first) {
      want = R::conv(R::layer_norm(x, P(store, "norm.gamma"), P(store, "norm.beta")),
                     P(store, "conv.weight"), &P(store, "conv.bias"), 2, 1);
    } else {
      want = R::layer_norm(R::conv(x, P(store, "conv.weight"), &P(store, "conv.bias"), 2, 1),
                           P(store, "norm.gamma"), P(store, "norm.beta"));
    }
    EXPECT_EQ(y.shape(), (Shape{4, 3, 3, 5}));
    EXPECT_LE(max_abs_diff(y.value(), want), 1e-9) << "norm_first=" << norm_first;
  }
}

TEST(Pathway, PyramidShapesOn24Cubed) {
  StageConfig cfg;
  ParameterStore<float> store;
  std::mt19937_64 rng(13);
  init_pathway(Initializer<float>(store, rng), cfg);
  std::mt19937_64 xr(14);
  Graph<float> g;
  auto out = pathway(Scope<float>(g, store), g.input(random_tensor<float>({24, 24, 24, 1}, xr)), cfg);
  EXPECT_EQ(out[0].shape(), (Shape{12, 12, 12, 32}));
  EXPECT_EQ(out[1].shape(), (Shape{6, 6, 6, 64}));
  EXPECT_EQ(out[2].shape(), (Shape{3, 3, 3, 128}));
  EXPECT_EQ(out[3].shape(), (Shape{2, 2, 2, 256}));
  for (const auto& v : out) EXPECT_TRUE(v.value().all_finite());
}

TEST(Pathway, StageStructureMatchesOracle) {
  StageConfig cfg;
  cfg.width_divisor = 8;
  cfg.blocks = {1, 2, 1, 1};
  ParameterStore<double> store;
  std::mt19937_64 rng(15);
  init_pathway(Initializer<double>(store, rng), cfg);
  randomise(store, 16, 0.2);
  std::mt19937_64 xr(17);
  auto x = random_tensor<double>({9, 8, 10, 1}, xr);
  Graph<double> g;
  auto out = pathway(Scope<double>(g, store), g.input(x), cfg);

  R::Vol h = x;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string pre = "stage" + std::to_string(s + 1) + ".";
    const auto& w = P(store, pre + "down.conv.weight");
    const auto& b = P(store, pre + "down.conv.bias");
    const auto& ng = P(store, pre + "down.norm.gamma");
    const auto& nb = P(store, pre + "down.norm.beta");
    h = s == 0 ? R::layer_norm(R::conv(h, w, &b, 2, 1), ng, nb)
               : R::conv(R::layer_norm(h, ng, nb), w, &b, 2, 1);
    for (std::size_t k = 0; k < cfg.blocks[s]; ++k) {
      h = block_oracle(store, pre + "block" + std::to_string(k + 1) + ".", h);
    }
    EXPECT_LE(max_abs_diff(out[s].value(), h), 1e-9) << "stage " << s + 1;
  }
}

TEST(Pathway, RejectsTooSmallOrMultiChannelInput) {
  StageConfig cfg;
  cfg.width_divisor = 8;
  ParameterStore<float> store;
  std::mt19937_64 rng(18);
  init_pathway(Initializer<float>(store, rng), cfg);
  Graph<float> g;
  Scope<float> s(g, store);
  EXPECT_THROW(pathway(s, g.input(Tensor({4, 24, 24, 1})), cfg), ShapeError);
  EXPECT_THROW(pathway(s, g.input(Tensor({16, 16, 16, 2})), cfg), ShapeError);
  EXPECT_NO_THROW(pathway(s, g.input(Tensor({5, 5, 5, 1})), cfg));
}

TEST(StageConfig, Validation) {
  StageConfig c;
  EXPECT_NO_THROW(c.validate());
  c.blocks[2] = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.width_divisor = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.ds_kernel = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_downsample_mode("patchify"), DownsampleMode::patchify);
  EXPECT_THROW(parse_downsample_mode("strided"), ConfigError);
}

TEST(Fusion, MatchesOracleAndKeepsShape) {
  ParameterStore<double> store;
  std::mt19937_64 rng(19);
  init_fusion(Initializer<double>(store, rng), 6);
  randomise(store, 20);
  std::mt19937_64 xr(21);
  auto gm = random_tensor<double>({3, 4, 2, 6}, xr);
  auto wm = random_tensor<double>({3, 4, 2, 6}, xr);
  Graph<double> g;
  auto y = fusion_module(Scope<double>(g, store), g.input(gm), g.input(wm));
  auto want = R::mix(R::layer_norm(R::concat(gm, wm), P(store, "norm.gamma"), P(store, "norm.beta")),
                     P(store, "proj.weight"), &P(store, "proj.bias"));
  EXPECT_EQ(y.shape(), gm.shape());
  EXPECT_LE(max_abs_diff(y.value(), want), 1e-10);
  EXPECT_THROW(fusion_module(Scope<double>(g, store), g.input(gm),
                             g.input(BasicTensor<double>({3, 4, 3, 6}))),
               ShapeError);
}

TEST(ConvNeXtGradient, BlockAndFusionFiniteDifferences) {
  ParameterStore<double> store;
  std::mt19937_64 rng(22);
  init_convnext_block(Initializer<double>(store, rng, "b."), 2);
  init_fusion(Initializer<double>(store, rng, "f."), 2);
  randomise(store, 23);
  std::mt19937_64 xr(24);
  auto rep = otfpf::testing::check_gradients<double>(
      {random_tensor<double>({4, 3, 5, 2}, xr), random_tensor<double>({4, 3, 5, 2}, xr)},
      [&](Graph<double>& g, const std::vector<Var<double>>& v) {
        Scope<double> s(g, store);
        return fusion_module(s.sub("f"), convnext_block(s.sub("b"), v[0]), v[1]);
      },
      1e-6);
  EXPECT_LE(rep.relative_error, 1e-6);
}
