#pragma once

// Volumetric ConvNeXt blocks, strided downsampling (overlapping or
// patchify windows), four-stage pathways and the two-modality fusion module.

#include <array>
#include <string>
#include <string_view>

#include "otfpf/ops.hpp"
#include "otfpf/params.hpp"

namespace otfpf {

enum class DownsampleMode { overlapped, patchify };

inline std::string to_string(DownsampleMode m) {
  return m == DownsampleMode::overlapped ? "overlapped" : "patchify";
}

inline DownsampleMode parse_downsample_mode(std::string_view s) {
  if (s == "overlapped") return DownsampleMode::overlapped;
  if (s == "patchify") return DownsampleMode::patchify;
  throw ConfigError("downsample mode must be 'overlapped' or 'patchify', got '" +
                    std::string(s) + "'");
}

inline constexpr std::array<std::size_t, 4> kStageChannels{32, 64, 128, 256};
inline constexpr std::size_t kDepthwiseKernel = 7;
inline constexpr std::size_t kExpansion = 4;
/// Smallest accepted input extent along any axis.
inline constexpr std::size_t kMinPathwayExtent = 5;

struct StageConfig {
  std::array<std::size_t, 4> blocks{1, 1, 3, 1};
  DownsampleMode mode = DownsampleMode::overlapped;
  /// Kernel of the overlapped downsampler (stride 2, padding (k-1)/2).
  std::size_t ds_kernel = 3;
  /// Divides every stage width; 1 gives (32, 64, 128, 256).
  std::size_t width_divisor = 1;
  std::size_t in_channels = 1;

  std::size_t channels(std::size_t stage) const { return kStageChannels.at(stage) / width_divisor; }

  Conv3dSpec downsample_spec() const {
    if (mode == DownsampleMode::patchify) return {2, 2, 0, 1};
    return {ds_kernel, 2, (ds_kernel - 1) / 2, 1};
  }

  void validate() const {
    for (auto b : blocks) {
      if (b == 0) throw ConfigError("stage config: every stage needs at least one block");
    }
    if (ds_kernel < 3) {
      throw ConfigError("stage config: overlapped downsampling needs kernel >= 3");
    }
    if (width_divisor == 0 || kStageChannels[0] % width_divisor != 0) {
      throw ConfigError("stage config: width_divisor must divide 32");
    }
    if (in_channels == 0) throw ConfigError("stage config: in_channels must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Parameter registration

template <typename T>
void init_convnext_block(Initializer<T> in, std::size_t c) {
  const std::size_t k = kDepthwiseKernel;
  in.trunc_normal("dw.weight", {k, k, k, 1, c});
  in.zeros("dw.bias", {c});
  in.ones("norm.gamma", {c});
  in.zeros("norm.beta", {c});
  in.trunc_normal("expand.weight", {c, kExpansion * c});
  in.zeros("expand.bias", {kExpansion * c});
  in.trunc_normal("project.weight", {kExpansion * c, c});
  in.zeros("project.bias", {c});
}

/// `norm_first` places the layer norm on the input (over cin), otherwise on
/// the convolution output (over cout).
template <typename T>
void init_downsample(Initializer<T> in, std::size_t cin, std::size_t cout,
                     const Conv3dSpec& spec, bool norm_first) {
  const std::size_t k = spec.kernel;
  const std::size_t cn = norm_first ? cin : cout;
  in.ones("norm.gamma", {cn});
  in.zeros("norm.beta", {cn});
  in.trunc_normal("conv.weight", {k, k, k, cin, cout});
  in.zeros("conv.bias", {cout});
}

template <typename T>
void init_pathway(Initializer<T> in, const StageConfig& cfg) {
  cfg.validate();
  const auto spec = cfg.downsample_spec();
  for (std::size_t s = 0; s < 4; ++s) {
    auto st = in.sub("stage" + std::to_string(s + 1));
    const std::size_t cin = s == 0 ? cfg.in_channels : cfg.channels(s - 1);
    init_downsample(st.sub("down"), cin, cfg.channels(s), spec, /*norm_first=*/s != 0);
    for (std::size_t b = 0; b < cfg.blocks[s]; ++b) {
      init_convnext_block(st.sub("block" + std::to_string(b + 1)), cfg.channels(s));
    }
  }
}

template <typename T>
void init_fusion(Initializer<T> in, std::size_t c) {
  in.ones("norm.gamma", {2 * c});
  in.zeros("norm.beta", {2 * c});
  in.trunc_normal("proj.weight", {2 * c, c});
  in.zeros("proj.bias", {c});
}

// ---------------------------------------------------------------------------
// Forward

/// x + project(gelu(expand(norm(depthwise7(x))))).
template <typename T>
Var<T> convnext_block(const Scope<T>& s, const Var<T>& x) {
  const auto dw = s("dw.weight");
  const std::size_t c = dw.shape()[4];
  if (x.shape().size() != 4 || x.shape()[3] != c) {
    throw ShapeError("convnext_block: input " + to_string(x.shape()) + " does not have " +
                     std::to_string(c) + " channels");
  }
  const Conv3dSpec spec{kDepthwiseKernel, 1, kDepthwiseKernel / 2, c};
  auto h = conv3d(x, dw, s("dw.bias"), spec);
  h = layer_norm(h, s("norm.gamma"), s("norm.beta"));
  h = gelu(pointwise_conv(h, s("expand.weight"), s("expand.bias")));
  h = pointwise_conv(h, s("project.weight"), s("project.bias"));
  return add(x, h);
}

template <typename T>
Var<T> downsample(const Scope<T>& s, const Var<T>& x, const Conv3dSpec& spec, bool norm_first) {
  if (norm_first) {
    auto h = layer_norm(x, s("norm.gamma"), s("norm.beta"));
    return conv3d(h, s("conv.weight"), s("conv.bias"), spec);
  }
  auto h = conv3d(x, s("conv.weight"), s("conv.bias"), spec);
  return layer_norm(h, s("norm.gamma"), s("norm.beta"));
}

/// Downsampling followed by the stage's blocks. Stage 0 is the stem, which
/// normalises after its convolution: a norm over a single input channel
/// would map every voxel to the bias.
template <typename T>
Var<T> pathway_stage(const Scope<T>& s, const Var<T>& x, const StageConfig& cfg,
                     std::size_t stage) {
  auto st = s.sub("stage" + std::to_string(stage + 1));
  auto h = downsample(st.sub("down"), x, cfg.downsample_spec(), stage != 0);
  for (std::size_t b = 0; b < cfg.blocks.at(stage); ++b) {
    h = convnext_block(st.sub("block" + std::to_string(b + 1)), h);
  }
  return h;
}

template <typename T>
void check_pathway_input(const Shape& x, const StageConfig& cfg) {
  if (x.size() != 4 || x[3] != cfg.in_channels) {
    throw ShapeError("pathway: input must be [D,W,H," + std::to_string(cfg.in_channels) +
                     "], got " + to_string(x));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (x[a] < kMinPathwayExtent) {
      throw ShapeError("pathway: input " + to_string(x) + " is smaller than " +
                       std::to_string(kMinPathwayExtent) + " voxels along an axis");
    }
  }
}

/// Four recorded stage outputs with widths cfg.channels(0..3).
template <typename T>
std::array<Var<T>, 4> pathway(const Scope<T>& s, const Var<T>& x, const StageConfig& cfg) {
  cfg.validate();
  check_pathway_input<T>(x.shape(), cfg);
  std::array<Var<T>, 4> out;
  Var<T> h = x;
  for (std::size_t st = 0; st < 4; ++st) {
    h = pathway_stage(s, h, cfg, st);
    out[st] = h;
  }
  return out;
}

/// proj(norm(concat(gm, wm))): 2C -> C, spatial shape unchanged.
template <typename T>
Var<T> fusion_module(const Scope<T>& s, const Var<T>& gm, const Var<T>& wm) {
  if (gm.shape() != wm.shape()) {
    throw ShapeError("fusion_module: gray/white matter shapes differ, " +
                     to_string(gm.shape()) + " vs " + to_string(wm.shape()));
  }
  auto h = concat_channels<T>({gm, wm});
  h = layer_norm(h, s("norm.gamma"), s("norm.beta"));
  return pointwise_conv(h, s("proj.weight"), s("proj.bias"));
}

}  // namespace otfpf
