#pragma once

// Feature pyramid fusion (channel unification, top-down upsampling,
// add-merge) and the per-level transport embedding of the fused levels.

#include <array>
#include <string>

#include "otfpf/otem.hpp"
#include "otfpf/params.hpp"

namespace otfpf {

template <typename T>
using Pyramid = std::array<Var<T>, 4>;

inline constexpr std::size_t kUnifiedChannels = 32;
inline constexpr std::size_t kDefaultReferences = 4;

/// Channels must match `channels` exactly and spatial extents may not grow
/// from one level to the next.
inline void check_pyramid(const std::array<Shape, 4>& levels,
                          const std::array<std::size_t, 4>& channels, const char* what) {
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = levels[i];
    if (s.size() != 4) {
      throw ShapeError(std::string(what) + ": level " + std::to_string(i + 1) +
                       " must be [D,W,H,C], got " + to_string(s));
    }
    if (s[3] != channels[i]) {
      throw ShapeError(std::string(what) + ": level " + std::to_string(i + 1) + " has " +
                       std::to_string(s[3]) + " channels, expected " +
                       std::to_string(channels[i]));
    }
    if (i > 0) {
      const auto& prev = levels[i - 1];
      for (std::size_t a = 0; a < 3; ++a) {
        if (s[a] > prev[a]) {
          throw ShapeError(std::string(what) + ": level " + std::to_string(i + 1) +
                           " is spatially larger than level " + std::to_string(i));
        }
      }
    }
  }
}

template <typename T>
std::array<Shape, 4> pyramid_shapes(const Pyramid<T>& p) {
  return {p[0].shape(), p[1].shape(), p[2].shape(), p[3].shape()};
}

template <typename T>
void init_fpfn(Initializer<T> in, const std::array<std::size_t, 4>& channels,
               std::size_t unified) {
  for (std::size_t i = 0; i < 4; ++i) {
    in.trunc_normal("lateral" + std::to_string(i + 1) + ".weight", {channels[i], unified});
  }
}

/// Bias-free pointwise projection of every level to the unified width, then
/// f''_i = f'_i + upsample(f'_{i+1}) for the three lower levels.
template <typename T>
Pyramid<T> fpfn(const Scope<T>& s, const Pyramid<T>& p,
                const std::array<std::size_t, 4>& channels) {
  check_pyramid(pyramid_shapes(p), channels, "fpfn");
  Pyramid<T> lateral;
  for (std::size_t i = 0; i < 4; ++i) {
    lateral[i] = pointwise_conv(p[i], s("lateral" + std::to_string(i + 1) + ".weight"));
  }
  Pyramid<T> fused;
  fused[3] = lateral[3];
  for (std::size_t i = 0; i < 3; ++i) {
    const auto target = spatial_extent(lateral[i].value());
    fused[i] = add(lateral[i], trilinear_upsample(lateral[i + 1], target));
  }
  return fused;
}

/// Per-level transport embedding settings that are not learned.
struct OtfpfSettings {
  std::size_t references = kDefaultReferences;
  std::array<double, 4> sigma{1.0, 1.0, 1.0, 1.0};
  ot::SinkhornConfig sinkhorn;

  void validate() const {
    if (references == 0) throw ConfigError("otfpf: references per level must be >= 1");
    for (double s : sigma) KernelSpec{s}.validate();
    sinkhorn.validate();
  }
};

/// Anchors (p = width rows) and references (n x p) for each level, drawn
/// from a unit Gaussian with the initializer's generator.
template <typename T>
void init_otfpf(Initializer<T> in, std::size_t width, std::size_t references) {
  for (std::size_t i = 0; i < 4; ++i) {
    auto lv = in.sub("level" + std::to_string(i + 1));
    const auto seed = in.rng()();
    lv.tensor("anchors", gaussian_rows<T>(width, width, seed));
    lv.tensor("references", gaussian_rows<T>(references, width, seed + 1));
  }
}

template <typename T>
Var<T> level_as_set(const Var<T>& level) {
  const auto& s = level.shape();
  return reshape(level, Shape{s[0] * s[1] * s[2], s[3]});
}

/// Concatenation of the flattened n x p embeddings of the four levels.
template <typename T>
Var<T> otfpf_module(const Scope<T>& s, const Pyramid<T>& fused, const OtfpfSettings& cfg,
                    std::array<OtemDiagnostics, 4>* diag = nullptr) {
  cfg.validate();
  const std::size_t width = fused[0].shape().at(3);
  check_pyramid(pyramid_shapes(fused), {width, width, width, width}, "otfpf_module");
  std::vector<Var<T>> parts;
  for (std::size_t i = 0; i < 4; ++i) {
    auto lv = s.sub("level" + std::to_string(i + 1));
    auto e = otem_embed(level_as_set(fused[i]), lv("anchors"), lv("references"),
                        KernelSpec{cfg.sigma[i]}, cfg.sinkhorn, diag ? &(*diag)[i] : nullptr);
    parts.push_back(flatten(e));
  }
  return concat_channels(parts);
}

}  // namespace otfpf
