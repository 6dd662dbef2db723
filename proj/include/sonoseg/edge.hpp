#pragma once

#include <string>
#include <vector>

#include "sonoseg/optim.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

// ---------------------------------------------------------------------------
// fixed directional filter bank
// ---------------------------------------------------------------------------

enum class EdgeDirection { horizontal, vertical, right_diagonal, left_diagonal };

inline const std::vector<EdgeDirection>& all_edge_directions() {
  static const std::vector<EdgeDirection> dirs{
      EdgeDirection::horizontal, EdgeDirection::vertical, EdgeDirection::right_diagonal,
      EdgeDirection::left_diagonal};
  return dirs;
}

inline std::string direction_name(EdgeDirection d) {
  switch (d) {
    case EdgeDirection::horizontal: return "horizontal";
    case EdgeDirection::vertical: return "vertical";
    case EdgeDirection::right_diagonal: return "right_diagonal";
    case EdgeDirection::left_diagonal: return "left_diagonal";
  }
  throw ContractViolation("unreachable edge direction");
}

inline EdgeDirection parse_direction(const std::string& s) {
  for (EdgeDirection d : all_edge_directions())
    if (direction_name(d) == s) return d;
  throw ConfigError("unknown edge direction '" + s + "'");
}

// The 3x3 kernel for one direction. Horizontal responds to d/dx, vertical to
// d/dy, and the diagonals are the 45/135-degree variants.
inline Tensor sobel_kernel(EdgeDirection d) {
  switch (d) {
    case EdgeDirection::horizontal:
      return Tensor::from_data({3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
    case EdgeDirection::vertical:
      return Tensor::from_data({3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
    case EdgeDirection::right_diagonal:
      return Tensor::from_data({3, 3}, {0, 1, 2, -1, 0, 1, -2, -1, 0});
    case EdgeDirection::left_diagonal:
      return Tensor::from_data({3, 3}, {-2, -1, 0, -1, 0, 1, 0, 1, 2});
  }
  throw ContractViolation("unreachable edge direction");
}

// All four directional kernels. Constants, never optimizer parameters.
struct SobelBank {
  std::vector<EdgeDirection> directions;
  std::vector<Tensor> kernels;  // each {3,3}, aligned with directions
};

inline SobelBank sobel_bank() {
  SobelBank b;
  b.directions = all_edge_directions();
  for (EdgeDirection d : b.directions) b.kernels.push_back(sobel_kernel(d));
  return b;
}

// ---------------------------------------------------------------------------
// edge-aware feature path
// ---------------------------------------------------------------------------

namespace detail {
// Depthwise [C,1,3,3] stack of one fixed kernel, detached from the tape.
inline Tensor depthwise_bank(const Tensor& k33, int64_t channels) {
  std::vector<double> d;
  d.reserve(static_cast<size_t>(channels * 9));
  for (int64_t c = 0; c < channels; ++c)
    d.insert(d.end(), k33.data().begin(), k33.data().end());
  return Tensor::from_data({channels, 1, 3, 3}, std::move(d));
}

// 1x1 identity conv kernel [C,C,1,1].
inline Tensor identity_1x1(int64_t channels) {
  std::vector<double> d(static_cast<size_t>(channels * channels), 0.0);
  for (int64_t c = 0; c < channels; ++c) d[c * channels + c] = 1.0;
  return Tensor::from_data({channels, channels, 1, 1}, std::move(d));
}

inline Tensor trunc_normal_tensor(Shape shape, Rng& rng, double stddev = 0.02) {
  std::vector<double> d(static_cast<size_t>(numel_of(shape)));
  for (double& v : d) v = rng.trunc_normal(stddev);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}
}  // namespace detail

// Edge branch of the hybrid adapter: a trainable 1x1 patch mixer compresses
// the stage channels to the edge dim, each reduced channel is filtered by the
// selected fixed directional kernels and the responses summed, then a
// trainable 1x1 mixer (edge dim -> edge dim) recombines channels. The final
// up-mix back to stage channels lives at the adapter output boundary.
struct EdgeAware {
  int64_t c_stage = 0;
  int64_t c_edge = 0;
  std::vector<EdgeDirection> directions;
  std::vector<Tensor> dw_kernels;  // depthwise [c_edge,1,3,3] per direction, frozen
  Tensor patch_w, patch_b;         // 1x1 conv, c_stage -> c_edge
  Tensor mixer_w, mixer_b;         // 1x1 conv, c_edge -> c_edge

  EdgeAware(int64_t c_stage_, int64_t c_edge_, std::vector<EdgeDirection> dirs, Rng& rng)
      : c_stage(c_stage_), c_edge(c_edge_), directions(std::move(dirs)) {
    if (directions.empty()) throw ConfigError("edge path configured with zero directions");
    for (EdgeDirection d : directions)
      dw_kernels.push_back(detail::depthwise_bank(sobel_kernel(d), c_edge));
    patch_w = detail::trunc_normal_tensor({c_edge, c_stage, 1, 1}, rng);
    patch_b = Tensor::zeros({c_edge}, true);
    mixer_w = detail::trunc_normal_tensor({c_edge, c_edge, 1, 1}, rng);
    mixer_b = Tensor::zeros({c_edge}, true);
  }

  // [c_stage,H,W] -> [c_edge,H,W]
  Tensor patch_mix(const Tensor& f) const {
    if (f.rank() != 3 || f.dim(0) != c_stage)
      throw ShapeError("patch mixer expects [" + std::to_string(c_stage) + ",H,W], got " +
                       shape_str(f.shape()));
    return conv2d(f, patch_w, patch_b, 1, 0);
  }

  // Per-channel directional filtering, responses summed. Shape-preserving
  // (zero pad 1); pure function of the fixed kernels.
  Tensor sobel_sum(const Tensor& f) const {
    if (f.rank() != 3 || f.dim(0) != c_edge)
      throw ShapeError("edge filter expects [" + std::to_string(c_edge) + ",H,W], got " +
                       shape_str(f.shape()));
    Tensor acc;
    for (const Tensor& k : dw_kernels) {
      Tensor r = conv2d(f, k, 1, 1, static_cast<int>(c_edge));
      acc = acc.defined() ? add(acc, r) : r;
    }
    return acc;
  }

  // filtering + trainable channel mixer
  Tensor edge_enhance(const Tensor& f) const {
    return conv2d(sobel_sum(f), mixer_w, mixer_b, 1, 0);
  }

  // full branch from stage features (still at edge dim)
  Tensor forward(const Tensor& f) const { return edge_enhance(patch_mix(f)); }

  void params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "patch_mixer.w", patch_w});
    out.push_back({prefix + "patch_mixer.b", patch_b});
    out.push_back({prefix + "mixer.w", mixer_w});
    out.push_back({prefix + "mixer.b", mixer_b});
  }
};

}  // namespace sonoseg
