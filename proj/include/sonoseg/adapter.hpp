#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sonoseg/edge.hpp"
#include "sonoseg/optim.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct AdapterConfig {
  int64_t stage_dim = 0;
  int64_t bottleneck = 0;  // context-path compression dim, must be < stage_dim
  int64_t edge_dim = 0;    // edge-path compression dim; ignored when no directions
  std::vector<EdgeDirection> directions = all_edge_directions();  // empty -> context only
};

// Hybrid adapter: a tokenwise bottleneck MLP (context path) plus the fixed
// directional filter branch (edge path), fused by elementwise addition. The
// up projection and the edge output mixer start at zero, so a fresh adapter
// is an exact identity perturbation, and the context-only ablation baseline
// is the same module with no directions configured.
struct ChAdapter {
  AdapterConfig cfg;
  Tensor down_w, down_b;  // stage_dim -> bottleneck
  Tensor up_w, up_b;      // bottleneck -> stage_dim, zero-init
  std::optional<EdgeAware> edge;
  Tensor edge_up_w, edge_up_b;  // 1x1 conv edge_dim -> stage_dim, zero-init

  ChAdapter(AdapterConfig c, Rng& rng) : cfg(std::move(c)) {
    if (cfg.stage_dim < 1) throw ConfigError("adapter stage_dim must be positive");
    if (cfg.bottleneck < 1 || cfg.bottleneck >= cfg.stage_dim)
      throw ConfigError("adapter bottleneck must be in [1, stage_dim): got " +
                        std::to_string(cfg.bottleneck) + " for stage dim " +
                        std::to_string(cfg.stage_dim));
    down_w = detail::trunc_normal_tensor({cfg.stage_dim, cfg.bottleneck}, rng);
    down_b = Tensor::zeros({cfg.bottleneck}, true);
    up_w = Tensor::zeros({cfg.bottleneck, cfg.stage_dim}, true);
    up_b = Tensor::zeros({cfg.stage_dim}, true);
    if (!cfg.directions.empty()) {
      if (cfg.edge_dim < 1) throw ConfigError("adapter edge_dim must be positive");
      edge.emplace(cfg.stage_dim, cfg.edge_dim, cfg.directions, rng);
      edge_up_w = Tensor::zeros({cfg.stage_dim, cfg.edge_dim, 1, 1}, true);
      edge_up_b = Tensor::zeros({cfg.stage_dim}, true);
    }
  }

  // P = up(GELU(down(f))) applied per token; shape-preserving.
  Tensor context_prompt(const Tensor& f) const {
    if (f.rank() != 3 || f.dim(0) != cfg.stage_dim)
      throw ShapeError("adapter expects [" + std::to_string(cfg.stage_dim) + ",H,W], got " +
                       shape_str(f.shape()));
    int64_t h = f.dim(1), w = f.dim(2);
    Tensor tok = chw_to_tokens(f);
    Tensor p = linear(gelu(linear(tok, down_w, down_b)), up_w, up_b);
    return tokens_to_chw(p, h, w);
  }

  // Edge branch brought back to stage channels; all-zeros constant when the
  // adapter is configured context-only.
  Tensor edge_path(const Tensor& f) const {
    if (!edge) return Tensor::zeros(f.shape());
    return conv2d(edge->forward(f), edge_up_w, edge_up_b, 1, 0);
  }

  struct Out {
    Tensor h;       // fused adapter output
    Tensor p;       // context prompt
    Tensor f_edge;  // edge branch at stage channels
  };

  Out forward(const Tensor& f) const {
    Out o;
    o.p = context_prompt(f);
    o.f_edge = edge_path(f);
    o.h = add(o.p, o.f_edge);
    return o;
  }

  void params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "down.w", down_w});
    out.push_back({prefix + "down.b", down_b});
    out.push_back({prefix + "up.w", up_w});
    out.push_back({prefix + "up.b", up_b});
    if (edge) {
      edge->params(prefix, out);
      out.push_back({prefix + "edge_up.w", edge_up_w});
      out.push_back({prefix + "edge_up.b", edge_up_b});
    }
  }
};

// Trainable-parameter accounting over an assembled parameter list.
struct ParamCount {
  int64_t trainable = 0;
  int64_t total = 0;
  double ratio = 0.0;  // trainable / total
};

inline ParamCount count_trainable(const ParamList& params) {
  ParamCount c;
  for (const auto& p : params) {
    int64_t n = p.value.numel();
    c.total += n;
    if (p.value.requires_grad()) c.trainable += n;
  }
  c.ratio = c.total == 0 ? 0.0 : static_cast<double>(c.trainable) / static_cast<double>(c.total);
  return c;
}

}  // namespace sonoseg
