#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sonoseg/adapter.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct EncoderConfig {
  int64_t image_size = 64;
  int64_t patch = 4;
  std::array<int64_t, 3> dims{32, 64, 128};
  std::array<int, 3> num_blocks{1, 1, 1};
  std::array<int, 3> num_heads{2, 2, 4};
  int64_t adapter_bottleneck = 16;
  int64_t adapter_edge_dim = 16;
  std::vector<EdgeDirection> edge_directions = all_edge_directions();
  // Alternative wiring for where the adapter output attaches: default adds it
  // to the block output stream; when set, it is added to the block input.
  bool prompt_at_block_input = false;

  int64_t grid_size(int stage) const { return (image_size / patch) >> stage; }  // stage 0-based
  int64_t decoder_dim() const { return dims[2]; }

  void validate() const {
    if (image_size < 8 || patch < 1 || image_size % patch != 0)
      throw ConfigError("image size " + std::to_string(image_size) +
                        " not divisible by patch size " + std::to_string(patch));
    if (!(dims[0] <= dims[1] && dims[1] <= dims[2]))
      throw ConfigError("stage dims must be non-decreasing");
    for (int l = 0; l < 3; ++l) {
      if (num_blocks[l] < 1) throw ConfigError("each stage needs at least one block");
      if (num_heads[l] < 1 || dims[l] % num_heads[l] != 0)
        throw ConfigError("stage " + std::to_string(l + 1) + " dim " + std::to_string(dims[l]) +
                          " not divisible by " + std::to_string(num_heads[l]) + " heads");
      if (adapter_bottleneck >= dims[l])
        throw ConfigError("adapter bottleneck " + std::to_string(adapter_bottleneck) +
                          " is not a bottleneck for stage dim " + std::to_string(dims[l]));
    }
    int64_t g = image_size / patch;
    if (g % 4 != 0)
      throw ConfigError("token grid " + std::to_string(g) + " must be divisible by 4 for two downsamples");
  }
};

// Strided-conv patchification plus a learned positional grid.
struct PatchEmbed {
  int64_t patch, dim;
  Tensor w, b, pos;

  PatchEmbed(const EncoderConfig& cfg, Rng& rng) : patch(cfg.patch), dim(cfg.dims[0]) {
    w = detail::trunc_normal_tensor({dim, 1, patch, patch}, rng);
    b = Tensor::zeros({dim}, true);
    int64_t g = cfg.image_size / cfg.patch;
    pos = detail::trunc_normal_tensor({dim, g, g}, rng);
  }

  Tensor forward(const Tensor& img) const {
    if (img.rank() != 3 || img.dim(0) != 1)
      throw ShapeError("patch embed expects [1,H,W], got " + shape_str(img.shape()));
    if (img.dim(1) % patch != 0 || img.dim(2) % patch != 0)
      throw ConfigError("image extent " + shape_str(img.shape()) +
                        " not divisible by patch " + std::to_string(patch));
    Tensor g = conv2d(img, w, b, static_cast<int>(patch), 0);
    check_shape(g.shape() == pos.shape(), "patch embed grid vs positional grid", g.shape(),
                pos.shape());
    return add(g, pos);
  }

  void params(ParamList& out) const {
    out.push_back({"patch_embed.w", w});
    out.push_back({"patch_embed.b", b});
    out.push_back({"patch_embed.pos", pos});
  }
};

// Pre-norm transformer block with global multi-head self-attention over the
// stage's token grid and a 4x MLP.
struct TransformerBlock {
  int64_t dim, heads;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor qkv_w, qkv_b;    // fused projection, dim -> 3*dim
  Tensor proj_w, proj_b;  // dim -> dim
  Tensor fc1_w, fc1_b;    // dim -> 4*dim
  Tensor fc2_w, fc2_b;    // 4*dim -> dim

  TransformerBlock(int64_t dim_, int64_t heads_, Rng& rng) : dim(dim_), heads(heads_) {
    ln1_g = Tensor::full({dim}, 1.0);
    ln1_g.set_requires_grad(true);
    ln1_b = Tensor::zeros({dim}, true);
    ln2_g = Tensor::full({dim}, 1.0);
    ln2_g.set_requires_grad(true);
    ln2_b = Tensor::zeros({dim}, true);
    qkv_w = detail::trunc_normal_tensor({dim, 3 * dim}, rng);
    qkv_b = Tensor::zeros({3 * dim}, true);
    proj_w = detail::trunc_normal_tensor({dim, dim}, rng);
    proj_b = Tensor::zeros({dim}, true);
    fc1_w = detail::trunc_normal_tensor({dim, 4 * dim}, rng);
    fc1_b = Tensor::zeros({4 * dim}, true);
    fc2_w = detail::trunc_normal_tensor({4 * dim, dim}, rng);
    fc2_b = Tensor::zeros({dim}, true);
  }

  Tensor forward(const Tensor& tokens) const {
    if (tokens.rank() != 2 || tokens.dim(1) != dim)
      throw ShapeError("block expects [N," + std::to_string(dim) + "], got " +
                       shape_str(tokens.shape()));
    int64_t n = tokens.dim(0);
    int64_t dh = dim / heads;

    Tensor a = layer_norm(tokens, ln1_g, ln1_b);
    Tensor qkv = linear(a, qkv_w, qkv_b);
    auto head_split = [&](int64_t off) {
      return permute(reshape(slice(qkv, 1, off, dim), {n, heads, dh}), {1, 0, 2});
    };
    Tensor q = head_split(0), k = head_split(dim), v = head_split(2 * dim);
    Tensor att = softmax(scale(matmul(q, permute(k, {0, 2, 1})),
                               1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor o = reshape(permute(matmul(att, v), {1, 0, 2}), {n, dim});
    Tensor x1 = add(tokens, linear(o, proj_w, proj_b));

    Tensor m = linear(gelu(linear(layer_norm(x1, ln2_g, ln2_b), fc1_w, fc1_b)), fc2_w, fc2_b);
    return add(x1, m);
  }

  void params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "ln1.g", ln1_g});
    out.push_back({prefix + "ln1.b", ln1_b});
    out.push_back({prefix + "qkv.w", qkv_w});
    out.push_back({prefix + "qkv.b", qkv_b});
    out.push_back({prefix + "proj.w", proj_w});
    out.push_back({prefix + "proj.b", proj_b});
    out.push_back({prefix + "ln2.g", ln2_g});
    out.push_back({prefix + "ln2.b", ln2_b});
    out.push_back({prefix + "fc1.w", fc1_w});
    out.push_back({prefix + "fc1.b", fc1_b});
    out.push_back({prefix + "fc2.w", fc2_w});
    out.push_back({prefix + "fc2.b", fc2_b});
  }
};

// Distillation observables of one stage.
struct StageTaps {
  Tensor stage_input;  // x_l
  Tensor block_out;    // block-level tap
  Tensor adapter_out;  // adapter-level tap
  Tensor integration;  // block_out + adapter_out, the stage output
};

struct Stage {
  int index;  // 1-based
  int64_t dim;
  bool has_downsample;
  bool prompt_at_block_input;
  std::vector<TransformerBlock> blocks;
  ChAdapter adapter;
  Tensor down_w, down_b;  // 1x1 conv dim -> 2*dim after max-pool

  Stage(const EncoderConfig& cfg, int l, Rng& rng)
      : index(l + 1),
        dim(cfg.dims[l]),
        has_downsample(l < 2),
        prompt_at_block_input(cfg.prompt_at_block_input),
        adapter(AdapterConfig{cfg.dims[l], cfg.adapter_bottleneck, cfg.adapter_edge_dim,
                              cfg.edge_directions},
                rng) {
    for (int i = 0; i < cfg.num_blocks[l]; ++i) blocks.emplace_back(dim, cfg.num_heads[l], rng);
    if (has_downsample) {
      down_w = detail::trunc_normal_tensor({cfg.dims[l + 1], dim, 1, 1}, rng);
      down_b = Tensor::zeros({cfg.dims[l + 1]}, true);
    }
  }

  StageTaps forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(0) != dim)
      throw ShapeError("stage " + std::to_string(index) + " expects [" + std::to_string(dim) +
                       ",H,W], got " + shape_str(x.shape()));
    StageTaps taps;
    taps.stage_input = x;
    taps.adapter_out = adapter.forward(x).h;

    Tensor block_in = prompt_at_block_input ? add(x, taps.adapter_out) : x;
    int64_t h = x.dim(1), w = x.dim(2);
    Tensor tok = chw_to_tokens(block_in);
    for (const TransformerBlock& b : blocks) tok = b.forward(tok);
    taps.block_out = tokens_to_chw(tok, h, w);

    taps.integration = add(taps.block_out, taps.adapter_out);
    return taps;
  }

  Tensor downsample(const Tensor& x) const {
    if (!has_downsample) throw ContractViolation("stage 3 has no downsample");
    return conv2d(maxpool2x(x), down_w, down_b, 1, 0);
  }

  void params(ParamList& out) const {
    std::string sp = "stage" + std::to_string(index) + ".";
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].params(sp + "block" + std::to_string(i + 1) + ".", out);
    adapter.params(sp + "adapter.", out);
    if (has_downsample) {
      out.push_back({sp + "downsample.w", down_w});
      out.push_back({sp + "downsample.b", down_b});
    }
  }
};

struct EncodeOut {
  Tensor embedding;  // neck output at decoder dim
  std::array<StageTaps, 3> taps;
};

struct Encoder {
  EncoderConfig cfg;
  PatchEmbed patch_embed;
  std::vector<Stage> stages;
  Tensor neck_w, neck_b;  // 1x1 conv, last stage dim -> decoder dim

  Encoder(EncoderConfig c, Rng& rng)
      : cfg((c.validate(), c)), patch_embed(cfg, rng) {
    for (int l = 0; l < 3; ++l) stages.emplace_back(cfg, l, rng);
    neck_w = detail::trunc_normal_tensor({cfg.decoder_dim(), cfg.dims[2], 1, 1}, rng);
    neck_b = Tensor::zeros({cfg.decoder_dim()}, true);
  }

  EncodeOut encode(const Tensor& img) const {
    if (img.rank() != 3 || img.dim(0) != 1 || img.dim(1) != cfg.image_size ||
        img.dim(2) != cfg.image_size)
      throw ShapeError("encoder expects [1," + std::to_string(cfg.image_size) + "," +
                       std::to_string(cfg.image_size) + "], got " + shape_str(img.shape()));
    EncodeOut out;
    Tensor x = patch_embed.forward(img);
    for (int l = 0; l < 3; ++l) {
      out.taps[l] = stages[l].forward(x);
      x = l < 2 ? stages[l].downsample(out.taps[l].integration) : out.taps[l].integration;
    }
    out.embedding = conv2d(x, neck_w, neck_b, 1, 0);
    return out;
  }

  void params(ParamList& out) const {
    patch_embed.params(out);
    for (const Stage& s : stages) s.params(out);
    out.push_back({"neck.w", neck_w});
    out.push_back({"neck.b", neck_b});
  }
};

}  // namespace sonoseg
