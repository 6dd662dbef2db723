#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sonoseg/encoder.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

// Inclusive pixel-coordinate box, x0 < x1 and y0 < y1.
struct BoxPrompt {
  int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

inline void validate_box(const BoxPrompt& b, int64_t image_size) {
  if (b.x0 < 0 || b.y0 < 0 || b.x1 >= image_size || b.y1 >= image_size || b.x0 >= b.x1 ||
      b.y0 >= b.y1)
    throw DataError("degenerate box (" + std::to_string(b.x0) + "," + std::to_string(b.y0) +
                    ")-(" + std::to_string(b.x1) + "," + std::to_string(b.y1) +
                    ") for image extent " + std::to_string(image_size));
}

namespace detail {
// Sinusoidal encoding of a normalized 2-D point into `dim` channels
// (dim/4 frequencies per axis, interleaved sin/cos).
inline std::vector<double> point_pe(double nx, double ny, int64_t dim) {
  std::vector<double> pe(static_cast<size_t>(dim));
  int64_t quarter = dim / 4;
  for (int64_t i = 0; i < quarter; ++i) {
    double w = 2.0 * M_PI * static_cast<double>(i + 1);
    pe[4 * i + 0] = std::sin(w * nx);
    pe[4 * i + 1] = std::cos(w * nx);
    pe[4 * i + 2] = std::sin(w * ny);
    pe[4 * i + 3] = std::cos(w * ny);
  }
  return pe;
}
}  // namespace detail

// Turns a box into two corner tokens: fixed sinusoidal position code plus a
// learned embedding distinguishing the top-left from the bottom-right corner.
struct PromptEncoder {
  int64_t dim;
  Tensor corner_embed;  // [2, dim]

  PromptEncoder(int64_t dim_, Rng& rng) : dim(dim_) {
    if (dim % 4 != 0) throw ConfigError("prompt dim must be divisible by 4");
    corner_embed = detail::trunc_normal_tensor({2, dim}, rng);
  }

  Tensor encode_box(const BoxPrompt& b, int64_t image_size) const {
    validate_box(b, image_size);
    double inv = 1.0 / static_cast<double>(image_size);
    auto tl = detail::point_pe((b.x0 + 0.5) * inv, (b.y0 + 0.5) * inv, dim);
    auto br = detail::point_pe((b.x1 + 0.5) * inv, (b.y1 + 0.5) * inv, dim);
    std::vector<double> both;
    both.reserve(tl.size() + br.size());
    both.insert(both.end(), tl.begin(), tl.end());
    both.insert(both.end(), br.begin(), br.end());
    return add(Tensor::from_data({2, dim}, std::move(both)), corner_embed);
  }

  void params(ParamList& out) const { out.push_back({"prompt.corner_embed", corner_embed}); }
};

// Multi-head attention with separate query and key/value streams.
struct CrossAttention {
  int64_t dim, heads;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  CrossAttention(int64_t dim_, int64_t heads_, Rng& rng) : dim(dim_), heads(heads_) {
    if (dim % heads != 0) throw ConfigError("attention dim not divisible by heads");
    wq = detail::trunc_normal_tensor({dim, dim}, rng);
    bq = Tensor::zeros({dim}, true);
    wk = detail::trunc_normal_tensor({dim, dim}, rng);
    bk = Tensor::zeros({dim}, true);
    wv = detail::trunc_normal_tensor({dim, dim}, rng);
    bv = Tensor::zeros({dim}, true);
    wo = detail::trunc_normal_tensor({dim, dim}, rng);
    bo = Tensor::zeros({dim}, true);
  }

  Tensor forward(const Tensor& q_in, const Tensor& kv_in) const {
    int64_t nq = q_in.dim(0), nk = kv_in.dim(0), dh = dim / heads;
    auto split = [&](const Tensor& t, int64_t n) {
      return permute(reshape(t, {n, heads, dh}), {1, 0, 2});
    };
    Tensor q = split(linear(q_in, wq, bq), nq);
    Tensor k = split(linear(kv_in, wk, bk), nk);
    Tensor v = split(linear(kv_in, wv, bv), nk);
    Tensor att = softmax(scale(matmul(q, permute(k, {0, 2, 1})),
                               1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor o = reshape(permute(matmul(att, v), {1, 0, 2}), {nq, dim});
    return linear(o, wo, bo);
  }

  void params(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + "wq", wq});
    out.push_back({prefix + "bq", bq});
    out.push_back({prefix + "wk", wk});
    out.push_back({prefix + "bk", bk});
    out.push_back({prefix + "wv", wv});
    out.push_back({prefix + "bv", bv});
    out.push_back({prefix + "wo", wo});
    out.push_back({prefix + "bo", bo});
  }
};

// One round of bidirectional token/image attention (post-norm residuals):
// token self-attention, token->image cross, token MLP, image->token cross.
struct TwoWayLayer {
  int64_t dim;
  CrossAttention self_attn, t2i, i2t;
  Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b, ln4_g, ln4_b;

  TwoWayLayer(int64_t dim_, int64_t heads, Rng& rng)
      : dim(dim_), self_attn(dim_, heads, rng), t2i(dim_, heads, rng), i2t(dim_, heads, rng) {
    mlp1_w = detail::trunc_normal_tensor({dim, 4 * dim}, rng);
    mlp1_b = Tensor::zeros({4 * dim}, true);
    mlp2_w = detail::trunc_normal_tensor({4 * dim, dim}, rng);
    mlp2_b = Tensor::zeros({dim}, true);
    auto ones = [&]() {
      Tensor t = Tensor::full({dim}, 1.0);
      t.set_requires_grad(true);
      return t;
    };
    ln1_g = ones();
    ln1_b = Tensor::zeros({dim}, true);
    ln2_g = ones();
    ln2_b = Tensor::zeros({dim}, true);
    ln3_g = ones();
    ln3_b = Tensor::zeros({dim}, true);
    ln4_g = ones();
    ln4_b = Tensor::zeros({dim}, true);
  }

  void forward(Tensor& tokens, Tensor& img_tokens) const {
    tokens = layer_norm(add(tokens, self_attn.forward(tokens, tokens)), ln1_g, ln1_b);
    tokens = layer_norm(add(tokens, t2i.forward(tokens, img_tokens)), ln2_g, ln2_b);
    Tensor m = linear(gelu(linear(tokens, mlp1_w, mlp1_b)), mlp2_w, mlp2_b);
    tokens = layer_norm(add(tokens, m), ln3_g, ln3_b);
    img_tokens = layer_norm(add(img_tokens, i2t.forward(img_tokens, tokens)), ln4_g, ln4_b);
  }

  void params(const std::string& prefix, ParamList& out) const {
    self_attn.params(prefix + "self.", out);
    t2i.params(prefix + "t2i.", out);
    i2t.params(prefix + "i2t.", out);
    out.push_back({prefix + "mlp.fc1.w", mlp1_w});
    out.push_back({prefix + "mlp.fc1.b", mlp1_b});
    out.push_back({prefix + "mlp.fc2.w", mlp2_w});
    out.push_back({prefix + "mlp.fc2.b", mlp2_b});
    out.push_back({prefix + "ln1.g", ln1_g});
    out.push_back({prefix + "ln1.b", ln1_b});
    out.push_back({prefix + "ln2.g", ln2_g});
    out.push_back({prefix + "ln2.b", ln2_b});
    out.push_back({prefix + "ln3.g", ln3_g});
    out.push_back({prefix + "ln3.b", ln3_b});
    out.push_back({prefix + "ln4.g", ln4_g});
    out.push_back({prefix + "ln4.b", ln4_b});
  }
};

// Prompt-conditioned mask head: a learned mask token rides with the two box
// corner tokens through two two-way layers; the refined image tokens are
// upsampled 4->8->16->32 while shrinking channels, the mask token is mapped
// to that channel space, and their per-pixel dot product gives logits that a
// final bilinear resize brings to image resolution.
struct MaskDecoder {
  int64_t dim;        // embedding/prompt dim
  int64_t image_size;
  int64_t grid;       // embedding grid extent
  Tensor mask_token;  // [1, dim]
  std::vector<TwoWayLayer> layers;
  Tensor up1_w, up1_b;  // 3x3 conv dim   -> dim/2 after nearest 2x
  Tensor up2_w, up2_b;  // 3x3 conv dim/2 -> dim/4
  Tensor up3_w, up3_b;  // 3x3 conv dim/4 -> dim/8
  Tensor head1_w, head1_b;  // mask-token MLP dim -> dim
  Tensor head2_w, head2_b;  // dim -> dim/8

  MaskDecoder(int64_t dim_, int64_t image_size_, int64_t grid_, Rng& rng, int64_t heads = 4,
              int n_layers = 2)
      : dim(dim_), image_size(image_size_), grid(grid_) {
    if (dim % 8 != 0) throw ConfigError("decoder dim must be divisible by 8");
    if (grid * 8 > image_size || image_size % (grid * 8) != 0)
      throw ConfigError("decoder grid " + std::to_string(grid) +
                        " incompatible with image size " + std::to_string(image_size));
    mask_token = detail::trunc_normal_tensor({1, dim}, rng);
    for (int i = 0; i < n_layers; ++i) layers.emplace_back(dim, heads, rng);
    up1_w = detail::trunc_normal_tensor({dim / 2, dim, 3, 3}, rng);
    up1_b = Tensor::zeros({dim / 2}, true);
    up2_w = detail::trunc_normal_tensor({dim / 4, dim / 2, 3, 3}, rng);
    up2_b = Tensor::zeros({dim / 4}, true);
    up3_w = detail::trunc_normal_tensor({dim / 8, dim / 4, 3, 3}, rng);
    up3_b = Tensor::zeros({dim / 8}, true);
    head1_w = detail::trunc_normal_tensor({dim, dim}, rng);
    head1_b = Tensor::zeros({dim}, true);
    head2_w = detail::trunc_normal_tensor({dim, dim / 8}, rng);
    head2_b = Tensor::zeros({dim / 8}, true);
  }

  // embedding [dim, grid, grid], prompt_tokens [2, dim] -> logits [1, S, S]
  Tensor forward(const Tensor& embedding, const Tensor& prompt_tokens) const {
    if (embedding.rank() != 3 || embedding.dim(0) != dim || embedding.dim(1) != grid ||
        embedding.dim(2) != grid)
      throw ShapeError("decoder expects embedding [" + std::to_string(dim) + "," +
                       std::to_string(grid) + "," + std::to_string(grid) + "], got " +
                       shape_str(embedding.shape()));
    if (prompt_tokens.rank() != 2 || prompt_tokens.dim(0) != 2 || prompt_tokens.dim(1) != dim)
      throw ShapeError("decoder expects 2 prompt tokens of dim " + std::to_string(dim) +
                       ", got " + shape_str(prompt_tokens.shape()));

    Tensor tokens = concat({mask_token, prompt_tokens}, 0);  // [3, dim]
    Tensor img_tokens = chw_to_tokens(embedding);
    for (const TwoWayLayer& l : layers) l.forward(tokens, img_tokens);

    Tensor g = tokens_to_chw(img_tokens, grid, grid);
    g = gelu(conv2d(upsample_nearest2x(g), up1_w, up1_b, 1, 1));
    g = gelu(conv2d(upsample_nearest2x(g), up2_w, up2_b, 1, 1));
    g = gelu(conv2d(upsample_nearest2x(g), up3_w, up3_b, 1, 1));  // [dim/8, 8g, 8g]

    Tensor mt = slice(tokens, 0, 0, 1);  // [1, dim]
    Tensor mvec = linear(gelu(linear(mt, head1_w, head1_b)), head2_w, head2_b);  // [1, dim/8]

    int64_t s = grid * 8;
    Tensor flat = chw_to_tokens(g);                               // [s*s, dim/8]
    Tensor logits = matmul(flat, transpose(mvec));                // [s*s, 1]
    Tensor lowres = permute(reshape(logits, {s, s, 1}), {2, 0, 1});
    return upsample_bilinear(lowres, image_size, image_size);
  }

  void params(ParamList& out) const {
    out.push_back({"decoder.mask_token", mask_token});
    for (size_t i = 0; i < layers.size(); ++i)
      layers[i].params("decoder.layer" + std::to_string(i + 1) + ".", out);
    out.push_back({"decoder.up1.w", up1_w});
    out.push_back({"decoder.up1.b", up1_b});
    out.push_back({"decoder.up2.w", up2_w});
    out.push_back({"decoder.up2.b", up2_b});
    out.push_back({"decoder.up3.w", up3_w});
    out.push_back({"decoder.up3.b", up3_b});
    out.push_back({"decoder.head.fc1.w", head1_w});
    out.push_back({"decoder.head.fc1.b", head1_b});
    out.push_back({"decoder.head.fc2.w", head2_w});
    out.push_back({"decoder.head.fc2.b", head2_b});
  }
};

// The complete promptable model: encoder, prompt encoder, mask decoder.
struct SegModel {
  EncoderConfig cfg;
  Encoder encoder;
  PromptEncoder prompt;
  MaskDecoder decoder;

  SegModel(EncoderConfig c, Rng& rng)
      : cfg((c.validate(), c)),
        encoder(cfg, rng),
        prompt(cfg.decoder_dim(), rng),
        decoder(cfg.decoder_dim(), cfg.image_size, cfg.image_size / cfg.patch / 4, rng) {}

  struct Out {
    Tensor logits;
    EncodeOut enc;
  };

  Out forward(const Tensor& img, const BoxPrompt& box) const {
    Out o;
    o.enc = encoder.encode(img);
    o.logits = decoder.forward(o.enc.embedding, prompt.encode_box(box, cfg.image_size));
    return o;
  }

  ParamList params() const {
    ParamList out;
    encoder.params(out);
    prompt.params(out);
    decoder.params(out);
    check_unique_names(out);
    return out;
  }
};

}  // namespace sonoseg
