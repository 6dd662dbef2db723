#include <catch2/catch_amalgamated.hpp>

#include "sonoseg/decoder.hpp"
#include "sonoseg/gradcheck.hpp"

using namespace sonoseg;
using Catch::Approx;

TEST_CASE("box validation") {
  CHECK_NOTHROW(validate_box({0, 0, 63, 63}, 64));
  CHECK_NOTHROW(validate_box({5, 10, 20, 30}, 64));
  CHECK_THROWS_AS(validate_box({5, 5, 5, 10}, 64), DataError);   // zero width
  CHECK_THROWS_AS(validate_box({10, 5, 5, 10}, 64), DataError);  // inverted
  CHECK_THROWS_AS(validate_box({-1, 0, 5, 5}, 64), DataError);   // out of bounds
  CHECK_THROWS_AS(validate_box({0, 0, 64, 63}, 64), DataError);  // past extent
}

TEST_CASE("box tokens are deterministic and corner-distinct") {
  Rng rng(81, "prompt-init", 0);
  PromptEncoder pe(64, rng);
  BoxPrompt box{4, 8, 40, 50};
  Tensor t1 = pe.encode_box(box, 64);
  Tensor t2 = pe.encode_box(box, 64);
  REQUIRE(t1.shape() == Shape{2, 64});
  CHECK(t1.data() == t2.data());

  // full-extent box: the two corner tokens must differ
  Tensor full = pe.encode_box({0, 0, 63, 63}, 64);
  bool differ = false;
  for (int64_t c = 0; c < 64; ++c)
    differ = differ || full.at({0, c}) != full.at({1, c});
  CHECK(differ);

  // different boxes produce different tokens
  Tensor other = pe.encode_box({5, 8, 40, 50}, 64);
  CHECK(t1.data() != other.data());

  CHECK_THROWS_AS(PromptEncoder(30, rng), ConfigError);  // dim not divisible by 4
}

TEST_CASE("decoder output shape, determinism, finiteness") {
  Rng rng(82, "dec-init", 0);
  MaskDecoder dec(64, 64, 4, rng);  // dim 64, image 64, grid 4
  Rng pr(82, "prompt-init", 0);
  PromptEncoder pe(64, pr);

  Rng data(82, "dec-data", 0);
  Tensor emb = random_tensor({64, 4, 4}, data);
  Tensor tok = pe.encode_box({10, 10, 50, 50}, 64);
  Tensor l1 = dec.forward(emb, tok);
  REQUIRE(l1.shape() == Shape{1, 64, 64});
  for (double v : l1.data()) CHECK(std::isfinite(v));

  Tensor l2 = dec.forward(emb, tok);
  CHECK(l1.data() == l2.data());

  CHECK_THROWS_AS(dec.forward(random_tensor({64, 8, 8}, data), tok), ShapeError);
  CHECK_THROWS_AS(dec.forward(emb, random_tensor({3, 64}, data)), ShapeError);
}

TEST_CASE("decoder configuration validation") {
  Rng rng(83, "dec-init", 0);
  CHECK_THROWS_AS(MaskDecoder(60, 64, 4, rng), ConfigError);  // dim not divisible by 8
  CHECK_THROWS_AS(MaskDecoder(64, 24, 4, rng), ConfigError);  // 24 not multiple of grid*8
}

TEST_CASE("full model forward produces image-resolution logits") {
  EncoderConfig cfg;  // 64x64 toy teacher
  Rng rng(84, "model-init", 0);
  SegModel model(cfg, rng);
  Rng data(84, "model-data", 0);
  Tensor img = random_tensor({1, 64, 64}, data, 0.0, 1.0);
  auto out = model.forward(img, {8, 8, 55, 55});
  REQUIRE(out.logits.shape() == Shape{1, 64, 64});
  for (double v : out.logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("gradients reach prompt and decoder weights") {
  Rng rng(85, "dec-init", 0);
  MaskDecoder dec(16, 16, 2, rng);  // dim 16, image 16, grid 2
  Rng pr(85, "prompt-init", 0);
  PromptEncoder pe(16, pr);
  Rng data(85, "dec-data", 0);
  Tensor emb = random_tensor({16, 2, 2}, data, -1.0, 1.0, true);

  Tensor loss = mean(dec.forward(emb, pe.encode_box({2, 2, 12, 12}, 16)));
  loss.backward();
  auto nonzero = [](const Tensor& t) {
    if (!t.has_grad()) return false;
    for (double v : t.grad())
      if (v != 0.0) return true;
    return false;
  };
  CHECK(nonzero(pe.corner_embed));
  CHECK(nonzero(dec.mask_token));
  CHECK(nonzero(dec.up1_w));
  CHECK(nonzero(dec.head2_w));
  CHECK(nonzero(emb));
}

TEST_CASE("gradcheck through a tiny decoder") {
  Rng rng(86, "dec-init", 0);
  MaskDecoder dec(8, 16, 2, rng);  // dim 8, image 16, grid 2
  Rng pr(86, "prompt-init", 0);
  PromptEncoder pe(8, pr);
  Rng data(86, "dec-data", 0);
  Tensor emb = random_tensor({8, 2, 2}, data);
  Tensor tok = pe.encode_box({1, 1, 12, 12}, 16);

  std::vector<Tensor> inputs{emb, dec.mask_token, dec.up2_w, dec.head1_w,
                             dec.layers[0].t2i.wq};
  Rng probe(86, "dec-probe", 0);
  auto res = grad_check(
      [&](const std::vector<Tensor>& in) { return dec.forward(in[0], tok); }, inputs, probe);
  INFO("max rel err " << res.max_rel_err << " at " << res.worst);
  CHECK(res.ok);
}
