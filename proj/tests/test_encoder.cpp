#include <catch2/catch_amalgamated.hpp>

#include "sonoseg/decoder.hpp"
#include "sonoseg/encoder.hpp"
#include "sonoseg/gradcheck.hpp"

using namespace sonoseg;
using Catch::Approx;

namespace {

EncoderConfig student_cfg() {
  EncoderConfig cfg;
  cfg.dims = {16, 32, 64};
  cfg.adapter_bottleneck = 8;
  cfg.adapter_edge_dim = 8;
  return cfg;
}

EncoderConfig micro_cfg() {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.patch = 4;
  cfg.dims = {8, 16, 32};
  cfg.num_heads = {1, 2, 2};
  cfg.adapter_bottleneck = 4;
  cfg.adapter_edge_dim = 4;
  return cfg;
}

}  // namespace

TEST_CASE("patch embedding shape and determinism") {
  EncoderConfig cfg;  // toy defaults: 64x64, patch 4, dims 32/64/128
  Rng r1(71, "enc-init", 0);
  PatchEmbed pe1(cfg, r1);
  Rng r2(71, "enc-init", 0);
  PatchEmbed pe2(cfg, r2);

  Rng data(71, "enc-data", 0);
  Tensor img = random_tensor({1, 64, 64}, data, 0.0, 1.0);
  Tensor g1 = pe1.forward(img);
  REQUIRE(g1.shape() == Shape{32, 16, 16});
  CHECK(g1.data() == pe2.forward(img).data());

  // gradient reaches the patch kernel
  Tensor img_g = img.detach();
  Tensor loss = sum(pe1.forward(img_g));
  loss.backward();
  bool any = false;
  for (double v : pe1.w.grad()) any = any || v != 0.0;
  CHECK(any);

  CHECK_THROWS_AS(pe1.forward(Tensor::zeros({1, 63, 64})), ConfigError);
  CHECK_THROWS_AS(pe1.forward(Tensor::zeros({3, 64, 64})), ShapeError);
}

TEST_CASE("three chained stages trace the expected shapes") {
  EncoderConfig cfg;
  Rng rng(72, "enc-init", 0);
  Encoder enc(cfg, rng);
  Rng data(72, "enc-data", 0);
  Tensor img = random_tensor({1, 64, 64}, data, 0.0, 1.0);
  EncodeOut out = enc.encode(img);

  CHECK(out.taps[0].integration.shape() == Shape{32, 16, 16});
  CHECK(out.taps[1].integration.shape() == Shape{64, 8, 8});
  CHECK(out.taps[2].integration.shape() == Shape{128, 4, 4});
  CHECK(out.embedding.shape() == Shape{128, 4, 4});
  for (int l = 0; l < 3; ++l) {
    CHECK(out.taps[l].block_out.shape() == out.taps[l].integration.shape());
    CHECK(out.taps[l].adapter_out.shape() == out.taps[l].integration.shape());
  }
}

TEST_CASE("taps satisfy the integration identity") {
  EncoderConfig cfg = micro_cfg();
  Rng rng(73, "enc-init", 0);
  Encoder enc(cfg, rng);
  // randomize adapter outputs so the identity is non-trivial
  ParamList params;
  enc.params(params);
  Rng wr(73, "enc-weights", 0);
  for (auto& p : params)
    if (p.name.find(".adapter.") != std::string::npos)
      for (double& v : p.value.raw_data()) v = wr.uniform(-0.1, 0.1);

  Rng data(73, "enc-data", 0);
  Tensor img = random_tensor({1, 16, 16}, data, 0.0, 1.0);
  EncodeOut out = enc.encode(img);
  for (int l = 0; l < 3; ++l) {
    const auto& t = out.taps[l];
    for (int64_t i = 0; i < t.integration.numel(); ++i)
      CHECK(t.integration.data()[i] == t.block_out.data()[i] + t.adapter_out.data()[i]);
  }
}

TEST_CASE("fresh adapters leave the backbone stream untouched") {
  EncoderConfig cfg = micro_cfg();
  Rng rng(74, "enc-init", 0);
  Encoder enc(cfg, rng);
  Rng data(74, "enc-data", 0);
  Tensor img = random_tensor({1, 16, 16}, data, 0.0, 1.0);
  EncodeOut out = enc.encode(img);
  for (int l = 0; l < 3; ++l) {
    for (double v : out.taps[l].adapter_out.data()) CHECK(v == 0.0);
    CHECK(out.taps[l].integration.data() == out.taps[l].block_out.data());
  }
}

TEST_CASE("teacher and student grids align spatially per stage") {
  Rng rt(75, "teacher-init", 0);
  Encoder teacher(EncoderConfig{}, rt);
  Rng rs(75, "student-init", 0);
  Encoder student(student_cfg(), rs);

  Rng data(75, "enc-data", 0);
  Tensor img = random_tensor({1, 64, 64}, data, 0.0, 1.0);
  EncodeOut t = teacher.encode(img);
  EncodeOut s = student.encode(img);
  for (int l = 0; l < 3; ++l) {
    CHECK(t.taps[l].integration.dim(1) == s.taps[l].integration.dim(1));
    CHECK(t.taps[l].integration.dim(2) == s.taps[l].integration.dim(2));
    CHECK(t.taps[l].integration.dim(0) == 2 * s.taps[l].integration.dim(0));
  }
}

TEST_CASE("peft freeze audit over five optimizer steps") {
  EncoderConfig cfg = micro_cfg();
  Rng rng(76, "model-init", 0);
  SegModel model(cfg, rng);
  ParamList params = model.params();
  apply_peft_freeze(params);

  // snapshot everything
  std::vector<std::vector<double>> before;
  for (const auto& p : params) before.push_back(p.value.data());

  Rng data(76, "train-data", 0);
  Tensor img = random_tensor({1, 16, 16}, data, 0.0, 1.0);
  BoxPrompt box{2, 2, 13, 13};
  AdamConfig ocfg;
  ocfg.lr = 1e-2;
  Adam opt(params, ocfg);
  for (int step = 0; step < 5; ++step) {
    Tensor logits = model.forward(img, box).logits;
    Tensor loss = mean(mul(logits, logits));
    loss.backward();
    opt.step();
  }

  int frozen_cnt = 0, trainable_cnt = 0, changed_cnt = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].name;
    bool is_backbone = name.rfind("patch_embed.", 0) == 0 || name.rfind("neck.", 0) == 0 ||
                       name.find(".block") != std::string::npos ||
                       name.find(".downsample.") != std::string::npos;
    if (is_backbone) {
      ++frozen_cnt;
      CHECK(params[i].value.data() == before[i]);  // bit-identical
    } else {
      ++trainable_cnt;
      if (params[i].value.data() != before[i]) ++changed_cnt;
    }
  }
  CHECK(frozen_cnt > 0);
  CHECK(trainable_cnt > 0);
  // every non-backbone family must have moved somewhere
  CHECK(changed_cnt > trainable_cnt / 2);
}

TEST_CASE("parameter names cover the documented scheme uniquely") {
  EncoderConfig cfg = micro_cfg();
  Rng rng(77, "model-init", 0);
  SegModel model(cfg, rng);
  ParamList params = model.params();  // throws on duplicates

  auto has_prefix = [&](const std::string& pre) {
    for (const auto& p : params)
      if (p.name.rfind(pre, 0) == 0) return true;
    return false;
  };
  CHECK(has_prefix("patch_embed."));
  CHECK(has_prefix("stage1.block1."));
  CHECK(has_prefix("stage2.block1."));
  CHECK(has_prefix("stage3.block1."));
  CHECK(has_prefix("stage1.adapter."));
  CHECK(has_prefix("stage1.downsample."));
  CHECK(has_prefix("stage2.downsample."));
  CHECK(has_prefix("neck."));
  CHECK(has_prefix("decoder."));
  CHECK(has_prefix("prompt."));
  CHECK_FALSE(has_prefix("stage3.downsample."));
}

TEST_CASE("alternative adapter wiring still satisfies the tap identity") {
  EncoderConfig cfg = micro_cfg();
  cfg.prompt_at_block_input = true;
  Rng rng(78, "enc-init", 0);
  Encoder enc(cfg, rng);
  ParamList params;
  enc.params(params);
  Rng wr(78, "enc-weights", 0);
  for (auto& p : params)
    if (p.name.find(".adapter.") != std::string::npos)
      for (double& v : p.value.raw_data()) v = wr.uniform(-0.1, 0.1);

  Rng data(78, "enc-data", 0);
  Tensor img = random_tensor({1, 16, 16}, data, 0.0, 1.0);
  EncodeOut out = enc.encode(img);
  for (int l = 0; l < 3; ++l) {
    const auto& t = out.taps[l];
    for (int64_t i = 0; i < t.integration.numel(); ++i)
      CHECK(t.integration.data()[i] == t.block_out.data()[i] + t.adapter_out.data()[i]);
  }
}

TEST_CASE("encoder config validation") {
  EncoderConfig cfg;
  cfg.image_size = 63;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.dims = {64, 32, 128};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.num_heads = {3, 2, 4};  // 32 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.adapter_bottleneck = 32;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("gradcheck through one transformer block") {
  Rng rng(79, "block-init", 0);
  TransformerBlock blk(8, 2, rng);
  // non-degenerate weights
  ParamList params;
  blk.params("b.", params);
  Rng wr(79, "block-weights", 0);
  for (auto& p : params)
    for (double& v : p.value.raw_data())
      v = (p.name.find("ln") != std::string::npos && p.name.back() == 'g')
              ? wr.uniform(0.8, 1.2)
              : wr.uniform(-0.3, 0.3);

  Rng data(79, "block-data", 0);
  Tensor x = random_tensor({6, 8}, data);
  std::vector<Tensor> inputs{x, blk.qkv_w, blk.proj_w, blk.fc1_w, blk.ln1_g};
  Rng probe(79, "block-probe", 0);
  auto res = grad_check([&](const std::vector<Tensor>& in) { return blk.forward(in[0]); },
                        inputs, probe);
  INFO("max rel err " << res.max_rel_err << " at " << res.worst);
  CHECK(res.ok);
}
