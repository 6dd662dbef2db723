#include <catch2/catch_amalgamated.hpp>

#include "sonoseg/adapter.hpp"
#include "sonoseg/gradcheck.hpp"

using namespace sonoseg;
using Catch::Approx;

namespace {

AdapterConfig toy_cfg() {
  AdapterConfig cfg;
  cfg.stage_dim = 8;
  cfg.bottleneck = 4;
  cfg.edge_dim = 4;
  return cfg;
}

}  // namespace

TEST_CASE("fresh adapter is an identity perturbation") {
  Rng rng(31, "adapter-init", 0);
  ChAdapter ad(toy_cfg(), rng);
  Rng data(31, "adapter-data", 0);
  Tensor f = random_tensor({8, 5, 5}, data);
  auto out = ad.forward(f);
  // zero-init up projection and edge output mixer: h == p == 0
  for (double v : out.p.data()) CHECK(v == 0.0);
  for (double v : out.f_edge.data()) CHECK(v == 0.0);
  CHECK(out.h.data() == out.p.data());
}

TEST_CASE("fusion is exactly context plus edge") {
  Rng rng(32, "adapter-init", 0);
  ChAdapter ad(toy_cfg(), rng);
  // randomize every trainable tensor so both paths are live
  ParamList params;
  ad.params("stage1.adapter.", params);
  Rng wr(32, "adapter-weights", 0);
  for (auto& p : params)
    for (double& v : p.value.raw_data()) v = wr.uniform(-0.2, 0.2);

  Rng data(32, "adapter-data", 0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor f = random_tensor({8, 4, 4}, data);
    auto out = ad.forward(f);
    REQUIRE(out.h.shape() == f.shape());
    REQUIRE(out.p.shape() == f.shape());
    REQUIRE(out.f_edge.shape() == f.shape());
    // h was produced by the same float add, so equality is exact
    for (int64_t i = 0; i < f.numel(); ++i)
      CHECK(out.h.data()[i] == out.p.data()[i] + out.f_edge.data()[i]);
  }
}

TEST_CASE("context-only configuration has no edge parameters") {
  AdapterConfig cfg = toy_cfg();
  cfg.directions.clear();
  Rng rng(33, "adapter-init", 0);
  ChAdapter ad(cfg, rng);
  CHECK_FALSE(ad.edge.has_value());
  ParamList params;
  ad.params("stage1.adapter.", params);
  CHECK(params.size() == 4);  // down w/b, up w/b only

  Rng data(33, "adapter-data", 0);
  Tensor f = random_tensor({8, 4, 4}, data);
  auto out = ad.forward(f);
  for (double v : out.f_edge.data()) CHECK(v == 0.0);
  CHECK(out.h.data() == out.p.data());
}

TEST_CASE("context prompt matches the direct formula") {
  // down/up wired as identity slices onto the first two channels:
  // prompt(x) = [gelu(x0), gelu(x1), 0, 0] per token
  AdapterConfig cfg;
  cfg.stage_dim = 4;
  cfg.bottleneck = 2;
  cfg.edge_dim = 2;
  Rng rng(34, "adapter-init", 0);
  ChAdapter ad(cfg, rng);
  ad.down_w.raw_data() = {1, 0, 0, 1, 0, 0, 0, 0};  // [4,2]
  ad.up_w.raw_data() = {1, 0, 0, 0, 0, 1, 0, 0};    // [2,4]

  Rng data(34, "adapter-data", 0);
  Tensor f = random_tensor({4, 1, 1}, data);
  Tensor p = ad.context_prompt(f);
  auto ref = [](double x) {
    double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  };
  CHECK(p.at({0, 0, 0}) == Approx(ref(f.at({0, 0, 0}))).margin(1e-15));
  CHECK(p.at({1, 0, 0}) == Approx(ref(f.at({1, 0, 0}))).margin(1e-15));
  CHECK(p.at({2, 0, 0}) == 0.0);
  CHECK(p.at({3, 0, 0}) == 0.0);
}

TEST_CASE("trainable parameter accounting") {
  SECTION("fully frozen model") {
    ParamList params{{"a", Tensor::zeros({3, 3})}, {"b", Tensor::zeros({7})}};
    auto c = count_trainable(params);
    CHECK(c.trainable == 0);
    CHECK(c.total == 16);
    CHECK(c.ratio == 0.0);
  }

  SECTION("one full-scale context pair") {
    ParamList params{
        {"stage1.adapter.down.w", Tensor::zeros({768, 192}, true)},
        {"stage1.adapter.down.b", Tensor::zeros({192}, true)},
        {"stage1.adapter.up.w", Tensor::zeros({192, 768}, true)},
        {"stage1.adapter.up.b", Tensor::zeros({768}, true)},
    };
    auto c = count_trainable(params);
    CHECK(c.trainable == 295872);
  }

  SECTION("toy adapter against an independent hand count") {
    AdapterConfig cfg;
    cfg.stage_dim = 32;
    cfg.bottleneck = 16;
    cfg.edge_dim = 16;
    Rng rng(35, "adapter-init", 0);
    ChAdapter ad(cfg, rng);
    ParamList params;
    ad.params("stage1.adapter.", params);
    auto c = count_trainable(params);
    // down 32*16+16, up 16*32+32, patch 16*32+16, mixer 16*16+16, up-mix 32*16+32
    int64_t expect = (32 * 16 + 16) + (16 * 32 + 32) + (16 * 32 + 16) + (16 * 16 + 16) +
                     (32 * 16 + 32);
    CHECK(c.trainable == expect);
    CHECK(c.total == expect);
    CHECK(c.ratio == 1.0);
  }
}

TEST_CASE("adapter configuration validation") {
  Rng rng(36, "adapter-init", 0);
  AdapterConfig bad = toy_cfg();
  bad.bottleneck = 8;  // not a bottleneck
  CHECK_THROWS_AS(ChAdapter(bad, rng), ConfigError);
  AdapterConfig bad2 = toy_cfg();
  bad2.edge_dim = 0;
  CHECK_THROWS_AS(ChAdapter(bad2, rng), ConfigError);
  AdapterConfig ok = toy_cfg();
  ok.edge_dim = 0;
  ok.directions.clear();  // context-only does not need an edge dim
  CHECK_NOTHROW(ChAdapter(ok, rng));

  ChAdapter ad(toy_cfg(), rng);
  Rng data(36, "adapter-data", 0);
  CHECK_THROWS_AS(ad.forward(random_tensor({7, 4, 4}, data)), ShapeError);
}

TEST_CASE("gradcheck through the full adapter") {
  AdapterConfig cfg;
  cfg.stage_dim = 4;
  cfg.bottleneck = 2;
  cfg.edge_dim = 2;
  Rng rng(37, "adapter-init", 0);
  ChAdapter ad(cfg, rng);
  ParamList params;
  ad.params("a.", params);
  Rng wr(37, "adapter-weights", 0);
  for (auto& p : params)
    for (double& v : p.value.raw_data()) v = wr.uniform(-0.3, 0.3);

  Rng data(37, "adapter-data", 0);
  Tensor x = random_tensor({4, 3, 3}, data);
  std::vector<Tensor> inputs{x};
  for (auto& p : params) inputs.push_back(p.value);
  Rng probe(37, "adapter-probe", 0);
  auto res = grad_check([&](const std::vector<Tensor>& in) { return ad.forward(in[0]).h; },
                        inputs, probe);
  INFO("max rel err " << res.max_rel_err << " at " << res.worst);
  CHECK(res.ok);
}
