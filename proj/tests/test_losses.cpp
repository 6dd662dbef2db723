#include <catch2/catch_amalgamated.hpp>

#include "sonoseg/gradcheck.hpp"
#include "sonoseg/losses.hpp"

using namespace sonoseg;
using Catch::Approx;

TEST_CASE("focal loss scalar oracle") {
  // one positive pixel at logit 0: p = 0.5
  // alpha*(1-p)^gamma*(-log p) = 0.25 * 0.25 * ln 2
  Tensor logits = Tensor::zeros({1, 1, 1});
  Tensor gt = Tensor::full({1, 1, 1}, 1.0);
  CHECK(focal_loss(logits, gt).item() == Approx(0.04332169878499658).margin(1e-15));

  BinaryMask m(1, 1);
  m.set(0, 0, true);
  // 20*focal + dice where dice = 1 - (2*0.5+1)/(0.5+1+1) = 0.2
  CHECK(seg_loss(logits, m).item() == Approx(1.0664339756999315).margin(1e-12));
}

TEST_CASE("saturated correct predictions cost almost nothing") {
  BinaryMask gt(4, 4);
  for (int64_t y = 1; y <= 2; ++y)
    for (int64_t x = 1; x <= 2; ++x) gt.set(y, x, true);
  std::vector<double> d(16);
  for (int64_t i = 0; i < 16; ++i) d[i] = gt.v[i] ? 20.0 : -20.0;
  Tensor logits = Tensor::from_data({1, 4, 4}, std::move(d));
  CHECK(seg_loss(logits, gt).item() < 1e-4);
}

TEST_CASE("soft dice vanishes when probabilities match a hard mask") {
  BinaryMask gt(3, 3);
  gt.set(0, 0, true);
  gt.set(2, 2, true);
  std::vector<double> d(9);
  for (int64_t i = 0; i < 9; ++i) d[i] = gt.v[i] ? 700.0 : -700.0;  // sigmoid rounds to 1/0
  Tensor logits = Tensor::from_data({1, 3, 3}, std::move(d));
  CHECK(dice_loss(logits, mask_to_tensor(gt)).item() == Approx(0.0).margin(1e-12));
}

TEST_CASE("focal loss stays finite at extreme logits") {
  Tensor logits = Tensor::from_data({1, 1, 2}, {-800.0, 800.0});
  Tensor gt = Tensor::from_data({1, 1, 2}, {1.0, 0.0});  // maximally wrong
  double v = focal_loss(logits, gt).item();
  CHECK(std::isfinite(v));
  CHECK(v > 100.0);  // badly wrong should hurt
}

TEST_CASE("wrong predictions cost more than right ones") {
  BinaryMask gt(2, 2);
  gt.set(0, 0, true);
  Tensor right = Tensor::from_data({1, 2, 2}, {4.0, -4.0, -4.0, -4.0});
  Tensor wrong = Tensor::from_data({1, 2, 2}, {-4.0, 4.0, 4.0, 4.0});
  CHECK(seg_loss(right, gt).item() < seg_loss(wrong, gt).item());
}

TEST_CASE("gradcheck through focal and dice") {
  Rng data(61, "loss-data", 0);
  Tensor logits = random_tensor({1, 4, 4}, data, -2.0, 2.0);
  BinaryMask gt(4, 4);
  for (auto& b : gt.v) b = data.bernoulli(0.4) ? 1 : 0;
  Tensor g = mask_to_tensor(gt);

  Rng probe(61, "loss-probe", 0);
  auto r1 = grad_check(
      [&](const std::vector<Tensor>& in) { return focal_loss(in[0], g); }, {logits}, probe);
  INFO("focal max rel err " << r1.max_rel_err);
  CHECK(r1.ok);
  auto r2 = grad_check(
      [&](const std::vector<Tensor>& in) { return dice_loss(in[0], g); }, {logits}, probe);
  INFO("dice max rel err " << r2.max_rel_err);
  CHECK(r2.ok);
  auto r3 = grad_check(
      [&](const std::vector<Tensor>& in) { return seg_loss(in[0], gt); }, {logits}, probe);
  INFO("seg max rel err " << r3.max_rel_err);
  CHECK(r3.ok);
}

TEST_CASE("loss shape validation") {
  Tensor logits = Tensor::zeros({1, 4, 4});
  BinaryMask gt(3, 3);
  CHECK_THROWS_AS(seg_loss(logits, gt), ShapeError);
}
