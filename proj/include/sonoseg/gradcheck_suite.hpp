#pragma once

#include <functional>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "sonoseg/adapter.hpp"
#include "sonoseg/distill.hpp"
#include "sonoseg/gradcheck.hpp"
#include "sonoseg/losses.hpp"
#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

// One finite-difference check per differentiable operation, small shapes so
// the whole battery stays fast. Used by the `gradcheck` command and by the
// acceptance runner.

struct SuiteCheck {
  std::string name;
  std::function<GradCheckResult(Rng&)> run;
};

namespace detail {

inline Tensor rt(const Shape& s, Rng& rng) { return random_tensor(s, rng, -1.0, 1.0); }

}  // namespace detail

inline std::vector<SuiteCheck> gradcheck_suite() {
  using detail::rt;
  auto one = [](const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                std::vector<Shape> shapes) {
    return [fn, shapes](Rng& rng) {
      std::vector<Tensor> inputs;
      for (const Shape& s : shapes) inputs.push_back(detail::rt(s, rng));
      return grad_check(fn, inputs, rng);
    };
  };

  std::vector<SuiteCheck> checks;
  auto bin = [&](const std::string& name, Tensor (*op)(const Tensor&, const Tensor&)) {
    checks.push_back({name, one([op](const std::vector<Tensor>& in) { return op(in[0], in[1]); },
                                {{3, 5}, {3, 5}})});
  };
  bin("add", add);
  bin("sub", sub);
  bin("mul", mul);
  // div needs the denominator bounded away from zero
  checks.push_back({"div", [](Rng& rng) {
                      Tensor a = detail::rt({3, 5}, rng);
                      Tensor b = add_scalar(random_tensor({3, 5}, rng, 0.5, 1.5), 0.5);
                      return grad_check(
                          [](const std::vector<Tensor>& in) { return div(in[0], in[1]); }, {a, b},
                          rng);
                    }});

  auto unary = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& op) {
    checks.push_back(
        {name, one([op](const std::vector<Tensor>& in) { return op(in[0]); }, {{2, 7}})});
  };
  unary("neg", [](const Tensor& a) { return neg(a); });
  unary("scale", [](const Tensor& a) { return scale(a, 1.7); });
  unary("add_scalar", [](const Tensor& a) { return add_scalar(a, 0.3); });
  unary("gelu", [](const Tensor& a) { return gelu(a); });
  unary("sigmoid", [](const Tensor& a) { return sigmoid(a); });
  unary("log_sigmoid", [](const Tensor& a) { return log_sigmoid(a); });
  unary("exp", [](const Tensor& a) { return exp(a); });
  unary("sum", [](const Tensor& a) { return sum(a); });
  unary("mean", [](const Tensor& a) { return mean(a); });
  unary("softmax", [](const Tensor& a) { return softmax(a); });
  unary("reshape", [](const Tensor& a) { return reshape(a, {7, 2}); });
  unary("transpose", [](const Tensor& a) { return transpose(a); });
  unary("slice", [](const Tensor& a) { return slice(a, 1, 2, 4); });
  checks.push_back({"log", [](Rng& rng) {
                      Tensor a = random_tensor({2, 7}, rng, 0.2, 2.0);
                      return grad_check(
                          [](const std::vector<Tensor>& in) { return log(in[0]); }, {a}, rng);
                    }});

  checks.push_back({"permute", one(
                                   [](const std::vector<Tensor>& in) {
                                     return permute(in[0], {2, 0, 1});
                                   },
                                   {{2, 3, 4}})});
  checks.push_back({"concat", one(
                                  [](const std::vector<Tensor>& in) {
                                    return concat({in[0], in[1]}, 0);
                                  },
                                  {{2, 5}, {3, 5}})});
  checks.push_back({"mse", one(
                               [](const std::vector<Tensor>& in) { return mse(in[0], in[1]); },
                               {{3, 4}, {3, 4}})});
  checks.push_back({"matmul", one(
                                  [](const std::vector<Tensor>& in) {
                                    return matmul(in[0], in[1]);
                                  },
                                  {{3, 4}, {4, 5}})});
  checks.push_back({"linear", one(
                                  [](const std::vector<Tensor>& in) {
                                    return linear(in[0], in[1], in[2]);
                                  },
                                  {{6, 4}, {4, 5}, {5}})});
  checks.push_back({"layer_norm", one(
                                      [](const std::vector<Tensor>& in) {
                                        return layer_norm(in[0], in[1], in[2]);
                                      },
                                      {{6, 5}, {5}, {5}})});
  checks.push_back({"conv2d_1x1", one(
                                      [](const std::vector<Tensor>& in) {
                                        return conv2d(in[0], in[1], in[2], 1, 0);
                                      },
                                      {{3, 6, 6}, {4, 3, 1, 1}, {4}})});
  checks.push_back({"conv2d_3x3_pad", one(
                                          [](const std::vector<Tensor>& in) {
                                            return conv2d(in[0], in[1], in[2], 1, 1);
                                          },
                                          {{2, 6, 6}, {3, 2, 3, 3}, {3}})});
  checks.push_back({"conv2d_stride2", one(
                                          [](const std::vector<Tensor>& in) {
                                            return conv2d(in[0], in[1], in[2], 2, 1);
                                          },
                                          {{2, 8, 8}, {3, 2, 3, 3}, {3}})});
  checks.push_back({"conv2d_grouped", one(
                                          [](const std::vector<Tensor>& in) {
                                            return conv2d(in[0], in[1], Tensor(), 1, 1, 3);
                                          },
                                          {{3, 6, 6}, {3, 1, 3, 3}})});
  checks.push_back({"maxpool2x", one(
                                     [](const std::vector<Tensor>& in) {
                                       return maxpool2x(in[0]);
                                     },
                                     {{2, 8, 8}})});
  checks.push_back({"upsample_nearest2x", one(
                                              [](const std::vector<Tensor>& in) {
                                                return upsample_nearest2x(in[0]);
                                              },
                                              {{2, 4, 4}})});
  checks.push_back({"upsample_bilinear", one(
                                             [](const std::vector<Tensor>& in) {
                                               return upsample_bilinear(in[0], 7, 7);
                                             },
                                             {{2, 4, 4}})});
  checks.push_back({"token_roundtrip", one(
                                           [](const std::vector<Tensor>& in) {
                                             return tokens_to_chw(chw_to_tokens(in[0]), 4, 4);
                                           },
                                           {{3, 4, 4}})});

  checks.push_back({"focal_loss", one(
                                      [](const std::vector<Tensor>& in) {
                                        return focal_loss(in[0], sigmoid(in[1]));
                                      },
                                      {{4, 4}, {4, 4}})});
  checks.push_back({"dice_loss", one(
                                     [](const std::vector<Tensor>& in) {
                                       return dice_loss(in[0], sigmoid(in[1]));
                                     },
                                     {{4, 4}, {4, 4}})});

  checks.push_back({"adapter_forward", [](Rng& rng) {
                      ChAdapter ad(AdapterConfig{4, 2, 2, all_edge_directions()}, rng);
                      Tensor f = detail::rt({4, 6, 6}, rng);
                      std::vector<Tensor> inputs = {f, ad.down_w, ad.up_w, ad.edge_up_w};
                      return grad_check(
                          [&](const std::vector<Tensor>& in) {
                            ChAdapter a2 = ad;
                            a2.down_w = in[1];
                            a2.up_w = in[2];
                            a2.edge_up_w = in[3];
                            return a2.forward(in[0]).h;
                          },
                          inputs, rng);
                    }});
  checks.push_back({"distill_neck", [](Rng& rng) {
                      Neck nk(3, 5, rng);
                      Tensor x = detail::rt({3, 4, 4}, rng);
                      return grad_check(
                          [&](const std::vector<Tensor>& in) {
                            Neck n2 = nk;
                            n2.conv3_w = in[1];
                            n2.conv1_w = in[2];
                            return n2.forward(in[0]);
                          },
                          {x, nk.conv3_w, nk.conv1_w}, rng);
                    }});
  return checks;
}

struct SuiteReport {
  bool ok = true;
  double worst = 0.0;
  std::string worst_name;
};

inline SuiteReport run_gradcheck_suite(int64_t nseeds, std::ostream& out) {
  SuiteReport rep;
  std::vector<SuiteCheck> checks = gradcheck_suite();
  out << std::left << std::setw(22) << "op" << "max_rel_err  status\n";
  for (const SuiteCheck& c : checks) {
    double worst = 0.0;
    bool ok = true;
    for (int64_t s = 0; s < nseeds; ++s) {
      Rng rng(900 + static_cast<uint64_t>(s), "gradcheck-" + c.name);
      GradCheckResult r = c.run(rng);
      worst = std::max(worst, r.max_rel_err);
      ok = ok && r.ok;
    }
    out << std::left << std::setw(22) << c.name << std::scientific << std::setprecision(2)
        << worst << "     " << (ok ? "ok" : "FAIL") << "\n"
        << std::defaultfloat;
    if (worst > rep.worst) {
      rep.worst = worst;
      rep.worst_name = c.name;
    }
    rep.ok = rep.ok && ok;
  }
  return rep;
}

}  // namespace sonoseg
