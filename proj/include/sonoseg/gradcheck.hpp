#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sonoseg/rng.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "input[i]/elem[j]" of the worst deviation
};

// Compares analytic gradients against central finite differences.
//
// fn maps the current values of `inputs` to a single output tensor; the probe
// objective is sum(out * R) with R drawn once from `rng`, which exercises every
// output element with distinct weights. Each input element is displaced by
// +/- h and the analytic d(obj)/d(input) is compared against the secant slope.
inline GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                  std::vector<Tensor> inputs, Rng& rng, double h = 1e-5,
                                  double tol = 1e-4) {
  for (Tensor& t : inputs) t.set_requires_grad(true);

  Tensor out0 = fn(inputs);
  Tensor r = random_tensor(out0.shape(), rng, -1.0, 1.0);
  auto objective = [&]() {
    NoGradGuard off;  // forward value only
    Tensor out = fn(inputs);
    double s = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) s += out.data()[i] * r.data()[i];
    return s;
  };

  Tensor obj = sum(mul(out0, r));
  for (Tensor& t : inputs) t.zero_grad();
  obj.backward();

  GradCheckResult res;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    std::vector<double>& vals = t.raw_data();
    const std::vector<double>& g = t.grad();
    for (size_t i = 0; i < vals.size(); ++i) {
      double keep = vals[i];
      vals[i] = keep + h;
      double fp = objective();
      vals[i] = keep - h;
      double fm = objective();
      vals[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-8});
      double rel = std::abs(fd - g[i]) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input[" + std::to_string(ti) + "]/elem[" + std::to_string(i) + "]";
      }
    }
  }
  res.ok = res.max_rel_err < tol;
  return res;
}

}  // namespace sonoseg
