// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "moelab/autograd.hpp"
#include "moelab/rng.hpp"

namespace moelab::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;  // per tensor: ‖analytic − numeric‖ / max(‖numeric‖, floor)
  std::size_t checked = 0;
  std::size_t worst = 0;  // index into params
};

/// Central finite differences of `f` with respect to every element of `params`.
inline GradCheck grad_check(const ScalarFn& f, const std::vector<Tensor*>& params, double h = 1e-6,
                            double floor = 1e-8) {
  for (Tensor* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  {
    Tape tape;
    std::vector<Var> vars;
    for (Tensor* p : params) vars.push_back(tape.parameter(*p));
    tape.backward(f(tape, vars));
  }
  auto eval = [&] {
    Tape tape(false);
    std::vector<Var> vars;
    for (Tensor* p : params) vars.push_back(tape.parameter(*p));
    return f(tape, vars).item();
  };
  GradCheck out;
  for (Tensor* const& p : params) {
    std::vector<double> analytic(p->numel(), 0.0);
    if (p->has_grad()) std::copy(p->grad().begin(), p->grad().end(), analytic.begin());
    double diff2 = 0.0, num2 = 0.0;
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double x0 = (*p)[i];
      (*p)[i] = x0 + h;
      const double fp = eval();
      (*p)[i] = x0 - h;
      const double fm = eval();
      (*p)[i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      num2 += numeric * numeric;
      ++out.checked;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(num2), floor);
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst = static_cast<std::size_t>(&p - params.data());
    }
  }
  return out;
}

/// Scalar probe Σ out ⊙ R for a fixed random R, so every output element matters.
inline Var probe(Var out, std::uint64_t seed = 99) {
  Tape& tape = out.tape();
  Var r = tape.constant(random_tensor(out.shape(), seed));
  return ops::sum(ops::mul(out, r));
}

}  // namespace moelab::testing
