#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "palp/diffcore/tape.hpp"

namespace palp {

/// Scalar function of a parameter set, built on a tape. The spans hold one
/// trainable leaf per parameter, in the order the parameters were given.
using TapeFunction = std::function<Var(Tape&, std::span<const Var>)>;

/// Plain scalar function of parameter values.
using ScalarFunction = std::function<double(std::span<const Tensor>)>;

/// Central differences (f(p+h) - f(p-h)) / 2h, one coordinate at a time.
inline std::vector<Tensor> fd_grad(const ScalarFunction& f, std::vector<Tensor> params,
                                   double h = 1e-5) {
  if (!(h > 0.0)) throw Error("fd_grad: step must be positive");
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor g(params[p].shape(), 0.0);
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      params[p][i] = orig + h;
      const double up = f(params);
      params[p][i] = orig - h;
      const double down = f(params);
      params[p][i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("fd_grad: non-finite function value at probe point");
      }
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Evaluates a tape function once and returns its scalar value.
inline double evaluate(const TapeFunction& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  return f(tape, leaves).value().item();
}

/// Reverse-mode gradient of a tape function at `params`.
inline std::vector<Tensor> tape_grad(const TapeFunction& f, std::span<const Tensor> params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
  const Var root = f(tape, leaves);
  return tape.gradient(root, leaves);
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Largest |a-b| / max(1, |a|, |b|) over all coordinates.
inline GradCheckReport compare_grads(std::span<const Tensor> analytic,
                                     std::span<const Tensor> numeric, double tol) {
  GradCheckReport r;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    analytic[p].require_same_shape(numeric[p], "compare_grads");
    for (std::size_t i = 0; i < analytic[p].size(); ++i) {
      const double a = analytic[p][i], b = numeric[p][i];
      const double err = std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
      if (!(err <= r.max_rel_err)) {
        r.max_rel_err = err;
        r.worst_param = p;
        r.worst_index = i;
      }
    }
  }
  r.pass = r.max_rel_err <= tol;
  return r;
}

/// Runs reverse mode and central differences and compares them. Failures are
/// reported, never thrown.
inline GradCheckReport check_grad(const TapeFunction& f, std::vector<Tensor> params, double tol,
                                  double h = 1e-5) {
  if (params.empty()) return {};
  try {
    const auto analytic = tape_grad(f, params);
    const auto numeric = fd_grad(
        [&](std::span<const Tensor> p) { return evaluate(f, p); }, std::move(params), h);
    return compare_grads(analytic, numeric, tol);
  } catch (const Error&) {
    GradCheckReport r;
    r.max_rel_err = INFINITY;
    r.pass = false;
    return r;
  }
}

}  // namespace palp
