#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "emrx/ops.hpp"
#include "emrx/rng.hpp"
#include "emrx/tensor.hpp"

namespace emrx {

// Everything here runs in 64-bit mode. `f` must be a pure function of the
// given leaves: rebuilt rng streams, no hidden state, so repeated forward
// evaluations at perturbed points are comparable.

namespace detail {

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

template <typename LossFn>
double fd_check(LossFn&& f, std::vector<Tensor<double>> leaves, std::int64_t coords_per_leaf,
                Rng* coord_rng, double eps) {
  for (Tensor<double>& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  Tape<double> tape;
  Tensor<double> loss = f(&tape);
  if (loss.numel() != 1) {
    throw std::invalid_argument("gradcheck requires a scalar-valued function");
  }
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const Tensor<double>& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad_data(), leaf.grad_data() + leaf.numel());
    } else {
      analytic.emplace_back(static_cast<std::size_t>(leaf.numel()), 0.0);
    }
  }

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = leaves[li];
    const std::int64_t n = leaf.numel();
    std::vector<std::int64_t> coords;
    if (coords_per_leaf <= 0 || coords_per_leaf >= n) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (std::int64_t i = 0; i < coords_per_leaf; ++i) {
        coords.push_back(static_cast<std::int64_t>(coord_rng->below(static_cast<std::uint64_t>(n))));
      }
    }
    for (std::int64_t c : coords) {
      const double orig = leaf.data()[c];
      leaf.mutable_data()[c] = orig + eps;
      const double fp = f(nullptr).item();
      leaf.mutable_data()[c] = orig - eps;
      const double fm = f(nullptr).item();
      leaf.mutable_data()[c] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("non-finite loss at perturbed point during gradcheck");
      }
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, rel_error(fd, analytic[li][static_cast<std::size_t>(c)]));
    }
  }
  return worst;
}

}  // namespace detail

// Central-difference check of every coordinate of every leaf against the
// tape gradient. Returns the maximum relative error.
template <typename LossFn>
double fd_max_rel_error(LossFn&& f, std::vector<Tensor<double>> leaves, double eps = 1e-5) {
  return detail::fd_check(std::forward<LossFn>(f), std::move(leaves), 0, nullptr, eps);
}

// Spot-check variant for large leaves: `coords_per_leaf` random coordinates
// from each leaf.
template <typename LossFn>
double fd_max_rel_error_spots(LossFn&& f, std::vector<Tensor<double>> leaves,
                              std::int64_t coords_per_leaf, Rng& coord_rng, double eps = 1e-5) {
  return detail::fd_check(std::forward<LossFn>(f), std::move(leaves), coords_per_leaf, &coord_rng, eps);
}

// Single-point form: f(point, tape) -> scalar tensor.
template <typename F>
double gradcheck(F&& f, const Tensor<double>& point, double eps = 1e-5) {
  Tensor<double> p = point.clone();
  return fd_max_rel_error([&](Tape<double>* tape) { return f(p, tape); }, {p}, eps);
}

struct GradcheckResult {
  std::string name;
  double max_rel_error;
};

namespace detail {

// Values with pairwise gaps of at least 0.05 and none closer than 0.025 to
// zero, so relu and maxpool stay away from their kink/tie points under the
// finite-difference perturbation.
inline Tensor<double> kink_safe_values(std::vector<int> shape, std::uint64_t seed,
                                       std::string_view label) {
  Tensor<double> t(std::move(shape));
  const std::int64_t n = t.numel();
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng::stream(seed, label);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  }
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < n; ++i) {
    d[i] = 0.05 * static_cast<double>(perm[static_cast<std::size_t>(i)] - n / 2) + 0.025;
  }
  return t;
}

inline Tensor<double> uniform_values(std::vector<int> shape, std::uint64_t seed,
                                     std::string_view label, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  Rng rng = Rng::stream(seed, label);
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace detail

// Finite-difference suite over every operator, including a small
// conv -> relu -> maxpool -> flatten -> dense -> cross-entropy pipeline.
// Backs the `gradcheck` CLI command.
inline std::vector<GradcheckResult> operator_gradcheck_suite(double eps = 1e-5) {
  constexpr std::uint64_t kSeed = 20240615;
  std::vector<GradcheckResult> results;
  const auto run = [&](const std::string& name, auto&& fn, std::vector<Tensor<double>> leaves) {
    results.push_back({name, fd_max_rel_error(fn, std::move(leaves), eps)});
  };

  {
    Tensor<double> x = detail::uniform_values({2, 5}, kSeed, "sumsq.x", -1.0, 1.0);
    run("sum_of_squares", [&](Tape<double>* t) { return sum(mul(x, x, t), t); }, {x});
  }
  {
    Tensor<double> x = detail::kink_safe_values({3, 4}, kSeed, "relu.x");
    Tensor<double> c = detail::uniform_values({3, 4}, kSeed, "relu.c", 0.5, 1.5);
    run("relu", [&](Tape<double>* t) { return sum(mul(relu(x, t), c, t), t); }, {x});
  }
  {
    Tensor<double> x = detail::uniform_values({3, 4}, kSeed, "dense.x", -1.0, 1.0);
    Tensor<double> w = detail::uniform_values({4, 5}, kSeed, "dense.w", -1.0, 1.0);
    Tensor<double> b = detail::uniform_values({5}, kSeed, "dense.b", -0.5, 0.5);
    Tensor<double> c = detail::uniform_values({3, 5}, kSeed, "dense.c", 0.5, 1.5);
    run("dense", [&](Tape<double>* t) { return sum(mul(dense(x, w, b, t), c, t), t); }, {x, w, b});
  }
  {
    Tensor<double> x = detail::uniform_values({2, 2, 5, 5}, kSeed, "conv.x", -1.0, 1.0);
    Tensor<double> w = detail::uniform_values({3, 2, 3, 3}, kSeed, "conv.w", -0.6, 0.6);
    Tensor<double> b = detail::uniform_values({3}, kSeed, "conv.b", -0.5, 0.5);
    Tensor<double> c = detail::uniform_values({2, 3, 5, 5}, kSeed, "conv.c", 0.5, 1.5);
    run("conv2d", [&](Tape<double>* t) { return sum(mul(conv2d(x, w, b, t), c, t), t); }, {x, w, b});
  }
  {
    Tensor<double> x = detail::kink_safe_values({2, 2, 4, 4}, kSeed, "pool.x");
    Tensor<double> c = detail::uniform_values({2, 2, 2, 2}, kSeed, "pool.c", 0.5, 1.5);
    run("maxpool2d", [&](Tape<double>* t) { return sum(mul(maxpool2d(x, t), c, t), t); }, {x});
  }
  {
    Tensor<double> x = detail::uniform_values({4, 6}, kSeed, "drop.x", -1.0, 1.0);
    Tensor<double> c = detail::uniform_values({4, 6}, kSeed, "drop.c", 0.5, 1.5);
    run("dropout",
        [&](Tape<double>* t) {
          Rng rng = Rng::stream(kSeed, "drop.mask");
          return sum(mul(dropout(x, 0.3, Mode::train, rng, t), c, t), t);
        },
        {x});
  }
  {
    Tensor<double> x = detail::uniform_values({3, 7}, kSeed, "softmax.x", -2.0, 2.0);
    Tensor<double> c = detail::uniform_values({3, 7}, kSeed, "softmax.c", 0.5, 1.5);
    run("softmax", [&](Tape<double>* t) { return sum(mul(softmax(x, t), c, t), t); }, {x});
  }
  {
    Tensor<double> x = detail::uniform_values({3, 7}, kSeed, "ce.x", -2.0, 2.0);
    const std::vector<int> targets = {2, 0, 6};
    run("softmax_cross_entropy",
        [&](Tape<double>* t) { return softmax_cross_entropy(x, targets, t).loss; }, {x});
  }
  {
    Tensor<double> a = detail::uniform_values({2, 3}, kSeed, "addmul.a", -1.0, 1.0);
    Tensor<double> b = detail::uniform_values({2, 3}, kSeed, "addmul.b", -1.0, 1.0);
    run("add_mul_sum", [&](Tape<double>* t) { return sum(mul(add(a, b, t), b, t), t); }, {a, b});
  }
  {
    // conv -> relu -> maxpool -> flatten -> dense -> cross-entropy on a
    // 1x1x4x4 input, checking every leaf.
    Tensor<double> x = detail::kink_safe_values({1, 1, 4, 4}, kSeed, "pipe.x");
    Tensor<double> cw = detail::uniform_values({2, 1, 3, 3}, kSeed, "pipe.cw", -0.6, 0.6);
    Tensor<double> cb = detail::uniform_values({2}, kSeed, "pipe.cb", -0.3, 0.3);
    Tensor<double> dw = detail::uniform_values({8, 3}, kSeed, "pipe.dw", -0.8, 0.8);
    Tensor<double> db = detail::uniform_values({3}, kSeed, "pipe.db", -0.3, 0.3);
    const std::vector<int> targets = {1};
    run("pipeline_conv_relu_pool_dense_ce",
        [&](Tape<double>* t) {
          Tensor<double> h = conv2d(x, cw, cb, t);
          h = relu(h, t);
          h = maxpool2d(h, t);
          h = flatten(h, t);
          h = dense(h, dw, db, t);
          return softmax_cross_entropy(h, targets, t).loss;
        },
        {x, cw, cb, dw, db});
  }
  return results;
}

}  // namespace emrx
