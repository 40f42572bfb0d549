// Copyright 2026 The mmnas Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mmnas/rng.hpp"
#include "mmnas/tensor.hpp"

namespace mmnas {

struct GradCheckLeaf {
  std::string name;
  Tensor<double> tensor;
};

struct GradCheckLeafReport {
  std::string name;
  double max_rel_err = 0.0;
  int coords_checked = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckLeafReport> leaves;
  double max_rel_err = 0.0;
  bool passed = true;

  std::string summary() const {
    std::string s;
    for (const auto& l : leaves) {
      s += l.name + ": max_rel_err=" + std::to_string(l.max_rel_err) +
           (l.passed ? " ok" : " FAIL") + "\n";
    }
    return s;
  }
};

// Compares reverse-mode gradients of a scalar-valued graph builder against
// central finite differences. `f` must be deterministic and rebuild the
// graph from the leaf tensors on every call. Runs in double precision; for
// large leaves a random subset of coordinates is probed.
//
// The relative error uses a floored denominator so finite-difference noise
// on near-zero gradients does not count as failure:
//   rel = |analytic - numeric| / max(|analytic|, |numeric|, denom_floor)
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<GradCheckLeaf> leaves, double rtol = 1e-4,
                                  double h = 1e-5, int max_coords_per_leaf = 48,
                                  std::uint64_t probe_seed = 0x9d5f, double denom_floor = 1e-3) {
  for (auto& l : leaves) l.tensor.set_requires_grad(true);

  std::vector<std::vector<double>> analytic;
  {
    for (auto& l : leaves) {
      l.tensor.grad_mut();
      l.tensor.zero_grad();
    }
    GradTape<double> tape;
    Tensor<double> loss = f();
    tape.backward(loss);
    for (auto& l : leaves) analytic.push_back(l.tensor.grad());
  }

  auto eval_loss = [&]() -> double { return f().item(); };

  GradCheckReport report;
  RngStream rng(probe_seed);
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li].tensor;
    GradCheckLeafReport lr;
    lr.name = leaves[li].name;

    const std::int64_t n = leaf.numel();
    std::vector<std::int64_t> coords;
    if (n <= max_coords_per_leaf) {
      for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_leaf; ++i)
        coords.push_back(static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(n))));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }

    for (std::int64_t c : coords) {
      const double orig = leaf.data()[c];
      leaf.data()[c] = orig + h;
      const double lp = eval_loss();
      leaf.data()[c] = orig - h;
      const double lm = eval_loss();
      leaf.data()[c] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[li][static_cast<std::size_t>(c)];
      const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
      const double rel = std::abs(a - numeric) / denom;
      lr.max_rel_err = std::max(lr.max_rel_err, rel);
      ++lr.coords_checked;
    }
    lr.passed = lr.max_rel_err <= rtol;
    report.max_rel_err = std::max(report.max_rel_err, lr.max_rel_err);
    report.passed = report.passed && lr.passed;
    report.leaves.push_back(std::move(lr));
  }
  return report;
}

}  // namespace mmnas
