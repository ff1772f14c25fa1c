#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "glyphdiff/nn.hpp"
#include "glyphdiff/rng.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff {

// Central finite differences against the tape gradients, at 64-bit only.
// The numeric side never touches the backward pass, so the two routes stay
// independent.

struct GradCheckResult {
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_param;
  std::int64_t checked_coords = 0;
};

struct GradCheckOptions {
  double tolerance = 1e-5;
  // coordinates sampled per parameter; <=0 checks every coordinate
  int max_coords_per_param = 0;
  std::uint64_t seed = 0;
};

// `loss_fn` must rebuild the whole graph from the current parameter values.
inline GradCheckResult gradcheck(ParamStore<double>& params,
                                 const std::function<Tensor<double>()>& loss_fn,
                                 const GradCheckOptions& opts = {}) {
  GradCheckResult res;
  params.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);

  Rng rng(opts.seed + 0x5eedULL);
  for (auto& [name, p] : params.all_mutable()) {
    auto& v = p.mutable_data();
    const auto& g = p.grad();
    std::vector<std::int64_t> coords;
    const std::int64_t n = static_cast<std::int64_t>(v.size());
    if (opts.max_coords_per_param <= 0 || n <= opts.max_coords_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (int i = 0; i < opts.max_coords_per_param; ++i)
        coords.push_back(static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t c : coords) {
      const double theta = v[static_cast<std::size_t>(c)];
      const double h = 1e-5 * (1.0 + std::abs(theta));
      v[static_cast<std::size_t>(c)] = theta + h;
      double up;
      {
        NoGradGuard ng;
        up = loss_fn().item();
      }
      v[static_cast<std::size_t>(c)] = theta - h;
      double down;
      {
        NoGradGuard ng;
        down = loss_fn().item();
      }
      v[static_cast<std::size_t>(c)] = theta;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = g.empty() ? 0.0 : g[static_cast<std::size_t>(c)];
      const double rel = std::abs(analytic - numeric) /
                         std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++res.checked_coords;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = name + "[" + std::to_string(c) + "]";
      }
    }
  }
  res.passed = res.max_rel_error < opts.tolerance;
  return res;
}

}  // namespace glyphdiff
