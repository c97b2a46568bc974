// Copyright 2026 The evstr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "evstr/layers.hpp"

namespace evstr {

struct GradCheckOptions {
  double eps = 1e-3;
  double tol = 1e-4;
  /// Multiplies the analytic gradient before comparison; anything other
  /// than 1 is a negative control that must fail.
  double corrupt_scale = 1.0;
  /// Coordinates checked per parameter; 0 checks all of them. Larger
  /// tensors are subsampled with a fixed seed.
  std::size_t max_coords = 0;
  /// Lower bound of the per-tensor gradient scale, multiplied by
  /// max(1, |f|). Tensors whose exact gradient vanishes (a bias feeding
  /// batch normalization, a logit bias under softmax) are then judged on
  /// absolute difference against the objective's round-off level.
  double scale_floor = 1e-5;
  /// Coordinates whose error exceeds refine_above * tol are re-probed with
  /// eps/10, eps/100, eps/1000 and keep the best agreement.
  int refinements = 3;
  double refine_above = 0.01;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t refined = 0;  // re-probes with a smaller step
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool finite = true;
  bool passed = false;
  double tol = 0.0;
  std::string message;
};

/// Compares reverse-mode gradients of a scalar objective against central
/// differences, in double precision.
///
/// For each parameter tensor the error is
///   max_i |g_i - n_i| / max(max_i |g_i|, max_i |n_i|, scale_floor * max(1, |f|))
/// i.e. the worst coordinate error relative to the tensor's gradient scale.
/// Normalizing per tensor keeps near-zero coordinates (for instance weights
/// feeding a ReLU that is off for every row) from dominating the report.
/// Coordinates above tolerance are re-probed with smaller steps and keep
/// their best agreement.
inline GradCheckReport grad_check(const std::function<Var<double>()>& objective,
                                  Registry<double>& registry, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  report.tol = opt.tol;
  registry.zero_grad();
  Var<double> loss = objective();
  if (loss.value().size() != 1) throw ShapeError("grad_check: objective must be scalar");
  if (!std::isfinite(loss.value()[0])) {
    report.finite = false;
    report.message = "objective is not finite";
    return report;
  }
  backward(loss);
  Rng rng(opt.seed);
  for (auto& [name, var] : registry.params) {
    ParamCheck pc;
    pc.name = name;
    Tensor<double> analytic = var.grad().same_shape(var.value()) ? var.grad()
                                                                 : Tensor<double>(var.value().shape());
    for (auto& g : analytic.vec()) g *= opt.corrupt_scale;
    std::vector<std::size_t> coords(var.value().size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords && coords.size() > opt.max_coords)
      coords = sample_without_replacement(coords.size(), opt.max_coords, rng.next());
    auto central = [&](std::size_t i, double eps) {
      double& w = var.mutable_value()[i];
      const double orig = w;
      w = orig + eps;
      const double fp = objective().value()[0];
      w = orig - eps;
      const double fm = objective().value()[0];
      w = orig;
      return (fp - fm) / (2.0 * eps);
    };
    std::vector<double> numeric(coords.size());
    double scale = opt.scale_floor * std::max(1.0, std::abs(loss.value()[0]));
    for (std::size_t c = 0; c < coords.size(); ++c) {
      numeric[c] = central(coords[c], opt.eps);
      if (!std::isfinite(numeric[c]) || !std::isfinite(analytic[coords[c]])) {
        report.finite = false;
        report.message = "non-finite gradient in " + name;
        return report;
      }
      scale = std::max({scale, std::abs(analytic[coords[c]]), std::abs(numeric[c])});
    }
    double max_diff = 0.0;
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const double g = analytic[coords[c]];
      double diff = std::abs(g - numeric[c]);
      // A ReLU or max switching inside [w - eps, w + eps] spoils the
      // difference quotient; smaller steps stop reaching it, while a wrong
      // gradient disagrees at every step. A switch of a shared max skews
      // every coordinate a little, hence the low trigger.
      if (diff > opt.refine_above * opt.tol * scale) {
        for (int r = 1; r <= opt.refinements; ++r) {
          ++pc.refined;
          diff = std::min(diff, std::abs(g - central(coords[c], opt.eps * std::pow(0.1, r))));
        }
      }
      max_diff = std::max(max_diff, diff);
    }
    pc.checked = coords.size();
    pc.max_rel_error = max_diff / scale;
    report.max_rel_error = std::max(report.max_rel_error, pc.max_rel_error);
    report.params.push_back(std::move(pc));
  }
  report.passed = report.finite && report.max_rel_error < opt.tol;
  return report;
}

}  // namespace evstr
