// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/flatness.hpp"
#include "flatl2o/optimizees.hpp"

namespace flatl2o {

enum class BaselineKind { Sgd, Adam, RmsProp, EntropySgd, SgdHessian };

struct BaselineConfig {
  BaselineKind kind = BaselineKind::Sgd;
  double lr = 0.1;
  double beta1 = 0.9;  // Adam
  double beta2 = 0.999;
  double eps = 1e-8;
  double rms_decay = 0.9;
  SgldConfig entropy;          // EntropySgd inner chain
  double hessian_lambda = 1e-2;  // SgdHessian penalty weight
  int hessian_probes = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BaselineState {
  Eigen::VectorXd m, v;
  long t = 0;

  static BaselineState init(int p) {
    return {Eigen::VectorXd::Zero(p), Eigen::VectorXd::Zero(p), 0};
  }
};

/// One analytical-optimizer update. Adam applies bias correction; EntropySgd
/// descends the Langevin entropy-gradient estimate; SgdHessian descends
/// grad(L + lambda * hutchinson trace).
std::pair<Eigen::VectorXd, BaselineState> baseline_step(
    const BaselineConfig& cfg, const Optimizee& o, const Eigen::VectorXd& theta,
    const BaselineState& state, std::span<const int> batch);

/// Pick the learning rate with the best mean final training loss over the
/// given seeds; diverged candidates are dropped. Throws AllDiverged when
/// nothing survives.
BaselineConfig lr_grid_search(const BaselineConfig& base, const Optimizee& o,
                              std::span<const double> grid, int budget,
                              std::span<const std::uint64_t> seeds,
                              int batch_size = 8);

}  // namespace flatl2o
