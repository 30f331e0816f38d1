// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/graph.hpp"
#include "flatl2o/rng.hpp"

namespace flatl2o {

/// Coordinate-wise update rule: two stacked LSTM cells (hidden 20) over a
/// 2-feature gradient encoding, a linear head, and an output scale. The same
/// cell is shared across all optimizee coordinates.
struct L2oShape {
  static constexpr int input = 2;
  static constexpr int hidden = 20;
  static constexpr int layers = 2;
};

int l2o_param_count();

/// Flattened parameters phi. Layout, in order:
///   layer 0: W (4h x (input+h)) row-major, then b (4h)
///   layer 1: W (4h x (h+h)) row-major, then b (4h)
///   head: w (h), b (1)
///   output scale s (last element)
/// Gate rows within each W/b block come in i, f, g, o order, h rows each.
struct OptimizerParams {
  Eigen::VectorXd flat;

  double output_scale() const { return flat[flat.size() - 1]; }

  /// Cell weights N(0, 1/sqrt(fan_in)), biases 0 with forget biases 1,
  /// zero head, s = 0.1: the initial optimizer is the identity map.
  static OptimizerParams init(std::uint64_t seed, double output_scale = 0.1);
};

/// Per-coordinate recurrent state, one (p x hidden) block per layer.
struct RnnState {
  Eigen::MatrixXd h[L2oShape::layers];
  Eigen::MatrixXd c[L2oShape::layers];

  static RnnState zero(int p);
  int coords() const { return static_cast<int>(h[0].rows()); }
};

/// phi bound onto a tape as rebindable leaves.
struct PhiLeaves {
  std::vector<NodeRef> refs;
};

PhiLeaves bind_phi(Graph& g, const OptimizerParams& params);

/// On-tape recurrent state.
struct TapeRnnState {
  std::vector<NodeRef> h[L2oShape::layers];
  std::vector<NodeRef> c[L2oShape::layers];
  int p = 0;

  static TapeRnnState from_values(Graph& g, const RnnState& s);
  RnnState values(const Graph& g) const;
};

/// Gradient encoding: |g| >= e^-p_tilde gives (log|g|/p_tilde, sign g),
/// otherwise (-1, e^p_tilde g). Both components stay in [-1, 1] whenever
/// |g| <= e^p_tilde.
std::pair<double, double> preprocess(double g, double p_tilde = 10.0);
std::pair<NodeRef, NodeRef> preprocess(Graph& g, NodeRef grad_component,
                                       double p_tilde = 10.0);

/// One optimizer step on the tape: per-coordinate features -> stacked cells
/// -> head -> s * output. Everything is recorded, so updates differentiate
/// against phi and (when the gradient nodes are live) against the gradients.
std::vector<NodeRef> l2o_step(Graph& g, const PhiLeaves& phi, TapeRnnState& state,
                              std::span<const NodeRef> grads, double p_tilde = 10.0);

/// Tape-free step for meta-testing and cut unroll segments; same arithmetic.
Eigen::VectorXd l2o_step(const OptimizerParams& params, RnnState& state,
                         const Eigen::VectorXd& grads, double p_tilde = 10.0);

/// FL2O checkpoint: 16-byte header (magic "FL2O", u32 version, u64 count),
/// then the flat array as little-endian 64-bit floats.
void save_params(const OptimizerParams& params, const std::string& path);
OptimizerParams load_params(const std::string& path);

}  // namespace flatl2o
