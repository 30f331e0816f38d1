// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/autodiff.hpp"
#include "flatl2o/optimizees.hpp"

namespace flatl2o {

/// Curvature snapshot at a point theta.
struct FlatnessReport {
  double hutchinson_trace = 0.0;
  double top_abs_eig = 0.0;
  double jacobian_trace = 0.0;
  Eigen::VectorXd entropy_grad;
  int probes_used = 0;
  int pi_iters_used = 0;

  double entropy_grad_norm() const {
    return entropy_grad.size() ? entropy_grad.norm() : 0.0;
  }
};

struct SgldConfig {
  double gamma = 1.0;
  int inner_steps = 1000;
  double step_size = 0.0;    // <= 0: 0.1 / gamma
  double noise_scale = 0.0;  // <= 0: sqrt(2 * step) * 0.01 (low temperature)
  int burn_in = -1;          // < 0: inner_steps / 5
  std::uint64_t seed = 0;

  SgldConfig resolved() const;
  void validate() const;
};

/// Constants entering the Hessian <= D^{-1}(-G) bound.
struct Theorem1Constants {
  double m_radius = 1.0;
  double M_lip = 0.0;    // local Lipschitz bound of L on the m-ball
  double rho_lip = 0.0;  // Hessian Lipschitz constant on the m-ball
  int p = 1;
  double gamma = 1.0;
  double C_term = 0.0;  // log of full/truncated Gaussian integral ratio
};

/// D(x) = log(x+gamma) + L(theta) + (p-1) log gamma - m M - (p/2) log(2 pi)
///        - rho m^3 / 2 - C
double theorem1_d(const Theorem1Constants& c, double loss_at_theta, double x);

struct Theorem1Case {
  double a, gamma, theta;
  double lhs;          // the Hessian (= a)
  double d_of_lhs;     // D(a)
  double neg_entropy;  // -G(theta; gamma) by quadrature
  bool holds;
};

/// Hutchinson trace estimate (1/k) sum v^T (grad^2 L) v over k Rademacher
/// probes; deterministic per seed. Default probe budget is 10.
double hutchinson_trace(const Optimizee& o, const Eigen::VectorXd& theta,
                        std::span<const int> batch, int probes = 10,
                        std::uint64_t seed = 0);

/// Same estimator with caller-supplied probe vectors (exact enumeration
/// checks use this).
double hutchinson_trace_with_probes(const Optimizee& o, const Eigen::VectorXd& theta,
                                    std::span<const int> batch,
                                    std::span<const Eigen::VectorXd> probes);

/// On-tape Hutchinson estimate at interior theta nodes; the returned node is
/// differentiable through the HVPs (probe vectors are fixed constants).
NodeRef hutchinson_nodes(Graph& g, const Optimizee& o,
                         std::span<const NodeRef> theta,
                         std::span<const int> batch, int probes,
                         std::uint64_t seed);

NodeRef hutchinson_nodes_with_probes(Graph& g, const Optimizee& o,
                                     std::span<const NodeRef> theta,
                                     std::span<const int> batch,
                                     std::span<const Eigen::VectorXd> probes);

std::vector<Eigen::VectorXd> rademacher_probes(int p, int count, std::uint64_t seed);

/// Fully on-tape power iteration: start vector, iteration, and Rayleigh
/// quotient all live on the tape, so the result differentiates through the
/// iteration itself. The experimental alternative to the detached direction.
NodeRef power_iteration_nodes(Graph& g, const Optimizee& o,
                              std::span<const NodeRef> theta,
                              std::span<const int> batch, int iters,
                              std::uint64_t seed);

/// |Rayleigh quotient| after `iters` power steps v <- Hv/|Hv| from a seeded
/// random unit start. Returns 0 on a numerically zero-Hessian direction.
double top_abs_eigenvalue(const Optimizee& o, const Eigen::VectorXd& theta,
                          std::span<const int> batch, int iters = 10,
                          std::uint64_t seed = 0);

/// Power-iteration direction (unit vector) after `iters` steps; the detached
/// direction the spectral-norm regularizer contracts against.
Eigen::VectorXd power_iteration_direction(const Optimizee& o,
                                          const Eigen::VectorXd& theta,
                                          std::span<const int> batch, int iters,
                                          std::uint64_t seed);

/// v^T (grad^2 L) v at interior theta nodes with v a fixed constant vector.
NodeRef quadratic_form_nodes(Graph& g, const Optimizee& o,
                             std::span<const NodeRef> theta,
                             std::span<const int> batch, const Eigen::VectorXd& v);

/// Squared gradient norm |grad L|^2.
double jacobian_trace(const Optimizee& o, const Eigen::VectorXd& theta,
                      std::span<const int> batch);

NodeRef jacobian_trace_nodes(Graph& g, const Optimizee& o,
                             std::span<const NodeRef> theta,
                             std::span<const int> batch);

/// Langevin estimate of the negative local-entropy gradient
/// gamma (theta - mean[theta']); the result is a detached constant with
/// respect to any tape. Throws ChainDiverged if |theta'| exceeds 1e6.
Eigen::VectorXd sgld_entropy_grad(const Optimizee& o, const Eigen::VectorXd& theta,
                                  std::span<const int> batch, const SgldConfig& cfg);

struct QuadGrid {
  double lo = -10.0;
  double hi = 10.0;
  int points = 2001;
};

/// log integral of exp(-L(theta') - gamma/2 |theta - theta'|^2) d theta' by a
/// log-sum-exp stabilized trapezoid rule; p <= 2 only. Throws GridTooNarrow
/// when the boundary integrand exceeds 1e-12 of the peak.
double entropy_quadrature(const Optimizee& o, const Eigen::VectorXd& theta,
                          double gamma, const QuadGrid& grid);

/// Sweep the Hessian <= D^{-1}(-G) bound over 1-D quadratics L = a theta^2 / 2
/// (rho = 0, M = a(|theta|+m), C = -log erf(m sqrt(gamma/2))).
std::vector<Theorem1Case> verify_theorem1(std::span<const double> a_grid,
                                          std::span<const double> gamma_grid,
                                          std::span<const double> theta_grid,
                                          double m_radius);

/// All estimators at one point; entropy_grad only when sgld is non-null.
FlatnessReport flatness_report(const Optimizee& o, const Eigen::VectorXd& theta,
                               std::span<const int> batch, int probes, int pi_iters,
                               const SgldConfig* sgld, std::uint64_t seed);

}  // namespace flatl2o
