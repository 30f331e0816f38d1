// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/flatness.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace flatl2o {

namespace {

constexpr std::uint64_t kHutchTag = 0x48757463;  // estimator stream separators
constexpr std::uint64_t kPowerTag = 0x506f7765;
constexpr std::uint64_t kSgldTag = 0x53676c64;

Eigen::VectorXd eval_refs(Graph& g, std::span<const NodeRef> refs) {
  NodeRef top = refs[0];
  for (const NodeRef r : refs)
    if (r.index > top.index) top = r;
  g.eval(top);
  return g.values(refs);
}

struct LossTape {
  Graph g;
  std::vector<NodeRef> theta;
  NodeRef root;

  LossTape(const Optimizee& o, const Eigen::VectorXd& theta_values,
           std::span<const int> batch) {
    theta = make_leaves(g, theta_values);
    root = o.loss_builder(g, theta, batch);
  }
};

}  // namespace

SgldConfig SgldConfig::resolved() const {
  SgldConfig c = *this;
  if (c.step_size <= 0.0) c.step_size = 0.1 / c.gamma;
  if (c.noise_scale <= 0.0) c.noise_scale = std::sqrt(2.0 * c.step_size) * 0.01;
  if (c.burn_in < 0) c.burn_in = c.inner_steps / 5;
  return c;
}

void SgldConfig::validate() const {
  const SgldConfig c = resolved();
  if (c.gamma <= 0.0) throw ConfigError("sgld: gamma must be > 0");
  if (c.step_size <= 0.0) throw ConfigError("sgld: step_size must be > 0");
  if (!(c.inner_steps > c.burn_in && c.burn_in >= 0))
    throw ConfigError("sgld: need inner_steps > burn_in >= 0");
}

double theorem1_d(const Theorem1Constants& c, double loss_at_theta, double x) {
  return std::log(x + c.gamma) + loss_at_theta + (c.p - 1) * std::log(c.gamma) -
         c.m_radius * c.M_lip - 0.5 * c.p * std::log(2.0 * std::numbers::pi) -
         0.5 * c.rho_lip * c.m_radius * c.m_radius * c.m_radius - c.C_term;
}

double hutchinson_trace_with_probes(const Optimizee& o, const Eigen::VectorXd& theta,
                                    std::span<const int> batch,
                                    std::span<const Eigen::VectorXd> probes) {
  if (probes.empty()) throw ConfigError("hutchinson: need at least one probe");
  LossTape tape(o, theta, batch);
  // v enters as rebindable leaves so every probe reuses one HVP tape.
  std::vector<NodeRef> v;
  v.reserve(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) v.push_back(tape.g.leaf(0.0));
  const std::vector<NodeRef> hv = hvp_nodes(tape.g, tape.root, tape.theta, v);

  double acc = 0.0;
  for (const Eigen::VectorXd& probe : probes) {
    if (probe.size() != theta.size())
      throw DimMismatch(static_cast<std::size_t>(theta.size()),
                        static_cast<std::size_t>(probe.size()));
    bind_all(tape.g, v, probe);
    acc += probe.dot(eval_refs(tape.g, hv));
  }
  return acc / static_cast<double>(probes.size());
}

double hutchinson_trace(const Optimizee& o, const Eigen::VectorXd& theta,
                        std::span<const int> batch, int probes, std::uint64_t seed) {
  if (probes < 1) throw ConfigError("hutchinson: probes must be >= 1");
  const auto vs = rademacher_probes(static_cast<int>(theta.size()), probes, seed);
  return hutchinson_trace_with_probes(o, theta, batch, vs);
}

std::vector<Eigen::VectorXd> rademacher_probes(int p, int count, std::uint64_t seed) {
  rng::Stream stream(rng::derive(seed, {kHutchTag}));
  std::vector<Eigen::VectorXd> out(static_cast<std::size_t>(count));
  for (auto& v : out) {
    v.resize(p);
    for (int i = 0; i < p; ++i) v[i] = stream.sign();
  }
  return out;
}

NodeRef hutchinson_nodes_with_probes(Graph& g, const Optimizee& o,
                                     std::span<const NodeRef> theta,
                                     std::span<const int> batch,
                                     std::span<const Eigen::VectorXd> probes) {
  if (probes.empty()) throw ConfigError("hutchinson: need at least one probe");
  const NodeRef root = o.loss_builder(g, theta, batch);
  // The first reverse pass is shared by all probes.
  const GradResult gr = grad(g, root, theta);

  std::vector<NodeRef> terms;
  terms.reserve(probes.size());
  for (const Eigen::VectorXd& probe : probes) {
    const std::vector<NodeRef> vc = make_consts(g, probe);
    const NodeRef s = g.dot(gr.grads, vc);
    const std::vector<NodeRef> hv = grad(g, s, theta).grads;
    terms.push_back(g.dot(vc, hv));
  }
  return g.mul(g.sum(terms), g.constant(1.0 / static_cast<double>(probes.size())));
}

NodeRef hutchinson_nodes(Graph& g, const Optimizee& o,
                         std::span<const NodeRef> theta,
                         std::span<const int> batch, int probes,
                         std::uint64_t seed) {
  if (probes < 1) throw ConfigError("hutchinson: probes must be >= 1");
  const auto vs = rademacher_probes(static_cast<int>(theta.size()), probes, seed);
  return hutchinson_nodes_with_probes(g, o, theta, batch, vs);
}

NodeRef power_iteration_nodes(Graph& g, const Optimizee& o,
                              std::span<const NodeRef> theta,
                              std::span<const int> batch, int iters,
                              std::uint64_t seed) {
  const NodeRef root = o.loss_builder(g, theta, batch);
  const GradResult gr = grad(g, root, theta);

  rng::Stream stream(rng::derive(seed, {kPowerTag}));
  Eigen::VectorXd v0(static_cast<Eigen::Index>(theta.size()));
  for (Eigen::Index i = 0; i < v0.size(); ++i) v0[i] = stream.normal();
  v0.normalize();

  std::vector<NodeRef> v = make_consts(g, v0);
  std::vector<NodeRef> hv;
  const NodeRef half = g.constant(0.5);
  for (int it = 0; it < iters; ++it) {
    const NodeRef s = g.dot(gr.grads, v);
    hv = grad(g, s, theta).grads;
    // |hv| on tape: exp(log(hv . hv) / 2); the primitive set has no sqrt.
    const NodeRef norm = g.exp(g.mul(half, g.log(g.dot(hv, hv))));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = g.div(hv[i], norm);
  }
  const NodeRef s = g.dot(gr.grads, v);
  hv = grad(g, s, theta).grads;
  return g.div(g.dot(v, hv), g.dot(v, v));
}

namespace {

// Shared power-iteration loop; returns the final unit direction, or a zero
// vector if a zero-Hessian direction was hit.
Eigen::VectorXd power_iterate(const Optimizee& o, const Eigen::VectorXd& theta,
                              std::span<const int> batch, int iters,
                              std::uint64_t seed) {
  LossTape tape(o, theta, batch);
  std::vector<NodeRef> v_leaves;
  v_leaves.reserve(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) v_leaves.push_back(tape.g.leaf(0.0));
  const std::vector<NodeRef> hv = hvp_nodes(tape.g, tape.root, tape.theta, v_leaves);

  rng::Stream stream(rng::derive(seed, {kPowerTag}));
  Eigen::VectorXd v(theta.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = stream.normal();
  v.normalize();

  for (int it = 0; it < iters; ++it) {
    bind_all(tape.g, v_leaves, v);
    const Eigen::VectorXd hvv = eval_refs(tape.g, hv);
    const double norm = hvv.norm();
    if (norm < 1e-300) return Eigen::VectorXd::Zero(theta.size());
    v = hvv / norm;
  }
  return v;
}

}  // namespace

Eigen::VectorXd power_iteration_direction(const Optimizee& o,
                                          const Eigen::VectorXd& theta,
                                          std::span<const int> batch, int iters,
                                          std::uint64_t seed) {
  return power_iterate(o, theta, batch, iters, seed);
}

double top_abs_eigenvalue(const Optimizee& o, const Eigen::VectorXd& theta,
                          std::span<const int> batch, int iters, std::uint64_t seed) {
  if (iters < 1) throw ConfigError("power iteration: iters must be >= 1");
  const Eigen::VectorXd v = power_iterate(o, theta, batch, iters, seed);
  if (v.isZero(0.0)) return 0.0;
  LossTape tape(o, theta, batch);
  const Eigen::VectorXd hvv = hvp(tape.g, tape.root, tape.theta, v);
  return std::abs(v.dot(hvv) / v.squaredNorm());
}

NodeRef quadratic_form_nodes(Graph& g, const Optimizee& o,
                             std::span<const NodeRef> theta,
                             std::span<const int> batch, const Eigen::VectorXd& v) {
  const NodeRef root = o.loss_builder(g, theta, batch);
  const std::vector<NodeRef> vc = make_consts(g, v);
  const std::vector<NodeRef> hv = hvp_nodes(g, root, theta, vc);
  return g.dot(vc, hv);
}

double jacobian_trace(const Optimizee& o, const Eigen::VectorXd& theta,
                      std::span<const int> batch) {
  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const NodeRef j = jacobian_trace_nodes(g, o, t, batch);
  return g.eval(j);
}

NodeRef jacobian_trace_nodes(Graph& g, const Optimizee& o,
                             std::span<const NodeRef> theta,
                             std::span<const int> batch) {
  const NodeRef root = o.loss_builder(g, theta, batch);
  const GradResult gr = grad(g, root, theta);
  return g.dot(gr.grads, gr.grads);
}

Eigen::VectorXd sgld_entropy_grad(const Optimizee& o, const Eigen::VectorXd& theta,
                                  std::span<const int> batch, const SgldConfig& cfg_in) {
  cfg_in.validate();
  const SgldConfig cfg = cfg_in.resolved();
  rng::Stream stream(rng::derive(cfg.seed, {kSgldTag}));

  LossTape tape(o, theta, batch);
  const GradResult gr = grad(tape.g, tape.root, tape.theta);

  Eigen::VectorXd chain = theta;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(theta.size());
  bool mean_started = false;
  const double noise_step = cfg.noise_scale * std::sqrt(cfg.step_size);

  for (int k = 0; k < cfg.inner_steps; ++k) {
    bind_all(tape.g, tape.theta, chain);
    const Eigen::VectorXd grad_l = eval_refs(tape.g, gr.grads);
    for (Eigen::Index i = 0; i < chain.size(); ++i) {
      chain[i] -= cfg.step_size * (grad_l[i] + cfg.gamma * (chain[i] - theta[i]));
      chain[i] += noise_step * stream.normal();
    }
    if (chain.norm() > 1e6) throw ChainDiverged();
    if (k >= cfg.burn_in) {
      if (!mean_started) {
        mean = chain;
        mean_started = true;
      } else {
        mean = 0.75 * mean + 0.25 * chain;
      }
    }
  }
  return cfg.gamma * (theta - mean);
}

double entropy_quadrature(const Optimizee& o, const Eigen::VectorXd& theta,
                          double gamma, const QuadGrid& grid) {
  const Eigen::Index p = theta.size();
  if (p < 1 || p > 2) throw TooLarge(static_cast<std::size_t>(p), 2);
  if (grid.points < 3) throw ConfigError("quadrature: need at least 3 grid points");

  const std::vector<int> batch = all_train_indices(o);
  LossTape tape(o, theta, batch);

  const double h = (grid.hi - grid.lo) / (grid.points - 1);
  const auto coord = [&](int i) { return grid.lo + h * i; };
  const double log_h = std::log(h);

  Eigen::VectorXd point(p);
  const auto log_integrand = [&](double x0, double x1) {
    point[0] = x0;
    if (p == 2) point[1] = x1;
    bind_all(tape.g, tape.theta, point);
    const double loss = tape.g.eval(tape.root);
    return -loss - 0.5 * gamma * (theta - point).squaredNorm();
  };

  // Log-trapezoid weights: h per interior point, h/2 at the ends (per axis).
  const auto log_w = [&](int i) {
    return (i == 0 || i == grid.points - 1) ? log_h - std::numbers::ln2 : log_h;
  };

  std::vector<double> logs;
  double peak = -std::numeric_limits<double>::infinity();
  double boundary_peak = -std::numeric_limits<double>::infinity();

  if (p == 1) {
    logs.reserve(static_cast<std::size_t>(grid.points));
    for (int i = 0; i < grid.points; ++i) {
      const double li = log_integrand(coord(i), 0.0);
      peak = std::max(peak, li);
      if (i == 0 || i == grid.points - 1) boundary_peak = std::max(boundary_peak, li);
      logs.push_back(li + log_w(i));
    }
  } else {
    logs.reserve(static_cast<std::size_t>(grid.points) * grid.points);
    for (int i = 0; i < grid.points; ++i)
      for (int j = 0; j < grid.points; ++j) {
        const double li = log_integrand(coord(i), coord(j));
        peak = std::max(peak, li);
        if (i == 0 || i == grid.points - 1 || j == 0 || j == grid.points - 1)
          boundary_peak = std::max(boundary_peak, li);
        logs.push_back(li + log_w(i) + log_w(j));
      }
  }

  if (boundary_peak >= peak + std::log(1e-12))
    throw GridTooNarrow("integrand at the grid boundary exceeds 1e-12 of the peak");

  const double m = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (const double l : logs) acc += std::exp(l - m);
  return m + std::log(acc);
}

std::vector<Theorem1Case> verify_theorem1(std::span<const double> a_grid,
                                          std::span<const double> gamma_grid,
                                          std::span<const double> theta_grid,
                                          double m_radius) {
  std::vector<Theorem1Case> out;
  out.reserve(a_grid.size() * gamma_grid.size() * theta_grid.size());
  for (const double a : a_grid) {
    Eigen::MatrixXd mat(1, 1);
    mat(0, 0) = a;
    const Optimizee quad = make_fixed_quadratic(mat);
    for (const double gamma : gamma_grid) {
      for (const double theta : theta_grid) {
        // Integrand is Gaussian with precision a + gamma; center the grid on
        // its mode and take +-14 standard deviations.
        const double mode = gamma * theta / (a + gamma);
        const double sigma = 1.0 / std::sqrt(a + gamma);
        const QuadGrid grid{mode - 14.0 * sigma, mode + 14.0 * sigma, 2001};
        Eigen::VectorXd th(1);
        th[0] = theta;
        const double g_val = entropy_quadrature(quad, th, gamma, grid);

        Theorem1Constants c;
        c.m_radius = m_radius;
        c.M_lip = a * (std::abs(theta) + m_radius);
        c.rho_lip = 0.0;  // third derivative of a quadratic vanishes
        c.p = 1;
        c.gamma = gamma;
        c.C_term = -std::log(std::erf(m_radius * std::sqrt(gamma / 2.0)));

        const double loss_at_theta = 0.5 * a * theta * theta;
        const double d_of_lhs = theorem1_d(c, loss_at_theta, a);
        out.push_back(Theorem1Case{a, gamma, theta, a, d_of_lhs, -g_val,
                                   d_of_lhs <= -g_val});
      }
    }
  }
  return out;
}

FlatnessReport flatness_report(const Optimizee& o, const Eigen::VectorXd& theta,
                               std::span<const int> batch, int probes, int pi_iters,
                               const SgldConfig* sgld, std::uint64_t seed) {
  FlatnessReport r;
  r.hutchinson_trace = hutchinson_trace(o, theta, batch, probes, seed);
  r.top_abs_eig = top_abs_eigenvalue(o, theta, batch, pi_iters, seed);
  r.jacobian_trace = jacobian_trace(o, theta, batch);
  r.probes_used = probes;
  r.pi_iters_used = pi_iters;
  if (sgld) {
    SgldConfig cfg = *sgld;
    cfg.seed = rng::derive(seed, {kSgldTag, cfg.seed});
    r.entropy_grad = sgld_entropy_grad(o, theta, batch, cfg);
  }
  return r;
}

}  // namespace flatl2o
