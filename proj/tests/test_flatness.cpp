// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include "flatl2o/autodiff.hpp"
#include "flatl2o/flatness.hpp"
#include "flatl2o/optimizees.hpp"
#include "oracles.hpp"

using namespace flatl2o;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Optimizee quad_1d(double a) {
  MatrixXd m(1, 1);
  m(0, 0) = a;
  return make_fixed_quadratic(m);
}

std::vector<VectorXd> all_sign_patterns(int p) {
  std::vector<VectorXd> out;
  for (int mask = 0; mask < (1 << p); ++mask) {
    VectorXd v(p);
    for (int i = 0; i < p; ++i) v[i] = (mask >> i) & 1 ? 1.0 : -1.0;
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("hutchinson is exact on diagonal Hessians with one probe") {
  Eigen::Vector3d diag(1.0, 2.0, 3.0);
  const Optimizee o = make_fixed_quadratic(diag.asDiagonal());
  const VectorXd theta = VectorXd::Zero(3);
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    const double est = hutchinson_trace(o, theta, all_train_indices(o), 1, seed);
    CHECK(est == doctest::Approx(6.0).epsilon(1e-14));
  }
}

TEST_CASE("hutchinson full sign enumeration cancels off-diagonals") {
  MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  const Optimizee o = make_fixed_quadratic(a);
  const auto probes = all_sign_patterns(2);
  const double est = hutchinson_trace_with_probes(o, VectorXd::Zero(2),
                                                  all_train_indices(o), probes);
  CHECK(est == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("hutchinson full enumeration is unbiased for p <= 4") {
  const Optimizee o = make_quadratic_family(4, {0.5, 2.0}, 51, 3);
  rng::Stream s(4);
  const VectorXd theta = o.init_sampler(s);
  const auto batch = all_train_indices(o);
  const double est = hutchinson_trace_with_probes(o, theta, batch, all_sign_patterns(4));

  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const MatrixXd h = dense_hessian(g, o.loss_builder(g, t, batch), t);
  CHECK(std::abs(est - h.trace()) <= 1e-10);

  const auto data = std::make_shared<Dataset>(make_blobs(8, 2, 3.0, 0.8, 53));
  const Optimizee lg = make_logistic_regression(data);
  const VectorXd w = lg.init_sampler(s);
  const auto lb = all_train_indices(lg);
  const double est2 = hutchinson_trace_with_probes(lg, w, lb, all_sign_patterns(2));
  Graph g2;
  const std::vector<NodeRef> t2 = make_leaves(g2, w);
  const MatrixXd h2 = dense_hessian(g2, lg.loss_builder(g2, t2, lb), t2);
  CHECK(std::abs(est2 - h2.trace()) <= 1e-10);
}

TEST_CASE("hutchinson trace equals the spectrum sum on the quadratic family") {
  const Optimizee o = make_quadratic_family(10, {0.5, 2.0}, 57, 2);
  rng::Stream s(6);
  const VectorXd theta = o.init_sampler(s);
  const std::vector<int> batch{0};
  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const MatrixXd h = dense_hessian(g, o.loss_builder(g, t, batch), t);
  const VectorXd eigs = oracles::symmetric_eigenvalues(h);
  CHECK(std::abs(h.trace() - eigs.sum()) <= 1e-10);
}

TEST_CASE("hutchinson estimate is differentiable along theta") {
  const auto data = std::make_shared<Dataset>(make_blobs(6, 2, 2.0, 1.0, 59));
  const Optimizee o = make_tiny_mlp({2, 3, 2}, Activation::Sigmoid, data);
  rng::Stream s(8);
  const VectorXd theta = o.init_sampler(s);
  const auto batch = all_train_indices(o);
  const int probes = 3;
  const std::uint64_t seed = 12;

  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const NodeRef est = hutchinson_nodes(g, o, t, batch, probes, seed);
  const GradResult gr = grad(g, est, t);
  NodeRef top = gr.grads[0];
  for (const NodeRef r : gr.grads)
    if (r.index > top.index) top = r;
  g.eval(top);
  const VectorXd got = g.values(gr.grads);

  const VectorXd want = oracles::fd_grad(
      [&](const VectorXd& x) { return hutchinson_trace(o, x, batch, probes, seed); },
      theta, 1e-5);
  CHECK(oracles::max_rel_err(got, want, 1e-6) <= 1e-4);
}

TEST_CASE("power iteration closed forms") {
  MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  const Optimizee o = make_fixed_quadratic(a);
  const VectorXd theta = VectorXd::Zero(2);
  const auto batch = all_train_indices(o);
  CHECK(std::abs(top_abs_eigenvalue(o, theta, batch, 100, 1) - 3.0) <= 1e-6);

  const Optimizee id2 = make_fixed_quadratic(MatrixXd::Identity(2, 2));
  CHECK(top_abs_eigenvalue(id2, theta, all_train_indices(id2), 1, 1) ==
        doctest::Approx(1.0).epsilon(1e-12));

  Eigen::Vector2d d(-5.0, 2.0);
  const Optimizee indef = make_fixed_quadratic(d.asDiagonal());
  CHECK(std::abs(top_abs_eigenvalue(indef, theta, all_train_indices(indef), 100, 1) - 5.0) <= 1e-6);
}

TEST_CASE("power iteration Rayleigh quotient stays inside the spectrum") {
  for (std::uint64_t seed : {3ull, 5ull, 7ull}) {
    const Optimizee o = make_quadratic_family(6, {0.5, 2.0}, seed, 2);
    rng::Stream s(seed);
    const VectorXd theta = o.init_sampler(s);
    const std::vector<int> batch{0};
    Graph g;
    const std::vector<NodeRef> t = make_leaves(g, theta);
    const MatrixXd h = dense_hessian(g, o.loss_builder(g, t, batch), t);
    const VectorXd eigs = oracles::symmetric_eigenvalues(h);
    for (int iters = 1; iters <= 5; ++iters) {
      const double q = top_abs_eigenvalue(o, theta, batch, iters, seed);
      CHECK(q >= eigs.minCoeff() - 1e-9);
      CHECK(q <= eigs.maxCoeff() + 1e-9);
    }
  }
}

TEST_CASE("power iteration at the 10-iteration budget: 5% on gapped spectra") {
  // |lambda_2 / lambda_1| = 0.5 via a rotated diagonal.
  rng::Stream s(61);
  for (int trial = 0; trial < 3; ++trial) {
    const int p = 5;
    Eigen::VectorXd eigs(p);
    eigs << 2.0, 1.0, 0.8, 0.5, 0.3;
    MatrixXd gauss(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) gauss(i, j) = s.normal();
    const MatrixXd q = Eigen::HouseholderQR<MatrixXd>(gauss).householderQ();
    const Optimizee o = make_fixed_quadratic(q * eigs.asDiagonal() * q.transpose());
    const double est =
        top_abs_eigenvalue(o, VectorXd::Zero(p), all_train_indices(o), 10,
                           static_cast<std::uint64_t>(trial));
    CHECK(std::abs(est - 2.0) / 2.0 <= 0.05);
  }
}

TEST_CASE("jacobian trace: closed forms and definitional identity") {
  const Optimizee o = quad_1d(1.0);
  VectorXd theta(1);
  theta << 2.0;
  CHECK(jacobian_trace(o, theta, all_train_indices(o)) == doctest::Approx(4.0).epsilon(1e-12));
  theta << 0.0;
  CHECK(jacobian_trace(o, theta, all_train_indices(o)) == doctest::Approx(0.0));

  const auto data = std::make_shared<Dataset>(make_blobs(8, 2, 2.0, 1.0, 67));
  const Optimizee mlp = make_tiny_mlp({2, 20, 2}, Activation::Sigmoid, data);
  rng::Stream s(10);
  for (int trial = 0; trial < 3; ++trial) {
    const VectorXd th = mlp.init_sampler(s);
    const auto batch = all_train_indices(mlp);
    const VectorXd g = loss_gradient(mlp, th, batch);
    CHECK(std::abs(jacobian_trace(mlp, th, batch) - g.dot(g)) <= 1e-12);
  }
}

TEST_CASE("sgld entropy gradient: symmetry at the origin") {
  const Optimizee o = quad_1d(1.0);
  SgldConfig cfg;
  cfg.gamma = 1.0;
  cfg.inner_steps = 1000;
  cfg.seed = 5;
  const VectorXd est = sgld_entropy_grad(o, VectorXd::Zero(1), all_train_indices(o), cfg);
  CHECK(std::abs(est[0]) <= 0.05);
}

TEST_CASE("sgld entropy gradient matches the closed form within 10%") {
  const Optimizee o = quad_1d(1.0);
  VectorXd theta(1);
  theta << 2.0;
  const auto batch = all_train_indices(o);

  const auto mean_estimate = [&](double gamma) {
    double acc = 0.0;
    for (int seed = 0; seed < 20; ++seed) {
      SgldConfig cfg;
      cfg.gamma = gamma;
      cfg.inner_steps = 1000;
      cfg.seed = static_cast<std::uint64_t>(seed);
      acc += sgld_entropy_grad(o, theta, batch, cfg)[0];
    }
    return acc / 20.0;
  };

  CHECK(oracles::rel_err(mean_estimate(1.0), oracles::quadratic_entropy_grad(1, 1, 2)) <= 0.10);
  CHECK(oracles::rel_err(mean_estimate(100.0), oracles::quadratic_entropy_grad(1, 100, 2)) <= 0.10);
}

TEST_CASE("sgld is bit-reproducible per seed and flags divergence") {
  const Optimizee o = quad_1d(1.0);
  VectorXd theta(1);
  theta << 1.0;
  SgldConfig cfg;
  cfg.inner_steps = 200;
  cfg.seed = 9;
  const VectorXd a = sgld_entropy_grad(o, theta, all_train_indices(o), cfg);
  const VectorXd b = sgld_entropy_grad(o, theta, all_train_indices(o), cfg);
  CHECK(a[0] == b[0]);

  SgldConfig wild = cfg;
  wild.step_size = 10.0;  // |1 - step (a + gamma)| > 1: the chain explodes
  CHECK_THROWS_AS(sgld_entropy_grad(o, theta, all_train_indices(o), wild), ChainDiverged);
}

TEST_CASE("hutchinson is bit-reproducible per seed") {
  const Optimizee o = make_quadratic_family(4, {0.5, 2.0}, 71, 2);
  rng::Stream s(12);
  const VectorXd theta = o.init_sampler(s);
  const auto batch = all_train_indices(o);
  CHECK(hutchinson_trace(o, theta, batch, 10, 31) == hutchinson_trace(o, theta, batch, 10, 31));
}

TEST_CASE("entropy quadrature matches the closed form at the pinned values") {
  const Optimizee o = quad_1d(1.0);
  VectorXd theta(1);
  theta << 0.0;
  const QuadGrid grid{-12.0, 12.0, 2001};
  CHECK(std::abs(entropy_quadrature(o, theta, 1.0, grid) - 0.5723649429247001) <= 1e-6);
  theta << 2.0;
  const QuadGrid grid2{-10.0, 14.0, 2001};
  CHECK(std::abs(entropy_quadrature(o, theta, 1.0, grid2) - (-0.4276350570752999)) <= 1e-6);
}

TEST_CASE("entropy quadrature matches the closed form over nine triples") {
  const double as[] = {0.5, 1.0, 2.0};
  const double gs[] = {0.5, 1.0, 2.0};
  const double ths[] = {-1.0, 0.5, 2.0};
  for (int i = 0; i < 3; ++i) {
    const Optimizee o = quad_1d(as[i]);
    for (int j = 0; j < 3; ++j) {
      const double mode = gs[j] * ths[j] / (as[i] + gs[j]);
      const double sigma = 1.0 / std::sqrt(as[i] + gs[j]);
      const QuadGrid grid{mode - 14 * sigma, mode + 14 * sigma, 2001};
      VectorXd th(1);
      th << ths[j];
      const double got = entropy_quadrature(o, th, gs[j], grid);
      const double want = oracles::quadratic_entropy(as[i], gs[j], ths[j]);
      CHECK(std::abs(got - want) <= 1e-6);
    }
  }
}

TEST_CASE("entropy quadrature: translation invariance") {
  // L = (theta - c)^2 / 2 at theta = c vs L = theta^2 / 2 at 0.
  const double c = 3.25;
  Optimizee shifted;
  shifted.kind = OptimizeeKind::QuadraticFamily;
  shifted.param_dim = 1;
  shifted.n_train = 1;
  shifted.loss_builder = [c](Graph& g, std::span<const NodeRef> theta,
                             std::span<const int>) {
    const NodeRef diff = g.add(theta[0], g.constant(-c));
    return g.mul(g.constant(0.5), g.square(diff));
  };

  VectorXd at_c(1);
  at_c << c;
  const double g_shifted =
      entropy_quadrature(shifted, at_c, 1.0, QuadGrid{c - 12.0, c + 12.0, 2001});
  const double g_origin = entropy_quadrature(quad_1d(1.0), VectorXd::Zero(1), 1.0,
                                             QuadGrid{-12.0, 12.0, 2001});
  CHECK(std::abs(g_shifted - g_origin) <= 1e-9);
}

TEST_CASE("entropy quadrature: 2-D separable case and narrow-grid error") {
  Eigen::Vector2d d(1.0, 2.0);
  const Optimizee o = make_fixed_quadratic(d.asDiagonal());
  VectorXd theta(2);
  theta << 0.5, -0.25;
  const double got = entropy_quadrature(o, theta, 1.0, QuadGrid{-10.0, 10.0, 401});
  const double want = oracles::quadratic_entropy(1.0, 1.0, 0.5) +
                      oracles::quadratic_entropy(2.0, 1.0, -0.25);
  CHECK(std::abs(got - want) <= 1e-6);

  CHECK_THROWS_AS(
      entropy_quadrature(quad_1d(1.0), VectorXd::Zero(1), 1.0, QuadGrid{-1.0, 1.0, 101}),
      GridTooNarrow);
}

TEST_CASE("entropy gradient oracle: quadrature derivative matches the closed form") {
  const double a = 1.0, gamma = 1.0;
  const Optimizee o = quad_1d(a);
  const auto g_of_theta = [&](double th) {
    const double mode = gamma * th / (a + gamma);
    const double sigma = 1.0 / std::sqrt(a + gamma);
    VectorXd t(1);
    t << th;
    return entropy_quadrature(o, t, gamma, QuadGrid{mode - 14 * sigma, mode + 14 * sigma, 4001});
  };
  const double theta = 1.5, eps = 1e-4;
  const double fd = -(g_of_theta(theta + eps) - g_of_theta(theta - eps)) / (2 * eps);
  const double closed = oracles::quadratic_entropy_grad(a, gamma, theta);
  CHECK(std::abs(fd - closed) <= 1e-4);
  // And the closed-form E[theta'] identity: gamma (theta - E[theta']).
  const double via_mean = gamma * (theta - gamma * theta / (a + gamma));
  CHECK(std::abs(via_mean - closed) <= 1e-9);
}

TEST_CASE("theorem-1 sweep holds on the full default grid") {
  const double as[] = {0.25, 0.5, 1.0, 2.0, 4.0};
  const double gs[] = {0.5, 1.0, 2.0};
  const double ths[] = {-1.0, 0.0, 1.0};
  const auto cases = verify_theorem1(as, gs, ths, 1.0);
  REQUIRE(cases.size() == 45);
  for (const auto& c : cases) {
    CAPTURE(c.a);
    CAPTURE(c.gamma);
    CAPTURE(c.theta);
    CHECK(c.holds);
    CHECK(c.d_of_lhs <= c.neg_entropy);
  }
}

TEST_CASE("theorem-1 constants: pinned D value and monotonicity in a") {
  const double as[] = {1.0};
  const double gs[] = {1.0};
  const double ths[] = {0.0};
  const auto one = verify_theorem1(as, gs, ths, 1.0);
  REQUIRE(one.size() == 1);
  CHECK(std::abs(one[0].d_of_lhs - (-1.6075064989468535)) <= 1e-9);
  CHECK(std::abs(one[0].neg_entropy - (-0.5723649429247001)) <= 1e-6);

  const double sweep_as[] = {0.25, 0.5, 1.0, 2.0, 4.0};
  const auto sweep = verify_theorem1(sweep_as, gs, ths, 1.0);
  for (std::size_t i = 1; i < sweep.size(); ++i)
    CHECK(sweep[i].neg_entropy > sweep[i - 1].neg_entropy);

  // Degenerate near-flat loss: the bound is trivially satisfiable.
  const double flat_as[] = {1e-8};
  const auto flat = verify_theorem1(flat_as, gs, ths, 1.0);
  CHECK(flat[0].holds);
}

TEST_CASE("erf agrees with an independent power series") {
  // erf(x) = 2/sqrt(pi) sum_k (-1)^k x^{2k+1} / (k! (2k+1))
  const auto series = [](double x) {
    double term = x, acc = 0.0;
    for (int k = 0; k < 64; ++k) {
      acc += term / (2 * k + 1);
      term *= -x * x / (k + 1);
    }
    return 2.0 / std::sqrt(M_PI) * acc;
  };
  for (double x : {0.1, 0.5, 1.0 / std::sqrt(2.0), 1.0, 2.0, 3.0})
    CHECK(std::abs(std::erf(x) - series(x)) <= 1e-13);
}

TEST_CASE("flatness report: field invariants") {
  const Optimizee o = make_quadratic_family(4, {0.5, 2.0}, 73, 2);
  rng::Stream s(14);
  const VectorXd theta = o.init_sampler(s);
  SgldConfig sgld;
  sgld.inner_steps = 100;
  const FlatnessReport r =
      flatness_report(o, theta, all_train_indices(o), 10, 10, &sgld, 99);
  CHECK(r.probes_used >= 1);
  CHECK(r.jacobian_trace >= 0.0);
  CHECK(r.pi_iters_used == 10);
  CHECK(r.entropy_grad.size() == 4);
  CHECK(std::isfinite(r.entropy_grad_norm()));
}
