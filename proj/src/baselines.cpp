// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/baselines.hpp"

#include <cmath>

#include "flatl2o/autodiff.hpp"

namespace flatl2o {

void BaselineConfig::validate() const {
  if (lr <= 0.0) throw ConfigError("baseline: lr must be > 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ConfigError("baseline: betas must lie in [0, 1)");
  if (kind == BaselineKind::EntropySgd) entropy.validate();
  if (kind == BaselineKind::SgdHessian && hessian_probes < 1)
    throw ConfigError("baseline: hessian_probes must be >= 1");
}

namespace {

Eigen::VectorXd hessian_penalized_gradient(const BaselineConfig& cfg,
                                           const Optimizee& o,
                                           const Eigen::VectorXd& theta,
                                           std::span<const int> batch,
                                           std::uint64_t step_seed) {
  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const NodeRef loss = o.loss_builder(g, t, batch);
  const NodeRef trace = hutchinson_nodes(g, o, t, batch, cfg.hessian_probes, step_seed);
  const NodeRef total = g.add(loss, g.mul(g.constant(cfg.hessian_lambda), trace));
  const GradResult gr = grad(g, total, t);
  NodeRef top = gr.grads[0];
  for (const NodeRef r : gr.grads)
    if (r.index > top.index) top = r;
  g.eval(top);
  return g.values(gr.grads);
}

}  // namespace

std::pair<Eigen::VectorXd, BaselineState> baseline_step(
    const BaselineConfig& cfg, const Optimizee& o, const Eigen::VectorXd& theta,
    const BaselineState& state, std::span<const int> batch) {
  BaselineState next = state;
  next.t = state.t + 1;
  Eigen::VectorXd out = theta;

  switch (cfg.kind) {
    case BaselineKind::Sgd: {
      out -= cfg.lr * loss_gradient(o, theta, batch);
      break;
    }
    case BaselineKind::Adam: {
      const Eigen::VectorXd g = loss_gradient(o, theta, batch);
      next.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g;
      next.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
      const double mc = 1.0 - std::pow(cfg.beta1, static_cast<double>(next.t));
      const double vc = 1.0 - std::pow(cfg.beta2, static_cast<double>(next.t));
      for (Eigen::Index i = 0; i < out.size(); ++i)
        out[i] -= cfg.lr * (next.m[i] / mc) / (std::sqrt(next.v[i] / vc) + cfg.eps);
      break;
    }
    case BaselineKind::RmsProp: {
      const Eigen::VectorXd g = loss_gradient(o, theta, batch);
      next.v = cfg.rms_decay * state.v + (1.0 - cfg.rms_decay) * g.cwiseProduct(g);
      for (Eigen::Index i = 0; i < out.size(); ++i)
        out[i] -= cfg.lr * g[i] / (std::sqrt(next.v[i]) + cfg.eps);
      break;
    }
    case BaselineKind::EntropySgd: {
      SgldConfig chain = cfg.entropy;
      chain.seed = rng::derive(cfg.entropy.seed, {0xe5d, static_cast<std::uint64_t>(state.t)});
      out -= cfg.lr * sgld_entropy_grad(o, theta, batch, chain);
      break;
    }
    case BaselineKind::SgdHessian: {
      const std::uint64_t step_seed =
          rng::derive(cfg.seed, {0x5d9, static_cast<std::uint64_t>(state.t)});
      out -= cfg.lr * hessian_penalized_gradient(cfg, o, theta, batch, step_seed);
      break;
    }
  }
  for (Eigen::Index i = 0; i < out.size(); ++i)
    if (!std::isfinite(out[i])) throw NonFinite(static_cast<std::size_t>(i));
  return {std::move(out), std::move(next)};
}

BaselineConfig lr_grid_search(const BaselineConfig& base, const Optimizee& o,
                              std::span<const double> grid, int budget,
                              std::span<const std::uint64_t> seeds,
                              int batch_size) {
  if (grid.empty()) throw ConfigError("lr grid must be non-empty");
  const auto full = all_train_indices(o);

  double best_loss = 0.0;
  bool have_best = false;
  BaselineConfig best = base;

  for (const double lr : grid) {
    BaselineConfig cand = base;
    cand.lr = lr;
    cand.validate();
    double acc = 0.0;
    bool diverged = false;
    for (const std::uint64_t seed : seeds) {
      rng::Stream init(rng::derive(seed, {0x617264}));
      Eigen::VectorXd theta = o.init_sampler(init);
      BaselineState state = BaselineState::init(static_cast<int>(theta.size()));
      BatchStream batches({batch_size > o.n_train ? o.n_train : batch_size,
                           Sampling::WithReplacement, rng::derive(seed, {0xb9})},
                          o.n_train);
      try {
        for (int step = 0; step < budget; ++step) {
          const auto batch = batches.next();
          std::tie(theta, state) = baseline_step(cand, o, theta, state, batch);
        }
      } catch (const Error&) {
        diverged = true;
        break;
      }
      const double final_loss = loss_value(o, theta, full);
      if (!std::isfinite(final_loss) || final_loss > 1e10) {
        diverged = true;
        break;
      }
      acc += final_loss;
    }
    if (diverged) continue;
    const double mean = acc / static_cast<double>(seeds.size());
    if (!have_best || mean < best_loss) {
      best_loss = mean;
      best = cand;
      have_best = true;
    }
  }
  if (!have_best) throw AllDiverged();
  return best;
}

}  // namespace flatl2o
