// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/optimizees.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "flatl2o/autodiff.hpp"

namespace flatl2o {

double loss_value(const Optimizee& o, const Eigen::VectorXd& theta,
                  std::span<const int> batch) {
  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  return g.eval(o.loss_builder(g, t, batch));
}

Eigen::VectorXd loss_gradient(const Optimizee& o, const Eigen::VectorXd& theta,
                              std::span<const int> batch) {
  Graph g;
  const std::vector<NodeRef> t = make_leaves(g, theta);
  const NodeRef root = o.loss_builder(g, t, batch);
  const GradResult gr = grad(g, root, t);
  NodeRef top = gr.grads[0];
  for (const NodeRef r : gr.grads)
    if (r.index > top.index) top = r;
  g.eval(top);
  return g.values(gr.grads);
}

int Dataset::n_classes() const {
  int c = 0;
  for (Eigen::Index i = 0; i < train_y.size(); ++i) c = std::max(c, train_y[i]);
  for (Eigen::Index i = 0; i < test_y.size(); ++i) c = std::max(c, test_y[i]);
  return std::max(c + 1, 2);
}

BatchStream::BatchStream(const BatchSchedule& schedule, int n_train)
    : schedule_(schedule), n_train_(n_train), stream_(schedule.seed) {
  if (schedule_.batch_size > n_train_)
    throw ConfigError("batch_size " + std::to_string(schedule_.batch_size) +
                      " exceeds train set size " + std::to_string(n_train_));
  if (schedule_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

std::vector<int> BatchStream::next() {
  std::vector<int> out(static_cast<std::size_t>(schedule_.batch_size));
  if (schedule_.sampling == Sampling::WithReplacement) {
    for (int& i : out) i = stream_.uniform_int(n_train_);
    return out;
  }
  for (int& i : out) {
    if (cursor_ == perm_.size()) {
      perm_.resize(static_cast<std::size_t>(n_train_));
      std::iota(perm_.begin(), perm_.end(), 0);
      // Fisher-Yates with our own stream for cross-platform determinism.
      for (int k = n_train_ - 1; k > 0; --k)
        std::swap(perm_[static_cast<std::size_t>(k)],
                  perm_[static_cast<std::size_t>(stream_.uniform_int(k + 1))]);
      cursor_ = 0;
    }
    i = perm_[cursor_++];
  }
  return out;
}

std::vector<int> all_train_indices(const Optimizee& o) {
  std::vector<int> idx(static_cast<std::size_t>(o.n_train));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

namespace {

NodeRef mean_of(Graph& g, std::span<const NodeRef> per_sample) {
  const NodeRef total = g.sum(per_sample);
  return g.mul(total, g.constant(1.0 / static_cast<double>(per_sample.size())));
}

// Stable softplus(u) = max(u,0) + log(exp(u - m) + exp(-m)).
NodeRef softplus(Graph& g, NodeRef u) {
  const NodeRef m = g.max(u, g.constant(0.0));
  const NodeRef a = g.exp(g.add(u, g.neg(m)));
  const NodeRef b = g.exp(g.neg(m));
  return g.add(m, g.log(g.add(a, b)));
}

NodeRef activation_node(Graph& g, Activation act, NodeRef x) {
  return act == Activation::Sigmoid ? g.sigmoid(x) : g.relu(x);
}

}  // namespace

Optimizee make_quadratic_family(int p, std::pair<double, double> eig_range,
                                std::uint64_t seed, int n_train) {
  const auto [lo, hi] = eig_range;
  if (lo <= 0.0 || lo > hi) throw InvalidSpectrum("eigenvalue range must satisfy 0 < lo <= hi");
  if (p < 1 || n_train < 1) throw ConfigError("quadratic family needs p >= 1, n_train >= 1");

  auto mats = std::make_shared<std::vector<Eigen::MatrixXd>>();
  mats->reserve(static_cast<std::size_t>(n_train));
  rng::Stream stream(rng::derive(seed, {0x9ad7}));
  for (int s = 0; s < n_train; ++s) {
    Eigen::VectorXd eigs(p);
    for (int i = 0; i < p; ++i) eigs[i] = stream.uniform(lo, hi);
    Eigen::MatrixXd gauss(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) gauss(i, j) = stream.normal();
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    Eigen::MatrixXd q = qr.householderQ();
    mats->push_back(q * eigs.asDiagonal() * q.transpose());
  }

  Optimizee o;
  o.kind = OptimizeeKind::QuadraticFamily;
  o.param_dim = p;
  o.n_train = n_train;
  o.loss_builder = [mats, p](Graph& g, std::span<const NodeRef> theta,
                             std::span<const int> batch) -> NodeRef {
    if (theta.size() != static_cast<std::size_t>(p)) throw DimMismatch(p, theta.size());
    const NodeRef half = g.constant(0.5);
    std::vector<NodeRef> per_sample;
    per_sample.reserve(batch.size());
    std::vector<NodeRef> a_nodes;
    for (const int s : batch) {
      const Eigen::MatrixXd& a = (*mats)[static_cast<std::size_t>(s)];
      a_nodes.clear();
      a_nodes.reserve(static_cast<std::size_t>(p) * p);
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) a_nodes.push_back(g.constant(a(i, j)));
      const std::vector<NodeRef> av = g.matvec(a_nodes, p, p, theta);
      per_sample.push_back(g.mul(half, g.dot(theta, av)));
    }
    return mean_of(g, per_sample);
  };
  o.init_sampler = [p](rng::Stream& s) {
    Eigen::VectorXd t(p);
    for (int i = 0; i < p; ++i) t[i] = s.normal();
    return t;
  };
  return o;
}

Optimizee make_fixed_quadratic(Eigen::MatrixXd a) {
  if (a.rows() != a.cols() || a.rows() < 1) throw ConfigError("fixed quadratic needs a square matrix");
  const int p = static_cast<int>(a.rows());
  auto mat = std::make_shared<Eigen::MatrixXd>(std::move(a));

  Optimizee o;
  o.kind = OptimizeeKind::QuadraticFamily;
  o.param_dim = p;
  o.n_train = 1;
  o.loss_builder = [mat, p](Graph& g, std::span<const NodeRef> theta,
                            std::span<const int>) -> NodeRef {
    if (theta.size() != static_cast<std::size_t>(p)) throw DimMismatch(p, theta.size());
    std::vector<NodeRef> a_nodes;
    a_nodes.reserve(static_cast<std::size_t>(p) * p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) a_nodes.push_back(g.constant((*mat)(i, j)));
    const std::vector<NodeRef> av = g.matvec(a_nodes, p, p, theta);
    return g.mul(g.constant(0.5), g.dot(theta, av));
  };
  o.init_sampler = [p](rng::Stream& s) {
    Eigen::VectorXd t(p);
    for (int i = 0; i < p; ++i) t[i] = s.normal();
    return t;
  };
  return o;
}

Optimizee make_rosenbrock() {
  Optimizee o;
  o.kind = OptimizeeKind::Rosenbrock;
  o.param_dim = 2;
  o.n_train = 1;
  o.loss_builder = [](Graph& g, std::span<const NodeRef> theta,
                      std::span<const int>) -> NodeRef {
    if (theta.size() != 2) throw DimMismatch(2, theta.size());
    const NodeRef x = theta[0], y = theta[1];
    const NodeRef one = g.constant(1.0);
    const NodeRef t1 = g.square(g.add(one, g.neg(x)));
    const NodeRef t2 = g.square(g.add(y, g.neg(g.square(x))));
    return g.add(t1, g.mul(g.constant(100.0), t2));
  };
  o.init_sampler = [](rng::Stream& s) {
    Eigen::VectorXd t(2);
    t[0] = s.uniform(-2.0, 2.0);
    t[1] = s.uniform(-1.0, 3.0);
    return t;
  };
  return o;
}

Optimizee make_logistic_regression(std::shared_ptr<const Dataset> data) {
  if (!data || data->n_train() < 1) throw ConfigError("logistic regression needs a non-empty train set");
  const int d = data->feature_dim();

  Optimizee o;
  o.kind = OptimizeeKind::LogisticRegression;
  o.param_dim = d;
  o.n_train = data->n_train();
  o.data = data;
  o.loss_builder = [data, d](Graph& g, std::span<const NodeRef> theta,
                             std::span<const int> batch) -> NodeRef {
    if (theta.size() != static_cast<std::size_t>(d)) throw DimMismatch(d, theta.size());
    std::vector<NodeRef> per_sample;
    per_sample.reserve(batch.size());
    std::vector<NodeRef> x_nodes(static_cast<std::size_t>(d));
    for (const int s : batch) {
      for (int j = 0; j < d; ++j) x_nodes[static_cast<std::size_t>(j)] = g.constant(data->train_x(s, j));
      const double y = data->train_y[s] > 0 ? 1.0 : -1.0;
      const NodeRef margin = g.mul(g.constant(-y), g.dot(theta, x_nodes));
      per_sample.push_back(softplus(g, margin));
    }
    return mean_of(g, per_sample);
  };
  o.init_sampler = [d](rng::Stream& s) {
    Eigen::VectorXd t(d);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < d; ++i) t[i] = sd * s.normal();
    return t;
  };
  o.accuracy = [data](const Eigen::VectorXd& w) {
    if (data->n_test() == 0) return -1.0;
    int hits = 0;
    for (int i = 0; i < data->n_test(); ++i) {
      const double z = data->test_x.row(i).dot(w);
      const int pred = z > 0.0 ? 1 : 0;
      hits += pred == data->test_y[i];
    }
    return static_cast<double>(hits) / data->n_test();
  };
  return o;
}

int mlp_param_count(const std::vector<int>& arch) {
  int n = 0;
  for (std::size_t l = 0; l + 1 < arch.size(); ++l)
    n += arch[l + 1] * arch[l] + arch[l + 1];
  return n;
}

Eigen::VectorXd mlp_logits(const std::vector<int>& arch, Activation activation,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& x) {
  Eigen::VectorXd h = x;
  int ofs = 0;
  for (std::size_t l = 0; l + 1 < arch.size(); ++l) {
    const int in = arch[l], out = arch[l + 1];
    Eigen::VectorXd z(out);
    for (int r = 0; r < out; ++r) {
      double acc = theta[ofs + out * in + r];  // bias
      for (int c = 0; c < in; ++c) acc += theta[ofs + r * in + c] * h[c];
      z[r] = acc;
    }
    ofs += out * in + out;
    if (l + 2 < arch.size()) {
      for (int r = 0; r < out; ++r)
        z[r] = activation == Activation::Sigmoid
                   ? (z[r] >= 0.0 ? 1.0 / (1.0 + std::exp(-z[r]))
                                  : std::exp(z[r]) / (1.0 + std::exp(z[r])))
                   : std::max(z[r], 0.0);
    }
    h = std::move(z);
  }
  return h;
}

Optimizee make_tiny_mlp(std::vector<int> arch, Activation activation,
                        std::shared_ptr<const Dataset> data) {
  if (!data || data->n_train() < 1) throw ConfigError("MLP needs a non-empty train set");
  if (arch.size() < 2) throw ArchMismatch("arch needs at least input and output sizes");
  if (arch.front() != data->feature_dim())
    throw ArchMismatch("arch input " + std::to_string(arch.front()) +
                       " != feature dim " + std::to_string(data->feature_dim()));
  if (arch.back() != data->n_classes())
    throw ArchMismatch("arch output " + std::to_string(arch.back()) +
                       " != class count " + std::to_string(data->n_classes()));

  Optimizee o;
  o.kind = OptimizeeKind::TinyMlp;
  o.param_dim = mlp_param_count(arch);
  o.n_train = data->n_train();
  o.data = data;
  const int p = o.param_dim;
  o.loss_builder = [data, arch, activation, p](Graph& g, std::span<const NodeRef> theta,
                                               std::span<const int> batch) -> NodeRef {
    if (theta.size() != static_cast<std::size_t>(p)) throw DimMismatch(p, theta.size());
    std::vector<NodeRef> per_sample;
    per_sample.reserve(batch.size());
    std::vector<NodeRef> h, z;
    for (const int s : batch) {
      h.clear();
      for (int j = 0; j < data->feature_dim(); ++j)
        h.push_back(g.constant(data->train_x(s, j)));
      int ofs = 0;
      for (std::size_t l = 0; l + 1 < arch.size(); ++l) {
        const int in = arch[l], out = arch[l + 1];
        z = g.matvec(theta.subspan(static_cast<std::size_t>(ofs),
                                   static_cast<std::size_t>(out) * in),
                     out, in, h);
        for (int r = 0; r < out; ++r) {
          z[static_cast<std::size_t>(r)] =
              g.add(z[static_cast<std::size_t>(r)],
                    theta[static_cast<std::size_t>(ofs + out * in + r)]);
          if (l + 2 < arch.size())
            z[static_cast<std::size_t>(r)] =
                activation_node(g, activation, z[static_cast<std::size_t>(r)]);
        }
        ofs += out * in + out;
        h = z;
      }
      // Cross-entropy via a stabilized log-sum-exp over the logits.
      NodeRef m = h[0];
      for (std::size_t r = 1; r < h.size(); ++r) m = g.max(m, h[r]);
      std::vector<NodeRef> shifted;
      shifted.reserve(h.size());
      for (const NodeRef logit : h) shifted.push_back(g.exp(g.add(logit, g.neg(m))));
      const NodeRef lse = g.add(m, g.log(g.sum(shifted)));
      per_sample.push_back(g.add(lse, g.neg(h[static_cast<std::size_t>(data->train_y[s])])));
    }
    return mean_of(g, per_sample);
  };
  o.init_sampler = [arch](rng::Stream& s) {
    Eigen::VectorXd t(mlp_param_count(arch));
    int ofs = 0;
    for (std::size_t l = 0; l + 1 < arch.size(); ++l) {
      const int in = arch[l], out = arch[l + 1];
      const double sd = 1.0 / std::sqrt(static_cast<double>(in));
      for (int i = 0; i < out * in; ++i) t[ofs + i] = sd * s.normal();
      for (int i = 0; i < out; ++i) t[ofs + out * in + i] = 0.0;
      ofs += out * in + out;
    }
    return t;
  };
  o.accuracy = [data, arch, activation](const Eigen::VectorXd& theta) {
    if (data->n_test() == 0) return -1.0;
    int hits = 0;
    for (int i = 0; i < data->n_test(); ++i) {
      const Eigen::VectorXd logits = mlp_logits(arch, activation, theta, data->test_x.row(i));
      Eigen::Index best;
      logits.maxCoeff(&best);
      hits += static_cast<int>(best) == data->test_y[i];
    }
    return static_cast<double>(hits) / data->n_test();
  };
  return o;
}

Dataset make_blobs(int n_train, int n_test, double separation, double noise_sd,
                   std::uint64_t seed) {
  if (n_train < 2) throw ConfigError("make_blobs needs n_train >= 2");
  if (noise_sd <= 0.0) throw ConfigError("make_blobs needs noise_sd > 0");
  Dataset d;
  d.label_kind = LabelKind::Class;
  rng::Stream stream(rng::derive(seed, {0xb10b5}));
  const auto fill = [&](Eigen::MatrixXd& x, Eigen::VectorXi& y, int n) {
    x.resize(n, 2);
    y.resize(n);
    for (int i = 0; i < n; ++i) {
      const int cls = i % 2;
      const double cx = (cls == 0 ? -0.5 : 0.5) * separation;
      x(i, 0) = cx + noise_sd * stream.normal();
      x(i, 1) = noise_sd * stream.normal();
      y[i] = cls;
    }
  };
  fill(d.train_x, d.train_y, n_train);
  fill(d.test_x, d.test_y, n_test);
  return d;
}

}  // namespace flatl2o
