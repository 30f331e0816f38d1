// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/learned_optimizer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "flatl2o/errors.hpp"

namespace flatl2o {

namespace {

constexpr int kH = L2oShape::hidden;

struct Layout {
  int w_ofs[L2oShape::layers];
  int b_ofs[L2oShape::layers];
  int in_dim[L2oShape::layers];
  int head_w;
  int head_b;
  int scale;
  int total;
};

Layout layout() {
  Layout l{};
  int ofs = 0;
  for (int layer = 0; layer < L2oShape::layers; ++layer) {
    l.in_dim[layer] = layer == 0 ? L2oShape::input : kH;
    l.w_ofs[layer] = ofs;
    ofs += 4 * kH * (l.in_dim[layer] + kH);
    l.b_ofs[layer] = ofs;
    ofs += 4 * kH;
  }
  l.head_w = ofs;
  ofs += kH;
  l.head_b = ofs++;
  l.scale = ofs++;
  l.total = ofs;
  return l;
}

const Layout kLayout = layout();

double sigmoid_value(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

int l2o_param_count() { return kLayout.total; }

OptimizerParams OptimizerParams::init(std::uint64_t seed, double output_scale) {
  OptimizerParams p;
  p.flat = Eigen::VectorXd::Zero(kLayout.total);
  rng::Stream stream(rng::derive(seed, {0x4c32af}));
  for (int layer = 0; layer < L2oShape::layers; ++layer) {
    const int fan_in = kLayout.in_dim[layer] + kH;
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const int rows = 4 * kH;
    for (int i = 0; i < rows * fan_in; ++i)
      p.flat[kLayout.w_ofs[layer] + i] = sd * stream.normal();
    // Forget-gate biases start at one.
    for (int u = 0; u < kH; ++u) p.flat[kLayout.b_ofs[layer] + kH + u] = 1.0;
  }
  p.flat[kLayout.scale] = output_scale;
  return p;
}

RnnState RnnState::zero(int p) {
  RnnState s;
  for (int layer = 0; layer < L2oShape::layers; ++layer) {
    s.h[layer] = Eigen::MatrixXd::Zero(p, kH);
    s.c[layer] = Eigen::MatrixXd::Zero(p, kH);
  }
  return s;
}

PhiLeaves bind_phi(Graph& g, const OptimizerParams& params) {
  PhiLeaves out;
  out.refs = make_leaves(g, params.flat);
  return out;
}

TapeRnnState TapeRnnState::from_values(Graph& g, const RnnState& s) {
  TapeRnnState t;
  t.p = s.coords();
  for (int layer = 0; layer < L2oShape::layers; ++layer) {
    t.h[layer].reserve(static_cast<std::size_t>(t.p) * kH);
    t.c[layer].reserve(static_cast<std::size_t>(t.p) * kH);
    for (int i = 0; i < t.p; ++i)
      for (int u = 0; u < kH; ++u) {
        t.h[layer].push_back(g.constant(s.h[layer](i, u)));
        t.c[layer].push_back(g.constant(s.c[layer](i, u)));
      }
  }
  return t;
}

RnnState TapeRnnState::values(const Graph& g) const {
  RnnState s = RnnState::zero(p);
  for (int layer = 0; layer < L2oShape::layers; ++layer)
    for (int i = 0; i < p; ++i)
      for (int u = 0; u < kH; ++u) {
        s.h[layer](i, u) = g.value(h[layer][static_cast<std::size_t>(i) * kH + u]);
        s.c[layer](i, u) = g.value(c[layer][static_cast<std::size_t>(i) * kH + u]);
      }
  return s;
}

std::pair<double, double> preprocess(double g, double p_tilde) {
  const double cutoff = std::exp(-p_tilde);
  if (std::abs(g) >= cutoff)
    return {std::log(std::abs(g)) / p_tilde, g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0)};
  return {-1.0, std::exp(p_tilde) * g};
}

std::pair<NodeRef, NodeRef> preprocess(Graph& g, NodeRef grad_component,
                                       double p_tilde) {
  const double gv = g.value(grad_component);
  if (std::abs(gv) >= std::exp(-p_tilde)) {
    const NodeRef mag = g.max(grad_component, g.neg(grad_component));
    const NodeRef f1 = g.mul(g.log(mag), g.constant(1.0 / p_tilde));
    const NodeRef zero = g.constant(0.0);
    const NodeRef f2 = g.add(g.cmp_gt(grad_component, zero),
                             g.neg(g.cmp_gt(zero, grad_component)));
    return {f1, f2};
  }
  return {g.constant(-1.0), g.mul(g.constant(std::exp(p_tilde)), grad_component)};
}

std::vector<NodeRef> l2o_step(Graph& g, const PhiLeaves& phi, TapeRnnState& state,
                              std::span<const NodeRef> grads, double p_tilde) {
  const int p = static_cast<int>(grads.size());
  if (state.p != p) throw DimMismatch(static_cast<std::size_t>(state.p), grads.size());

  const std::span<const NodeRef> flat(phi.refs);
  const NodeRef s_node = flat[static_cast<std::size_t>(kLayout.scale)];
  const std::span<const NodeRef> head_w = flat.subspan(static_cast<std::size_t>(kLayout.head_w), kH);
  const NodeRef head_b = flat[static_cast<std::size_t>(kLayout.head_b)];

  std::vector<NodeRef> delta(static_cast<std::size_t>(p), NodeRef{0});
  std::vector<NodeRef> xh;
  std::vector<NodeRef> x;
  TapeRnnState next = state;

  for (int i = 0; i < p; ++i) {
    const auto [f1, f2] = preprocess(g, grads[static_cast<std::size_t>(i)], p_tilde);
    x.assign({f1, f2});
    for (int layer = 0; layer < L2oShape::layers; ++layer) {
      const int in = kLayout.in_dim[layer];
      const int row_len = in + kH;
      const std::size_t state_ofs = static_cast<std::size_t>(i) * kH;
      xh.assign(x.begin(), x.end());
      xh.insert(xh.end(), state.h[layer].begin() + static_cast<std::ptrdiff_t>(state_ofs),
                state.h[layer].begin() + static_cast<std::ptrdiff_t>(state_ofs + kH));

      std::vector<NodeRef> h_out(kH, NodeRef{0});
      for (int u = 0; u < kH; ++u) {
        const auto gate_pre = [&](int gate) {
          const int row = gate * kH + u;
          const NodeRef z = g.dot(
              flat.subspan(static_cast<std::size_t>(kLayout.w_ofs[layer] + row * row_len),
                           static_cast<std::size_t>(row_len)),
              xh);
          return g.add(z, flat[static_cast<std::size_t>(kLayout.b_ofs[layer] + row)]);
        };
        const NodeRef gi = g.sigmoid(gate_pre(0));
        const NodeRef gf = g.sigmoid(gate_pre(1));
        const NodeRef gg = g.tanh(gate_pre(2));
        const NodeRef go = g.sigmoid(gate_pre(3));
        const NodeRef c_prev = state.c[layer][state_ofs + static_cast<std::size_t>(u)];
        const NodeRef c_new = g.add(g.mul(gf, c_prev), g.mul(gi, gg));
        const NodeRef h_new = g.mul(go, g.tanh(c_new));
        next.c[layer][state_ofs + static_cast<std::size_t>(u)] = c_new;
        next.h[layer][state_ofs + static_cast<std::size_t>(u)] = h_new;
        h_out[static_cast<std::size_t>(u)] = h_new;
      }
      x = h_out;
    }
    delta[static_cast<std::size_t>(i)] =
        g.mul(s_node, g.add(g.dot(head_w, x), head_b));
  }
  state = std::move(next);
  return delta;
}

Eigen::VectorXd l2o_step(const OptimizerParams& params, RnnState& state,
                         const Eigen::VectorXd& grads, double p_tilde) {
  const int p = static_cast<int>(grads.size());
  if (state.coords() != p) throw DimMismatch(static_cast<std::size_t>(state.coords()),
                                             static_cast<std::size_t>(p));
  const Eigen::VectorXd& flat = params.flat;
  Eigen::VectorXd delta(p);
  Eigen::VectorXd xh;
  Eigen::VectorXd x(L2oShape::input);

  for (int i = 0; i < p; ++i) {
    const auto [f1, f2] = preprocess(grads[i], p_tilde);
    x.resize(L2oShape::input);
    x << f1, f2;
    for (int layer = 0; layer < L2oShape::layers; ++layer) {
      const int in = kLayout.in_dim[layer];
      const int row_len = in + kH;
      xh.resize(row_len);
      xh.head(in) = x;
      xh.tail(kH) = state.h[layer].row(i);

      Eigen::VectorXd h_out(kH);
      for (int u = 0; u < kH; ++u) {
        // Same accumulation order as the tape's dot-then-bias nodes.
        const auto gate_pre = [&](int gate) {
          const int row = gate * kH + u;
          double acc = 0.0;
          const int base = kLayout.w_ofs[layer] + row * row_len;
          for (int k = 0; k < row_len; ++k) acc += flat[base + k] * xh[k];
          return acc + flat[kLayout.b_ofs[layer] + row];
        };
        const double gi = sigmoid_value(gate_pre(0));
        const double gf = sigmoid_value(gate_pre(1));
        const double gg = std::tanh(gate_pre(2));
        const double go = sigmoid_value(gate_pre(3));
        const double c_new = gf * state.c[layer](i, u) + gi * gg;
        state.c[layer](i, u) = c_new;
        h_out[u] = go * std::tanh(c_new);
      }
      state.h[layer].row(i) = h_out;
      x = h_out;
    }
    double head = 0.0;
    for (int u = 0; u < kH; ++u) head += flat[kLayout.head_w + u] * x[u];
    head += flat[kLayout.head_b];
    delta[i] = params.output_scale() * head;
  }
  return delta;
}

static_assert(std::endian::native == std::endian::little,
              "FL2O checkpoints are little-endian");

void save_params(const OptimizerParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open checkpoint for writing: " + path);
  const char magic[4] = {'F', 'L', '2', 'O'};
  const std::uint32_t version = 1;
  const std::uint64_t count = static_cast<std::uint64_t>(params.flat.size());
  out.write(magic, 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&count), 8);
  out.write(reinterpret_cast<const char*>(params.flat.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  if (!out) throw ConfigError("failed writing checkpoint: " + path);
}

OptimizerParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  if (!in.read(magic, 4) || std::memcmp(magic, "FL2O", 4) != 0)
    throw ConfigError("bad checkpoint magic in " + path);
  if (!in.read(reinterpret_cast<char*>(&version), 4) || version != 1)
    throw ConfigError("unsupported checkpoint version in " + path);
  if (!in.read(reinterpret_cast<char*>(&count), 8))
    throw ConfigError("truncated checkpoint header in " + path);
  OptimizerParams p;
  p.flat.resize(static_cast<Eigen::Index>(count));
  if (!in.read(reinterpret_cast<char*>(p.flat.data()),
               static_cast<std::streamsize>(count * sizeof(double))))
    throw ConfigError("truncated checkpoint payload in " + path);
  return p;
}

}  // namespace flatl2o
