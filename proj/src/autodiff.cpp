// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/autodiff.hpp"

#include <cstdint>
#include <utility>

namespace flatl2o {

namespace {

constexpr std::int64_t kNone = -1;
constexpr std::int64_t kUnit = -2;  // adjoint identically 1 (the root)

// Recompute up to the highest-indexed node in `refs`, then gather values.
// Gradient nodes are not index-sorted, so eval must cover the maximum.
Eigen::VectorXd eval_refs(Graph& g, std::span<const NodeRef> refs) {
  NodeRef top = refs[0];
  for (const NodeRef r : refs)
    if (r.index > top.index) top = r;
  g.eval(top);
  return g.values(refs);
}

struct ReversePass {
  Graph& g;
  std::uint32_t lo;  // nothing below min(wrt) can depend on the wrt set
  std::uint32_t n;   // nodes [lo, n) participate
  // Forward dependence on the wrt set and backward cone of the root,
  // both stored relative to `lo` to keep the workspace proportional to the
  // window actually being differentiated.
  std::vector<std::uint8_t> dep;
  std::vector<std::uint8_t> cone;
  // Pending adjoint contributions per node: singly linked lists into a pool.
  std::vector<std::int64_t> head;
  std::vector<std::pair<std::uint32_t, std::int64_t>> pool;
  NodeRef one{0}, zero{0};
  bool have_one = false, have_zero = false;

  bool is_dep(std::uint32_t i) const { return i >= lo && dep[i - lo]; }

  ReversePass(Graph& graph, NodeRef root, std::span<const NodeRef> wrt)
      : g(graph), lo(root.index), n(root.index + 1) {
    for (const NodeRef w : wrt) lo = std::min(lo, w.index);
    const std::uint32_t len = n - lo;
    dep.assign(len, 0);
    cone.assign(len, 0);
    head.assign(len, kNone);
    for (const NodeRef w : wrt)
      if (w.index < n) dep[w.index - lo] = 1;
    for (std::uint32_t i = lo; i < n; ++i) {
      if (dep[i - lo]) continue;
      const Graph::Node& nd = g.node(NodeRef{i});
      switch (nd.op) {
        case Op::Leaf:
        case Op::Const:
        case Op::CmpGt:  // zero derivative: a constant for gradient purposes
        case Op::CmpGe:
          break;
        case Op::Dot:
        case Op::Sum: {
          for (const std::uint32_t a : g.node_args(nd))
            if (is_dep(a)) {
              dep[i - lo] = 1;
              break;
            }
          break;
        }
        case Op::Neg:
        case Op::Exp:
        case Op::Log:
        case Op::Tanh:
        case Op::Sigmoid:
        case Op::Relu:
        case Op::Square:
          dep[i - lo] = is_dep(nd.a);
          break;
        default:
          dep[i - lo] = is_dep(nd.a) || is_dep(nd.b);
      }
    }
    cone[root.index - lo] = 1;
    for (std::uint32_t i = n; i-- > lo;) {
      if (!cone[i - lo]) continue;
      const Graph::Node& nd = g.node(NodeRef{i});
      const auto mark = [&](std::uint32_t a) {
        if (a >= lo) cone[a - lo] = 1;
      };
      switch (nd.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::Dot:
        case Op::Sum:
          for (const std::uint32_t a : g.node_args(nd)) mark(a);
          break;
        case Op::Neg:
        case Op::Exp:
        case Op::Log:
        case Op::Tanh:
        case Op::Sigmoid:
        case Op::Relu:
        case Op::Square:
          mark(nd.a);
          break;
        default:
          mark(nd.a);
          mark(nd.b);
      }
    }
  }

  NodeRef const_one() {
    if (!have_one) {
      one = g.constant(1.0);
      have_one = true;
    }
    return one;
  }
  NodeRef const_zero() {
    if (!have_zero) {
      zero = g.constant(0.0);
      have_zero = true;
    }
    return zero;
  }

  bool needed(std::uint32_t i) const { return dep[i - lo] && cone[i - lo]; }

  // Only ever called with dependent targets, which are >= lo by construction.
  void contribute(std::uint32_t target, NodeRef value) {
    pool.emplace_back(value.index, head[target - lo]);
    head[target - lo] = static_cast<std::int64_t>(pool.size() - 1);
  }

  // Adjoint times a partial-derivative node, with the unit-adjoint peephole.
  NodeRef weighted(std::int64_t adj, NodeRef partial) {
    if (adj == kUnit) return partial;
    return g.mul(NodeRef{static_cast<std::uint32_t>(adj)}, partial);
  }
  // Adjoint times a partial of exactly 1.
  NodeRef pass_through(std::int64_t adj) {
    if (adj == kUnit) return const_one();
    return NodeRef{static_cast<std::uint32_t>(adj)};
  }

  // Collect the contribution list for node i into a single adjoint node.
  std::int64_t materialize(std::uint32_t i, std::vector<NodeRef>& scratch) {
    std::int64_t h = head[i - lo];
    if (h == kNone) return kNone;
    scratch.clear();
    while (h != kNone) {
      scratch.push_back(NodeRef{pool[static_cast<std::size_t>(h)].first});
      h = pool[static_cast<std::size_t>(h)].second;
    }
    if (scratch.size() == 1) return scratch[0].index;
    return g.sum(scratch).index;
  }

  // Push adjoint contributions of node i (with materialized adjoint `adj`)
  // into its inputs. Emits the local-partial nodes on the tape so that the
  // resulting gradient nodes stay differentiable.
  void push_edges(std::uint32_t i, std::int64_t adj) {
    const NodeRef self{i};
    const Graph::Node nd = g.node(self);  // copy: emits below may reallocate
    switch (nd.op) {
      case Op::Leaf:
      case Op::Const:
      case Op::CmpGt:
      case Op::CmpGe:
        break;
      case Op::Add: {
        if (is_dep(nd.a)) contribute(nd.a, pass_through(adj));
        if (is_dep(nd.b)) contribute(nd.b, pass_through(adj));
        break;
      }
      case Op::Sum: {
        const auto args = g.node_args(nd);
        // node_args' span may dangle after emits; take a copy of the indices.
        std::vector<std::uint32_t> idx(args.begin(), args.end());
        const NodeRef through = pass_through(adj);
        for (const std::uint32_t a : idx)
          if (is_dep(a)) contribute(a, through);
        break;
      }
      case Op::Mul: {
        if (is_dep(nd.a)) contribute(nd.a, weighted(adj, NodeRef{nd.b}));
        if (is_dep(nd.b)) contribute(nd.b, weighted(adj, NodeRef{nd.a}));
        break;
      }
      case Op::Neg: {
        if (is_dep(nd.a))
          contribute(nd.a, adj == kUnit ? g.constant(-1.0)
                                        : g.neg(NodeRef{static_cast<std::uint32_t>(adj)}));
        break;
      }
      case Op::Div: {
        if (is_dep(nd.a))
          contribute(nd.a, weighted(adj, g.div(const_one(), NodeRef{nd.b})));
        if (is_dep(nd.b))
          contribute(nd.b, weighted(adj, g.neg(g.div(self, NodeRef{nd.b}))));
        break;
      }
      case Op::Exp: {
        if (is_dep(nd.a)) contribute(nd.a, weighted(adj, self));
        break;
      }
      case Op::Log: {
        if (is_dep(nd.a))
          contribute(nd.a, weighted(adj, g.div(const_one(), NodeRef{nd.a})));
        break;
      }
      case Op::Tanh: {
        if (is_dep(nd.a))
          contribute(nd.a, weighted(adj, g.add(const_one(), g.neg(g.square(self)))));
        break;
      }
      case Op::Sigmoid: {
        if (is_dep(nd.a))
          contribute(nd.a,
                     weighted(adj, g.mul(self, g.add(const_one(), g.neg(self)))));
        break;
      }
      case Op::Relu: {
        if (is_dep(nd.a))
          contribute(nd.a, weighted(adj, g.cmp_gt(NodeRef{nd.a}, const_zero())));
        break;
      }
      case Op::Max: {
        // Ties go to the first argument.
        if (is_dep(nd.a))
          contribute(nd.a, weighted(adj, g.cmp_ge(NodeRef{nd.a}, NodeRef{nd.b})));
        if (is_dep(nd.b))
          contribute(nd.b, weighted(adj, g.cmp_gt(NodeRef{nd.b}, NodeRef{nd.a})));
        break;
      }
      case Op::Square: {
        if (is_dep(nd.a)) {
          const NodeRef x{nd.a};
          contribute(nd.a, weighted(adj, g.add(x, x)));
        }
        break;
      }
      case Op::Dot: {
        const auto args = g.node_args(nd);
        std::vector<std::uint32_t> idx(args.begin(), args.end());
        const std::uint32_t len = nd.b;
        for (std::uint32_t k = 0; k < len; ++k) {
          const std::uint32_t xk = idx[k];
          const std::uint32_t yk = idx[len + k];
          if (is_dep(xk)) contribute(xk, weighted(adj, NodeRef{yk}));
          if (is_dep(yk)) contribute(yk, weighted(adj, NodeRef{xk}));
        }
        break;
      }
    }
  }
};

}  // namespace

GradResult grad(Graph& g, NodeRef root, std::span<const NodeRef> wrt) {
  ReversePass rp(g, root, wrt);
  std::vector<std::int64_t> adjoint(rp.n - rp.lo, kNone);
  std::vector<NodeRef> scratch;

  for (std::uint32_t i = rp.n; i-- > rp.lo;) {
    if (!rp.needed(i)) continue;
    std::int64_t adj;
    if (i == root.index) {
      adj = kUnit;
    } else {
      adj = rp.materialize(i, scratch);
      if (adj == kNone) continue;  // structurally zero (e.g. behind a Cmp node)
    }
    adjoint[i - rp.lo] = adj;
    rp.push_edges(i, adj);
  }

  GradResult out;
  out.wrt.assign(wrt.begin(), wrt.end());
  out.grads.reserve(wrt.size());
  for (const NodeRef w : wrt) {
    const std::int64_t adj = w.index < rp.n ? adjoint[w.index - rp.lo] : kNone;
    if (adj == kUnit)
      out.grads.push_back(rp.const_one());
    else if (adj == kNone)
      out.grads.push_back(rp.const_zero());
    else
      out.grads.push_back(NodeRef{static_cast<std::uint32_t>(adj)});
  }
  return out;
}

std::vector<NodeRef> hvp_nodes(Graph& g, NodeRef root,
                               std::span<const NodeRef> theta,
                               std::span<const NodeRef> v) {
  if (v.size() != theta.size()) throw DimMismatch(theta.size(), v.size());
  const GradResult gr = grad(g, root, theta);
  const NodeRef s = g.dot(gr.grads, v);
  return grad(g, s, theta).grads;
}

Eigen::VectorXd hvp(Graph& g, NodeRef root, std::span<const NodeRef> theta,
                    const Eigen::VectorXd& v) {
  if (static_cast<std::size_t>(v.size()) != theta.size())
    throw DimMismatch(theta.size(), static_cast<std::size_t>(v.size()));
  const std::vector<NodeRef> vc = make_consts(g, v);
  const std::vector<NodeRef> hv = hvp_nodes(g, root, theta, vc);
  return eval_refs(g, hv);
}

Eigen::MatrixXd dense_hessian(Graph& g, NodeRef root,
                              std::span<const NodeRef> theta) {
  const std::size_t p = theta.size();
  if (p > kDenseHessianMaxDim) throw TooLarge(p, kDenseHessianMaxDim);
  // One tape: v enters as rebindable leaves so the p HVPs reuse the nodes.
  std::vector<NodeRef> v;
  v.reserve(p);
  for (std::size_t i = 0; i < p; ++i) v.push_back(g.leaf(0.0));
  const std::vector<NodeRef> hv = hvp_nodes(g, root, theta, v);

  Eigen::MatrixXd h(p, p);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t i = 0; i < p; ++i) g.bind(v[i], i == j ? 1.0 : 0.0);
    h.col(static_cast<Eigen::Index>(j)) = eval_refs(g, hv);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace flatl2o
