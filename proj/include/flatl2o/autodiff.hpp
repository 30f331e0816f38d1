// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/graph.hpp"

namespace flatl2o {

/// Result of a reverse pass: one gradient node per requested node, living on
/// the same tape. Gradient nodes are themselves differentiable.
struct GradResult {
  std::vector<NodeRef> wrt;
  std::vector<NodeRef> grads;  // parallel to wrt

  NodeRef at(NodeRef w) const {
    for (std::size_t i = 0; i < wrt.size(); ++i)
      if (wrt[i] == w) return grads[i];
    throw DimMismatch(wrt.size(), 0);
  }
};

/// Reverse-mode gradient of a scalar root with respect to `wrt` (leaves or
/// interior nodes). Appends the adjoint computation to the tape; a node that
/// does not influence the root gets a constant-zero gradient node.
GradResult grad(Graph& g, NodeRef root, std::span<const NodeRef> wrt);

/// Hessian-vector product nodes: grad of <grad(root), v> with v fixed.
/// The result stays differentiable with respect to any leaf.
std::vector<NodeRef> hvp_nodes(Graph& g, NodeRef root,
                               std::span<const NodeRef> theta,
                               std::span<const NodeRef> v);

/// Numeric Hessian-vector product. Throws DimMismatch if |v| != |theta|.
Eigen::VectorXd hvp(Graph& g, NodeRef root, std::span<const NodeRef> theta,
                    const Eigen::VectorXd& v);

/// Dense p x p Hessian assembled from p basis-vector HVPs and symmetrized as
/// (H + H^T)/2. Test oracle for the estimators; limited to p <= 64.
Eigen::MatrixXd dense_hessian(Graph& g, NodeRef root,
                              std::span<const NodeRef> theta);

inline constexpr std::size_t kDenseHessianMaxDim = 64;

}  // namespace flatl2o
