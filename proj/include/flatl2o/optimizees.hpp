// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "flatl2o/graph.hpp"
#include "flatl2o/rng.hpp"

namespace flatl2o {

enum class LabelKind { Real, Class };

/// Immutable after construction; safe to share across replicate workers.
struct Dataset {
  Eigen::MatrixXd train_x;  // N x d
  Eigen::VectorXi train_y;
  Eigen::MatrixXd test_x;  // M x d
  Eigen::VectorXi test_y;
  LabelKind label_kind = LabelKind::Class;

  int n_train() const { return static_cast<int>(train_x.rows()); }
  int n_test() const { return static_cast<int>(test_x.rows()); }
  int feature_dim() const { return static_cast<int>(train_x.cols()); }
  int n_classes() const;
};

enum class OptimizeeKind { QuadraticFamily, Rosenbrock, LogisticRegression, TinyMlp };

/// A task: a loss l(theta; xi) over train samples, an initializer for theta,
/// and (for classification tasks) test-set accuracy. The loss builder emits
/// the mean batch loss into a Graph given theta nodes and sample indices;
/// builders are pure and reusable across graphs.
struct Optimizee {
  OptimizeeKind kind = OptimizeeKind::QuadraticFamily;
  int param_dim = 0;
  int n_train = 0;
  std::function<NodeRef(Graph&, std::span<const NodeRef>, std::span<const int>)>
      loss_builder;
  std::function<Eigen::VectorXd(rng::Stream&)> init_sampler;
  std::function<double(const Eigen::VectorXd&)> accuracy;  // empty: no test set
  std::shared_ptr<const Dataset> data;

  double test_accuracy(const Eigen::VectorXd& theta) const {
    return accuracy ? accuracy(theta) : -1.0;
  }
};

enum class Sampling { WithReplacement, EpochShuffle };

struct BatchSchedule {
  int batch_size = 8;
  Sampling sampling = Sampling::WithReplacement;
  std::uint64_t seed = 0;
};

/// Deterministic batch-index generator for one run.
class BatchStream {
 public:
  BatchStream(const BatchSchedule& schedule, int n_train);
  std::vector<int> next();

 private:
  BatchSchedule schedule_;
  int n_train_;
  rng::Stream stream_;
  std::vector<int> perm_;
  std::size_t cursor_ = 0;
};

std::vector<int> all_train_indices(const Optimizee& o);

/// Empirical batch loss at a point, on a throwaway tape.
double loss_value(const Optimizee& o, const Eigen::VectorXd& theta,
                  std::span<const int> batch);

/// Gradient of the empirical batch loss at a point, on a throwaway tape.
Eigen::VectorXd loss_gradient(const Optimizee& o, const Eigen::VectorXd& theta,
                              std::span<const int> batch);

/// L(theta; A) = 1/2 theta^T A theta with A symmetric positive definite and
/// eigenvalues i.i.d. uniform in [lo, hi]; each train sample is one matrix.
Optimizee make_quadratic_family(int p, std::pair<double, double> eig_range,
                                std::uint64_t seed, int n_train = 32);

/// The classic 2-D banana valley; a single synthetic train sample.
Optimizee make_rosenbrock();

/// L(theta) = 1/2 theta^T A theta with the given (symmetric) matrix as the
/// single train sample. Handy wherever an exact spectrum is required.
Optimizee make_fixed_quadratic(Eigen::MatrixXd a);

/// Binary logistic regression (no bias term) on a two-class dataset.
Optimizee make_logistic_regression(std::shared_ptr<const Dataset> data);

enum class Activation { Sigmoid, Relu };

/// Dense MLP with softmax cross-entropy loss; theta is flattened
/// weights+biases, layer by layer (W row-major, then b).
Optimizee make_tiny_mlp(std::vector<int> arch, Activation activation,
                        std::shared_ptr<const Dataset> data);

/// Two isotropic Gaussian clusters at (+-separation/2, 0), labels by cluster,
/// balanced classes, deterministic per seed.
Dataset make_blobs(int n_train, int n_test, double separation, double noise_sd,
                   std::uint64_t seed);

/// Plain Eigen forward pass of the MLP described by `arch`; used by accuracy
/// and by anything that needs logits without a tape.
Eigen::VectorXd mlp_logits(const std::vector<int>& arch, Activation activation,
                           const Eigen::VectorXd& theta, const Eigen::VectorXd& x);

int mlp_param_count(const std::vector<int>& arch);

}  // namespace flatl2o
