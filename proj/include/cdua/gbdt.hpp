#pragma once

// Squared-loss gradient-boosted regression trees with exact greedy splits and
// gain-based feature importance.

#include <string>
#include <vector>

#include <Eigen/Core>

namespace cdua::gbdt {

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // rows with x <= threshold go left
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output (residual mean)
  double gain = 0.0;   // SSE reduction of the split
  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  int depth = 0;

  double predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
};

struct Config {
  int rounds = 100;
  int max_depth = 3;
  double learning_rate = 0.1;
  double min_samples_leaf = 5;  // in units of row weight
};

struct Model {
  std::vector<RegressionTree> trees;
  double learning_rate = 0.1;
  double base_score = 0.0;
  int n_features = 0;
  std::vector<std::string> feature_names;
  std::vector<double> training_mse;  // after 0..rounds trees
};

/// Fits boosted trees to rows of `x` (one row per sample). `weights`, when
/// non-empty, gives per-row multiplicities. Throws ErrorKind::validation when
/// every feature is constant or there are too few rows.
Model fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Config& config = {},
          const Eigen::VectorXd& weights = {});

double predict(const Model& model, const Eigen::Ref<const Eigen::VectorXd>& features);

Eigen::VectorXd predict_rows(const Model& model, const Eigen::MatrixXd& x);

/// Sum of split gains per feature, normalized to sum to one. Throws when the
/// model holds no split.
Eigen::VectorXd gain_importance(const Model& model);

/// Best single split of a node by exhaustive scan; exposed for tests.
struct Split {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};
Split best_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& residual,
                 const Eigen::VectorXd& weights, const std::vector<int>& rows,
                 double min_samples_leaf);

std::string dump_json(const Model& model);

}  // namespace cdua::gbdt
