#include "cdua/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "cdua/errors.hpp"

namespace cdua::gbdt {

double RegressionTree::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  int i = 0;
  while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
    const auto& n = nodes[static_cast<std::size_t>(i)];
    i = x[n.feature] <= n.threshold ? n.left : n.right;
  }
  return nodes[static_cast<std::size_t>(i)].value;
}

Split best_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& residual,
                 const Eigen::VectorXd& weights, const std::vector<int>& rows,
                 double min_samples_leaf) {
  Split best;
  double total_w = 0.0, total_s = 0.0;
  for (const int r : rows) {
    total_w += weights[r];
    total_s += weights[r] * residual[r];
  }
  if (total_w < 2.0 * min_samples_leaf) return best;
  const double parent_score = total_s * total_s / total_w;

  std::vector<int> order(rows);
  for (int f = 0; f < x.cols(); ++f) {
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return x(a, f) < x(b, f) || (x(a, f) == x(b, f) && a < b);
    });
    double left_w = 0.0, left_s = 0.0;
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
      const int r = order[k];
      left_w += weights[r];
      left_s += weights[r] * residual[r];
      const double here = x(r, f);
      const double next = x(order[k + 1], f);
      if (here == next) continue;
      const double right_w = total_w - left_w;
      if (left_w < min_samples_leaf || right_w < min_samples_leaf) continue;
      const double right_s = total_s - left_s;
      const double gain = left_s * left_s / left_w + right_s * right_s / right_w - parent_score;
      // Strict improvement keeps the lowest feature, then lowest threshold, on ties.
      if (gain > best.gain) {
        best.feature = f;
        best.threshold = 0.5 * (here + next);
        best.gain = gain;
      }
    }
  }
  return best;
}

namespace {

struct TreeBuilder {
  const Eigen::MatrixXd& x;
  const Eigen::VectorXd& residual;
  const Eigen::VectorXd& weights;
  const Config& config;
  RegressionTree tree;

  int grow(const std::vector<int>& rows, int depth) {
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.depth = std::max(tree.depth, depth);
    double w = 0.0, s = 0.0;
    for (const int r : rows) {
      w += weights[r];
      s += weights[r] * residual[r];
    }
    const double leaf_value = w > 0.0 ? s / w : 0.0;
    Split split;
    if (depth < config.max_depth) {
      split = best_split(x, residual, weights, rows, config.min_samples_leaf);
    }
    if (split.feature < 0 || !(split.gain > 0.0)) {
      tree.nodes[static_cast<std::size_t>(id)].value = leaf_value;
      return id;
    }
    std::vector<int> left, right;
    for (const int r : rows) (x(r, split.feature) <= split.threshold ? left : right).push_back(r);
    const int l = grow(left, depth + 1);
    const int rr = grow(right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.gain = split.gain;
    node.left = l;
    node.right = rr;
    node.value = leaf_value;
    return id;
  }
};

double weighted_mse(const Eigen::VectorXd& residual, const Eigen::VectorXd& weights) {
  return (weights.array() * residual.array().square()).sum() / weights.sum();
}

}  // namespace

Model fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Config& config,
          const Eigen::VectorXd& weights_in) {
  if (x.rows() != y.size()) fail(ErrorKind::validation, "gbdt: row count mismatch");
  if (config.rounds < 0 || config.max_depth < 1 || config.learning_rate <= 0.0 ||
      config.learning_rate > 1.0 || config.min_samples_leaf <= 0.0) {
    fail(ErrorKind::validation, "gbdt: invalid config");
  }
  const Eigen::VectorXd weights =
      weights_in.size() == 0 ? Eigen::VectorXd::Ones(x.rows()) : weights_in;
  if (weights.size() != x.rows() || (weights.array() < 0.0).any()) {
    fail(ErrorKind::validation, "gbdt: bad weights");
  }
  if (weights.sum() < 2.0 * config.min_samples_leaf) {
    fail(ErrorKind::validation, "gbdt: need at least 2*min_samples_leaf rows");
  }
  bool any_varying = false;
  for (int f = 0; f < x.cols() && !any_varying; ++f) {
    any_varying = (x.col(f).array() != x(0, f)).any();
  }
  if (!any_varying) fail(ErrorKind::validation, "gbdt: all features are constant, no split possible");

  Model model;
  model.learning_rate = config.learning_rate;
  model.n_features = static_cast<int>(x.cols());
  model.base_score = (weights.array() * y.array()).sum() / weights.sum();

  Eigen::VectorXd prediction = Eigen::VectorXd::Constant(y.size(), model.base_score);
  Eigen::VectorXd residual = y - prediction;
  model.training_mse.push_back(weighted_mse(residual, weights));

  std::vector<int> all_rows(static_cast<std::size_t>(x.rows()));
  std::iota(all_rows.begin(), all_rows.end(), 0);
  for (int round = 0; round < config.rounds; ++round) {
    TreeBuilder builder{x, residual, weights, config, {}};
    builder.grow(all_rows, 0);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      prediction[r] += config.learning_rate * builder.tree.predict(x.row(r).transpose());
    }
    residual = y - prediction;
    model.training_mse.push_back(weighted_mse(residual, weights));
    model.trees.push_back(std::move(builder.tree));
  }
  return model;
}

double predict(const Model& model, const Eigen::Ref<const Eigen::VectorXd>& features) {
  if (features.size() != model.n_features) {
    fail(ErrorKind::validation, "gbdt: expected " + std::to_string(model.n_features) +
                                    " features, got " + std::to_string(features.size()));
  }
  double sum = 0.0;
  for (const auto& tree : model.trees) sum += tree.predict(features);
  return model.base_score + model.learning_rate * sum;
}

Eigen::VectorXd predict_rows(const Model& model, const Eigen::MatrixXd& x) {
  Eigen::VectorXd out(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[r] = predict(model, x.row(r).transpose());
  return out;
}

Eigen::VectorXd gain_importance(const Model& model) {
  Eigen::VectorXd imp = Eigen::VectorXd::Zero(model.n_features);
  for (const auto& tree : model.trees) {
    for (const auto& node : tree.nodes) {
      if (!node.is_leaf()) imp[node.feature] += node.gain;
    }
  }
  const double total = imp.sum();
  if (!(total > 0.0)) fail(ErrorKind::numeric, "gbdt: zero total gain, no importance defined");
  return imp / total;
}

std::string dump_json(const Model& model) {
  nlohmann::json j;
  j["base_score"] = model.base_score;
  j["learning_rate"] = model.learning_rate;
  j["n_features"] = model.n_features;
  j["feature_names"] = model.feature_names;
  auto& trees = j["trees"] = nlohmann::json::array();
  for (const auto& tree : model.trees) {
    auto nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes) {
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"value", n.value},
                       {"gain", n.gain}});
    }
    trees.push_back(nodes);
  }
  return j.dump(2);
}

}  // namespace cdua::gbdt
