#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "multilid/lid_features.hpp"

namespace multilid {

// ---------------------------------------------------------------------------
// Logistic regression

struct LogRegConfig {
    double lambda = 1.0;  // L2 strength on the standardized weights; bias is not penalized
    int max_iter = 1000;
    double tol = 1e-6;    // stop once ||gradient||_2 <= tol
};

struct LogRegModel {
    Eigen::VectorXd weights;
    double bias = 0.0;
    Eigen::VectorXd feature_means;
    Eigen::VectorXd feature_stds;  // zero-variance columns stored as 1
    LogRegConfig config;
    int iterations = 0;
    double gradient_norm = 0.0;

    std::size_t n_features() const { return static_cast<std::size_t>(weights.size()); }
};

/// Minimizes  sum_i logloss(y_i, w.z_i + b) + lambda/2 ||w||^2  over z-scored
/// features with damped Newton steps. Deterministic.
LogRegModel lr_train(const RowMatrixXd& X, std::span<const int> y, const LogRegConfig& cfg = {});

/// Standardized affine score w.z + b.
Eigen::VectorXd lr_decision(const LogRegModel& model, const RowMatrixXd& X);
Eigen::VectorXd lr_predict(const LogRegModel& model, const RowMatrixXd& X);

// ---------------------------------------------------------------------------
// Random forest

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;  // x[feature] <= threshold goes left
    int left = -1;
    int right = -1;
    double count0 = 0.0;  // class counts of the bootstrap samples reaching the node
    double count1 = 0.0;

    bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    std::uint64_t seed = 0;       // drives the bootstrap and feature sampling

    /// Positive-class fraction at the leaf reached by `x`.
    double predict_row(const double* x) const;
};

struct ForestConfig {
    int n_trees = 100;
    int max_features = 0;  // 0: ceil(sqrt(n_features))
    int min_leaf = 1;
    bool bootstrap = true;
    std::uint64_t seed = 0;
    unsigned threads = 0;  // training/prediction workers; does not affect results
};

struct ForestModel {
    std::vector<DecisionTree> trees;
    ForestConfig config;
    std::size_t n_features = 0;
    std::size_t n_train = 0;
    Eigen::VectorXd importances;  // mean decrease in impurity, sums to 1
};

ForestModel rf_train(const RowMatrixXd& X, std::span<const int> y, const ForestConfig& cfg = {});
Eigen::VectorXd rf_predict(const ForestModel& model, const RowMatrixXd& X);

/// Out-of-bag scores for the training rows `X` (same order as in training).
/// Rows that were in-bag for every tree get NaN.
Eigen::VectorXd rf_oob_predict(const ForestModel& model, const RowMatrixXd& X);

struct LabeledImportance {
    FeatureColumn column;
    double importance = 0.0;
};

/// Importances joined to their (layer, neighbour) labels, in column order.
std::vector<LabeledImportance> feature_importance(const ForestModel& model,
                                                  const std::vector<FeatureColumn>& columns);

// ---------------------------------------------------------------------------
// Detector = either model; JSON (de)serialization.

using DetectorModel = std::variant<LogRegModel, ForestModel>;

enum class ClassifierKind { logreg, forest };
std::string to_string(ClassifierKind kind);
ClassifierKind classifier_from_string(const std::string& text);

Eigen::VectorXd predict(const DetectorModel& model, const RowMatrixXd& X);

nlohmann::json model_to_json(const DetectorModel& model);
DetectorModel model_from_json(const nlohmann::json& j);
void save_model(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_model(const std::filesystem::path& path);

}  // namespace multilid
