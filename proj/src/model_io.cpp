#include <fstream>

#include "multilid/classifiers.hpp"
#include "multilid/error.hpp"

using nlohmann::json;

namespace multilid {
namespace {

constexpr int kModelVersion = 1;

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json tree_to_json(const DecisionTree& tree) {
    std::vector<int> feature, left, right;
    std::vector<double> threshold, c0, c1;
    for (const auto& n : tree.nodes) {
        feature.push_back(n.feature);
        threshold.push_back(n.threshold);
        left.push_back(n.left);
        right.push_back(n.right);
        c0.push_back(n.count0);
        c1.push_back(n.count1);
    }
    return {{"seed", tree.seed}, {"feature", feature}, {"threshold", threshold}, {"left", left},
            {"right", right},    {"count0", c0},       {"count1", c1}};
}

DecisionTree tree_from_json(const json& j, std::size_t n_features) {
    DecisionTree tree;
    tree.seed = j.at("seed").get<std::uint64_t>();
    const auto feature = j.at("feature").get<std::vector<int>>();
    const auto threshold = j.at("threshold").get<std::vector<double>>();
    const auto left = j.at("left").get<std::vector<int>>();
    const auto right = j.at("right").get<std::vector<int>>();
    const auto c0 = j.at("count0").get<std::vector<double>>();
    const auto c1 = j.at("count1").get<std::vector<double>>();
    const std::size_t n = feature.size();
    if (n == 0 || threshold.size() != n || left.size() != n || right.size() != n || c0.size() != n || c1.size() != n)
        throw DataError("malformed tree arrays");
    for (std::size_t i = 0; i < n; ++i) {
        TreeNode node{feature[i], threshold[i], left[i], right[i], c0[i], c1[i]};
        if (node.is_leaf()) {
            if (!(node.count0 + node.count1 > 0.0)) throw DataError("tree leaf with zero count");
        } else {
            const auto in_range = [&](int child) { return child > static_cast<int>(i) && child < static_cast<int>(n); };
            if (static_cast<std::size_t>(node.feature) >= n_features || !in_range(node.left) || !in_range(node.right))
                throw DataError("malformed tree node " + std::to_string(i));
        }
        tree.nodes.push_back(node);
    }
    return tree;
}

}  // namespace

std::string to_string(ClassifierKind kind) { return kind == ClassifierKind::logreg ? "lr" : "rf"; }

ClassifierKind classifier_from_string(const std::string& text) {
    if (text == "lr" || text == "logreg" || text == "LR") return ClassifierKind::logreg;
    if (text == "rf" || text == "forest" || text == "RF") return ClassifierKind::forest;
    throw ConfigError("unknown classifier '" + text + "' (expected lr or rf)");
}

Eigen::VectorXd predict(const DetectorModel& model, const RowMatrixXd& X) {
    return std::visit(
        [&](const auto& m) -> Eigen::VectorXd {
            if constexpr (std::is_same_v<std::decay_t<decltype(m)>, LogRegModel>)
                return lr_predict(m, X);
            else
                return rf_predict(m, X);
        },
        model);
}

json model_to_json(const DetectorModel& model) {
    if (const auto* lr = std::get_if<LogRegModel>(&model)) {
        return {{"version", kModelVersion},
                {"kind", "logreg"},
                {"weights", to_vec(lr->weights)},
                {"bias", lr->bias},
                {"feature_means", to_vec(lr->feature_means)},
                {"feature_stds", to_vec(lr->feature_stds)},
                {"config", {{"lambda", lr->config.lambda}, {"max_iter", lr->config.max_iter}, {"tol", lr->config.tol}}},
                {"iterations", lr->iterations},
                {"gradient_norm", lr->gradient_norm}};
    }
    const auto& rf = std::get<ForestModel>(model);
    json trees = json::array();
    for (const auto& t : rf.trees) trees.push_back(tree_to_json(t));
    return {{"version", kModelVersion},
            {"kind", "forest"},
            {"n_features", rf.n_features},
            {"n_train", rf.n_train},
            {"config",
             {{"n_trees", rf.config.n_trees},
              {"max_features", rf.config.max_features},
              {"min_leaf", rf.config.min_leaf},
              {"bootstrap", rf.config.bootstrap},
              {"seed", rf.config.seed}}},
            {"importances", to_vec(rf.importances)},
            {"trees", trees}};
}

DetectorModel model_from_json(const json& j) {
    try {
        if (j.at("version").get<int>() != kModelVersion) throw DataError("unsupported model version");
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "logreg") {
            LogRegModel lr;
            lr.weights = from_vec(j.at("weights").get<std::vector<double>>());
            lr.bias = j.at("bias").get<double>();
            lr.feature_means = from_vec(j.at("feature_means").get<std::vector<double>>());
            lr.feature_stds = from_vec(j.at("feature_stds").get<std::vector<double>>());
            const auto& c = j.at("config");
            lr.config = {c.at("lambda").get<double>(), c.at("max_iter").get<int>(), c.at("tol").get<double>()};
            lr.iterations = j.value("iterations", 0);
            lr.gradient_norm = j.value("gradient_norm", 0.0);
            if (lr.feature_means.size() != lr.weights.size() || lr.feature_stds.size() != lr.weights.size())
                throw DataError("logistic regression vectors have inconsistent lengths");
            return lr;
        }
        if (kind == "forest") {
            ForestModel rf;
            rf.n_features = j.at("n_features").get<std::size_t>();
            rf.n_train = j.value("n_train", std::size_t{0});
            const auto& c = j.at("config");
            rf.config.n_trees = c.at("n_trees").get<int>();
            rf.config.max_features = c.at("max_features").get<int>();
            rf.config.min_leaf = c.at("min_leaf").get<int>();
            rf.config.bootstrap = c.at("bootstrap").get<bool>();
            rf.config.seed = c.at("seed").get<std::uint64_t>();
            rf.importances = from_vec(j.at("importances").get<std::vector<double>>());
            for (const auto& t : j.at("trees")) rf.trees.push_back(tree_from_json(t, rf.n_features));
            if (rf.trees.empty() || static_cast<std::size_t>(rf.importances.size()) != rf.n_features)
                throw DataError("forest model is inconsistent");
            return rf;
        }
        throw DataError("unknown model kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw DataError(std::string("invalid model JSON: ") + e.what());
    }
}

void save_model(const DetectorModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << model_to_json(model).dump() << '\n';
    if (!out) throw DataError("write failed: " + path.string());
}

DetectorModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return model_from_json(j);
}

}  // namespace multilid
