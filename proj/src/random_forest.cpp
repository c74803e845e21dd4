#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "multilid/classifiers.hpp"
#include "multilid/error.hpp"
#include "multilid/parallel.hpp"
#include "multilid/random.hpp"

namespace multilid {
namespace {

double gini(double c0, double c1) {
    const double n = c0 + c1;
    if (n <= 0.0) return 0.0;
    const double p0 = c0 / n;
    const double p1 = c1 / n;
    return 1.0 - p0 * p0 - p1 * p1;
}

std::vector<std::size_t> bootstrap_sample(std::mt19937_64& rng, std::size_t n, bool bootstrap) {
    std::vector<std::size_t> idx(n);
    if (!bootstrap) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (auto& i : idx) i = pick(rng);
    return idx;
}

struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = -1.0;
};

class TreeBuilder {
public:
    TreeBuilder(const RowMatrixXd& X, std::span<const int> y, const ForestConfig& cfg, int max_features)
        : X_(X), y_(y), cfg_(cfg), max_features_(max_features), importance_(X.cols(), 0.0) {}

    DecisionTree build(std::uint64_t seed) {
        DecisionTree tree;
        tree.seed = seed;
        std::mt19937_64 rng(seed);
        idx_ = bootstrap_sample(rng, static_cast<std::size_t>(X_.rows()), cfg_.bootstrap);
        features_.resize(static_cast<std::size_t>(X_.cols()));
        std::iota(features_.begin(), features_.end(), 0);

        struct Pending {
            std::size_t begin, end;
            int node;
        };
        tree.nodes.emplace_back();
        std::vector<Pending> stack{{0, idx_.size(), 0}};
        while (!stack.empty()) {
            const Pending job = stack.back();
            stack.pop_back();
            double c0 = 0.0, c1 = 0.0;
            for (std::size_t i = job.begin; i < job.end; ++i) (y_[idx_[i]] ? c1 : c0) += 1.0;
            TreeNode& node = tree.nodes[static_cast<std::size_t>(job.node)];
            node.count0 = c0;
            node.count1 = c1;
            const std::size_t size = job.end - job.begin;
            if (c0 == 0.0 || c1 == 0.0 || size < 2 * static_cast<std::size_t>(cfg_.min_leaf)) continue;

            const Split split = best_split(job.begin, job.end, c0, c1, rng);
            if (split.feature < 0) continue;

            const auto mid = std::partition(idx_.begin() + static_cast<std::ptrdiff_t>(job.begin),
                                            idx_.begin() + static_cast<std::ptrdiff_t>(job.end), [&](std::size_t r) {
                                                return X_(static_cast<Eigen::Index>(r), split.feature) <=
                                                       split.threshold;
                                            });
            const auto mid_pos = static_cast<std::size_t>(mid - idx_.begin());
            importance_[static_cast<std::size_t>(split.feature)] += split.gain;

            const int left = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            TreeNode& parent = tree.nodes[static_cast<std::size_t>(job.node)];
            parent.feature = split.feature;
            parent.threshold = split.threshold;
            parent.left = left;
            parent.right = left + 1;
            stack.push_back({mid_pos, job.end, left + 1});
            stack.push_back({job.begin, mid_pos, left});
        }
        return tree;
    }

    const std::vector<double>& importance() const { return importance_; }

private:
    // Best Gini split over a random feature subset. Candidates are compared
    // by gain, then lowest feature index, then lowest threshold. Features
    // that are constant inside the node do not count towards max_features.
    Split best_split(std::size_t begin, std::size_t end, double c0, double c1, std::mt19937_64& rng) {
        const double n = c0 + c1;
        const double parent = n * gini(c0, c1);
        const auto d = features_.size();
        const auto min_leaf = static_cast<std::size_t>(cfg_.min_leaf);
        Split best;
        int visited = 0;
        for (std::size_t drawn = 0; drawn < d && visited < max_features_; ++drawn) {
            std::uniform_int_distribution<std::size_t> pick(drawn, d - 1);
            std::swap(features_[drawn], features_[pick(rng)]);
            const int f = features_[drawn];

            values_.clear();
            for (std::size_t i = begin; i < end; ++i)
                values_.emplace_back(X_(static_cast<Eigen::Index>(idx_[i]), f), y_[idx_[i]]);
            std::sort(values_.begin(), values_.end());
            if (values_.front().first == values_.back().first) continue;
            ++visited;

            double l0 = 0.0, l1 = 0.0;
            const std::size_t m = values_.size();
            for (std::size_t i = 0; i + 1 < m; ++i) {
                (values_[i].second ? l1 : l0) += 1.0;
                if (values_[i].first == values_[i + 1].first) continue;
                const std::size_t n_left = i + 1;
                if (n_left < min_leaf || m - n_left < min_leaf) continue;
                const double r0 = c0 - l0, r1 = c1 - l1;
                const double gain = parent - (l0 + l1) * gini(l0, l1) - (r0 + r1) * gini(r0, r1);
                double threshold = values_[i].first + (values_[i + 1].first - values_[i].first) / 2.0;
                if (!(threshold < values_[i + 1].first)) threshold = values_[i].first;
                const bool better =
                    gain > best.gain ||
                    (gain == best.gain && (f < best.feature || (f == best.feature && threshold < best.threshold)));
                if (better) best = {f, threshold, gain};
            }
        }
        if (best.gain < 0.0) best.gain = 0.0;
        return best;
    }

    const RowMatrixXd& X_;
    std::span<const int> y_;
    const ForestConfig& cfg_;
    int max_features_;
    std::vector<double> importance_;
    std::vector<std::size_t> idx_;
    std::vector<int> features_;
    std::vector<std::pair<double, int>> values_;
};

void check_training_input(const RowMatrixXd& X, std::span<const int> y) {
    if (y.size() != static_cast<std::size_t>(X.rows())) throw DataError("label count does not match row count");
    if (X.cols() == 0) throw DataError("no features");
    if (!X.allFinite()) throw DataError("feature matrix contains non-finite values");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos < 2 || y.size() - pos < 2) throw DataError("training needs at least 2 samples of each class");
}

}  // namespace

double DecisionTree::predict_row(const double* x) const {
    int at = 0;
    for (;;) {
        const TreeNode& node = nodes[static_cast<std::size_t>(at)];
        if (node.is_leaf()) return node.count1 / (node.count0 + node.count1);
        at = x[node.feature] <= node.threshold ? node.left : node.right;
    }
}

ForestModel rf_train(const RowMatrixXd& X, std::span<const int> y, const ForestConfig& cfg) {
    check_training_input(X, y);
    if (cfg.n_trees < 1) throw ConfigError("n_trees must be >= 1");
    if (cfg.min_leaf < 1) throw ConfigError("min_leaf must be >= 1");
    const auto d = static_cast<int>(X.cols());
    if (cfg.max_features < 0 || cfg.max_features > d)
        throw ConfigError("max_features must be in [0, " + std::to_string(d) + "]");
    const int max_features =
        cfg.max_features > 0 ? cfg.max_features
                             : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d))));

    ForestModel model;
    model.config = cfg;
    model.n_features = static_cast<std::size_t>(d);
    model.n_train = static_cast<std::size_t>(X.rows());
    model.trees.resize(static_cast<std::size_t>(cfg.n_trees));
    std::vector<std::vector<double>> per_tree(model.trees.size());

    parallel_for(model.trees.size(), cfg.threads, [&](std::size_t t) {
        TreeBuilder builder(X, y, cfg, max_features);
        model.trees[t] = builder.build(derive_seed(cfg.seed, "tree", t));
        per_tree[t] = builder.importance();
    });

    model.importances = Eigen::VectorXd::Zero(d);
    for (const auto& imp : per_tree) {
        const double total = std::accumulate(imp.begin(), imp.end(), 0.0);
        if (total <= 0.0) continue;
        for (int f = 0; f < d; ++f) model.importances(f) += imp[static_cast<std::size_t>(f)] / total;
    }
    const double total = model.importances.sum();
    if (total > 0.0)
        model.importances /= total;
    else
        model.importances.setConstant(1.0 / d);
    return model;
}

Eigen::VectorXd rf_predict(const ForestModel& model, const RowMatrixXd& X) {
    if (static_cast<std::size_t>(X.cols()) != model.n_features)
        throw DataError("random forest expects " + std::to_string(model.n_features) + " features, got " +
                          std::to_string(X.cols()));
    Eigen::VectorXd out(X.rows());
    constexpr std::size_t kChunk = 256;
    const auto rows = static_cast<std::size_t>(X.rows());
    parallel_for((rows + kChunk - 1) / kChunk, model.config.threads, [&](std::size_t c) {
        for (std::size_t r = c * kChunk; r < std::min(rows, (c + 1) * kChunk); ++r) {
            double sum = 0.0;
            for (const auto& tree : model.trees) sum += tree.predict_row(X.row(static_cast<Eigen::Index>(r)).data());
            out(static_cast<Eigen::Index>(r)) = sum / static_cast<double>(model.trees.size());
        }
    });
    return out;
}

Eigen::VectorXd rf_oob_predict(const ForestModel& model, const RowMatrixXd& X) {
    if (static_cast<std::size_t>(X.rows()) != model.n_train || static_cast<std::size_t>(X.cols()) != model.n_features)
        throw DataError("out-of-bag prediction needs the training matrix");
    const auto n = static_cast<std::size_t>(X.rows());
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(X.rows());
    Eigen::VectorXd count = Eigen::VectorXd::Zero(X.rows());
    for (const auto& tree : model.trees) {
        std::mt19937_64 rng(tree.seed);
        std::vector<char> in_bag(n, 0);
        for (auto i : bootstrap_sample(rng, n, model.config.bootstrap)) in_bag[i] = 1;
        for (std::size_t r = 0; r < n; ++r) {
            if (in_bag[r]) continue;
            sum(static_cast<Eigen::Index>(r)) += tree.predict_row(X.row(static_cast<Eigen::Index>(r)).data());
            count(static_cast<Eigen::Index>(r)) += 1.0;
        }
    }
    Eigen::VectorXd out(X.rows());
    for (Eigen::Index r = 0; r < X.rows(); ++r)
        out(r) = count(r) > 0 ? sum(r) / count(r) : std::numeric_limits<double>::quiet_NaN();
    return out;
}

std::vector<LabeledImportance> feature_importance(const ForestModel& model, const std::vector<FeatureColumn>& columns) {
    if (columns.size() != model.n_features)
        throw ConfigError("feature labels (" + std::to_string(columns.size()) + ") do not match model features (" +
                          std::to_string(model.n_features) + ")");
    std::vector<LabeledImportance> out;
    out.reserve(columns.size());
    for (std::size_t f = 0; f < columns.size(); ++f)
        out.push_back({columns[f], model.importances(static_cast<Eigen::Index>(f))});
    return out;
}

}  // namespace multilid
