#include <doctest.h>

#include <cmath>
#include <random>

#include "multilid/classifiers.hpp"
#include "multilid/error.hpp"
#include "multilid/metrics.hpp"
#include "test_util.hpp"

using namespace multilid;

namespace {

struct Data {
    RowMatrixXd X;
    std::vector<int> y;
};

// Two Gaussian blobs separated along feature 0; other features are noise.
Data blobs(int n, int d, double gap, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Data out{RowMatrixXd(n, d), std::vector<int>(n)};
    for (int i = 0; i < n; ++i) {
        out.y[i] = i % 2;
        for (int j = 0; j < d; ++j) out.X(i, j) = g(rng);
        out.X(i, 0) += out.y[i] ? gap : -gap;
    }
    return out;
}

double test_auc(const Eigen::VectorXd& s, const std::vector<int>& y) {
    return auc(std::span<const double>(s.data(), s.size()), y);
}

}  // namespace

TEST_CASE("logistic regression separates well-separated blobs") {
    const Data train = blobs(400, 5, 4.0, 1);
    const Data test = blobs(400, 5, 4.0, 2);
    const LogRegModel m = lr_train(train.X, train.y);
    CHECK(m.n_features() == 5);
    CHECK(m.gradient_norm <= m.config.tol);
    CHECK(test_auc(lr_predict(m, test.X), test.y) == 1.0);
    CHECK(std::abs(m.weights(0)) > 5 * m.weights.tail(4).cwiseAbs().maxCoeff());
}

TEST_CASE("logistic regression reaches the stationary point of the objective") {
    const Data d = blobs(300, 3, 0.5, 3);
    LogRegConfig cfg;
    cfg.lambda = 2.0;
    const LogRegModel m = lr_train(d.X, d.y, cfg);

    // Independent gradient of sum logloss + lambda/2 ||w||^2 on z-scored data.
    const Eigen::Index n = d.X.rows();
    Eigen::VectorXd gw = cfg.lambda * m.weights;
    double gb = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::VectorXd z = (d.X.row(i).transpose() - m.feature_means).cwiseQuotient(m.feature_stds);
        const double p = 1.0 / (1.0 + std::exp(-(z.dot(m.weights) + m.bias)));
        gw += (p - d.y[i]) * z;
        gb += p - d.y[i];
    }
    CHECK(gw.norm() < 1e-5);
    CHECK(std::abs(gb) < 1e-5);

    // Means/stds are the population statistics of the training data.
    CHECK(m.feature_means(1) == doctest::Approx(d.X.col(1).mean()));
    const double var = (d.X.col(1).array() - d.X.col(1).mean()).square().mean();
    CHECK(m.feature_stds(1) == doctest::Approx(std::sqrt(var)));

    const Eigen::VectorXd p = lr_predict(m, d.X);
    const Eigen::VectorXd z = lr_decision(m, d.X);
    CHECK(p(0) == doctest::Approx(1.0 / (1.0 + std::exp(-z(0)))));
}

TEST_CASE("logistic regression tolerates constant columns") {
    Data d = blobs(200, 3, 2.0, 4);
    d.X.col(2).setConstant(7.0);
    const LogRegModel m = lr_train(d.X, d.y);
    CHECK(m.feature_stds(2) == 1.0);
    CHECK(m.weights(2) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lr_predict(m, d.X).allFinite());
}

TEST_CASE("training input validation") {
    const Data d = blobs(20, 2, 1.0, 5);
    std::vector<int> wrong(19, 0);
    CHECK_THROWS_AS(lr_train(d.X, wrong), DataError);
    std::vector<int> one_class(20, 1);
    CHECK_THROWS_AS(lr_train(d.X, one_class), DataError);
    std::vector<int> bad = d.y;
    bad[0] = 2;
    CHECK_THROWS_AS(rf_train(d.X, bad), DataError);
    RowMatrixXd nan = d.X;
    nan(3, 1) = std::nan("");
    CHECK_THROWS_AS(rf_train(nan, d.y), DataError);
    LogRegConfig neg;
    neg.lambda = -1;
    CHECK_THROWS_AS(lr_train(d.X, d.y, neg), ConfigError);
}

TEST_CASE("random forest separates blobs and ranks the informative feature") {
    const Data train = blobs(400, 6, 3.0, 6);
    const Data test = blobs(400, 6, 3.0, 7);
    ForestConfig cfg;
    cfg.n_trees = 50;
    cfg.seed = 3;
    const ForestModel m = rf_train(train.X, train.y, cfg);
    CHECK(m.trees.size() == 50);
    CHECK(test_auc(rf_predict(m, test.X), test.y) == 1.0);
    CHECK(m.importances.sum() == doctest::Approx(1.0));
    Eigen::Index top;
    m.importances.maxCoeff(&top);
    CHECK(top == 0);

    const auto labeled = feature_importance(m, {{"a", 1}, {"a", 2}, {"b", 1}, {"b", 2}, {"c", 1}, {"c", 2}});
    CHECK(labeled.size() == 6);
    CHECK(labeled[0].column == FeatureColumn{"a", 1});
    CHECK(labeled[0].importance == m.importances(0));
    CHECK_THROWS_AS(feature_importance(m, {{"a", 1}}), ConfigError);
}

TEST_CASE("random forest learns XOR, which no single split separates") {
    RowMatrixXd X(400, 2);
    std::vector<int> y(400);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 400; ++i) {
        X(i, 0) = u(rng);
        X(i, 1) = u(rng);
        y[i] = (X(i, 0) > 0) != (X(i, 1) > 0);
    }
    ForestConfig cfg;
    cfg.n_trees = 30;
    const ForestModel m = rf_train(X, y, cfg);
    const Eigen::VectorXd s = rf_predict(m, X);
    int correct = 0;
    for (int i = 0; i < 400; ++i) correct += (s(i) >= 0.5) == (y[i] == 1);
    CHECK(correct >= 390);
}

TEST_CASE("single unbootstrapped tree fits the training data exactly") {
    const Data d = blobs(100, 3, 0.3, 9);
    ForestConfig cfg;
    cfg.n_trees = 1;
    cfg.bootstrap = false;
    cfg.max_features = 3;
    const ForestModel m = rf_train(d.X, d.y, cfg);
    const Eigen::VectorXd s = rf_predict(m, d.X);
    for (int i = 0; i < 100; ++i) CHECK(s(i) == static_cast<double>(d.y[i]));
    for (const auto& node : m.trees[0].nodes)
        if (node.is_leaf()) CHECK((node.count0 == 0 || node.count1 == 0));
}

TEST_CASE("random forest is independent of thread count and seeded") {
    const Data d = blobs(300, 8, 1.0, 10);
    ForestConfig cfg;
    cfg.n_trees = 40;
    cfg.seed = 12;
    cfg.threads = 1;
    const ForestModel serial = rf_train(d.X, d.y, cfg);
    cfg.threads = 4;
    const ForestModel parallel = rf_train(d.X, d.y, cfg);
    CHECK(model_to_json(serial) == model_to_json(parallel));
    CHECK(rf_predict(serial, d.X) == rf_predict(parallel, d.X));

    cfg.seed = 13;
    const ForestModel other = rf_train(d.X, d.y, cfg);
    CHECK(!(rf_predict(other, d.X) == rf_predict(serial, d.X)));
}

TEST_CASE("out-of-bag scores only use trees that did not see the row") {
    const Data d = blobs(200, 4, 2.0, 14);
    ForestConfig cfg;
    cfg.n_trees = 60;
    const ForestModel m = rf_train(d.X, d.y, cfg);
    const Eigen::VectorXd oob = rf_oob_predict(m, d.X);
    REQUIRE(oob.size() == 200);
    int finite = 0;
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 200; ++i)
        if (std::isfinite(oob(i))) {
            ++finite;
            s.push_back(oob(i));
            y.push_back(d.y[i]);
        }
    CHECK(finite >= 195);  // P(in-bag for all 60 trees) is negligible
    CHECK(auc(s, y) > 0.95);

    cfg.bootstrap = false;
    cfg.n_trees = 3;
    const ForestModel nb = rf_train(d.X, d.y, cfg);
    CHECK(rf_oob_predict(nb, d.X).array().isNaN().all());
}

TEST_CASE("forest configuration validation") {
    const Data d = blobs(20, 2, 1.0, 5);
    ForestConfig cfg;
    cfg.n_trees = 0;
    CHECK_THROWS_AS(rf_train(d.X, d.y, cfg), ConfigError);
    cfg.n_trees = 5;
    cfg.max_features = 3;
    CHECK_THROWS_AS(rf_train(d.X, d.y, cfg), ConfigError);
    cfg.max_features = 0;
    cfg.min_leaf = 0;
    CHECK_THROWS_AS(rf_train(d.X, d.y, cfg), ConfigError);
    cfg.min_leaf = 1;
    const ForestModel m = rf_train(d.X, d.y, cfg);
    CHECK_THROWS_AS(rf_predict(m, RowMatrixXd::Zero(3, 5)), DataError);
}

TEST_CASE("models survive a save/load round trip") {
    testutil::TempDir tmp("model");
    const Data d = blobs(150, 4, 1.0, 15);

    LogRegConfig lcfg;
    lcfg.lambda = 0.5;
    const DetectorModel lr = lr_train(d.X, d.y, lcfg);
    save_model(lr, tmp / "lr.json");
    const DetectorModel lr_back = load_model(tmp / "lr.json");
    REQUIRE(std::holds_alternative<LogRegModel>(lr_back));
    CHECK(predict(lr_back, d.X) == predict(lr, d.X));
    CHECK(std::get<LogRegModel>(lr_back).config.lambda == 0.5);

    ForestConfig fcfg;
    fcfg.n_trees = 10;
    const DetectorModel rf = rf_train(d.X, d.y, fcfg);
    save_model(rf, tmp / "rf.json");
    const DetectorModel rf_back = load_model(tmp / "rf.json");
    REQUIRE(std::holds_alternative<ForestModel>(rf_back));
    CHECK(predict(rf_back, d.X) == predict(rf, d.X));
    CHECK(std::get<ForestModel>(rf_back).importances == std::get<ForestModel>(rf).importances);

    nlohmann::json broken = model_to_json(rf);
    broken["trees"][0]["left"][0] = 9999;
    CHECK_THROWS_AS(model_from_json(broken), DataError);
    nlohmann::json kind = model_to_json(lr);
    kind["kind"] = "svm";
    CHECK_THROWS_AS(model_from_json(kind), DataError);
    CHECK_THROWS_AS(load_model(tmp / "missing.json"), DataError);
}

TEST_CASE("classifier names") {
    CHECK(classifier_from_string("lr") == ClassifierKind::logreg);
    CHECK(classifier_from_string("rf") == ClassifierKind::forest);
    CHECK(to_string(ClassifierKind::forest) == "rf");
    CHECK_THROWS_AS(classifier_from_string("svm"), ConfigError);
}
