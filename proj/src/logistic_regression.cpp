#include <Eigen/Cholesky>
#include <cmath>

#include "multilid/classifiers.hpp"
#include "multilid/error.hpp"

namespace multilid {
namespace {

double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

void check_binary(std::span<const int> y, std::size_t rows) {
    if (y.size() != rows) throw DataError("label count does not match row count");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos < 2 || rows - pos < 2) throw DataError("training needs at least 2 samples of each class");
}

}  // namespace

LogRegModel lr_train(const RowMatrixXd& X, std::span<const int> y, const LogRegConfig& cfg) {
    check_binary(y, static_cast<std::size_t>(X.rows()));
    if (!X.allFinite()) throw DataError("feature matrix contains non-finite values");
    if (!(cfg.lambda > 0.0)) throw ConfigError("lambda must be > 0");
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();

    LogRegModel model;
    model.config = cfg;
    model.feature_means = X.colwise().mean().transpose();
    model.feature_stds.resize(d);
    for (Eigen::Index c = 0; c < d; ++c) {
        const double var = (X.col(c).array() - model.feature_means(c)).square().mean();
        model.feature_stds(c) = var > 0.0 ? std::sqrt(var) : 1.0;
    }
    const Eigen::MatrixXd Z = ((X.rowwise() - model.feature_means.transpose()).array().rowwise() /
                               model.feature_stds.transpose().array())
                                  .matrix();
    Eigen::VectorXd target(n);
    for (Eigen::Index i = 0; i < n; ++i) target(i) = y[static_cast<std::size_t>(i)];

    // theta = [w; b]
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
    auto objective = [&](const Eigen::VectorXd& t) {
        const Eigen::VectorXd s = (Z * t.head(d)).array() + t(d);
        double f = 0.5 * cfg.lambda * t.head(d).squaredNorm();
        for (Eigen::Index i = 0; i < n; ++i) f += softplus(s(i)) - target(i) * s(i);
        return f;
    };

    double f = objective(theta);
    Eigen::VectorXd grad(d + 1);
    Eigen::MatrixXd hess(d + 1, d + 1);
    int it = 0;
    for (; it <= cfg.max_iter; ++it) {
        const Eigen::VectorXd s = (Z * theta.head(d)).array() + theta(d);
        Eigen::VectorXd p(n), w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            p(i) = sigmoid(s(i));
            w(i) = p(i) * (1.0 - p(i));
        }
        const Eigen::VectorXd r = p - target;
        grad.head(d) = Z.transpose() * r + cfg.lambda * theta.head(d);
        grad(d) = r.sum();
        model.gradient_norm = grad.norm();
        if (model.gradient_norm <= cfg.tol || it == cfg.max_iter) break;

        const Eigen::MatrixXd Zw = Z.array().colwise() * w.array();
        hess.topLeftCorner(d, d) = Z.transpose() * Zw;
        hess.topLeftCorner(d, d).diagonal().array() += cfg.lambda;
        hess.topRightCorner(d, 1) = Zw.colwise().sum().transpose();
        hess.bottomLeftCorner(1, d) = hess.topRightCorner(d, 1).transpose();
        hess(d, d) = w.sum() + 1e-12;
        Eigen::VectorXd step = hess.ldlt().solve(-grad);
        if (!step.allFinite() || grad.dot(step) >= 0.0) step = -grad;

        // Armijo backtracking.
        double t = 1.0;
        const double slope = grad.dot(step);
        Eigen::VectorXd candidate = theta + step;
        double f_new = objective(candidate);
        while (f_new > f + 1e-4 * t * slope && t > 1e-12) {
            t *= 0.5;
            candidate = theta + t * step;
            f_new = objective(candidate);
        }
        if (!(f_new <= f)) break;  // no further progress possible in double precision
        theta = candidate;
        f = f_new;
    }
    model.iterations = it;
    model.weights = theta.head(d);
    model.bias = theta(d);
    return model;
}

Eigen::VectorXd lr_decision(const LogRegModel& model, const RowMatrixXd& X) {
    if (static_cast<std::size_t>(X.cols()) != model.n_features())
        throw DataError("logistic regression expects " + std::to_string(model.n_features()) + " features, got " +
                          std::to_string(X.cols()));
    const Eigen::MatrixXd Z = ((X.rowwise() - model.feature_means.transpose()).array().rowwise() /
                               model.feature_stds.transpose().array())
                                  .matrix();
    return (Z * model.weights).array() + model.bias;
}

Eigen::VectorXd lr_predict(const LogRegModel& model, const RowMatrixXd& X) {
    return lr_decision(model, X).unaryExpr([](double s) { return sigmoid(s); });
}

}  // namespace multilid
