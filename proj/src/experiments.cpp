#include "multilid/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "multilid/error.hpp"
#include "multilid/random.hpp"

using nlohmann::json;

namespace multilid {

void RunConfig::validate() const {
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    if (n_repeats < 1) throw ConfigError("repeats must be >= 1");
    if (subset_size < 1) throw ConfigError("subset size must be >= 1");
    if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ConfigError("target TPR must be in (0, 1]");
    if (n_trees < 1) throw ConfigError("number of trees must be >= 1");
    feature_config().validate();
}

FeatureConfig RunConfig::feature_config() const {
    return FeatureConfig{batch_size, k, derive_seed(seed, "features"), threads};
}

json RunConfig::to_json() const {
    return {{"mode", to_string(mode)},
            {"classifier", to_string(classifier)},
            {"batch_size", batch_size},
            {"k", k},
            {"split_ratio", split_ratio},
            {"n_repeats", n_repeats},
            {"seed", seed},
            {"subset_size", subset_size},
            {"target_tpr", target_tpr},
            {"n_trees", n_trees},
            {"lr_lambda", logreg.lambda},
            {"lr_max_iter", logreg.max_iter},
            {"lr_tol", logreg.tol}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    c.mode = feature_mode_from_string(j.at("mode").get<std::string>());
    c.classifier = classifier_from_string(j.at("classifier").get<std::string>());
    c.batch_size = j.at("batch_size").get<int>();
    c.k = j.at("k").get<int>();
    c.split_ratio = j.at("split_ratio").get<double>();
    c.n_repeats = j.at("n_repeats").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.subset_size = j.at("subset_size").get<std::size_t>();
    c.target_tpr = j.value("target_tpr", 0.95);
    c.n_trees = j.value("n_trees", 100);
    c.logreg.lambda = j.value("lr_lambda", 1.0);
    c.logreg.max_iter = j.value("lr_max_iter", 1000);
    c.logreg.tol = j.value("lr_tol", 1e-6);
    return c;
}

FoldSplit pair_split(const std::vector<std::size_t>& sample_ids, double train_ratio, std::uint64_t seed) {
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    std::vector<std::size_t> unique(sample_ids.begin(), sample_ids.end());
    std::sort(unique.begin(), unique.end());
    unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
    if (unique.size() < 2) throw DataError("need at least 2 samples to split");
    std::mt19937_64 rng(seed);
    std::shuffle(unique.begin(), unique.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(unique.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, unique.size() - 1);
    const std::set<std::size_t> train_ids(unique.begin(), unique.begin() + static_cast<std::ptrdiff_t>(n_train));
    FoldSplit split;
    for (std::size_t r = 0; r < sample_ids.size(); ++r)
        (train_ids.count(sample_ids[r]) ? split.train : split.test).push_back(r);
    return split;
}

std::uint64_t repeat_seed(const RunConfig& cfg, int repeat) {
    return derive_seed(cfg.seed, "repeat", static_cast<std::uint64_t>(repeat));
}

DetectorModel train_detector(ClassifierKind kind, const RowMatrixXd& X, std::span<const int> y, const RunConfig& cfg,
                             std::uint64_t seed) {
    if (kind == ClassifierKind::logreg) return lr_train(X, y, cfg.logreg);
    ForestConfig fc;
    fc.n_trees = cfg.n_trees;
    fc.seed = derive_seed(seed, "forest");
    fc.threads = cfg.threads;
    return rf_train(X, y, fc);
}

RunMetrics score_metrics(std::span<const double> scores, std::span<const int> labels, double target_tpr) {
    return {auc(scores, labels), f1_score(scores, labels), accuracy(scores, labels),
            tnr_at_tpr(scores, labels, target_tpr), best_f1(scores, labels).f1};
}

ClassProfile class_profile(const FeatureMatrix& fm) {
    ClassProfile p;
    const auto cols = fm.n_features();
    for (auto* v : {&p.clean_mean, &p.clean_std, &p.adv_mean, &p.adv_std}) v->assign(cols, 0.0);
    std::size_t n_clean = 0, n_adv = 0;
    for (std::size_t r = 0; r < fm.n_rows(); ++r) {
        auto& mean = fm.labels[r] ? p.adv_mean : p.clean_mean;
        (fm.labels[r] ? n_adv : n_clean) += 1;
        for (std::size_t c = 0; c < cols; ++c) mean[c] += fm.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
    for (std::size_t c = 0; c < cols; ++c) {
        if (n_clean) p.clean_mean[c] /= static_cast<double>(n_clean);
        if (n_adv) p.adv_mean[c] /= static_cast<double>(n_adv);
    }
    for (std::size_t r = 0; r < fm.n_rows(); ++r) {
        const auto& mean = fm.labels[r] ? p.adv_mean : p.clean_mean;
        auto& sq = fm.labels[r] ? p.adv_std : p.clean_std;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = fm.data(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) - mean[c];
            sq[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < cols; ++c) {
        if (n_clean) p.clean_std[c] = std::sqrt(p.clean_std[c] / static_cast<double>(n_clean));
        if (n_adv) p.adv_std[c] = std::sqrt(p.adv_std[c] / static_cast<double>(n_adv));
    }
    return p;
}

const MetricSummary& EvalReport::metric(const std::string& name) const {
    for (const auto& m : metrics)
        if (m.name == name) return m;
    throw ConfigError("report has no metric '" + name + "'");
}

namespace {

RowMatrixXd take_rows(const RowMatrixXd& X, const std::vector<std::size_t>& rows) {
    RowMatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = X.row(static_cast<Eigen::Index>(rows[i]));
    return out;
}

std::vector<int> take_labels(const std::vector<int>& labels, const std::vector<std::size_t>& rows) {
    std::vector<int> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(labels[r]);
    return out;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

json attack_metadata(const json& provenance) {
    if (!provenance.contains("adversarial")) return json::object();
    const auto& m = provenance["adversarial"];
    return {{"dataset", m.value("dataset", "")},
            {"model", m.value("model", "")},
            {"attack", m.value("attack", "")},
            {"epsilon", m.contains("epsilon") ? m["epsilon"] : json(nullptr)}};
}

json summary_to_json(const MetricSummary& s) {
    return {{"name", s.name}, {"mean", s.mean}, {"std", s.std}, {"n_runs", s.n_runs}, {"values", s.values}};
}

MetricSummary summary_from_json(const json& j) {
    MetricSummary s;
    s.name = j.at("name").get<std::string>();
    s.mean = j.at("mean").get<double>();
    s.std = j.at("std").get<double>();
    s.n_runs = j.at("n_runs").get<std::size_t>();
    s.values = j.value("values", std::vector<double>{});
    return s;
}

void check_same_schema(const FeatureMatrix& a, const FeatureMatrix& b, const std::string& name) {
    if (a.mode != b.mode || a.k != b.k || a.columns != b.columns)
        throw DataError("feature set '" + name + "' does not share mode/k/layer schema with the first set");
}

}  // namespace

json report_to_json(const EvalReport& r) {
    json metrics = json::array();
    for (const auto& m : r.metrics) metrics.push_back(summary_to_json(m));
    json columns = json::array();
    for (const auto& c : r.columns) columns.push_back({c.layer, c.neighbor});
    json cumulative = json::array();
    for (const auto& p : r.cumulative) cumulative.push_back({p.n_features, p.auc});
    return {{"experiment", r.experiment},
            {"config", r.config.to_json()},
            {"attack", r.attack},
            {"metrics", metrics},
            {"columns", columns},
            {"importances", r.importances},
            {"profile",
             {{"clean_mean", r.profile.clean_mean},
              {"clean_std", r.profile.clean_std},
              {"adv_mean", r.profile.adv_mean},
              {"adv_std", r.profile.adv_std}}},
            {"cumulative", cumulative},
            {"n_pairs", r.n_pairs},
            {"n_train_rows", r.n_train_rows},
            {"n_test_rows", r.n_test_rows},
            {"distance_checksum", r.distance_checksum}};
}

EvalReport report_from_json(const json& j) {
    try {
        EvalReport r;
        r.experiment = j.at("experiment").get<std::string>();
        r.config = run_config_from_json(j.at("config"));
        r.attack = j.value("attack", json::object());
        for (const auto& m : j.at("metrics")) r.metrics.push_back(summary_from_json(m));
        for (const auto& c : j.value("columns", json::array()))
            r.columns.push_back({c.at(0).get<std::string>(), c.at(1).get<int>()});
        r.importances = j.value("importances", std::vector<double>{});
        if (j.contains("profile")) {
            const auto& p = j["profile"];
            r.profile = {p.at("clean_mean").get<std::vector<double>>(), p.at("clean_std").get<std::vector<double>>(),
                         p.at("adv_mean").get<std::vector<double>>(), p.at("adv_std").get<std::vector<double>>()};
        }
        for (const auto& c : j.value("cumulative", json::array()))
            r.cumulative.push_back({c.at(0).get<std::size_t>(), c.at(1).get<double>()});
        r.n_pairs = j.value("n_pairs", std::size_t{0});
        r.n_train_rows = j.value("n_train_rows", std::size_t{0});
        r.n_test_rows = j.value("n_test_rows", std::size_t{0});
        r.distance_checksum = j.value("distance_checksum", std::uint64_t{0});
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("invalid report JSON: ") + e.what());
    }
}

std::vector<std::size_t> draw_subset(std::size_t n_available, const RunConfig& cfg) {
    if (cfg.subset_size > n_available)
        throw DataError("too few samples: subset of " + std::to_string(cfg.subset_size) + " pairs requested, " +
                        std::to_string(n_available) + " available");
    std::vector<std::size_t> ids(n_available);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed, "subset"));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(cfg.subset_size);
    std::sort(ids.begin(), ids.end());
    return ids;
}

EvalReport evaluate_features(const FeatureMatrix& fm, const RunConfig& cfg) {
    cfg.validate();
    if (fm.n_rows() == 0) throw DataError("empty feature matrix");
    EvalReport report;
    report.config = cfg;
    report.config.mode = fm.mode;
    report.config.k = fm.k;
    report.config.batch_size = fm.batch_size;
    report.attack = attack_metadata(fm.provenance);
    report.columns = fm.columns;
    report.profile = class_profile(fm);
    report.n_pairs = fm.n_rows() / 2;
    report.distance_checksum = fm.distance_checksum;

    std::vector<double> aucs, f1s, accs, tnrs, best;
    Eigen::VectorXd importance = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fm.n_features()));
    for (int r = 0; r < cfg.n_repeats; ++r) {
        const std::uint64_t seed = repeat_seed(cfg, r);
        const FoldSplit split = pair_split(fm.sample_ids, cfg.split_ratio, seed);
        if (r == 0) {
            report.n_train_rows = split.train.size();
            report.n_test_rows = split.test.size();
        }
        const auto y_train = take_labels(fm.labels, split.train);
        const auto y_test = take_labels(fm.labels, split.test);
        const DetectorModel model =
            train_detector(cfg.classifier, take_rows(fm.data, split.train), y_train, cfg, seed);
        const Eigen::VectorXd scores = predict(model, take_rows(fm.data, split.test));
        const RunMetrics m = score_metrics({scores.data(), static_cast<std::size_t>(scores.size())}, y_test,
                                           cfg.target_tpr);
        aucs.push_back(m.auc);
        f1s.push_back(m.f1);
        accs.push_back(m.accuracy);
        tnrs.push_back(m.tnr_at_tpr);
        best.push_back(m.f1_best);
        if (const auto* forest = std::get_if<ForestModel>(&model)) importance += forest->importances;
    }
    report.metrics = {aggregate(aucs, "auc"), aggregate(f1s, "f1"), aggregate(accs, "acc"),
                      aggregate(tnrs, "tnr_at_tpr"), aggregate(best, "f1_best")};
    if (cfg.classifier == ClassifierKind::forest) report.importances = to_std(importance / cfg.n_repeats);
    return report;
}

EvalReport run_detection(const ActivationDump& clean, const ActivationDump& adv, const RunConfig& cfg) {
    cfg.validate();
    if (clean.n_samples() != adv.n_samples()) throw DataError("clean and adversarial dumps are not aligned");
    const auto subset = draw_subset(clean.n_samples(), cfg);
    const FeatureMatrix fm =
        build_feature_matrix(select_rows(clean, subset), select_rows(adv, subset), cfg.mode, cfg.feature_config());
    return evaluate_features(fm, cfg);
}

ComparisonReport run_comparison(const ActivationDump& clean, const ActivationDump& adv, const RunConfig& cfg) {
    cfg.validate();
    if (clean.n_samples() != adv.n_samples()) throw DataError("clean and adversarial dumps are not aligned");
    const auto subset = draw_subset(clean.n_samples(), cfg);
    const FeaturePair features =
        build_feature_pair(select_rows(clean, subset), select_rows(adv, subset), cfg.feature_config());
    RunConfig lid_cfg = cfg;
    lid_cfg.mode = FeatureMode::lid;
    lid_cfg.classifier = ClassifierKind::logreg;
    RunConfig multi_cfg = cfg;
    multi_cfg.mode = FeatureMode::multilid;
    multi_cfg.classifier = ClassifierKind::forest;
    return {evaluate_features(features.lid, lid_cfg), evaluate_features(features.multilid, multi_cfg)};
}

std::vector<std::size_t> cumulative_grid(std::size_t n_features) {
    std::vector<std::size_t> grid;
    if (n_features <= 64) {
        for (std::size_t m = 1; m <= n_features; ++m) grid.push_back(m);
        return grid;
    }
    constexpr int kPoints = 40;
    const double log_n = std::log(static_cast<double>(n_features));
    for (int i = 0; i < kPoints; ++i) {
        const auto m = static_cast<std::size_t>(std::llround(std::exp(log_n * i / (kPoints - 1))));
        if (grid.empty() || m > grid.back()) grid.push_back(std::min(m, n_features));
    }
    if (grid.back() != n_features) grid.push_back(n_features);
    return grid;
}

std::vector<CumulativePoint> run_cumulative(const FeatureMatrix& fm, const RunConfig& cfg) {
    cfg.validate();
    if (fm.mode != FeatureMode::multilid) throw ConfigError("cumulative ablation expects multiLID features");
    const std::uint64_t seed = repeat_seed(cfg, 0);
    const FoldSplit split = pair_split(fm.sample_ids, cfg.split_ratio, seed);
    const auto y_train = take_labels(fm.labels, split.train);
    const auto y_test = take_labels(fm.labels, split.test);
    const RowMatrixXd X_train = take_rows(fm.data, split.train);
    const RowMatrixXd X_test = take_rows(fm.data, split.test);

    const auto forest = std::get<ForestModel>(train_detector(ClassifierKind::forest, X_train, y_train, cfg, seed));
    std::vector<std::size_t> order(fm.n_features());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return forest.importances(static_cast<Eigen::Index>(a)) > forest.importances(static_cast<Eigen::Index>(b));
    });

    std::vector<CumulativePoint> curve;
    for (std::size_t m : cumulative_grid(fm.n_features())) {
        RowMatrixXd train(X_train.rows(), static_cast<Eigen::Index>(m));
        RowMatrixXd test(X_test.rows(), static_cast<Eigen::Index>(m));
        for (std::size_t c = 0; c < m; ++c) {
            train.col(static_cast<Eigen::Index>(c)) = X_train.col(static_cast<Eigen::Index>(order[c]));
            test.col(static_cast<Eigen::Index>(c)) = X_test.col(static_cast<Eigen::Index>(order[c]));
        }
        const LogRegModel lr = lr_train(train, y_train, cfg.logreg);
        const Eigen::VectorXd scores = lr_predict(lr, test);
        curve.push_back({m, auc({scores.data(), static_cast<std::size_t>(scores.size())}, y_test)});
    }
    return curve;
}

std::vector<SweepRow> run_sweep(std::vector<SweepCell> cells, const std::vector<int>& k_list, const RunConfig& cfg) {
    cfg.validate();
    if (cells.empty()) throw ConfigError("sweep needs at least one cell");
    if (k_list.empty()) throw ConfigError("sweep needs at least one k");
    for (int k : k_list)
        if (k < 1 || k >= cfg.batch_size) throw ConfigError("k must be < batch size");
    std::stable_sort(cells.begin(), cells.end(), [](const SweepCell& a, const SweepCell& b) {
        const double ea = parse_rational(a.epsilon), eb = parse_rational(b.epsilon);
        return ea != eb ? ea < eb : a.variant < b.variant;
    });
    std::vector<int> ks = k_list;
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

    std::vector<SweepRow> rows;
    for (const auto& cell : cells) {
        const ActivationDump& clean = cell.clean;
        const ActivationDump& adv = cell.adv;
        if (clean.n_samples() != adv.n_samples()) throw DataError("sweep cell dumps are not aligned");
        const auto subset = draw_subset(clean.n_samples(), cfg);
        const ActivationDump c = select_rows(clean, subset);
        const ActivationDump a = select_rows(adv, subset);
        for (int k : ks) {
            RunConfig kcfg = cfg;
            kcfg.k = k;
            const FeaturePair features = build_feature_pair(c, a, kcfg.feature_config());
            RunConfig lid_cfg = kcfg;
            lid_cfg.classifier = ClassifierKind::logreg;
            RunConfig multi_cfg = kcfg;
            multi_cfg.classifier = ClassifierKind::forest;
            rows.push_back({cell.epsilon, cell.variant, k, "lid+lr",
                            evaluate_features(features.lid, lid_cfg).metric("auc")});
            rows.push_back({cell.epsilon, cell.variant, k, "multilid+rf",
                            evaluate_features(features.multilid, multi_cfg).metric("auc")});
        }
    }
    return rows;
}

TransferMatrix run_transfer(const std::vector<NamedFeatures>& sets, const RunConfig& cfg) {
    cfg.validate();
    if (sets.size() < 2) throw ConfigError("transfer needs at least two attacks");
    std::set<std::string> names;
    for (const auto& s : sets) {
        check_same_schema(sets.front().features, s.features, s.name);
        if (!names.insert(s.name).second) throw ConfigError("duplicate attack name '" + s.name + "'");
    }
    const std::size_t n = sets.size();
    std::vector<std::vector<std::vector<double>>> aucs(n, std::vector<std::vector<double>>(n));
    auto accs = aucs;
    for (int r = 0; r < cfg.n_repeats; ++r) {
        const std::uint64_t seed = repeat_seed(cfg, r);
        std::vector<FoldSplit> splits;
        for (const auto& s : sets) splits.push_back(pair_split(s.features.sample_ids, cfg.split_ratio, seed));
        for (std::size_t a = 0; a < n; ++a) {
            const auto& fa = sets[a].features;
            const DetectorModel model = train_detector(cfg.classifier, take_rows(fa.data, splits[a].train),
                                                       take_labels(fa.labels, splits[a].train), cfg, seed);
            for (std::size_t b = 0; b < n; ++b) {
                const auto& fb = sets[b].features;
                const Eigen::VectorXd scores = predict(model, take_rows(fb.data, splits[b].test));
                const auto y = take_labels(fb.labels, splits[b].test);
                const std::span<const double> s(scores.data(), static_cast<std::size_t>(scores.size()));
                aucs[a][b].push_back(auc(s, y));
                accs[a][b].push_back(accuracy(s, y));
            }
        }
    }
    TransferMatrix m;
    for (const auto& s : sets) m.attacks.push_back(s.name);
    m.cells.assign(n, std::vector<TransferCell>(n));
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
            m.cells[a][b] = {aggregate(aucs[a][b], "auc"), aggregate(accs[a][b], "acc")};
    return m;
}

}  // namespace multilid
