#pragma once

// Evaluation protocol: seeded subset draw, shared feature extraction,
// repeated pair-level train/test splits, and the ablation, sweep and
// transfer studies built on top of it.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multilid/activation_store.hpp"
#include "multilid/classifiers.hpp"
#include "multilid/lid_features.hpp"
#include "multilid/metrics.hpp"

namespace multilid {

struct RunConfig {
    FeatureMode mode = FeatureMode::multilid;
    ClassifierKind classifier = ClassifierKind::forest;
    int batch_size = 100;
    int k = 20;
    double split_ratio = 0.8;
    int n_repeats = 3;
    std::uint64_t seed = 0;
    std::size_t subset_size = 2000;
    double target_tpr = 0.95;
    int n_trees = 100;
    LogRegConfig logreg;
    unsigned threads = 0;  // execution only; never changes results

    void validate() const;
    FeatureConfig feature_config() const;
    /// Resolved parameters; excludes `threads` so reports stay byte-identical
    /// across machines.
    nlohmann::json to_json() const;
};

RunConfig run_config_from_json(const nlohmann::json& j);

/// Row indices of a pair-level split: a clean row and its adversarial twin
/// (same sample id) always land in the same fold.
struct FoldSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

FoldSplit pair_split(const std::vector<std::size_t>& sample_ids, double train_ratio, std::uint64_t seed);

/// Seed of repeat r: drives the split and the detector.
std::uint64_t repeat_seed(const RunConfig& cfg, int repeat);

DetectorModel train_detector(ClassifierKind kind, const RowMatrixXd& X, std::span<const int> y,
                             const RunConfig& cfg, std::uint64_t seed);

struct RunMetrics {
    double auc = 0.0;
    double f1 = 0.0;
    double accuracy = 0.0;
    double tnr_at_tpr = 0.0;
    double f1_best = 0.0;
};

RunMetrics score_metrics(std::span<const double> scores, std::span<const int> labels, double target_tpr);

struct ClassProfile {
    std::vector<double> clean_mean, clean_std, adv_mean, adv_std;
};

ClassProfile class_profile(const FeatureMatrix& fm);

struct CumulativePoint {
    std::size_t n_features = 0;
    double auc = 0.0;
};

struct EvalReport {
    std::string experiment = "detect";
    RunConfig config;
    nlohmann::json attack = nlohmann::json::object();  // dataset, model, attack, epsilon
    std::vector<MetricSummary> metrics;                // auc, f1, acc, tnr_at_tpr, f1_best
    std::vector<FeatureColumn> columns;
    std::vector<double> importances;                   // RF only, mean over repeats
    ClassProfile profile;
    std::vector<CumulativePoint> cumulative;
    std::size_t n_pairs = 0;
    std::size_t n_train_rows = 0;
    std::size_t n_test_rows = 0;
    std::uint64_t distance_checksum = 0;

    const MetricSummary& metric(const std::string& name) const;
};

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

/// Seeded draw of `cfg.subset_size` aligned sample pairs (ascending ids).
std::vector<std::size_t> draw_subset(std::size_t n_available, const RunConfig& cfg);

/// Repeated split/train/evaluate on already-built features.
EvalReport evaluate_features(const FeatureMatrix& fm, const RunConfig& cfg);

/// Full detection run: subset draw, features, n_repeats evaluations.
EvalReport run_detection(const ActivationDump& clean, const ActivationDump& adv, const RunConfig& cfg);

struct ComparisonReport {
    EvalReport lid_lr;
    EvalReport multilid_rf;
};

/// LID+LR and multiLID+RF from one neighbour search, evaluated on identical folds.
ComparisonReport run_comparison(const ActivationDump& clean, const ActivationDump& adv, const RunConfig& cfg);

/// Feature counts at which the cumulative ablation is evaluated: every count
/// up to 64 features, otherwise ~40 log-spaced counts including 1 and n.
std::vector<std::size_t> cumulative_grid(std::size_t n_features);

/// Ranks columns by RF importance (trained on the train fold of repeat 0) and
/// records the LR test AUC using the top-m columns for each m on the grid.
std::vector<CumulativePoint> run_cumulative(const FeatureMatrix& fm, const RunConfig& cfg);

struct SweepCell {
    std::string epsilon;  // rational text
    std::string variant;
    std::reference_wrapper<const ActivationDump> clean;
    std::reference_wrapper<const ActivationDump> adv;
};

struct SweepRow {
    std::string epsilon;
    std::string variant;
    int k = 0;
    std::string pipeline;  // "lid+lr" or "multilid+rf"
    MetricSummary auc;
};

/// Factorial evaluation over cells x k_list x {LID+LR, multiLID+RF}. Rows are
/// ordered by epsilon (numeric), variant, k, pipeline.
std::vector<SweepRow> run_sweep(std::vector<SweepCell> cells, const std::vector<int>& k_list, const RunConfig& cfg);

struct NamedFeatures {
    std::string name;
    FeatureMatrix features;
};

struct TransferCell {
    MetricSummary auc;
    MetricSummary accuracy;
};

struct TransferMatrix {
    std::vector<std::string> attacks;
    std::vector<std::vector<TransferCell>> cells;  // [train attack][test attack]
};

/// Detector trained on A's train fold, evaluated on B's test fold, for every
/// ordered pair; the diagonal reproduces evaluate_features for A.
TransferMatrix run_transfer(const std::vector<NamedFeatures>& sets, const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Report emission. Every emitter writes table.csv, table.md, config.json and
// plot-ready CSVs under plots/. Metrics are written on a 0-100 scale with two
// decimals.

/// Creates `<root>/<experiment>/<UTC timestamp>[-n]` and returns it.
std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& experiment);

void emit_report(const std::vector<EvalReport>& reports, const std::filesystem::path& dir);
void emit_transfer_report(const TransferMatrix& matrix, const RunConfig& cfg, const std::filesystem::path& dir);
void emit_sweep_report(const std::vector<SweepRow>& rows, const RunConfig& cfg, const std::filesystem::path& dir);
void emit_cumulative_report(const std::vector<CumulativePoint>& curve, const RunConfig& cfg,
                            const std::filesystem::path& dir);

/// "12.35" style percent text.
std::string percent(double fraction);

}  // namespace multilid
