#pragma once

// Binary detection metrics. Label 1 (adversarial) is the positive class and
// higher scores mean "more likely adversarial". All values are in [0, 1].

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace multilid {

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = std::numeric_limits<double>::infinity();  // predict positive iff score >= threshold
};

/// Operating points from threshold +inf down to the lowest score, one point
/// per distinct score (ties form a single step). Starts at (0,0), ends at (1,1).
std::vector<RocPoint> roc(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under roc().
double auc(std::span<const double> scores, std::span<const int> labels);

double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);
double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct ThresholdedF1 {
    double f1 = 0.0;
    double threshold = 0.0;
};

/// F1 at the score threshold that maximizes it.
ThresholdedF1 best_f1(std::span<const double> scores, std::span<const int> labels);

/// TNR at the largest threshold whose TPR reaches `target_tpr`; negatives
/// count as true negatives when strictly below that threshold.
double tnr_at_tpr(std::span<const double> scores, std::span<const int> labels, double target_tpr = 0.95);

struct MetricSummary {
    std::string name;
    double mean = 0.0;
    double std = 0.0;  // population (n-divisor) standard deviation
    std::size_t n_runs = 0;
    std::vector<double> values;
};

MetricSummary aggregate(std::span<const double> values, std::string name = {});

}  // namespace multilid
