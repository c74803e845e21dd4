#include "multilid/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "multilid/error.hpp"

namespace multilid {
namespace {

struct ClassCounts {
    std::size_t pos = 0;
    std::size_t neg = 0;
};

ClassCounts check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
    ClassCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
        if (std::isnan(scores[i])) throw DataError("score is NaN");
        (labels[i] ? c.pos : c.neg) += 1;
    }
    if (c.pos == 0 || c.neg == 0) throw DataError("metric needs both classes present");
    return c;
}

}  // namespace

std::vector<RocPoint> roc(std::span<const double> scores, std::span<const int> labels) {
    const ClassCounts c = check_inputs(scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<RocPoint> curve{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? tp : fp) += 1;
        curve.push_back({static_cast<double>(fp) / static_cast<double>(c.neg),
                         static_cast<double>(tp) / static_cast<double>(c.pos), s});
    }
    return curve;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    const auto curve = roc(scores, labels);
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i)
        area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
    return area;
}

double f1_score(std::span<const double> scores, std::span<const int> labels, double threshold) {
    check_inputs(scores, labels);
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= threshold;
        if (predicted && labels[i]) ++tp;
        if (predicted && !labels[i]) ++fp;
        if (!predicted && labels[i]) ++fn;
    }
    if (tp + fp == 0) return 0.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

double accuracy(std::span<const double> scores, std::span<const int> labels, double threshold) {
    check_inputs(scores, labels);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= threshold) == (labels[i] == 1);
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

ThresholdedF1 best_f1(std::span<const double> scores, std::span<const int> labels) {
    const ClassCounts c = check_inputs(scores, labels);
    ThresholdedF1 best;
    for (const auto& p : roc(scores, labels)) {
        if (p.tpr == 0.0) continue;
        const double tp = p.tpr * static_cast<double>(c.pos);
        const double fp = p.fpr * static_cast<double>(c.neg);
        const double f1 = 2.0 * tp / (tp + fp + static_cast<double>(c.pos));
        if (f1 > best.f1) best = {f1, p.threshold};
    }
    return best;
}

double tnr_at_tpr(std::span<const double> scores, std::span<const int> labels, double target_tpr) {
    const ClassCounts c = check_inputs(scores, labels);
    if (!(target_tpr > 0.0 && target_tpr <= 1.0)) throw ConfigError("target TPR must be in (0, 1]");
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
    std::sort(pos.begin(), pos.end(), std::greater<>());
    // Smallest count of positives reaching the target; the 1e-9 absorbs
    // products like 0.95 * 20 landing just above an integer.
    auto needed = static_cast<std::size_t>(std::ceil(target_tpr * static_cast<double>(c.pos) - 1e-9));
    needed = std::clamp<std::size_t>(needed, 1, c.pos);
    const double threshold = pos[needed - 1];
    const auto below = std::count_if(neg.begin(), neg.end(), [&](double s) { return s < threshold; });
    return static_cast<double>(below) / static_cast<double>(c.neg);
}

MetricSummary aggregate(std::span<const double> values, std::string name) {
    if (values.empty()) throw ConfigError("aggregate: no values");
    MetricSummary s;
    s.name = std::move(name);
    s.n_runs = values.size();
    s.values.assign(values.begin(), values.end());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size()));
    return s;
}

}  // namespace multilid
