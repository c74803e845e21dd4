#pragma once

// k-NN growth-rate features over layer activations.
//
// For a query x with ascending neighbour distances d_1 <= ... <= d_k:
//   LID(x)         = -( (1/k) * sum_i log(d_i / d_k) )^-1
//   multiLID(x)[i] = -log(d_i / d_k)
// so LID(x) == k / sum(multiLID(x)).

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "multilid/activation_store.hpp"

namespace multilid {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Distances are floored here before any logarithm.
inline constexpr double kDistanceFloor = 1e-12;

struct NeighborDistances {
    std::vector<double> values;  // ascending, values.back() > 0

    int k() const { return static_cast<int>(values.size()); }
};

/// Euclidean distances between every query row and every reference row.
/// Differences are accumulated directly so identical rows give exactly 0.
RowMatrixXd pairwise_l2(const Eigen::Ref<const RowMatrixXd>& queries,
                        const Eigen::Ref<const RowMatrixXd>& refs);

/// The k smallest entries of `row`, ascending. With `exclude_self` exactly one
/// zero entry (the query's distance to itself) is removed first.
/// Throws ConfigError if k is out of range or no self-distance exists, and
/// DegenerateNeighborhood if the k-th distance is zero.
NeighborDistances knn_distances(std::span<const double> row, int k, bool exclude_self);

/// Maximum-likelihood (Hill) estimate of local intrinsic dimensionality.
/// Throws DegenerateNeighborhood when all distances are equal.
double lid_from_distances(const NeighborDistances& nd);

/// Unfolded per-neighbour log-ratios; non-increasing, last entry exactly 0.
std::vector<double> multilid_from_distances(const NeighborDistances& nd);

enum class FeatureMode { lid, multilid };

std::string to_string(FeatureMode mode);
FeatureMode feature_mode_from_string(const std::string& text);

struct FeatureColumn {
    std::string layer;
    int neighbor = 0;  // 1-based neighbour index; 0 for the aggregated LID column

    bool operator==(const FeatureColumn&) const = default;
};

struct FeatureMatrix {
    FeatureMode mode = FeatureMode::multilid;
    RowMatrixXd data;
    std::vector<int> labels;               // 0 clean, 1 adversarial
    std::vector<std::size_t> sample_ids;   // dump row each feature row came from
    std::vector<FeatureColumn> columns;
    int k = 0;
    int batch_size = 0;
    std::uint64_t seed = 0;
    std::uint64_t distance_checksum = 0;   // hash of every neighbour distance consumed
    nlohmann::json provenance = nlohmann::json::object();

    std::size_t n_rows() const { return static_cast<std::size_t>(data.rows()); }
    std::size_t n_features() const { return static_cast<std::size_t>(data.cols()); }
    std::size_t n_layers() const;
};

struct FeatureConfig {
    int batch_size = 100;
    int k = 20;
    std::uint64_t seed = 0;
    unsigned threads = 0;

    void validate() const;
};

/// Minibatch feature extraction.
///
/// Sample indices are shuffled with `cfg.seed` and cut into minibatches of
/// `batch_size` (clean, adversarial) pairs; a trailing batch smaller than
/// k + 2 is dropped. Inside a minibatch, every query searches its neighbours
/// among that minibatch's clean rows, excluding its own clean row (a clean
/// query's self, an adversarial query's clean twin). Per-layer values are
/// concatenated in manifest layer order.
///
/// Rows: clean rows for the used samples in ascending sample order, then the
/// adversarial rows in the same order.
FeatureMatrix build_feature_matrix(const ActivationDump& clean, const ActivationDump& adv,
                                   FeatureMode mode, const FeatureConfig& cfg);

struct FeaturePair {
    FeatureMatrix lid;
    FeatureMatrix multilid;
};

/// Both feature kinds from one shared neighbour search.
FeaturePair build_feature_pair(const ActivationDump& clean, const ActivationDump& adv,
                               const FeatureConfig& cfg);

/// Collapses each layer's multiLID block to its LID value (k / block sum).
FeatureMatrix aggregate_to_lid(const FeatureMatrix& multilid);

/// Mean distance from each clean row to its nearest other row, measured inside
/// consecutive minibatches and averaged over layers.
double mean_nearest_neighbor_distance(const ActivationDump& dump, int batch_size);

/// Column subset, keeping labels and bookkeeping.
FeatureMatrix select_columns(const FeatureMatrix& fm, const std::vector<std::size_t>& cols);
FeatureMatrix select_feature_rows(const FeatureMatrix& fm, const std::vector<std::size_t>& rows);

/// `features.npy` (float64) plus the `features.json` sidecar.
void write_feature_matrix(const FeatureMatrix& fm, const std::filesystem::path& dir);
FeatureMatrix read_feature_matrix(const std::filesystem::path& dir);

}  // namespace multilid
