#include "multilid/lid_features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "multilid/error.hpp"
#include "multilid/npy.hpp"
#include "multilid/parallel.hpp"
#include "multilid/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace multilid {

RowMatrixXd pairwise_l2(const Eigen::Ref<const RowMatrixXd>& queries,
                        const Eigen::Ref<const RowMatrixXd>& refs) {
    if (queries.cols() != refs.cols())
        throw ConfigError("pairwise_l2: dimension mismatch (" + std::to_string(queries.cols()) + " vs " +
                          std::to_string(refs.cols()) + ")");
    RowMatrixXd out(queries.rows(), refs.rows());
    for (Eigen::Index i = 0; i < queries.rows(); ++i)
        for (Eigen::Index j = 0; j < refs.rows(); ++j)
            out(i, j) = std::sqrt((queries.row(i) - refs.row(j)).squaredNorm());
    return out;
}

NeighborDistances knn_distances(std::span<const double> row, int k, bool exclude_self) {
    const auto n = static_cast<std::ptrdiff_t>(row.size());
    if (k < 1) throw ConfigError("k must be >= 1");
    if (exclude_self ? k >= n : k > n)
        throw ConfigError("k = " + std::to_string(k) + " too large for " + std::to_string(n) + " distances" +
                          (exclude_self ? " (self excluded)" : ""));
    std::vector<double> pool(row.begin(), row.end());
    if (exclude_self) {
        auto self = std::find(pool.begin(), pool.end(), 0.0);
        if (self == pool.end()) throw ConfigError("exclude_self: no zero self-distance in row");
        pool.erase(self);
    }
    std::partial_sort(pool.begin(), pool.begin() + k, pool.end());
    pool.resize(static_cast<std::size_t>(k));
    if (!(pool.back() > 0.0))
        throw DegenerateNeighborhood("k-th neighbour distance is zero (duplicate points)");
    return NeighborDistances{std::move(pool)};
}

double lid_from_distances(const NeighborDistances& nd) {
    if (nd.values.empty() || !(nd.values.back() > 0.0))
        throw DegenerateNeighborhood("k-th neighbour distance must be positive");
    const double dk = nd.values.back();
    double sum = 0.0;
    for (double d : nd.values) sum += std::log(std::max(d, kDistanceFloor) / dk);
    if (sum == 0.0) throw DegenerateNeighborhood("all neighbour distances are equal");
    return -static_cast<double>(nd.k()) / sum;
}

std::vector<double> multilid_from_distances(const NeighborDistances& nd) {
    if (nd.values.empty() || !(nd.values.back() > 0.0))
        throw DegenerateNeighborhood("k-th neighbour distance must be positive");
    const double dk = nd.values.back();
    std::vector<double> out(nd.values.size());
    for (std::size_t i = 0; i + 1 < out.size(); ++i)
        out[i] = -std::log(std::max(nd.values[i], kDistanceFloor) / dk);
    out.back() = 0.0;
    return out;
}

std::string to_string(FeatureMode mode) { return mode == FeatureMode::lid ? "lid" : "multilid"; }

FeatureMode feature_mode_from_string(const std::string& text) {
    if (text == "lid" || text == "LID") return FeatureMode::lid;
    if (text == "multilid" || text == "multiLID") return FeatureMode::multilid;
    throw ConfigError("unknown feature mode '" + text + "' (expected lid or multilid)");
}

std::size_t FeatureMatrix::n_layers() const {
    if (mode == FeatureMode::lid || k == 0) return columns.size();
    return columns.size() / static_cast<std::size_t>(k);
}

void FeatureConfig::validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (k >= batch_size) throw ConfigError("k must be < batch size");
}

namespace {

// Neighbour distances for every (query row, layer), k values each.
struct NeighborTable {
    std::vector<std::size_t> samples;  // used sample ids, ascending
    std::size_t n_layers = 0;
    int k = 0;
    std::vector<double> dist;
    std::uint64_t checksum = 0;

    std::size_t n_rows() const { return 2 * samples.size(); }
    std::span<const double> at(std::size_t row, std::size_t layer) const {
        return {dist.data() + (row * n_layers + layer) * static_cast<std::size_t>(k),
                static_cast<std::size_t>(k)};
    }
    NeighborDistances neighbors(std::size_t row, std::size_t layer) const {
        auto s = at(row, layer);
        return {std::vector<double>(s.begin(), s.end())};
    }
};

void check_aligned(const ActivationDump& clean, const ActivationDump& adv) {
    clean.validate();
    adv.validate();
    if (clean.manifest.layer_names != adv.manifest.layer_names)
        throw DataError("clean and adversarial dumps have different layers");
    if (clean.n_samples() != adv.n_samples())
        throw DataError("clean and adversarial dumps have different sample counts (" +
                        std::to_string(clean.n_samples()) + " vs " + std::to_string(adv.n_samples()) + ")");
    for (std::size_t l = 0; l < clean.n_layers(); ++l)
        if (clean.layers[l].data.cols() != adv.layers[l].data.cols())
            throw DataError("layer '" + clean.layers[l].name + "' width differs between clean and adversarial");
}

std::uint64_t hash_doubles(std::span<const double> values) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof v);
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

NeighborTable compute_neighbors(const ActivationDump& clean, const ActivationDump& adv,
                                const FeatureConfig& cfg) {
    cfg.validate();
    check_aligned(clean, adv);

    const std::size_t n = clean.n_samples();
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(cfg.seed, "minibatch-shuffle"));
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t end = std::min(n, start + batch);
        if (end - start < static_cast<std::size_t>(cfg.k) + 2) break;
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (batches.empty())
        throw DataError("too few samples (" + std::to_string(n) + ") for one minibatch of at least k + 2 = " +
                        std::to_string(cfg.k + 2));

    NeighborTable table;
    for (const auto& b : batches) table.samples.insert(table.samples.end(), b.begin(), b.end());
    std::sort(table.samples.begin(), table.samples.end());
    std::vector<std::size_t> row_of(n, 0);
    for (std::size_t r = 0; r < table.samples.size(); ++r) row_of[table.samples[r]] = r;

    table.n_layers = clean.n_layers();
    table.k = cfg.k;
    const std::size_t n_used = table.samples.size();
    table.dist.assign(table.n_rows() * table.n_layers * static_cast<std::size_t>(cfg.k), 0.0);

    const std::size_t units = batches.size() * table.n_layers;
    parallel_for(units, cfg.threads, [&](std::size_t unit) {
        const auto& members = batches[unit / table.n_layers];
        const std::size_t layer = unit % table.n_layers;
        const auto& name = clean.layers[layer].name;
        const auto B = static_cast<Eigen::Index>(members.size());
        const auto dim = clean.layers[layer].data.cols();
        RowMatrixXd c(B, dim), a(B, dim);
        for (Eigen::Index i = 0; i < B; ++i) {
            const auto s = static_cast<Eigen::Index>(members[static_cast<std::size_t>(i)]);
            c.row(i) = clean.layers[layer].data.row(s).cast<double>();
            a.row(i) = adv.layers[layer].data.row(s).cast<double>();
        }
        const RowMatrixXd dcc = pairwise_l2(c, c);
        const RowMatrixXd dac = pairwise_l2(a, c);

        std::vector<double> twin_row(static_cast<std::size_t>(B - 1));
        for (Eigen::Index q = 0; q < B; ++q) {
            const std::size_t sample = members[static_cast<std::size_t>(q)];
            const std::size_t r = row_of[sample];
            auto store = [&](std::size_t row, const NeighborDistances& nd) {
                std::copy(nd.values.begin(), nd.values.end(),
                          table.dist.begin() +
                              static_cast<std::ptrdiff_t>((row * table.n_layers + layer) * table.k));
            };
            try {
                store(r, knn_distances({dcc.row(q).data(), static_cast<std::size_t>(B)}, cfg.k, true));
            } catch (const DegenerateNeighborhood& e) {
                throw DegenerateNeighborhood("sample " + std::to_string(sample) + " (clean), layer '" + name +
                                             "': " + e.what());
            }
            // The adversarial query never sees its own clean twin.
            std::size_t w = 0;
            for (Eigen::Index j = 0; j < B; ++j)
                if (j != q) twin_row[w++] = dac(q, j);
            try {
                store(n_used + r, knn_distances(twin_row, cfg.k, false));
            } catch (const DegenerateNeighborhood& e) {
                throw DegenerateNeighborhood("sample " + std::to_string(sample) + " (adversarial), layer '" +
                                             name + "': " + e.what());
            }
        }
    });
    table.checksum = hash_doubles(table.dist);
    return table;
}

FeatureMatrix empty_features(const ActivationDump& clean, const ActivationDump& adv, const NeighborTable& t,
                             FeatureMode mode, const FeatureConfig& cfg) {
    FeatureMatrix fm;
    fm.mode = mode;
    fm.k = cfg.k;
    fm.batch_size = cfg.batch_size;
    fm.seed = cfg.seed;
    fm.distance_checksum = t.checksum;
    const std::size_t n_used = t.samples.size();
    fm.labels.assign(2 * n_used, 0);
    std::fill(fm.labels.begin() + static_cast<std::ptrdiff_t>(n_used), fm.labels.end(), 1);
    fm.sample_ids = t.samples;
    fm.sample_ids.insert(fm.sample_ids.end(), t.samples.begin(), t.samples.end());
    for (const auto& name : clean.manifest.layer_names) {
        if (mode == FeatureMode::lid) {
            fm.columns.push_back({name, 0});
        } else {
            for (int i = 1; i <= cfg.k; ++i) fm.columns.push_back({name, i});
        }
    }
    fm.data.resize(static_cast<Eigen::Index>(2 * n_used), static_cast<Eigen::Index>(fm.columns.size()));
    fm.provenance = {{"clean", manifest_to_json(clean.manifest)}, {"adversarial", manifest_to_json(adv.manifest)}};
    return fm;
}

std::string row_identity(const FeatureMatrix& fm, std::size_t row, const std::string& layer) {
    return "sample " + std::to_string(fm.sample_ids[row]) + (fm.labels[row] ? " (adversarial)" : " (clean)") +
           ", layer '" + layer + "'";
}

FeatureMatrix lid_features(const ActivationDump& clean, const ActivationDump& adv, const NeighborTable& t,
                           const FeatureConfig& cfg) {
    FeatureMatrix fm = empty_features(clean, adv, t, FeatureMode::lid, cfg);
    for (std::size_t row = 0; row < t.n_rows(); ++row) {
        for (std::size_t l = 0; l < t.n_layers; ++l) {
            try {
                fm.data(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(l)) =
                    lid_from_distances(t.neighbors(row, l));
            } catch (const DegenerateNeighborhood& e) {
                throw DegenerateNeighborhood(row_identity(fm, row, clean.layers[l].name) + ": " + e.what());
            }
        }
    }
    return fm;
}

FeatureMatrix multilid_features(const ActivationDump& clean, const ActivationDump& adv, const NeighborTable& t,
                                const FeatureConfig& cfg) {
    FeatureMatrix fm = empty_features(clean, adv, t, FeatureMode::multilid, cfg);
    for (std::size_t row = 0; row < t.n_rows(); ++row) {
        for (std::size_t l = 0; l < t.n_layers; ++l) {
            const auto values = multilid_from_distances(t.neighbors(row, l));
            for (int i = 0; i < t.k; ++i)
                fm.data(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(l * t.k + i)) =
                    values[static_cast<std::size_t>(i)];
        }
    }
    return fm;
}

}  // namespace

FeatureMatrix build_feature_matrix(const ActivationDump& clean, const ActivationDump& adv, FeatureMode mode,
                                   const FeatureConfig& cfg) {
    const NeighborTable t = compute_neighbors(clean, adv, cfg);
    return mode == FeatureMode::lid ? lid_features(clean, adv, t, cfg) : multilid_features(clean, adv, t, cfg);
}

FeaturePair build_feature_pair(const ActivationDump& clean, const ActivationDump& adv, const FeatureConfig& cfg) {
    const NeighborTable t = compute_neighbors(clean, adv, cfg);
    return {lid_features(clean, adv, t, cfg), multilid_features(clean, adv, t, cfg)};
}

FeatureMatrix aggregate_to_lid(const FeatureMatrix& multilid) {
    if (multilid.mode != FeatureMode::multilid) throw ConfigError("aggregate_to_lid expects multiLID features");
    const std::size_t layers = multilid.n_layers();
    FeatureMatrix out = multilid;
    out.mode = FeatureMode::lid;
    out.columns.clear();
    out.data.resize(multilid.data.rows(), static_cast<Eigen::Index>(layers));
    for (std::size_t l = 0; l < layers; ++l) {
        out.columns.push_back({multilid.columns[l * static_cast<std::size_t>(multilid.k)].layer, 0});
        for (Eigen::Index r = 0; r < multilid.data.rows(); ++r) {
            const double sum =
                multilid.data.row(r).segment(static_cast<Eigen::Index>(l) * multilid.k, multilid.k).sum();
            if (sum == 0.0)
                throw DegenerateNeighborhood(row_identity(multilid, static_cast<std::size_t>(r),
                                                          out.columns.back().layer) +
                                             ": all neighbour distances are equal");
            out.data(r, static_cast<Eigen::Index>(l)) = multilid.k / sum;
        }
    }
    return out;
}

double mean_nearest_neighbor_distance(const ActivationDump& dump, int batch_size) {
    dump.validate();
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    const auto n = static_cast<Eigen::Index>(dump.n_samples());
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& layer : dump.layers) {
        for (Eigen::Index start = 0; start + 1 < n; start += batch_size) {
            const Eigen::Index len = std::min<Eigen::Index>(batch_size, n - start);
            const RowMatrixXd rows = layer.data.middleRows(start, len).cast<double>();
            const RowMatrixXd d = pairwise_l2(rows, rows);
            for (Eigen::Index i = 0; i < len; ++i) {
                double best = std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < len; ++j)
                    if (j != i) best = std::min(best, d(i, j));
                total += best;
                ++count;
            }
        }
    }
    return total / static_cast<double>(count);
}

FeatureMatrix select_columns(const FeatureMatrix& fm, const std::vector<std::size_t>& cols) {
    FeatureMatrix out = fm;
    out.columns.clear();
    out.data.resize(fm.data.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        if (cols[c] >= fm.n_features()) throw ConfigError("column index out of range");
        out.columns.push_back(fm.columns[cols[c]]);
        out.data.col(static_cast<Eigen::Index>(c)) = fm.data.col(static_cast<Eigen::Index>(cols[c]));
    }
    return out;
}

FeatureMatrix select_feature_rows(const FeatureMatrix& fm, const std::vector<std::size_t>& rows) {
    FeatureMatrix out = fm;
    out.data.resize(static_cast<Eigen::Index>(rows.size()), fm.data.cols());
    out.labels.clear();
    out.sample_ids.clear();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= fm.n_rows()) throw ConfigError("row index out of range");
        out.data.row(static_cast<Eigen::Index>(r)) = fm.data.row(static_cast<Eigen::Index>(rows[r]));
        out.labels.push_back(fm.labels[rows[r]]);
        out.sample_ids.push_back(fm.sample_ids[rows[r]]);
    }
    return out;
}

void write_feature_matrix(const FeatureMatrix& fm, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    npy::write(dir / "features.npy", std::span<const double>(fm.data.data(), static_cast<std::size_t>(fm.data.size())),
               {fm.n_rows(), fm.n_features()});
    json index = json::array();
    for (const auto& c : fm.columns)
        index.push_back({{"layer", c.layer}, {"neighbor", c.neighbor == 0 ? json("aggregate") : json(c.neighbor)}});
    const json sidecar = {{"version", 1},
                          {"mode", to_string(fm.mode)},
                          {"k", fm.k},
                          {"batch_size", fm.batch_size},
                          {"seed", fm.seed},
                          {"distance_checksum", fm.distance_checksum},
                          {"labels", fm.labels},
                          {"sample_ids", fm.sample_ids},
                          {"feature_index", index},
                          {"provenance", fm.provenance}};
    std::ofstream out(dir / "features.json", std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / "features.json").string());
    out << sidecar.dump(2) << '\n';
}

FeatureMatrix read_feature_matrix(const fs::path& dir) {
    std::ifstream in(dir / "features.json");
    if (!in) throw DataError("missing " + (dir / "features.json").string());
    FeatureMatrix fm;
    try {
        json j;
        in >> j;
        fm.mode = feature_mode_from_string(j.at("mode").get<std::string>());
        fm.k = j.at("k").get<int>();
        fm.batch_size = j.at("batch_size").get<int>();
        fm.seed = j.at("seed").get<std::uint64_t>();
        fm.distance_checksum = j.at("distance_checksum").get<std::uint64_t>();
        fm.labels = j.at("labels").get<std::vector<int>>();
        fm.sample_ids = j.at("sample_ids").get<std::vector<std::size_t>>();
        for (const auto& c : j.at("feature_index")) {
            const auto& nb = c.at("neighbor");
            fm.columns.push_back({c.at("layer").get<std::string>(), nb.is_string() ? 0 : nb.get<int>()});
        }
        fm.provenance = j.value("provenance", json::object());
    } catch (const json::exception& e) {
        throw DataError((dir / "features.json").string() + ": " + e.what());
    }
    npy::Header header;
    const auto values = npy::read_f64(dir / "features.npy", header);
    if (header.shape.size() != 2 || header.shape[0] != fm.labels.size() || header.shape[1] != fm.columns.size() ||
        fm.sample_ids.size() != fm.labels.size())
        throw DataError(dir.string() + ": feature matrix shape disagrees with sidecar");
    fm.data.resize(static_cast<Eigen::Index>(header.shape[0]), static_cast<Eigen::Index>(header.shape[1]));
    std::copy(values.begin(), values.end(), fm.data.data());
    return fm;
}

}  // namespace multilid
