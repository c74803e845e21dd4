#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "multilid/error.hpp"
#include "multilid/lid_features.hpp"
#include "test_util.hpp"

using namespace multilid;

namespace {

ActivationDump random_dump(std::size_t n, std::vector<int> dims, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g;
    std::vector<LayerMatrix> layers;
    for (std::size_t l = 0; l < dims.size(); ++l) {
        LayerData d(n, dims[l]);
        for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = g(rng);
        layers.push_back({"L" + std::to_string(l), d});
    }
    return make_dump(std::move(layers));
}

ActivationDump perturb(const ActivationDump& clean, float sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, sigma);
    ActivationDump adv = clean;
    for (auto& layer : adv.layers)
        for (Eigen::Index i = 0; i < layer.data.size(); ++i) layer.data.data()[i] += g(rng);
    adv.manifest.attack = "noise";
    return adv;
}

// Brute-force neighbour distances of `q` among `refs` rows, skipping row `skip`.
std::vector<double> brute_knn(const LayerData& refs, const Eigen::RowVectorXf& q, std::size_t skip, int k) {
    std::vector<double> d;
    for (Eigen::Index j = 0; j < refs.rows(); ++j) {
        if (static_cast<std::size_t>(j) == skip) continue;
        double s = 0;
        for (Eigen::Index c = 0; c < refs.cols(); ++c) {
            const double diff = static_cast<double>(refs(j, c)) - static_cast<double>(q(c));
            s += diff * diff;
        }
        d.push_back(std::sqrt(s));
    }
    std::sort(d.begin(), d.end());
    d.resize(k);
    return d;
}

}  // namespace

TEST_CASE("hand-computed LID and multiLID for distances 1, 2, 4") {
    const NeighborDistances nd{{1.0, 2.0, 4.0}};
    CHECK(lid_from_distances(nd) == doctest::Approx(3.0 / std::log(8.0)).epsilon(1e-14));
    CHECK(lid_from_distances(nd) == doctest::Approx(1.4427).epsilon(1e-4));
    const auto ml = multilid_from_distances(nd);
    REQUIRE(ml.size() == 3);
    CHECK(ml[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(ml[1] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(ml[2] == 0.0);
}

TEST_CASE("multiLID is non-increasing, ends in zero, and sums back to LID") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.01, 5.0);
    for (int t = 0; t < 200; ++t) {
        const int k = 2 + t % 40;
        NeighborDistances nd;
        for (int i = 0; i < k; ++i) nd.values.push_back(u(rng));
        std::sort(nd.values.begin(), nd.values.end());
        const auto ml = multilid_from_distances(nd);
        CHECK(ml.back() == 0.0);
        CHECK(std::is_sorted(ml.rbegin(), ml.rend()));
        double sum = 0;
        for (double v : ml) sum += v;
        CHECK(k / sum == doctest::Approx(lid_from_distances(nd)).epsilon(1e-12));
    }
}

TEST_CASE("zero distances are floored, not propagated as infinities") {
    const NeighborDistances nd{{0.0, 1.0, 2.0}};
    const double lid = lid_from_distances(nd);
    CHECK(std::isfinite(lid));
    CHECK(lid > 0.0);
    const auto ml = multilid_from_distances(nd);
    CHECK(ml[0] == doctest::Approx(-std::log(kDistanceFloor / 2.0)));
}

TEST_CASE("all-equal distances are a degenerate neighbourhood") {
    CHECK_THROWS_AS(lid_from_distances({{3.0, 3.0, 3.0}}), DegenerateNeighborhood);
    CHECK_THROWS_AS(lid_from_distances({{3.0, 3.0, 3.0}}), NumericalError);
}

TEST_CASE("knn_distances excludes exactly one self zero") {
    const std::vector<double> row = {3.0, 0.0, 1.0, 0.0, 2.0};
    const auto with_self = knn_distances(row, 3, false);
    CHECK(with_self.values == std::vector<double>{0.0, 0.0, 1.0});
    const auto excl = knn_distances(row, 3, true);
    CHECK(excl.values == std::vector<double>{0.0, 1.0, 2.0});
    CHECK(excl.k() == 3);

    CHECK_THROWS_AS(knn_distances(row, 5, true), ConfigError);
    CHECK_THROWS_AS(knn_distances(row, 0, false), ConfigError);
    const std::vector<double> no_zero = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(knn_distances(no_zero, 2, true), ConfigError);
    const std::vector<double> dup = {0.0, 0.0, 0.0, 5.0};
    CHECK_THROWS_AS(knn_distances(dup, 2, true), DegenerateNeighborhood);
}

TEST_CASE("pairwise_l2 matches direct computation and is exact on duplicates") {
    RowMatrixXd q(2, 3), r(3, 3);
    q << 1, 2, 3, 0, 0, 0;
    r << 1, 2, 3, 1, 0, 0, 0, 3, 4;
    const RowMatrixXd d = pairwise_l2(q, r);
    CHECK(d(0, 0) == 0.0);
    CHECK(d(1, 1) == 1.0);
    CHECK(d(1, 2) == 5.0);
    CHECK(d(0, 1) == doctest::Approx(std::sqrt(13.0)));
}

TEST_CASE("feature config validation") {
    FeatureConfig cfg;
    cfg.k = 200;
    cfg.batch_size = 100;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("k must be < batch size") != std::string::npos);
    }
    cfg.k = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("single-batch features match a brute-force oracle") {
    const ActivationDump clean = random_dump(60, {5, 3}, 1);
    const ActivationDump adv = perturb(clean, 0.3f, 2);
    FeatureConfig cfg;
    cfg.batch_size = 100;  // one batch holding every sample
    cfg.k = 7;
    const FeatureMatrix fm = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);

    REQUIRE(fm.n_rows() == 120);
    REQUIRE(fm.n_features() == 14);
    CHECK(fm.columns.front() == FeatureColumn{"L0", 1});
    CHECK(fm.columns[7] == FeatureColumn{"L1", 1});
    CHECK(fm.columns.back() == FeatureColumn{"L1", 7});

    for (std::size_t i = 0; i < 60; ++i) {
        CHECK(fm.sample_ids[i] == i);
        CHECK(fm.sample_ids[60 + i] == i);
        CHECK(fm.labels[i] == 0);
        CHECK(fm.labels[60 + i] == 1);
    }
    for (std::size_t i : {0u, 17u, 59u}) {
        for (int l = 0; l < 2; ++l) {
            const auto& refs = clean.layers[l].data;
            const auto dc = brute_knn(refs, refs.row(i), i, cfg.k);
            const auto da = brute_knn(refs, adv.layers[l].data.row(i), i, cfg.k);
            for (int j = 0; j < cfg.k; ++j) {
                CHECK(fm.data(i, l * cfg.k + j) == doctest::Approx(-std::log(dc[j] / dc.back())).epsilon(1e-9));
                CHECK(fm.data(60 + i, l * cfg.k + j) ==
                      doctest::Approx(-std::log(da[j] / da.back())).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("LID mode equals the aggregated multiLID blocks") {
    const ActivationDump clean = random_dump(230, {6, 4, 8}, 3);
    const ActivationDump adv = perturb(clean, 0.5f, 4);
    FeatureConfig cfg;
    cfg.k = 10;
    cfg.seed = 5;
    const FeaturePair p = build_feature_pair(clean, adv, cfg);
    CHECK(p.lid.n_features() == 3);
    CHECK(p.multilid.n_features() == 30);
    CHECK(p.lid.columns[1] == FeatureColumn{"L1", 0});
    const FeatureMatrix agg = aggregate_to_lid(p.multilid);
    CHECK((agg.data - p.lid.data).cwiseAbs().maxCoeff() <= 1e-12 * p.lid.data.cwiseAbs().maxCoeff());
    CHECK(p.lid.distance_checksum == p.multilid.distance_checksum);
    CHECK(p.lid.sample_ids == p.multilid.sample_ids);

    const FeatureMatrix lid_only = build_feature_matrix(clean, adv, FeatureMode::lid, cfg);
    CHECK(lid_only.data == p.lid.data);
}

TEST_CASE("trailing batch smaller than k+2 is dropped") {
    const ActivationDump clean = random_dump(215, {4}, 9);
    const ActivationDump adv = perturb(clean, 0.1f, 10);
    FeatureConfig cfg;
    cfg.k = 20;
    cfg.seed = 1;
    const FeatureMatrix fm = build_feature_matrix(clean, adv, FeatureMode::lid, cfg);
    CHECK(fm.n_rows() == 400);  // 15 leftover samples < 22
    CHECK(std::is_sorted(fm.sample_ids.begin(), fm.sample_ids.begin() + 200));

    const ActivationDump clean2 = random_dump(250, {4}, 9);
    const FeatureMatrix all = build_feature_matrix(clean2, perturb(clean2, 0.1f, 10), FeatureMode::lid, cfg);
    CHECK(all.n_rows() == 500);  // 50 leftover samples form their own batch

    const ActivationDump tiny = random_dump(15, {4}, 9);
    CHECK_THROWS_AS(build_feature_matrix(tiny, tiny, FeatureMode::lid, cfg), DataError);
}

TEST_CASE("identical clean and adversarial dumps give identical feature halves") {
    const ActivationDump clean = random_dump(300, {8, 8}, 12);
    FeatureConfig cfg;
    cfg.seed = 2;
    const FeatureMatrix fm = build_feature_matrix(clean, clean, FeatureMode::multilid, cfg);
    const Eigen::Index n = static_cast<Eigen::Index>(fm.n_rows() / 2);
    CHECK(fm.data.topRows(n) == fm.data.bottomRows(n));
}

TEST_CASE("features are invariant to activation scaling") {
    const ActivationDump clean = random_dump(200, {10, 6}, 21);
    const ActivationDump adv = perturb(clean, 0.4f, 22);
    FeatureConfig cfg;
    cfg.seed = 8;
    const FeatureMatrix base = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);
    for (double c : {1e-3, 1e3}) {
        const FeatureMatrix s =
            build_feature_matrix(scale_activations(clean, c), scale_activations(adv, c), FeatureMode::multilid, cfg);
        // float32 rounding of the scaled activations limits agreement on generic data.
        CHECK((s.data - base.data).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("thread count does not change features") {
    const ActivationDump clean = random_dump(400, {12, 5}, 31);
    const ActivationDump adv = perturb(clean, 0.2f, 32);
    FeatureConfig cfg;
    cfg.seed = 4;
    cfg.threads = 1;
    const FeatureMatrix a = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);
    cfg.threads = 4;
    const FeatureMatrix b = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);
    CHECK(a.data == b.data);
    CHECK(a.distance_checksum == b.distance_checksum);

    cfg.seed = 5;
    const FeatureMatrix c = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);
    CHECK(c.distance_checksum != a.distance_checksum);
}

TEST_CASE("degenerate neighbourhoods are reported with sample and layer") {
    LayerData same(30, 3);
    same.setOnes();
    LayerData fine(30, 3);
    for (Eigen::Index i = 0; i < fine.size(); ++i) fine.data()[i] = static_cast<float>(i);
    const ActivationDump d = make_dump({{"ok", fine}, {"flat", same}});
    FeatureConfig cfg;
    cfg.k = 5;
    cfg.batch_size = 30;
    try {
        build_feature_matrix(d, d, FeatureMode::lid, cfg);
        FAIL("expected DegenerateNeighborhood");
    } catch (const DegenerateNeighborhood& e) {
        const std::string msg = e.what();
        CHECK(msg.find("flat") != std::string::npos);
        CHECK(msg.find("sample") != std::string::npos);
    }
}

TEST_CASE("mismatched dumps are rejected") {
    const ActivationDump a = random_dump(100, {4}, 1);
    const ActivationDump b = random_dump(90, {4}, 1);
    const ActivationDump c = random_dump(100, {5}, 1);
    FeatureConfig cfg;
    CHECK_THROWS_AS(build_feature_matrix(a, b, FeatureMode::lid, cfg), DataError);
    CHECK_THROWS_AS(build_feature_matrix(a, c, FeatureMode::lid, cfg), DataError);
}

TEST_CASE("mean nearest-neighbour distance on a grid") {
    LayerData line(10, 1);
    for (int i = 0; i < 10; ++i) line(i, 0) = 2.0f * static_cast<float>(i);
    const ActivationDump d = make_dump({{"x", line}});
    CHECK(mean_nearest_neighbor_distance(d, 10) == doctest::Approx(2.0));
}

TEST_CASE("feature matrix files round trip") {
    testutil::TempDir tmp("features");
    const ActivationDump clean = random_dump(120, {4, 4}, 41);
    const ActivationDump adv = perturb(clean, 0.3f, 42);
    FeatureConfig cfg;
    cfg.k = 5;
    cfg.seed = 77;
    const FeatureMatrix fm = build_feature_matrix(clean, adv, FeatureMode::multilid, cfg);
    write_feature_matrix(fm, tmp.path());
    CHECK(std::filesystem::exists(tmp / "features.npy"));
    CHECK(std::filesystem::exists(tmp / "features.json"));

    const FeatureMatrix back = read_feature_matrix(tmp.path());
    CHECK(back.data == fm.data);
    CHECK(back.labels == fm.labels);
    CHECK(back.sample_ids == fm.sample_ids);
    CHECK(back.columns == fm.columns);
    CHECK(back.mode == fm.mode);
    CHECK(back.k == 5);
    CHECK(back.seed == 77);
    CHECK(back.distance_checksum == fm.distance_checksum);

    std::filesystem::remove(tmp / "features.npy");
    CHECK_THROWS_AS(read_feature_matrix(tmp.path()), DataError);
}

TEST_CASE("column and row selection keep bookkeeping") {
    const ActivationDump clean = random_dump(60, {4, 4}, 51);
    FeatureConfig cfg;
    cfg.k = 4;
    const FeatureMatrix fm = build_feature_matrix(clean, perturb(clean, 0.3f, 52), FeatureMode::multilid, cfg);
    const FeatureMatrix cols = select_columns(fm, {5, 0});
    CHECK(cols.n_features() == 2);
    CHECK(cols.columns[0] == FeatureColumn{"L1", 2});
    CHECK(cols.data.col(1) == fm.data.col(0));
    const FeatureMatrix rows = select_feature_rows(fm, {61, 3});
    CHECK(rows.labels == std::vector<int>{1, 0});
    CHECK(rows.sample_ids == std::vector<std::size_t>{1, 3});
    CHECK(rows.data.row(0) == fm.data.row(61));
}
