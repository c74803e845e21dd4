#include <doctest.h>

#include <cstdlib>
#include <sstream>

#include "multilid/activation_store.hpp"
#include "multilid/cli.hpp"
#include "test_util.hpp"

using namespace multilid;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "multilid");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path only_run_dir(const fs::path& parent) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(parent)) dirs.push_back(e.path());
    REQUIRE(dirs.size() == 1);
    return dirs.front();
}

// Small synthetic pair shared by the tests below.
struct Fixture {
    testutil::TempDir tmp{"cli"};
    std::string clean, adv;

    Fixture() {
        const Result r = run({"synth", "--m", "3", "--D", "24", "--n", "300", "--layers", "2", "--noise", "8/255",
                              "--seed", "1", "--out", (tmp / "s").string()});
        REQUIRE(r.code == 0);
        clean = (tmp / "s" / "clean").string();
        adv = (tmp / "s" / "adv").string();
    }
};

}  // namespace

TEST_CASE("usage errors exit 1") {
    CHECK(run({}).code == kExitUsage);
    CHECK(run({"frobnicate"}).code == kExitUsage);
    CHECK(run({"detect", "--clean", "a", "--adv", "b", "--bogus", "1"}).code == kExitUsage);
    CHECK(run({"detect", "--k", "x"}).code == kExitUsage);

    const Result help = run({"--help"});
    CHECK(help.code == kExitOk);
    CHECK(help.out.find("detect") != std::string::npos);

    const Result k = run({"features", "--k", "200", "--batch", "100"});
    CHECK(k.code == kExitUsage);
    CHECK(k.err.find("k must be < batch size") != std::string::npos);
}

TEST_CASE("bad thread environment is a usage error") {
    Fixture f;
    setenv("MULTILID_THREADS", "zero", 1);
    const Result r = run({"detect", "--clean", f.clean, "--adv", f.adv, "--subset", "300", "--out",
                          (f.tmp / "r").string()});
    unsetenv("MULTILID_THREADS");
    CHECK(r.code == kExitUsage);
}

TEST_CASE("synth stores the noise level exactly") {
    Fixture f;
    const ActivationDump adv = read_dump(f.adv);
    CHECK(adv.manifest.epsilon == std::optional<std::string>("8/255"));
    CHECK(adv.n_samples() == 300);
    CHECK(fs::exists(f.tmp / "s" / "config.json"));
}

TEST_CASE("detect is byte-for-byte reproducible") {
    Fixture f;
    const std::vector<std::string> args = {"detect",   "--clean", f.clean,  "--adv",     f.adv,
                                           "--subset", "300",     "--trees", "20",       "--seed",
                                           "5",        "--out"};
    auto a = args, b = args;
    a.push_back((f.tmp / "a").string());
    b.push_back((f.tmp / "b").string());
    b.insert(b.end(), {"--threads", "3"});
    const Result ra = run(a), rb = run(b);
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(ra.out.find("AUC") != std::string::npos);
    const fs::path da = only_run_dir(f.tmp / "a" / "detect"), db = only_run_dir(f.tmp / "b" / "detect");
    for (const char* file : {"table.csv", "table.md", "config.json", "report.json"}) {
        INFO(file);
        CHECK(testutil::slurp(da / file) == testutil::slurp(db / file));
    }
    CHECK(testutil::slurp(da / "table.csv").find("8/255") != std::string::npos);
}

TEST_CASE("features, train and eval chain") {
    Fixture f;
    const std::string feats = (f.tmp / "feat").string(), model = (f.tmp / "model").string();
    REQUIRE(run({"features", "--clean", f.clean, "--adv", f.adv, "--subset", "300", "--k", "10", "--out", feats})
                .code == 0);
    CHECK(fs::exists(fs::path(feats) / "features.npy"));
    CHECK(fs::exists(fs::path(feats) / "config.json"));
    const Result t = run({"train", "--features", feats, "--clf", "lr", "--out", model});
    REQUIRE(t.code == 0);
    CHECK(fs::exists(fs::path(model) / "model.json"));
    const Result e = run({"eval", "--features", feats, "--model", (fs::path(model) / "model.json").string(),
                          "--out", (f.tmp / "r").string()});
    REQUIRE(e.code == 0);
    CHECK(fs::exists(only_run_dir(f.tmp / "r" / "eval") / "table.csv"));

    const Result merged = run({"report", "--in", only_run_dir(f.tmp / "r" / "eval").string(), "--out",
                               (f.tmp / "r").string()});
    CHECK(merged.code == 0);
    CHECK(fs::exists(only_run_dir(f.tmp / "r" / "report") / "table.md"));
}

TEST_CASE("transfer, ablate and sweep subcommands") {
    Fixture f;
    const std::string out = (f.tmp / "r").string();
    const std::string pair = f.clean + "," + f.adv;
    const std::vector<std::string> common = {"--subset", "300", "--trees", "10", "--repeats", "1", "--out", out};

    auto with = [&](std::vector<std::string> a) {
        a.insert(a.end(), common.begin(), common.end());
        return run(a);
    };
    const Result t = with({"transfer", "--pair", "x=" + pair, "--pair", "y=" + pair});
    CHECK(t.code == 0);
    CHECK(fs::exists(only_run_dir(f.tmp / "r" / "transfer") / "plots" / "transfer.csv"));
    CHECK(with({"transfer", "--pair", "x=" + pair}).code == kExitUsage);

    const Result a = with({"ablate", "--clean", f.clean, "--adv", f.adv, "--k", "5"});
    CHECK(a.code == 0);
    CHECK(fs::exists(only_run_dir(f.tmp / "r" / "ablate") / "plots" / "cumulative.csv"));

    const Result s = with({"sweep", "--pair", pair, "--k-list", "5,10"});
    CHECK(s.code == 0);
    CHECK(testutil::slurp(only_run_dir(f.tmp / "r" / "sweep") / "table.csv").find("8/255") != std::string::npos);
}

TEST_CASE("data problems exit 2, degenerate neighbourhoods exit 3") {
    testutil::TempDir tmp("cli-err");
    const Result missing = run({"detect", "--clean", (tmp / "nope").string(), "--adv", (tmp / "nope").string(),
                                "--out", (tmp / "r").string()});
    CHECK(missing.code == kExitData);

    Fixture f;
    CHECK(run({"detect", "--clean", f.clean, "--adv", f.adv, "--out", (tmp / "r").string()}).code ==
          kExitData);  // default subset of 2000 exceeds 300 samples

    LayerData flat(50, 3);
    flat.setConstant(2.0f);
    write_dump(make_dump({{"flat", flat}}), tmp / "flat");
    const Result deg = run({"detect", "--clean", (tmp / "flat").string(), "--adv", (tmp / "flat").string(),
                            "--subset", "50", "--batch", "50", "--out", (tmp / "r").string()});
    CHECK(deg.code == kExitNumerical);
    CHECK(deg.err.find("flat") != std::string::npos);
}
