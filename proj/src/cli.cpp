#include "multilid/cli.hpp"

#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "multilid/activation_store.hpp"
#include "multilid/classifiers.hpp"
#include "multilid/error.hpp"
#include "multilid/experiments.hpp"
#include "multilid/lid_features.hpp"
#include "multilid/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace multilid {
namespace {

struct Options {
    // shared
    std::uint64_t seed = 0;
    std::string out;
    unsigned threads = 0;
    // data inputs
    std::string clean, adv, features, model;
    std::vector<std::string> pairs, feature_sets, inputs;
    // protocol
    std::string mode = "multilid";
    std::string clf = "rf";
    int batch = 100;
    int k = 20;
    int repeats = 3;
    std::size_t subset = 2000;
    double split = 0.8;
    int trees = 100;
    double lambda = 1.0;
    double target_tpr = 0.95;
    std::string k_list = "3,10,20";
    // synth
    int m = 4;
    int D = 128;
    std::size_t n = 2000;
    int layers = 4;
    std::string noise = "0";
    bool match_nn = false;
};

unsigned resolve_thread_option(unsigned requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("MULTILID_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (const std::exception&) {
        }
        throw ConfigError(std::string("MULTILID_THREADS must be a positive integer, got '") + env + "'");
    }
    return 0;
}

RunConfig run_config(const Options& o) {
    RunConfig c;
    c.mode = feature_mode_from_string(o.mode);
    c.classifier = classifier_from_string(o.clf);
    c.batch_size = o.batch;
    c.k = o.k;
    c.split_ratio = o.split;
    c.n_repeats = o.repeats;
    c.seed = o.seed;
    c.subset_size = o.subset;
    c.target_tpr = o.target_tpr;
    c.n_trees = o.trees;
    c.logreg.lambda = o.lambda;
    c.threads = resolve_thread_option(o.threads);
    c.validate();
    return c;
}

void write_json(const fs::path& path, const json& j) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// "[name=]clean_dir,adv_dir"
struct PairSpec {
    std::string name;
    fs::path clean, adv;
};

PairSpec parse_pair(const std::string& text) {
    PairSpec p;
    std::string rest = text;
    if (const auto eq = rest.find('='); eq != std::string::npos) {
        p.name = rest.substr(0, eq);
        rest = rest.substr(eq + 1);
    }
    const auto comma = rest.find(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 == rest.size())
        throw ConfigError("--pair expects [name=]CLEAN_DIR,ADV_DIR, got '" + text + "'");
    p.clean = rest.substr(0, comma);
    p.adv = rest.substr(comma + 1);
    return p;
}

std::string attack_name(const PairSpec& p, const ActivationDump& adv) {
    if (!p.name.empty()) return p.name;
    std::string name = adv.manifest.attack;
    if (adv.manifest.epsilon) name += "@" + *adv.manifest.epsilon;
    return name;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError("bad integer list '" + text + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty integer list");
    return out;
}

std::string summary_line(const EvalReport& r) {
    std::ostringstream s;
    s << to_string(r.config.mode) << "+" << to_string(r.config.classifier) << " AUC "
      << percent(r.metric("auc").mean) << " ± " << percent(r.metric("auc").std) << ", F1 "
      << percent(r.metric("f1").mean) << ", ACC " << percent(r.metric("acc").mean);
    return s.str();
}

void require_dumps(const Options& o) {
    if (o.clean.empty() || o.adv.empty()) throw ConfigError("--clean and --adv are required");
}

fs::path out_root(const Options& o) { return o.out.empty() ? fs::path("reports") : fs::path(o.out); }

fs::path require_out(const Options& o, const char* what) {
    if (o.out.empty()) throw ConfigError(std::string("--out is required for ") + what);
    return o.out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Options& o, std::ostream& out) {
    const fs::path dir = require_out(o, "synth");
    SynthSpec spec;
    spec.intrinsic_dim = o.m;
    spec.ambient_dim = o.D;
    spec.n_samples = o.n;
    spec.n_layers = o.layers;
    spec.seed = o.seed;
    spec.validate();
    const ActivationDump clean = synth_clean(spec);
    double scale = parse_rational(o.noise);
    std::string epsilon = o.noise;
    if (o.match_nn) {
        scale *= mean_nearest_neighbor_distance(clean, o.batch) / std::sqrt(static_cast<double>(o.D));
        epsilon = format_number(scale);
    }
    if (!(scale >= 0.0)) throw ConfigError("noise must be >= 0");
    ActivationDump adv = add_isotropic_noise(clean, scale, derive_seed(o.seed, "synth-adv"));
    adv.manifest.epsilon = epsilon;
    write_dump(clean, dir / "clean");
    write_dump(adv, dir / "adv");
    write_json(dir / "config.json", {{"command", "synth"},
                                     {"intrinsic_dim", o.m},
                                     {"ambient_dim", o.D},
                                     {"n_samples", o.n},
                                     {"n_layers", o.layers},
                                     {"noise", o.noise},
                                     {"match_nn", o.match_nn},
                                     {"noise_scale", scale},
                                     {"seed", o.seed}});
    out << "synth: " << o.n << " pairs, m=" << o.m << ", D=" << o.D << ", " << o.layers
        << " layers, noise std " << format_number(scale) << " -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_features(const Options& o, std::ostream& out) {
    const RunConfig cfg = run_config(o);
    const fs::path dir = require_out(o, "features");
    require_dumps(o);
    ActivationDump clean = read_dump(o.clean);
    ActivationDump adv = read_dump(o.adv);
    if (clean.n_samples() != adv.n_samples()) throw DataError("clean and adversarial dumps are not aligned");
    if (o.subset > 0 && o.subset < clean.n_samples()) {
        const auto ids = draw_subset(clean.n_samples(), cfg);
        clean = select_rows(clean, ids);
        adv = select_rows(adv, ids);
    }
    const FeatureMatrix fm = build_feature_matrix(clean, adv, cfg.mode, cfg.feature_config());
    write_feature_matrix(fm, dir);
    write_json(dir / "config.json", {{"command", "features"}, {"clean", o.clean}, {"adv", o.adv}, {"config", cfg.to_json()}});
    out << "features: " << fm.n_rows() << " rows x " << fm.n_features() << " " << to_string(fm.mode)
        << " features -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
    const RunConfig cfg = run_config(o);
    const fs::path dir = require_out(o, "train");
    const FeatureMatrix fm = read_feature_matrix(o.features);
    const DetectorModel model = train_detector(cfg.classifier, fm.data, fm.labels, cfg, repeat_seed(cfg, 0));
    std::error_code ec;
    fs::create_directories(dir, ec);
    save_model(model, dir / "model.json");
    write_json(dir / "config.json", {{"command", "train"}, {"features", o.features}, {"config", cfg.to_json()}});
    out << "train: " << to_string(cfg.classifier) << " on " << fm.n_rows() << " rows -> "
        << (dir / "model.json").string() << "\n";
    return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
    RunConfig cfg = run_config(o);
    const FeatureMatrix fm = read_feature_matrix(o.features);
    const DetectorModel model = load_model(o.model);
    const Eigen::VectorXd scores = predict(model, fm.data);
    const RunMetrics m = score_metrics({scores.data(), static_cast<std::size_t>(scores.size())}, fm.labels,
                                       cfg.target_tpr);
    cfg.n_repeats = 1;
    cfg.mode = fm.mode;
    cfg.k = fm.k;
    cfg.batch_size = fm.batch_size;
    cfg.classifier = std::holds_alternative<LogRegModel>(model) ? ClassifierKind::logreg : ClassifierKind::forest;
    EvalReport r;
    r.experiment = "eval";
    r.config = cfg;
    r.columns = fm.columns;
    r.profile = class_profile(fm);
    r.n_pairs = fm.n_rows() / 2;
    r.n_test_rows = fm.n_rows();
    r.distance_checksum = fm.distance_checksum;
    if (fm.provenance.contains("adversarial")) {
        const auto& a = fm.provenance["adversarial"];
        r.attack = {{"dataset", a.value("dataset", "")}, {"model", a.value("model", "")},
                    {"attack", a.value("attack", "")}, {"epsilon", a.contains("epsilon") ? a["epsilon"] : json(nullptr)}};
    }
    auto single = [](double v, const char* name) { return aggregate(std::span<const double>(&v, 1), name); };
    r.metrics = {single(m.auc, "auc"), single(m.f1, "f1"), single(m.accuracy, "acc"),
                 single(m.tnr_at_tpr, "tnr_at_tpr"), single(m.f1_best, "f1_best")};
    const fs::path dir = make_run_dir(out_root(o), "eval");
    emit_report({r}, dir);
    out << "eval: " << summary_line(r) << " -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_detect(const Options& o, std::ostream& out) {
    const RunConfig cfg = run_config(o);
    require_dumps(o);
    const ActivationDump clean = read_dump(o.clean);
    const ActivationDump adv = read_dump(o.adv);
    EvalReport r = run_detection(clean, adv, cfg);
    const fs::path dir = make_run_dir(out_root(o), "detect");
    emit_report({r}, dir);
    out << "detect: " << summary_line(r) << " (" << r.n_train_rows << " train / " << r.n_test_rows
        << " test rows) -> " << dir.string() << "\n";
    return kExitOk;
}

std::vector<NamedFeatures> feature_sets(const Options& o, const RunConfig& cfg, json& log) {
    std::vector<NamedFeatures> sets;
    for (const auto& text : o.feature_sets) {
        const auto eq = text.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--features expects NAME=DIR, got '" + text + "'");
        sets.push_back({text.substr(0, eq), read_feature_matrix(text.substr(eq + 1))});
        log.push_back({{"name", sets.back().name}, {"features", text.substr(eq + 1)}});
    }
    for (const auto& text : o.pairs) {
        const PairSpec p = parse_pair(text);
        const ActivationDump clean = read_dump(p.clean);
        const ActivationDump adv = read_dump(p.adv);
        const std::string name = attack_name(p, adv);
        // Independent subset draw per attack.
        RunConfig draw = cfg;
        draw.seed = derive_seed(cfg.seed, "attack:" + name);
        const auto ids = draw_subset(clean.n_samples(), draw);
        sets.push_back({name, build_feature_matrix(select_rows(clean, ids), select_rows(adv, ids), cfg.mode,
                                                   cfg.feature_config())});
        log.push_back({{"name", name}, {"clean", p.clean.string()}, {"adv", p.adv.string()}, {"subset_seed", draw.seed}});
    }
    return sets;
}

int cmd_transfer(const Options& o, std::ostream& out) {
    const RunConfig cfg = run_config(o);
    json log = json::array();
    const auto sets = feature_sets(o, cfg, log);
    const TransferMatrix m = run_transfer(sets, cfg);
    const fs::path dir = make_run_dir(out_root(o), "transfer");
    emit_transfer_report(m, cfg, dir);
    write_json(dir / "inputs.json", log);
    out << "transfer: " << m.attacks.size() << "x" << m.attacks.size() << " matrix -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
    RunConfig cfg = run_config(o);
    cfg.mode = FeatureMode::multilid;
    FeatureMatrix fm;
    if (!o.features.empty()) {
        fm = read_feature_matrix(o.features);
    } else {
        if (o.clean.empty() || o.adv.empty()) throw ConfigError("ablate needs --features or --clean/--adv");
        const ActivationDump clean = read_dump(o.clean);
        const ActivationDump adv = read_dump(o.adv);
        const auto ids = draw_subset(clean.n_samples(), cfg);
        fm = build_feature_matrix(select_rows(clean, ids), select_rows(adv, ids), FeatureMode::multilid,
                                  cfg.feature_config());
    }
    const auto curve = run_cumulative(fm, cfg);
    const fs::path dir = make_run_dir(out_root(o), "ablate");
    emit_cumulative_report(curve, cfg, dir);
    out << "ablate: " << curve.size() << " points, AUC " << percent(curve.front().auc) << " at 1 feature, "
        << percent(curve.back().auc) << " at " << curve.back().n_features << " -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
    const RunConfig cfg = run_config(o);
    if (o.pairs.empty()) throw ConfigError("sweep needs at least one --pair");
    std::vector<std::pair<ActivationDump, ActivationDump>> dumps;
    std::vector<PairSpec> specs;
    for (const auto& text : o.pairs) {
        specs.push_back(parse_pair(text));
        dumps.emplace_back(read_dump(specs.back().clean), read_dump(specs.back().adv));
    }
    std::vector<SweepCell> cells;
    for (std::size_t i = 0; i < dumps.size(); ++i) {
        const auto& adv = dumps[i].second;
        const std::string variant = specs[i].name.empty() ? adv.manifest.attack : specs[i].name;
        cells.push_back({adv.manifest.epsilon.value_or("0"), variant, std::cref(dumps[i].first), std::cref(dumps[i].second)});
    }
    const auto rows = run_sweep(cells, parse_int_list(o.k_list), cfg);
    const fs::path dir = make_run_dir(out_root(o), "sweep");
    emit_sweep_report(rows, cfg, dir);
    out << "sweep: " << rows.size() << " rows -> " << dir.string() << "\n";
    return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out) {
    if (o.inputs.empty()) throw ConfigError("report needs at least one --in");
    std::vector<EvalReport> reports;
    for (const auto& in : o.inputs) {
        std::ifstream f(fs::path(in) / "report.json");
        if (!f) throw DataError("missing " + (fs::path(in) / "report.json").string());
        json j;
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw DataError(in + ": " + e.what());
        }
        for (const auto& r : j) reports.push_back(report_from_json(r));
    }
    for (auto& r : reports) r.experiment = "report";
    const fs::path dir = make_run_dir(out_root(o), "report");
    emit_report(reports, dir);
    out << "report: " << reports.size() << " runs -> " << dir.string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"multilid: LID / multiLID adversarial-example detection on layer activations", "multilid"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", o.seed, "Seed for all randomness")->capture_default_str();
        sub->add_option("--out", o.out, "Output directory (reports root for report-writing commands)");
        sub->add_option("--threads", o.threads, "Worker threads (default: MULTILID_THREADS or all cores)");
    };
    auto protocol = [&](CLI::App* sub) {
        sub->add_option("--mode", o.mode, "Feature mode: lid | multilid")->capture_default_str();
        sub->add_option("--clf", o.clf, "Classifier: lr | rf")->capture_default_str();
        sub->add_option("--k", o.k, "Neighbours per query")->capture_default_str();
        sub->add_option("--batch", o.batch, "Minibatch size")->capture_default_str();
        sub->add_option("--repeats", o.repeats, "Repeated splits")->capture_default_str();
        sub->add_option("--subset", o.subset, "Sample pairs drawn per dump")->capture_default_str();
        sub->add_option("--split", o.split, "Train fraction of the pair-level split")->capture_default_str();
        sub->add_option("--trees", o.trees, "Random-forest trees")->capture_default_str();
        sub->add_option("--lambda", o.lambda, "Logistic-regression L2 strength")->capture_default_str();
        sub->add_option("--tpr", o.target_tpr, "Target TPR for the TNR metric")->capture_default_str();
    };

    auto* synth = app.add_subcommand("synth", "Generate a synthetic clean/adversarial dump pair");
    common(synth);
    synth->add_option("--m", o.m, "Intrinsic dimension")->capture_default_str();
    synth->add_option("--D", o.D, "Ambient dimension")->capture_default_str();
    synth->add_option("--n", o.n, "Samples")->capture_default_str();
    synth->add_option("--layers", o.layers, "Layers")->capture_default_str();
    synth->add_option("--noise", o.noise, "Noise std (rational, e.g. 0.3 or 8/255)")->capture_default_str();
    synth->add_flag("--match-nn", o.match_nn,
                    "Scale --noise by mean clean nearest-neighbour distance / sqrt(D)");
    synth->add_option("--batch", o.batch, "Minibatch size used by --match-nn")->capture_default_str();

    auto* features = app.add_subcommand("features", "Build a LID or multiLID feature matrix");
    common(features);
    protocol(features);
    features->add_option("--clean", o.clean, "Clean dump directory (required)");
    features->add_option("--adv", o.adv, "Adversarial dump directory (required)");
    o.subset = 2000;

    auto* train = app.add_subcommand("train", "Train a detector on a feature matrix");
    common(train);
    protocol(train);
    train->add_option("--features", o.features, "Feature directory")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a trained detector on a feature matrix");
    common(eval);
    protocol(eval);
    eval->add_option("--features", o.features, "Feature directory")->required();
    eval->add_option("--model", o.model, "model.json")->required();

    auto* detect = app.add_subcommand("detect", "Features + train + evaluate over repeated splits");
    common(detect);
    protocol(detect);
    detect->add_option("--clean", o.clean, "Clean dump directory (required)");
    detect->add_option("--adv", o.adv, "Adversarial dump directory (required)");

    auto* transfer = app.add_subcommand("transfer", "Attack-transferability matrix");
    common(transfer);
    protocol(transfer);
    transfer->add_option("--pair", o.pairs, "[name=]CLEAN_DIR,ADV_DIR (repeatable)");
    transfer->add_option("--features", o.feature_sets, "NAME=FEATURE_DIR (repeatable)");

    auto* ablate = app.add_subcommand("ablate", "Cumulative-feature ablation (RF ranking, LR evaluation)");
    common(ablate);
    protocol(ablate);
    ablate->add_option("--features", o.features, "multiLID feature directory");
    ablate->add_option("--clean", o.clean, "Clean dump directory");
    ablate->add_option("--adv", o.adv, "Adversarial dump directory");

    auto* sweep = app.add_subcommand("sweep", "k x epsilon sweep for LID+LR and multiLID+RF");
    common(sweep);
    protocol(sweep);
    sweep->add_option("--pair", o.pairs, "[variant=]CLEAN_DIR,ADV_DIR (repeatable; epsilon from manifest)")
        ->required();
    sweep->add_option("--k-list", o.k_list, "Comma-separated k values")->capture_default_str();

    auto* report = app.add_subcommand("report", "Merge report.json files into one table");
    common(report);
    report->add_option("--in", o.inputs, "Report directory containing report.json (repeatable)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return kExitUsage;
    }

    try {
        const std::string name = app.get_subcommands().front()->get_name();
        if (name == "synth") return cmd_synth(o, out);
        if (name == "features") return cmd_features(o, out);
        if (name == "train") return cmd_train(o, out);
        if (name == "eval") return cmd_eval(o, out);
        if (name == "detect") return cmd_detect(o, out);
        if (name == "transfer") return cmd_transfer(o, out);
        if (name == "ablate") return cmd_ablate(o, out);
        if (name == "sweep") return cmd_sweep(o, out);
        if (name == "report") return cmd_report(o, out);
        err << "error: unknown subcommand\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n(run with --help for usage)\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        err << "data error: " << e.what() << "\n";
        return kExitData;
    }
}

}  // namespace multilid
