#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "multilid/error.hpp"
#include "multilid/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace multilid {

std::string percent(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
    return buf;
}

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string join(const std::vector<std::string>& fields) {
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + csv_field(fields[i]);
    return line + "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed: " + path.string());
}

void prepare(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "plots", ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

std::string text_or(const json& j, const char* key, const std::string& fallback = "") {
    if (!j.contains(key) || j[key].is_null()) return fallback;
    return j[key].is_string() ? j[key].get<std::string>() : j[key].dump();
}

std::string pm(const MetricSummary& s) { return percent(s.mean) + " ± " + percent(s.std); }

std::string tnr_label(double target) {
    return "tnr_at_tpr" + std::to_string(static_cast<int>(std::lround(target * 100)));
}

std::string neighbor_text(int neighbor) { return neighbor == 0 ? "aggregate" : std::to_string(neighbor); }

std::string config_lines(const RunConfig& c) {
    std::ostringstream md;
    md << "- mode: " << to_string(c.mode) << ", classifier: " << to_string(c.classifier) << "\n"
       << "- batch size: " << c.batch_size << ", k: " << c.k << "\n"
       << "- split ratio: " << format_number(c.split_ratio) << ", repeats: " << c.n_repeats
       << ", subset: " << c.subset_size << ", seed: " << c.seed << "\n"
       << "- metrics: percent, mean ± std (population) over repeats; F1/ACC at threshold 0.5\n";
    return md.str();
}

}  // namespace

fs::path make_run_dir(const fs::path& root, const std::string& experiment) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &utc);
    fs::path dir = root / experiment / stamp;
    for (int n = 1; fs::exists(dir); ++n) dir = root / experiment / (std::string(stamp) + "-" + std::to_string(n));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

void emit_report(const std::vector<EvalReport>& reports, const fs::path& dir) {
    if (reports.empty()) throw ConfigError("no reports to emit");
    prepare(dir);
    const std::string tnr = tnr_label(reports.front().config.target_tpr);

    std::string csv = join({"experiment", "dataset", "model", "attack", "epsilon", "mode", "classifier", "k",
                            "batch_size", "n_repeats", "seed", "n_pairs", "n_train_rows", "n_test_rows", "auc_mean",
                            "auc_std", "f1_mean", "f1_std", "acc_mean", "acc_std", tnr + "_mean", tnr + "_std",
                            "f1_best_mean", "f1_best_std"});
    std::ostringstream md;
    md << "# " << reports.front().experiment << "\n\n" << config_lines(reports.front().config) << "\n";
    md << "| attack | epsilon | features | classifier | AUC | F1 | ACC | " << tnr << " |\n"
       << "|---|---|---|---|---|---|---|---|\n";
    json runs = json::array();
    json full = json::array();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        const auto& c = r.config;
        std::vector<std::string> row = {r.experiment,
                                        text_or(r.attack, "dataset"),
                                        text_or(r.attack, "model"),
                                        text_or(r.attack, "attack"),
                                        text_or(r.attack, "epsilon"),
                                        to_string(c.mode),
                                        to_string(c.classifier),
                                        std::to_string(c.k),
                                        std::to_string(c.batch_size),
                                        std::to_string(c.n_repeats),
                                        std::to_string(c.seed),
                                        std::to_string(r.n_pairs),
                                        std::to_string(r.n_train_rows),
                                        std::to_string(r.n_test_rows)};
        for (const char* name : {"auc", "f1", "acc", "tnr_at_tpr", "f1_best"}) {
            row.push_back(percent(r.metric(name).mean));
            row.push_back(percent(r.metric(name).std));
        }
        csv += join(row);
        md << "| " << text_or(r.attack, "attack", "-") << " | " << text_or(r.attack, "epsilon", "-") << " | "
           << to_string(c.mode) << " | " << to_string(c.classifier) << " | " << pm(r.metric("auc")) << " | "
           << pm(r.metric("f1")) << " | " << pm(r.metric("acc")) << " | " << pm(r.metric("tnr_at_tpr")) << " |\n";

        runs.push_back({{"attack", r.attack},
                        {"config", c.to_json()},
                        {"split",
                         {{"pairs", r.n_pairs},
                          {"train_rows", r.n_train_rows},
                          {"test_rows", r.n_test_rows},
                          {"test_pairs", r.n_test_rows / 2}}},
                        {"distance_checksum", r.distance_checksum}});
        full.push_back(report_to_json(r));

        const std::string tag = std::to_string(i);
        std::string profile = join({"layer", "neighbor", "clean_mean", "clean_std", "adv_mean", "adv_std"});
        for (std::size_t f = 0; f < r.columns.size() && f < r.profile.clean_mean.size(); ++f)
            profile += join({r.columns[f].layer, neighbor_text(r.columns[f].neighbor),
                             format_number(r.profile.clean_mean[f]), format_number(r.profile.clean_std[f]),
                             format_number(r.profile.adv_mean[f]), format_number(r.profile.adv_std[f])});
        write_text(dir / "plots" / ("profiles_" + tag + ".csv"), profile);
        if (!r.importances.empty()) {
            std::string imp = join({"layer", "neighbor", "importance"});
            for (std::size_t f = 0; f < r.columns.size(); ++f)
                imp += join({r.columns[f].layer, neighbor_text(r.columns[f].neighbor), format_number(r.importances[f])});
            write_text(dir / "plots" / ("importances_" + tag + ".csv"), imp);
        }
        if (!r.cumulative.empty()) {
            std::string cum = join({"n_features", "auc"});
            for (const auto& p : r.cumulative) cum += join({std::to_string(p.n_features), format_number(p.auc)});
            write_text(dir / "plots" / ("cumulative_" + tag + ".csv"), cum);
        }
    }
    write_text(dir / "table.csv", csv);
    write_text(dir / "table.md", md.str());
    write_text(dir / "config.json",
               json({{"experiment", reports.front().experiment}, {"runs", runs}}).dump(2) + "\n");
    write_text(dir / "report.json", full.dump(2) + "\n");
}

void emit_transfer_report(const TransferMatrix& matrix, const RunConfig& cfg, const fs::path& dir) {
    if (matrix.attacks.empty()) throw ConfigError("empty transfer matrix");
    prepare(dir);
    std::string csv = join({"train_attack", "test_attack", "auc_mean", "auc_std", "acc_mean", "acc_std"});
    std::string heat = join({"train_attack", "test_attack", "auc", "acc"});
    std::ostringstream md;
    md << "# transfer\n\n" << config_lines(cfg) << "\nRows: detector trained on; columns: evaluated on.\n\n";
    for (const char* metric : {"AUC", "ACC"}) {
        md << "\n**" << metric << "**\n\n| train \\ test |";
        for (const auto& a : matrix.attacks) md << " " << a << " |";
        md << "\n|---|";
        for (std::size_t i = 0; i < matrix.attacks.size(); ++i) md << "---|";
        md << "\n";
        for (std::size_t a = 0; a < matrix.attacks.size(); ++a) {
            md << "| " << matrix.attacks[a] << " |";
            for (std::size_t b = 0; b < matrix.attacks.size(); ++b) {
                const auto& cell = matrix.cells[a][b];
                md << " " << pm(std::string(metric) == "AUC" ? cell.auc : cell.accuracy) << " |";
            }
            md << "\n";
        }
    }
    for (std::size_t a = 0; a < matrix.attacks.size(); ++a) {
        for (std::size_t b = 0; b < matrix.attacks.size(); ++b) {
            const auto& cell = matrix.cells[a][b];
            csv += join({matrix.attacks[a], matrix.attacks[b], percent(cell.auc.mean), percent(cell.auc.std),
                         percent(cell.accuracy.mean), percent(cell.accuracy.std)});
            heat += join({matrix.attacks[a], matrix.attacks[b], format_number(cell.auc.mean),
                          format_number(cell.accuracy.mean)});
        }
    }
    write_text(dir / "table.csv", csv);
    write_text(dir / "table.md", md.str());
    write_text(dir / "plots" / "transfer.csv", heat);
    write_text(dir / "config.json",
               json({{"experiment", "transfer"}, {"config", cfg.to_json()}, {"attacks", matrix.attacks}}).dump(2) +
                   "\n");
}

void emit_sweep_report(const std::vector<SweepRow>& rows, const RunConfig& cfg, const fs::path& dir) {
    if (rows.empty()) throw ConfigError("no sweep rows to emit");
    prepare(dir);
    std::string csv = join({"epsilon", "variant", "k", "pipeline", "auc_mean", "auc_std"});
    std::string plot = join({"epsilon", "epsilon_value", "variant", "k", "pipeline", "auc"});
    std::ostringstream md;
    md << "# sweep\n\n" << config_lines(cfg) << "\n| epsilon | variant | k | pipeline | AUC |\n|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        csv += join({r.epsilon, r.variant, std::to_string(r.k), r.pipeline, percent(r.auc.mean), percent(r.auc.std)});
        plot += join({r.epsilon, format_number(parse_rational(r.epsilon)), r.variant, std::to_string(r.k), r.pipeline,
                      format_number(r.auc.mean)});
        md << "| " << r.epsilon << " | " << r.variant << " | " << r.k << " | " << r.pipeline << " | " << pm(r.auc)
           << " |\n";
    }
    write_text(dir / "table.csv", csv);
    write_text(dir / "table.md", md.str());
    write_text(dir / "plots" / "sweep.csv", plot);
    write_text(dir / "config.json", json({{"experiment", "sweep"}, {"config", cfg.to_json()}}).dump(2) + "\n");
}

void emit_cumulative_report(const std::vector<CumulativePoint>& curve, const RunConfig& cfg, const fs::path& dir) {
    if (curve.empty()) throw ConfigError("empty cumulative curve");
    prepare(dir);
    std::string csv = join({"n_features", "auc"});
    std::string plot = join({"n_features", "auc"});
    std::ostringstream md;
    md << "# ablate\n\n" << config_lines(cfg)
       << "\nLR test AUC on the top-m columns ranked by random-forest importance.\n\n| features | AUC |\n|---|---|\n";
    for (const auto& p : curve) {
        csv += join({std::to_string(p.n_features), percent(p.auc)});
        plot += join({std::to_string(p.n_features), format_number(p.auc)});
        md << "| " << p.n_features << " | " << percent(p.auc) << " |\n";
    }
    write_text(dir / "table.csv", csv);
    write_text(dir / "table.md", md.str());
    write_text(dir / "plots" / "cumulative.csv", plot);
    write_text(dir / "config.json", json({{"experiment", "ablate"}, {"config", cfg.to_json()}}).dump(2) + "\n");
}

}  // namespace multilid
