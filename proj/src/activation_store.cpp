#include "multilid/activation_store.hpp"

#include <Eigen/QR>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include "multilid/error.hpp"
#include "multilid/npy.hpp"
#include "multilid/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace multilid {

json manifest_to_json(const Manifest& m) {
    json layers = json::array();
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        layers.push_back({{"name", i < m.layer_names.size() ? m.layer_names[i] : ""},
                          {"file", m.layers[i].file},
                          {"shape", {m.layers[i].rows, m.layers[i].cols}}});
    }
    json j = {{"version", m.version},
              {"dataset", m.dataset},
              {"model", m.model},
              {"attack", m.attack},
              {"epsilon", m.epsilon ? json(*m.epsilon) : json(nullptr)},
              {"preprocessing", m.preprocessing},
              {"layer_names", m.layer_names},
              {"n_samples", m.n_samples},
              {"dtype", m.dtype},
              {"layers", layers}};
    if (!m.extra.empty()) j["extra"] = m.extra;
    return j;
}

Manifest manifest_from_json(const json& j) {
    try {
        Manifest m;
        m.version = j.at("version").get<int>();
        if (m.version != Manifest::kVersion)
            throw DataError("unsupported manifest version " + std::to_string(m.version));
        m.dataset = j.value("dataset", "");
        m.model = j.value("model", "");
        m.attack = j.value("attack", "clean");
        if (j.contains("epsilon") && !j["epsilon"].is_null()) {
            const auto& e = j["epsilon"];
            m.epsilon = e.is_string() ? e.get<std::string>() : format_number(e.get<double>());
        }
        m.preprocessing = j.value("preprocessing", "");
        m.layer_names = j.at("layer_names").get<std::vector<std::string>>();
        m.n_samples = j.at("n_samples").get<std::size_t>();
        m.dtype = j.at("dtype").get<std::string>();
        for (const auto& l : j.at("layers")) {
            const auto shape = l.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2)
                throw DataError("layer '" + l.value("name", "") + "': shape must have 2 entries");
            if (l.contains("name") && l["name"].get<std::string>() != m.layer_names.at(m.layers.size()))
                throw DataError("layer entry '" + l["name"].get<std::string>() +
                                "' out of order with layer_names");
            m.layers.push_back({l.at("file").get<std::string>(), shape[0], shape[1]});
        }
        if (j.contains("extra")) m.extra = j["extra"];
        return m;
    } catch (const json::exception& e) {
        throw DataError(std::string("invalid manifest: ") + e.what());
    } catch (const std::out_of_range&) {
        throw DataError("invalid manifest: more layer entries than layer_names");
    }
}

void ActivationDump::validate() const {
    const Manifest& m = manifest;
    if (m.dtype != "f32") throw DataError("unsupported dtype '" + m.dtype + "' (expected f32)");
    if (m.layer_names.empty()) throw DataError("manifest has no layers");
    if (std::set<std::string>(m.layer_names.begin(), m.layer_names.end()).size() != m.layer_names.size())
        throw DataError("duplicate layer names in manifest");
    if (m.layers.size() != m.layer_names.size() || layers.size() != m.layer_names.size())
        throw DataError("layer count mismatch: manifest lists " + std::to_string(m.layer_names.size()) +
                        ", dump holds " + std::to_string(layers.size()));
    if (m.n_samples == 0) throw DataError("dump has no samples");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& layer = layers[i];
        const auto& name = m.layer_names[i];
        if (layer.name != name)
            throw DataError("layer " + std::to_string(i) + " is '" + layer.name + "', manifest expects '" +
                            name + "'");
        const auto rows = static_cast<std::size_t>(layer.data.rows());
        const auto cols = static_cast<std::size_t>(layer.data.cols());
        if (rows != m.n_samples)
            throw DataError("layer '" + name + "' has " + std::to_string(rows) + " rows, expected " +
                            std::to_string(m.n_samples));
        if (cols == 0) throw DataError("layer '" + name + "' has zero width");
        if (m.layers[i].rows != rows || m.layers[i].cols != cols)
            throw DataError("layer '" + name + "' manifest shape disagrees with data");
        if (!layer.data.allFinite()) throw DataError("layer '" + name + "' contains non-finite values");
    }
}

bool operator==(const ActivationDump& a, const ActivationDump& b) {
    if (manifest_to_json(a.manifest) != manifest_to_json(b.manifest)) return false;
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        const auto& x = a.layers[i];
        const auto& y = b.layers[i];
        if (x.name != y.name || x.data.rows() != y.data.rows() || x.data.cols() != y.data.cols())
            return false;
        if (std::memcmp(x.data.data(), y.data.data(), sizeof(float) * static_cast<std::size_t>(x.data.size())))
            return false;
    }
    return true;
}

ActivationDump make_dump(std::vector<LayerMatrix> layers, Manifest meta) {
    meta.layer_names.clear();
    meta.layers.clear();
    meta.n_samples = layers.empty() ? 0 : static_cast<std::size_t>(layers.front().data.rows());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        char file[32];
        std::snprintf(file, sizeof file, "layer_%03zu.npy", i);
        meta.layer_names.push_back(layers[i].name);
        meta.layers.push_back({file, static_cast<std::size_t>(layers[i].data.rows()),
                               static_cast<std::size_t>(layers[i].data.cols())});
    }
    return ActivationDump{std::move(meta), std::move(layers)};
}

fs::path write_dump(const ActivationDump& dump, const fs::path& dir) {
    dump.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    for (std::size_t i = 0; i < dump.layers.size(); ++i) {
        const auto& data = dump.layers[i].data;
        npy::write(dir / dump.manifest.layers[i].file,
                   std::span<const float>(data.data(), static_cast<std::size_t>(data.size())),
                   {static_cast<std::size_t>(data.rows()), static_cast<std::size_t>(data.cols())});
    }
    const fs::path manifest_path = dir / "manifest.json";
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + manifest_path.string());
    out << manifest_to_json(dump.manifest).dump(2) << '\n';
    if (!out) throw DataError("write failed: " + manifest_path.string());
    return manifest_path;
}

ActivationDump read_dump(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw DataError("missing manifest: " + manifest_path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(manifest_path.string() + ": " + e.what());
    }
    ActivationDump dump;
    dump.manifest = manifest_from_json(j);
    const auto& m = dump.manifest;
    if (m.dtype != "f32") throw DataError("unsupported dtype '" + m.dtype + "' (expected f32)");
    if (m.layers.size() != m.layer_names.size())
        throw DataError("manifest lists " + std::to_string(m.layer_names.size()) + " layer names but " +
                        std::to_string(m.layers.size()) + " layer files");
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& name = m.layer_names[i];
        const fs::path file = dir / m.layers[i].file;
        if (!fs::exists(file)) throw DataError("layer '" + name + "': missing file " + file.string());
        npy::Header header;
        std::vector<float> values;
        try {
            values = npy::read_f32(file, header);
        } catch (const DataError& e) {
            throw DataError("layer '" + name + "': " + e.what());
        }
        if (header.shape.size() != 2 || header.shape[0] != m.layers[i].rows ||
            header.shape[1] != m.layers[i].cols) {
            std::string got;
            for (auto d : header.shape) got += (got.empty() ? "" : ", ") + std::to_string(d);
            throw DataError("layer '" + name + "': shape mismatch, manifest [" + std::to_string(m.layers[i].rows) +
                            ", " + std::to_string(m.layers[i].cols) + "] vs file [" + got + "]");
        }
        LayerMatrix layer{name, LayerData(static_cast<Eigen::Index>(header.shape[0]),
                                          static_cast<Eigen::Index>(header.shape[1]))};
        std::copy(values.begin(), values.end(), layer.data.data());
        dump.layers.push_back(std::move(layer));
    }
    dump.validate();
    return dump;
}

double parse_rational(const std::string& text) {
    auto parse = [&](std::string_view s) {
        double v = 0.0;
        const auto* end = s.data() + s.size();
        auto [ptr, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc() || ptr != end || s.empty())
            throw ConfigError("not a rational number: '" + text + "'");
        return v;
    };
    const auto slash = text.find('/');
    if (slash == std::string::npos) return parse(text);
    const double num = parse(std::string_view(text).substr(0, slash));
    const double den = parse(std::string_view(text).substr(slash + 1));
    if (den == 0.0) throw ConfigError("zero denominator in '" + text + "'");
    return num / den;
}

std::string format_number(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
}

ActivationDump select_rows(const ActivationDump& dump, const std::vector<std::size_t>& rows) {
    std::vector<LayerMatrix> layers;
    for (const auto& layer : dump.layers) {
        LayerData sub(static_cast<Eigen::Index>(rows.size()), layer.data.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] >= static_cast<std::size_t>(layer.data.rows()))
                throw DataError("row index " + std::to_string(rows[r]) + " out of range");
            sub.row(static_cast<Eigen::Index>(r)) = layer.data.row(static_cast<Eigen::Index>(rows[r]));
        }
        layers.push_back({layer.name, std::move(sub)});
    }
    return make_dump(std::move(layers), dump.manifest);
}

ActivationDump scale_activations(const ActivationDump& dump, double factor) {
    ActivationDump out = dump;
    for (auto& layer : out.layers)
        layer.data = (layer.data.cast<double>() * factor).cast<float>();
    return out;
}

void SynthSpec::validate() const {
    if (intrinsic_dim < 1) throw ConfigError("intrinsic dimension must be >= 1");
    if (ambient_dim < intrinsic_dim) throw ConfigError("intrinsic dimension m must be <= ambient dimension D");
    if (n_samples < 2) throw ConfigError("need at least 2 samples");
    if (n_layers < 1) throw ConfigError("need at least 1 layer");
    if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) throw ConfigError("noise scale must be >= 0");
}

ActivationDump synth_clean(const SynthSpec& spec) {
    spec.validate();
    const auto n = static_cast<Eigen::Index>(spec.n_samples);
    const Eigen::Index m = spec.intrinsic_dim;
    const Eigen::Index D = spec.ambient_dim;

    // Uniform in the unit m-ball: Gaussian direction, radius u^(1/m).
    std::mt19937_64 rng(derive_seed(spec.seed, "synth-points"));
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> unif;
    Eigen::MatrixXd latent(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
        double norm = 0.0;
        do {
            for (Eigen::Index c = 0; c < m; ++c) latent(i, c) = gauss(rng);
            norm = latent.row(i).norm();
        } while (norm == 0.0);
        latent.row(i) *= std::pow(unif(rng), 1.0 / static_cast<double>(m)) / norm;
    }

    std::vector<LayerMatrix> layers;
    for (int l = 0; l < spec.n_layers; ++l) {
        std::mt19937_64 map_rng(derive_seed(spec.seed, "synth-map", static_cast<std::uint64_t>(l)));
        Eigen::MatrixXd g(D, m);
        for (Eigen::Index r = 0; r < D; ++r)
            for (Eigen::Index c = 0; c < m; ++c) g(r, c) = gauss(map_rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        const Eigen::MatrixXd basis = qr.householderQ() * Eigen::MatrixXd::Identity(D, m);
        layers.push_back({"layer" + std::to_string(l), (latent * basis.transpose()).cast<float>()});
    }

    Manifest meta;
    meta.dataset = "synthetic-ball";
    meta.model = "orthonormal-embedding";
    meta.preprocessing = "none";
    meta.extra = {{"synth",
                   {{"intrinsic_dim", spec.intrinsic_dim},
                    {"ambient_dim", spec.ambient_dim},
                    {"n_layers", spec.n_layers},
                    {"seed", spec.seed}}}};
    return make_dump(std::move(layers), std::move(meta));
}

ActivationDump add_isotropic_noise(const ActivationDump& clean, double scale, std::uint64_t seed,
                                   const std::string& attack) {
    if (!(scale >= 0.0) || !std::isfinite(scale)) throw ConfigError("noise scale must be >= 0");
    ActivationDump adv = clean;
    if (scale > 0.0) {
        for (std::size_t l = 0; l < adv.layers.size(); ++l) {
            std::mt19937_64 rng(derive_seed(seed, "synth-noise", l));
            std::normal_distribution<double> gauss(0.0, scale);
            auto& data = adv.layers[l].data;
            for (Eigen::Index i = 0; i < data.size(); ++i)
                data.data()[i] = static_cast<float>(static_cast<double>(data.data()[i]) + gauss(rng));
        }
    }
    adv.manifest.attack = attack;
    adv.manifest.epsilon = format_number(scale);
    adv.manifest.extra["noise"] = {{"scale", scale}, {"seed", seed}};
    return adv;
}

std::pair<ActivationDump, ActivationDump> synth_manifold_pair(const SynthSpec& spec) {
    ActivationDump clean = synth_clean(spec);
    ActivationDump adv = add_isotropic_noise(clean, spec.noise_scale, derive_seed(spec.seed, "synth-adv"));
    return {std::move(clean), std::move(adv)};
}

}  // namespace multilid
