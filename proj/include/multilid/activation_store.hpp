#pragma once

// On-disk activation dumps: one NPY file per layer plus `manifest.json`.
// Shared with the activation extractor, which writes the same layout.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace multilid {

/// Row-major [n_samples x dim] activations of one layer, pre-flattened.
using LayerData = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LayerMatrix {
    std::string name;
    LayerData data;
};

struct LayerFile {
    std::string file;  // relative to the manifest directory
    std::size_t rows = 0;
    std::size_t cols = 0;
};

struct Manifest {
    static constexpr int kVersion = 1;

    int version = kVersion;
    std::string dataset;
    std::string model;
    std::string attack = "clean";
    std::optional<std::string> epsilon;  // exact rational text, e.g. "8/255"
    std::string preprocessing;           // free-form, e.g. "flatten" or "avgpool+flatten"
    std::vector<std::string> layer_names;
    std::size_t n_samples = 0;
    std::string dtype = "f32";
    std::vector<LayerFile> layers;
    nlohmann::json extra = nlohmann::json::object();  // producer metadata, preserved verbatim
};

nlohmann::json manifest_to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);

struct ActivationDump {
    Manifest manifest;
    std::vector<LayerMatrix> layers;

    std::size_t n_samples() const { return manifest.n_samples; }
    std::size_t n_layers() const { return layers.size(); }

    /// Throws DataError naming the offending layer when any invariant fails:
    /// row counts, layer order, manifest shapes, finiteness, unique names.
    void validate() const;
};

bool operator==(const ActivationDump& a, const ActivationDump& b);

/// Builds a consistent manifest (file names, shapes, counts) around `layers`.
ActivationDump make_dump(std::vector<LayerMatrix> layers, Manifest meta = {});

std::filesystem::path write_dump(const ActivationDump& dump, const std::filesystem::path& dir);
ActivationDump read_dump(const std::filesystem::path& dir);

/// Parses "a/b", "a" or a decimal literal. Throws ConfigError on bad text or
/// a zero denominator.
double parse_rational(const std::string& text);

/// Shortest round-trip decimal text for a double.
std::string format_number(double value);

ActivationDump select_rows(const ActivationDump& dump, const std::vector<std::size_t>& rows);
ActivationDump scale_activations(const ActivationDump& dump, double factor);

struct SynthSpec {
    int intrinsic_dim = 4;
    int ambient_dim = 128;
    std::size_t n_samples = 2000;
    int n_layers = 4;
    double noise_scale = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Clean dump of uniform samples from the m-dimensional unit ball, embedded in
/// D dimensions through an independent random orthonormal map per layer.
/// The latent points are shared by all layers, so row i is the same point.
ActivationDump synth_clean(const SynthSpec& spec);

/// Copy of `clean` with i.i.d. N(0, scale^2) noise added to every coordinate
/// of every layer. scale == 0 returns an identical copy.
ActivationDump add_isotropic_noise(const ActivationDump& clean, double scale, std::uint64_t seed,
                                   const std::string& attack = "gaussian_noise");

/// (clean, adversarial) pair; the adversarial rows are the clean rows plus
/// isotropic noise of standard deviation spec.noise_scale.
std::pair<ActivationDump, ActivationDump> synth_manifold_pair(const SynthSpec& spec);

}  // namespace multilid
