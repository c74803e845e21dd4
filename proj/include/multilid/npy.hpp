#pragma once

// Minimal NPY (NumPy array file) support: little-endian float32 / float64,
// C order, any rank. Writes format version 1.0; reads 1.0, 2.0 and 3.0.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace multilid::npy {

enum class DType { f32, f64 };

struct Header {
    DType dtype = DType::f32;
    bool fortran_order = false;
    std::vector<std::size_t> shape;

    std::size_t element_count() const;
};

/// Complete preamble (magic, version, header length, padded dict) for a
/// version 1.0 file. Total length is a multiple of 64 bytes.
std::string encode_header(const Header& header);

/// Parses the preamble at the start of `bytes`; sets `data_offset` to the
/// first payload byte. Throws DataError on malformed input.
Header decode_header(std::string_view bytes, std::size_t& data_offset);

void write(const std::filesystem::path& path, std::span<const float> data,
           const std::vector<std::size_t>& shape);
void write(const std::filesystem::path& path, std::span<const double> data,
           const std::vector<std::size_t>& shape);

Header read_header(const std::filesystem::path& path);

/// Reads a `<f4` array. Throws DataError for other dtypes, Fortran order or
/// truncated payloads.
std::vector<float> read_f32(const std::filesystem::path& path, Header& header);
std::vector<double> read_f64(const std::filesystem::path& path, Header& header);

}  // namespace multilid::npy
