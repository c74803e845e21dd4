#include "multilid/npy.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "multilid/error.hpp"

namespace multilid::npy {
namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

template <class T>
void to_little_endian(std::span<T> values) {
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& v : values) {
            unsigned char bytes[sizeof(T)];
            std::memcpy(bytes, &v, sizeof(T));
            for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
                std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
            std::memcpy(&v, bytes, sizeof(T));
        }
    }
}

std::string descr(DType t) { return t == DType::f32 ? "<f4" : "<f8"; }

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

// Cursor over the Python-literal header dict.
struct DictParser {
    std::string_view s;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t' || s[pos] == '\n')) ++pos;
    }
    bool consume(char c) {
        skip_ws();
        if (pos < s.size() && s[pos] == c) {
            ++pos;
            return true;
        }
        return false;
    }
    void expect(char c) {
        if (!consume(c)) fail(std::string("expected '") + c + "'");
    }
    [[noreturn]] void fail(const std::string& what) const {
        throw DataError("malformed NPY header (" + what + "): " + std::string(s));
    }
    std::string string_literal() {
        skip_ws();
        if (pos >= s.size() || (s[pos] != '\'' && s[pos] != '"')) fail("expected string");
        const char quote = s[pos++];
        const auto end = s.find(quote, pos);
        if (end == std::string_view::npos) fail("unterminated string");
        std::string out(s.substr(pos, end - pos));
        pos = end + 1;
        return out;
    }
    bool boolean() {
        skip_ws();
        if (s.substr(pos, 4) == "True") {
            pos += 4;
            return true;
        }
        if (s.substr(pos, 5) == "False") {
            pos += 5;
            return false;
        }
        fail("expected True/False");
    }
    std::vector<std::size_t> shape_tuple() {
        expect('(');
        std::vector<std::size_t> dims;
        while (!consume(')')) {
            skip_ws();
            std::size_t value = 0;
            const std::size_t start = pos;
            while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9')
                value = value * 10 + static_cast<std::size_t>(s[pos++] - '0');
            if (pos == start) fail("expected integer in shape");
            skip_ws();
            if (pos < s.size() && s[pos] == 'L') ++pos;
            dims.push_back(value);
            if (!consume(',')) {
                expect(')');
                break;
            }
        }
        return dims;
    }
};

template <class T>
void write_impl(const std::filesystem::path& path, std::span<const T> data,
                const std::vector<std::size_t>& shape, DType dtype) {
    Header header{dtype, false, shape};
    if (header.element_count() != data.size())
        throw DataError("NPY write " + path.string() + ": shape does not match element count");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    const std::string preamble = encode_header(header);
    out.write(preamble.data(), static_cast<std::streamsize>(preamble.size()));
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data.data()),
                  static_cast<std::streamsize>(data.size_bytes()));
    } else {
        std::vector<T> copy(data.begin(), data.end());
        to_little_endian(std::span<T>(copy));
        out.write(reinterpret_cast<const char*>(copy.data()),
                  static_cast<std::streamsize>(copy.size() * sizeof(T)));
    }
    if (!out) throw DataError("write failed: " + path.string());
}

template <class T>
std::vector<T> read_impl(const std::filesystem::path& path, Header& header, DType want) {
    const std::string bytes = read_file(path);
    std::size_t offset = 0;
    try {
        header = decode_header(bytes, offset);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (header.dtype != want)
        throw DataError(path.string() + ": unsupported dtype " + descr(header.dtype) +
                        ", expected " + descr(want));
    if (header.fortran_order)
        throw DataError(path.string() + ": fortran_order arrays are not supported");
    const std::size_t count = header.element_count();
    if (bytes.size() - offset != count * sizeof(T))
        throw DataError(path.string() + ": payload holds " + std::to_string(bytes.size() - offset) +
                        " bytes, header declares " + std::to_string(count * sizeof(T)));
    std::vector<T> values(count);
    std::memcpy(values.data(), bytes.data() + offset, count * sizeof(T));
    to_little_endian(std::span<T>(values));
    return values;
}

}  // namespace

std::size_t Header::element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string encode_header(const Header& header) {
    std::string dict = "{'descr': '" + descr(header.dtype) + "', 'fortran_order': " +
                       (header.fortran_order ? "True" : "False") + ", 'shape': (";
    for (std::size_t i = 0; i < header.shape.size(); ++i) {
        if (i) dict += ", ";
        dict += std::to_string(header.shape[i]);
    }
    if (header.shape.size() == 1) dict += ",";
    dict += "), }";

    // magic(6) + version(2) + length(2) + dict + padding + '\n'
    const std::size_t unpadded = kMagicLen + 4 + dict.size() + 1;
    const std::size_t total = (unpadded + 63) / 64 * 64;
    dict.append(total - unpadded, ' ');
    dict += '\n';
    if (dict.size() > 0xFFFF) throw DataError("NPY header too long for format 1.0");

    std::string out(kMagic, kMagicLen);
    out += '\x01';
    out += '\x00';
    const auto len = static_cast<std::uint16_t>(dict.size());
    out += static_cast<char>(len & 0xFF);
    out += static_cast<char>(len >> 8);
    out += dict;
    return out;
}

Header decode_header(std::string_view bytes, std::size_t& data_offset) {
    if (bytes.size() < kMagicLen + 4 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen))
        throw DataError("not an NPY file (bad magic)");
    const auto major = static_cast<unsigned char>(bytes[6]);
    std::size_t header_len = 0;
    std::size_t prefix = 0;
    auto byte = [&](std::size_t i) { return static_cast<std::size_t>(static_cast<unsigned char>(bytes[i])); };
    if (major == 1) {
        header_len = byte(8) | (byte(9) << 8);
        prefix = 10;
    } else if (major == 2 || major == 3) {
        if (bytes.size() < 12) throw DataError("truncated NPY preamble");
        header_len = byte(8) | (byte(9) << 8) | (byte(10) << 16) | (byte(11) << 24);
        prefix = 12;
    } else {
        throw DataError("unsupported NPY version " + std::to_string(major));
    }
    if (bytes.size() < prefix + header_len) throw DataError("truncated NPY header");
    data_offset = prefix + header_len;

    DictParser p{bytes.substr(prefix, header_len)};
    Header h;
    bool have_descr = false, have_order = false, have_shape = false;
    p.expect('{');
    while (!p.consume('}')) {
        const std::string key = p.string_literal();
        p.expect(':');
        if (key == "descr") {
            const std::string d = p.string_literal();
            if (d == "<f4" || (std::endian::native == std::endian::little && d == "=f4"))
                h.dtype = DType::f32;
            else if (d == "<f8" || (std::endian::native == std::endian::little && d == "=f8"))
                h.dtype = DType::f64;
            else
                throw DataError("unsupported NPY dtype '" + d + "'");
            have_descr = true;
        } else if (key == "fortran_order") {
            h.fortran_order = p.boolean();
            have_order = true;
        } else if (key == "shape") {
            h.shape = p.shape_tuple();
            have_shape = true;
        } else {
            p.fail("unknown key '" + key + "'");
        }
        if (!p.consume(',')) {
            p.expect('}');
            break;
        }
    }
    if (!have_descr || !have_order || !have_shape) p.fail("missing key");
    return h;
}

void write(const std::filesystem::path& path, std::span<const float> data,
           const std::vector<std::size_t>& shape) {
    write_impl(path, data, shape, DType::f32);
}

void write(const std::filesystem::path& path, std::span<const double> data,
           const std::vector<std::size_t>& shape) {
    write_impl(path, data, shape, DType::f64);
}

Header read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string head(12, '\0');
    in.read(head.data(), 12);
    head.resize(static_cast<std::size_t>(in.gcount()));
    std::size_t need = 0;
    if (head.size() >= 10 && head.substr(0, kMagicLen) == std::string_view(kMagic, kMagicLen)) {
        const auto b = [&](std::size_t i) { return static_cast<std::size_t>(static_cast<unsigned char>(head[i])); };
        need = head[6] == 1 ? 10 + (b(8) | (b(9) << 8))
                            : 12 + (b(8) | (b(9) << 8) | (b(10) << 16) | (b(11) << 24));
    }
    std::string all = head;
    if (need > all.size()) {
        std::string rest(need - all.size(), '\0');
        in.read(rest.data(), static_cast<std::streamsize>(rest.size()));
        rest.resize(static_cast<std::size_t>(in.gcount()));
        all += rest;
    }
    std::size_t offset = 0;
    try {
        return decode_header(all, offset);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::vector<float> read_f32(const std::filesystem::path& path, Header& header) {
    return read_impl<float>(path, header, DType::f32);
}

std::vector<double> read_f64(const std::filesystem::path& path, Header& header) {
    return read_impl<double>(path, header, DType::f64);
}

}  // namespace multilid::npy
