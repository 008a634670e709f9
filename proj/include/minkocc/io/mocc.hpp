#pragma once

#include "minkocc/ad/tape.hpp"
#include "minkocc/sparse/coordinate.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// MOCC container: a file is a sequence of self-describing array records.
//
//   record  := "MOCC" | u16 version | u8 dtype | u8 rank | u64 dim[rank]
//              | payload | u64 checksum
//   dtype   := 1 f32 | 2 f64 | 3 i32
//   payload := little-endian values, row-major
//   checksum:= FNV-1a 64 over the payload bytes
//
// A sparse tensor is three consecutive records: i32 coordinates (N×4, batch,
// x, y, z), features (N×d), and a rank-1 i32 record holding the stride.

namespace minkocc::io {

static_assert(std::endian::native == std::endian::little, "MOCC writer assumes a little-endian host");

inline constexpr std::uint16_t kMoccVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i32 = 3 };

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::i32: return 4;
    }
    throw std::invalid_argument("unknown dtype");
}

/// Raised for any malformed, truncated, or mismatched container. The message
/// names the offending file.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Array {
    DType dtype = DType::f64;
    std::vector<std::uint64_t> shape;
    std::vector<std::byte> bytes;

    std::size_t count() const {
        std::size_t n = 1;
        for (auto d : shape) n *= static_cast<std::size_t>(d);
        return n;
    }
};

template <typename T>
constexpr DType dtype_of() {
    if constexpr (std::is_same_v<T, float>) return DType::f32;
    else if constexpr (std::is_same_v<T, double>) return DType::f64;
    else if constexpr (std::is_same_v<T, std::int32_t>) return DType::i32;
    else static_assert(sizeof(T) == 0, "unsupported MOCC element type");
}

template <typename T>
Array make_array(std::span<const T> values, std::vector<std::uint64_t> shape) {
    Array a;
    a.dtype = dtype_of<T>();
    a.shape = std::move(shape);
    if (a.count() != values.size()) throw std::invalid_argument("make_array: shape does not match value count");
    a.bytes.resize(values.size_bytes());
    if (!values.empty()) std::memcpy(a.bytes.data(), values.data(), values.size_bytes());
    return a;
}

inline Array make_array(const Matrix& m) {
    return make_array<double>(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                              {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
}

template <typename T>
std::vector<T> values(const Array& a) {
    if (a.dtype != dtype_of<T>()) throw FormatError("MOCC array has unexpected dtype");
    std::vector<T> out(a.count());
    if (!out.empty()) std::memcpy(out.data(), a.bytes.data(), a.bytes.size());
    return out;
}

inline Matrix to_matrix(const Array& a) {
    if (a.dtype != DType::f64 || a.shape.size() != 2) throw FormatError("MOCC array is not a 2-D f64 matrix");
    Matrix m(static_cast<Index>(a.shape[0]), static_cast<Index>(a.shape[1]));
    if (m.size() != 0) std::memcpy(m.data(), a.bytes.data(), a.bytes.size());
    return m;
}

inline std::uint64_t fnv1a64(std::span<const std::byte> data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::byte b : data) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {
template <typename T>
void put(std::vector<std::byte>& out, T v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}
}  // namespace detail

inline std::vector<std::byte> encode(std::span<const Array> arrays) {
    std::vector<std::byte> out;
    for (const auto& a : arrays) {
        if (a.shape.size() > 255) throw std::invalid_argument("MOCC rank too large");
        if (a.bytes.size() != a.count() * dtype_size(a.dtype)) throw std::invalid_argument("MOCC payload size mismatch");
        const char magic[4] = {'M', 'O', 'C', 'C'};
        for (char c : magic) out.push_back(static_cast<std::byte>(c));
        detail::put<std::uint16_t>(out, kMoccVersion);
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(a.dtype));
        detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(a.shape.size()));
        for (auto d : a.shape) detail::put<std::uint64_t>(out, d);
        out.insert(out.end(), a.bytes.begin(), a.bytes.end());
        detail::put<std::uint64_t>(out, fnv1a64(a.bytes));
    }
    return out;
}

inline std::vector<Array> decode(std::span<const std::byte> data, const std::string& name) {
    std::vector<Array> out;
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > data.size()) throw FormatError(name + ": truncated MOCC record");
    };
    auto take = [&]<typename T>(T& v) {
        need(sizeof(T));
        std::memcpy(&v, data.data() + pos, sizeof(T));
        pos += sizeof(T);
    };
    while (pos < data.size()) {
        need(4);
        if (std::memcmp(data.data() + pos, "MOCC", 4) != 0) throw FormatError(name + ": bad MOCC magic");
        pos += 4;
        std::uint16_t version = 0;
        std::uint8_t dtype = 0, rank = 0;
        take(version);
        if (version != kMoccVersion)
            throw FormatError(name + ": unsupported MOCC version " + std::to_string(version));
        take(dtype);
        take(rank);
        if (dtype < 1 || dtype > 3) throw FormatError(name + ": unknown dtype code " + std::to_string(dtype));
        Array a;
        a.dtype = static_cast<DType>(dtype);
        a.shape.resize(rank);
        for (auto& d : a.shape) take(d);
        const std::size_t nbytes = a.count() * dtype_size(a.dtype);
        need(nbytes);
        a.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.begin() + static_cast<std::ptrdiff_t>(pos + nbytes));
        pos += nbytes;
        std::uint64_t checksum = 0;
        take(checksum);
        if (checksum != fnv1a64(a.bytes)) throw FormatError(name + ": checksum mismatch");
        out.push_back(std::move(a));
    }
    return out;
}

/// Atomic write: temp file in the same directory, then rename.
inline void write_bytes_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for writing: " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<std::byte> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("missing file: " + path.string());
    f.seekg(0, std::ios::end);
    const auto n = static_cast<std::size_t>(f.tellg());
    f.seekg(0);
    std::vector<std::byte> out(n);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n));
    if (!f) throw FormatError("read failed: " + path.string());
    return out;
}

inline void write_file(const std::filesystem::path& path, std::span<const Array> arrays) {
    const auto bytes = encode(arrays);
    write_bytes_atomic(path, bytes);
}

inline std::vector<Array> read_file(const std::filesystem::path& path) {
    return decode(read_bytes(path), path.string());
}

inline Array read_single(const std::filesystem::path& path) {
    auto arrays = read_file(path);
    if (arrays.size() != 1) throw FormatError(path.string() + ": expected exactly one MOCC record");
    return std::move(arrays.front());
}

struct SparseRecord {
    std::vector<sparse::Coordinate> coords;
    Matrix features;
    int stride = 1;
};

inline std::vector<Array> encode_sparse(const SparseRecord& t) {
    if (static_cast<std::size_t>(t.features.rows()) != t.coords.size())
        throw std::invalid_argument("sparse record: feature rows do not match coordinates");
    std::vector<std::int32_t> c;
    c.reserve(t.coords.size() * 4);
    for (const auto& k : t.coords) c.insert(c.end(), {k.batch, k.x, k.y, k.z});
    const std::int32_t stride[1] = {t.stride};
    return {make_array<std::int32_t>(c, {t.coords.size(), 4}), make_array(t.features),
            make_array<std::int32_t>(stride, {1})};
}

inline SparseRecord decode_sparse(std::span<const Array> arrays, const std::string& name) {
    if (arrays.size() != 3) throw FormatError(name + ": sparse tensor needs three records");
    const auto& c = arrays[0];
    if (c.dtype != DType::i32 || c.shape.size() != 2 || c.shape[1] != 4)
        throw FormatError(name + ": bad coordinate record");
    SparseRecord t;
    const auto cv = values<std::int32_t>(c);
    for (std::size_t i = 0; i < c.shape[0]; ++i) t.coords.push_back({cv[4 * i], cv[4 * i + 1], cv[4 * i + 2], cv[4 * i + 3]});
    t.features = to_matrix(arrays[1]);
    if (static_cast<std::size_t>(t.features.rows()) != t.coords.size())
        throw FormatError(name + ": feature rows do not match coordinates");
    const auto s = values<std::int32_t>(arrays[2]);
    if (s.size() != 1 || s[0] <= 0) throw FormatError(name + ": bad stride record");
    t.stride = s[0];
    return t;
}

}  // namespace minkocc::io
