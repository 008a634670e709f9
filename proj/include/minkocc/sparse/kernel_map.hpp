#pragma once

#include "minkocc/sparse/tensor.hpp"

#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

namespace minkocc::sparse {

/// Unit kernel offsets in lexicographic (dz, dy, dx) order: dz varies slowest.
/// Odd sizes are centered on zero, [-(K-1)/2, (K-1)/2]^3; even sizes span
/// [0, K-1]^3. Weight block i of a ConvWeights matrix belongs to offset i.
inline std::vector<Coordinate> kernel_offsets(int kernel_size) {
    if (kernel_size < 1) throw std::invalid_argument("kernel size must be positive");
    const int lo = kernel_size % 2 == 1 ? -(kernel_size - 1) / 2 : 0;
    std::vector<Coordinate> out;
    out.reserve(static_cast<std::size_t>(kernel_size * kernel_size * kernel_size));
    for (int dz = lo; dz < lo + kernel_size; ++dz)
        for (int dy = lo; dy < lo + kernel_size; ++dy)
            for (int dx = lo; dx < lo + kernel_size; ++dx) out.push_back(Coordinate{0, dx, dy, dz});
    return out;
}

/// Offsets of a generative (transposed) kernel: always [0, K-1]^3 at the
/// output stride, in the same (dz, dy, dx) order.
inline std::vector<Coordinate> generative_offsets(int kernel_size) {
    if (kernel_size < 1) throw std::invalid_argument("kernel size must be positive");
    std::vector<Coordinate> out;
    for (int dz = 0; dz < kernel_size; ++dz)
        for (int dy = 0; dy < kernel_size; ++dy)
            for (int dx = 0; dx < kernel_size; ++dx) out.push_back(Coordinate{0, dx, dy, dz});
    return out;
}

/// For every kernel offset, the (input row, output row) pairs that contribute.
struct KernelMap {
    std::vector<Coordinate> offsets;
    std::vector<std::vector<int>> in_rows;
    std::vector<std::vector<int>> out_rows;
    CoordinateSet output;
    int output_stride = 1;
    std::size_t input_size = 0;
    /// Offset whose pairs are exactly (r, r) for every row, or -1.
    int identity_offset = -1;

    std::size_t kernel_volume() const { return offsets.size(); }
    std::size_t pair_count() const {
        std::size_t n = 0;
        for (const auto& v : in_rows) n += v.size();
        return n;
    }
};

/// Parents at stride in_stride*ratio, in first-occurrence order.
inline CoordinateSet downsample_coordinates(const CoordinateIndex& in, int in_stride, int ratio) {
    const int out_stride = in_stride * ratio;
    auto out = std::make_shared<CoordinateIndex>();
    for (const auto& c : in.coordinates())
        out->insert(Coordinate{c.batch, floor_to_stride(c.x, out_stride), floor_to_stride(c.y, out_stride),
                               floor_to_stride(c.z, out_stride)});
    return out;
}

/// Pairs (row(u + i*in_stride*dilation), row(u)) for every output u and offset
/// i where the input coordinate exists.
inline KernelMap build_kernel_map(const CoordinateIndex& in, int in_stride, const CoordinateSet& out, int kernel_size,
                                  int stride, int dilation = 1) {
    if (in_stride <= 0 || stride <= 0 || dilation <= 0) throw std::invalid_argument("strides must be positive");
    const int out_stride = in_stride * stride;
    for (const auto& c : in.coordinates())
        if (!divisible(c, in_stride)) throw std::invalid_argument("kernel map: input coordinate inconsistent with stride");
    for (const auto& c : out->coordinates())
        if (!divisible(c, out_stride)) throw std::invalid_argument("kernel map: output coordinate inconsistent with stride");

    KernelMap km;
    km.offsets = kernel_offsets(kernel_size);
    km.in_rows.resize(km.offsets.size());
    km.out_rows.resize(km.offsets.size());
    km.output = out;
    km.output_stride = out_stride;
    km.input_size = in.size();
    const int step = in_stride * dilation;
    for (std::size_t k = 0; k < km.offsets.size(); ++k) {
        const Coordinate o = km.offsets[k];
        const Coordinate scaled{0, o.x * step, o.y * step, o.z * step};
        auto& ir = km.in_rows[k];
        auto& orow = km.out_rows[k];
        for (std::size_t r = 0; r < out->size(); ++r) {
            const int src = in.row_of((*out)[r] + scaled);
            if (src >= 0) {
                ir.push_back(src);
                orow.push_back(static_cast<int>(r));
            }
        }
    }
    if (out.get() == &in && kernel_size % 2 == 1 && stride == 1) km.identity_offset = static_cast<int>(km.offsets.size() / 2);
    return km;
}

/// Kernel map of a generative transposed convolution. The output support is
/// the deduplicated union of c + o*out_stride over inputs c and offsets
/// o in [0, K-1]^3, in (input row, offset) first-occurrence order.
inline KernelMap build_generative_map(const CoordinateIndex& in, int in_stride, int kernel_size, int upsample) {
    if (upsample <= 0 || in_stride % upsample != 0)
        throw std::invalid_argument("generative map: input stride not divisible by upsample factor");
    const int out_stride = in_stride / upsample;
    KernelMap km;
    km.offsets = generative_offsets(kernel_size);
    km.in_rows.resize(km.offsets.size());
    km.out_rows.resize(km.offsets.size());
    km.output_stride = out_stride;
    km.input_size = in.size();
    auto out = std::make_shared<CoordinateIndex>();
    for (std::size_t r = 0; r < in.size(); ++r) {
        for (std::size_t k = 0; k < km.offsets.size(); ++k) {
            const Coordinate o = km.offsets[k];
            const Coordinate c = in[r] + Coordinate{0, o.x * out_stride, o.y * out_stride, o.z * out_stride};
            const int dst = out->insert(c).first;
            km.in_rows[k].push_back(static_cast<int>(r));
            km.out_rows[k].push_back(dst);
        }
    }
    km.output = std::move(out);
    return km;
}

}  // namespace minkocc::sparse
