#pragma once

#include "minkocc/ad/ops.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

// Image ops on row-major (H*W) × C matrices, pixel (u, v) at row v*W + u.

namespace minkocc::nn {

struct ImageShape {
    int width = 0;
    int height = 0;
    Index pixels() const { return static_cast<Index>(width) * height; }
    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// A feature image recorded on a tape.
struct FeatureImage {
    ImageShape shape;
    ad::Var data;
};

namespace detail {

/// Column layout: (ky * k + kx) * C + c. Borders replicate the edge pixel.
inline Matrix im2col(const Matrix& x, ImageShape in, ImageShape out, int k, int stride) {
    const Index c = x.cols();
    const int pad = (k - 1) / 2;
    Matrix col(out.pixels(), static_cast<Index>(k) * k * c);
    for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
            const Index row = static_cast<Index>(oy) * out.width + ox;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = std::clamp(oy * stride + ky - pad, 0, in.height - 1);
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = std::clamp(ox * stride + kx - pad, 0, in.width - 1);
                    col.block(row, (static_cast<Index>(ky) * k + kx) * c, 1, c) = x.row(static_cast<Index>(iy) * in.width + ix);
                }
            }
        }
    return col;
}

inline void col2im_add(Matrix& gx, const Matrix& gcol, ImageShape in, ImageShape out, int k, int stride) {
    const Index c = gx.cols();
    const int pad = (k - 1) / 2;
    for (int oy = 0; oy < out.height; ++oy)
        for (int ox = 0; ox < out.width; ++ox) {
            const Index row = static_cast<Index>(oy) * out.width + ox;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = std::clamp(oy * stride + ky - pad, 0, in.height - 1);
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = std::clamp(ox * stride + kx - pad, 0, in.width - 1);
                    gx.row(static_cast<Index>(iy) * in.width + ix) += gcol.block(row, (static_cast<Index>(ky) * k + kx) * c, 1, c);
                }
            }
        }
}

}  // namespace detail

inline ImageShape conv_output_shape(ImageShape in, int stride) {
    return {(in.width + stride - 1) / stride, (in.height + stride - 1) / stride};
}

/// k×k convolution with replicate padding; output pixel (i, j) is centered on
/// input pixel (i*stride, j*stride). weight is (k*k*C_in) × C_out.
inline FeatureImage conv2d(const FeatureImage& x, const ad::Var& weight, const ad::Var& bias, int k, int stride = 1) {
    if (k % 2 != 1) throw std::invalid_argument("conv2d: kernel size must be odd");
    const Index cin = x.data.cols();
    if (weight.rows() != static_cast<Index>(k) * k * cin) throw std::invalid_argument("conv2d: weight shape mismatch");
    if (x.data.rows() != x.shape.pixels()) throw std::invalid_argument("conv2d: image shape mismatch");
    const ImageShape out_shape = conv_output_shape(x.shape, stride);
    const ImageShape in_shape = x.shape;
    ad::Var input = x.data;
    Matrix col = k == 1 && stride == 1 ? x.data.value() : detail::im2col(x.data.value(), in_shape, out_shape, k, stride);
    Matrix out = col * weight.value();
    auto saved = std::make_shared<Matrix>(std::move(col));
    ad::Var y = input.tape()->record(std::move(out), {input, weight},
                                     [input, weight, saved, in_shape, out_shape, k, stride](ad::Tape& t, const Matrix& g) {
        if (weight.requires_grad()) t.grad_buffer(weight).noalias() += saved->transpose() * g;
        if (input.requires_grad()) {
            Matrix gcol = g * weight.value().transpose();
            if (k == 1 && stride == 1)
                t.accumulate(input, gcol);
            else
                detail::col2im_add(t.grad_buffer(input), gcol, in_shape, out_shape, k, stride);
        }
    });
    if (bias.valid()) y = ad::add_row(y, bias);
    return {out_shape, y};
}

/// Nearest-neighbor 2× upsampling to `target` (which may be one pixel short
/// of exact doubling on odd sizes).
inline FeatureImage upsample2x(const FeatureImage& x, ImageShape target) {
    const ImageShape in = x.shape;
    std::vector<int> src(static_cast<std::size_t>(target.pixels()));
    for (int v = 0; v < target.height; ++v)
        for (int u = 0; u < target.width; ++u)
            src[static_cast<std::size_t>(v * target.width + u)] =
                std::min(v / 2, in.height - 1) * in.width + std::min(u / 2, in.width - 1);
    return {target, ad::gather_rows(x.data, std::move(src))};
}

inline FeatureImage relu(const FeatureImage& x) { return {x.shape, ad::relu(x.data)}; }

inline FeatureImage concat(const FeatureImage& a, const FeatureImage& b) {
    if (!(a.shape == b.shape)) throw std::invalid_argument("concat: image shapes differ");
    return {a.shape, ad::concat_cols({a.data, b.data})};
}

}  // namespace minkocc::nn
