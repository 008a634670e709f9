#pragma once

#include "minkocc/ad/ops.hpp"
#include "minkocc/sparse/kernel_map.hpp"

#include <cmath>
#include <memory>
#include <span>
#include <vector>

namespace minkocc::sparse {

/// Stacked per-offset weights: block i (rows [i*d_in, (i+1)*d_in)) is W_i.
struct ConvWeights {
    ad::Var weight;
    ad::Var bias;  // optional, 1×d_out
    int kernel_size = 1;
};

namespace detail {

inline Matrix gather(const Matrix& src, const std::vector<int>& rows) {
    Matrix out(static_cast<Index>(rows.size()), src.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = src.row(rows[k]);
    return out;
}

inline void scatter_add(Matrix& dst, const std::vector<int>& rows, const Matrix& src) {
    for (std::size_t k = 0; k < rows.size(); ++k) dst.row(rows[k]) += src.row(static_cast<Index>(k));
}

}  // namespace detail

/// out[row(u)] = sum_i W_i^T x[row(u+i)] over the map's pairs (gather, GEMM, scatter).
inline ad::Var apply_kernel_map(const ad::Var& x, const ad::Var& weight, std::shared_ptr<const KernelMap> km) {
    const Index din = x.cols();
    const Index dout = weight.cols();
    const auto kvol = static_cast<Index>(km->kernel_volume());
    if (weight.rows() != kvol * din) throw std::invalid_argument("sparse conv: channel mismatch between input and weights");
    if (static_cast<std::size_t>(x.rows()) != km->input_size) throw std::invalid_argument("sparse conv: kernel map built for a different input");
    const auto nout = static_cast<Index>(km->output->size());

    Matrix out = Matrix::Zero(nout, dout);
    const Matrix& xv = x.value();
    const Matrix& wv = weight.value();
    for (Index k = 0; k < kvol; ++k) {
        const auto& ir = km->in_rows[static_cast<std::size_t>(k)];
        if (ir.empty()) continue;
        const auto wk = wv.middleRows(k * din, din);
        if (k == km->identity_offset) {
            out.noalias() += xv * wk;
        } else {
            Matrix y = detail::gather(xv, ir) * wk;
            detail::scatter_add(out, km->out_rows[static_cast<std::size_t>(k)], y);
        }
    }
    return x.tape()->record(std::move(out), {x, weight}, [x, weight, km, din, kvol](ad::Tape& t, const Matrix& g) {
        const Matrix& xv = x.value();
        const Matrix& wv = weight.value();
        Matrix* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
        Matrix* gw = weight.requires_grad() ? &t.grad_buffer(weight) : nullptr;
        for (Index k = 0; k < kvol; ++k) {
            const auto& ir = km->in_rows[static_cast<std::size_t>(k)];
            if (ir.empty()) continue;
            const auto wk = wv.middleRows(k * din, din);
            if (k == km->identity_offset) {
                if (gx) gx->noalias() += g * wk.transpose();
                if (gw) gw->middleRows(k * din, din).noalias() += xv.transpose() * g;
            } else {
                const Matrix gg = detail::gather(g, km->out_rows[static_cast<std::size_t>(k)]);
                if (gx) {
                    Matrix dxg = gg * wk.transpose();
                    detail::scatter_add(*gx, ir, dxg);
                }
                if (gw) gw->middleRows(k * din, din).noalias() += detail::gather(xv, ir).transpose() * gg;
            }
        }
    });
}

/// Generalized sparse convolution over a prebuilt kernel map.
inline SparseVoxelTensor sparse_conv(const SparseVoxelTensor& input, const ConvWeights& w,
                                     std::shared_ptr<const KernelMap> km) {
    ad::Var y = apply_kernel_map(input.features, w.weight, km);
    if (w.bias.valid()) y = ad::add_row(y, w.bias);
    return SparseVoxelTensor{km->output, y, km->output_stride};
}

/// Convolution that builds its own map. stride 1 keeps the input coordinates;
/// stride > 1 outputs the stride-aligned parents of the input coordinates.
inline SparseVoxelTensor conv(const SparseVoxelTensor& input, const ConvWeights& w, int stride = 1) {
    CoordinateSet out = stride == 1 ? input.coords : downsample_coordinates(*input.coords, input.stride, stride);
    auto km = std::make_shared<const KernelMap>(build_kernel_map(*input.coords, input.stride, out, w.kernel_size, stride));
    return sparse_conv(input, w, km);
}

/// Upsampling convolution that creates its output support from the kernel
/// footprint (offsets [0, K-1]^3 at the finer stride).
inline SparseVoxelTensor generative_transposed_conv(const SparseVoxelTensor& input, const ConvWeights& w, int upsample) {
    auto km = std::make_shared<const KernelMap>(build_generative_map(*input.coords, input.stride, w.kernel_size, upsample));
    return sparse_conv(input, w, km);
}

/// Rows kept by prune: sigmoid(logit) > threshold, or force_keep[r] when given.
inline std::vector<int> keep_rows(std::span<const double> keep_logits, double threshold,
                                  std::span<const std::uint8_t> force_keep = {}) {
    if (!force_keep.empty() && force_keep.size() != keep_logits.size())
        throw std::invalid_argument("prune: force-keep mask length mismatch");
    std::vector<int> rows;
    for (std::size_t r = 0; r < keep_logits.size(); ++r) {
        const double p = ad::detail::stable_sigmoid(keep_logits[r]);
        if (p > threshold || (!force_keep.empty() && force_keep[r])) rows.push_back(static_cast<int>(r));
    }
    return rows;
}

/// Keeps the rows whose keep probability exceeds `threshold`. The decision is
/// not differentiated; gradients reach the retained feature rows only.
inline SparseVoxelTensor prune(const SparseVoxelTensor& input, std::span<const double> keep_logits, double threshold = 0.5,
                               std::span<const std::uint8_t> force_keep = {}) {
    if (keep_logits.size() != input.size()) throw std::invalid_argument("prune: keep logits length must equal row count");
    std::vector<int> rows = keep_rows(keep_logits, threshold, force_keep);
    auto out = std::make_shared<CoordinateIndex>();
    for (int r : rows) out->insert((*input.coords)[static_cast<std::size_t>(r)]);
    ad::Var f = ad::gather_rows(input.features, std::move(rows));
    return SparseVoxelTensor{out, f, input.stride};
}

struct SqueezeExciteParams {
    ad::Var reduce_weight;  // c × c/r
    ad::Var reduce_bias;    // 1 × c/r
    ad::Var expand_weight;  // c/r × c
    ad::Var expand_bias;    // 1 × c
};

/// Channel gating per batch item: mean-pool rows of the item, bottleneck MLP
/// (ReLU), sigmoid, then scale every row of the item.
inline SparseVoxelTensor squeeze_excite(const SparseVoxelTensor& input, const SqueezeExciteParams& p) {
    if (input.channels() % p.reduce_weight.cols() != 0)
        throw std::invalid_argument("squeeze-excite: reduction must divide channel count");
    if (input.empty()) return input;
    const std::vector<int> batch = input.batch_ids();
    const Index items = input.batch_count();
    ad::Var pooled = ad::segment_mean(input.features, batch, items);
    ad::Var hidden = ad::relu(ad::linear(pooled, p.reduce_weight, p.reduce_bias));
    ad::Var gate = ad::sigmoid(ad::linear(hidden, p.expand_weight, p.expand_bias));
    return input.with_features(ad::mul(input.features, ad::gather_rows(gate, batch)));
}

/// Per-channel normalization over the rows of a batch. Training mode uses the
/// batch statistics and updates the running buffers; evaluation mode uses the
/// running buffers.
inline ad::Var batch_norm_rows(const ad::Var& x, const ad::Var& gamma, const ad::Var& beta, Matrix& running_mean,
                               Matrix& running_var, bool training, double momentum = 0.1, double eps = 1e-5) {
    const Index n = x.rows();
    const Index c = x.cols();
    if (n == 0) return x;
    const Matrix& xv = x.value();
    Eigen::RowVectorXd mu(c);
    Eigen::RowVectorXd var(c);
    if (training) {
        mu = xv.colwise().mean();
        var = (xv.rowwise() - mu).array().square().colwise().mean();
        const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        running_mean = (1.0 - momentum) * running_mean + momentum * Matrix(mu);
        running_var = (1.0 - momentum) * running_var + momentum * Matrix(var * unbias);
    } else {
        mu = running_mean.row(0);
        var = running_var.row(0);
    }
    const Eigen::RowVectorXd inv_std = (var.array() + eps).rsqrt().matrix();
    Matrix xhat = (xv.rowwise() - mu).array().rowwise() * inv_std.array();
    Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    return x.tape()->record(std::move(out), {x, gamma, beta},
                            [x, gamma, beta, xhat, inv_std, training, n](ad::Tape& t, const Matrix& g) {
        if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
        if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
        if (!x.requires_grad()) return;
        const Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
        if (!training) {
            t.accumulate(x, dxhat.array().rowwise() * inv_std.array());
            return;
        }
        const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
        const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
        const double nn = static_cast<double>(n);
        Matrix dx = ((dxhat * nn).rowwise() - sum_d);
        dx -= Matrix(xhat.array().rowwise() * sum_dx.array());
        dx = dx.array().rowwise() * (inv_std.array() / nn);
        t.accumulate(x, dx);
    });
}

}  // namespace minkocc::sparse
