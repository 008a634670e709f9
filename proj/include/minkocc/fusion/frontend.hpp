#pragma once

#include "minkocc/geometry.hpp"
#include "minkocc/nn/conv2d.hpp"
#include "minkocc/nn/layers.hpp"
#include "minkocc/sparse/tensor.hpp"

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

// LiDAR-camera early fusion: points are projected into every camera, sample a
// multi-scale image feature pyramid, are fused across views, refined by a
// shared MLP and averaged into voxels.

namespace minkocc::fusion {

/// RGB image in [0, 1], (H*W) × 3.
struct Image {
    nn::ImageShape shape;
    Matrix pixels;
};

struct FeaturePyramid {
    std::vector<nn::FeatureImage> levels;

    Index channel_sum() const {
        Index c = 0;
        for (const auto& l : levels) c += l.data.cols();
        return c;
    }
};

struct BackboneParams {
    std::vector<nn::Linear> convs;  // 3×3 kernels, level 0 stride 1 then stride 2

    static BackboneParams create(ad::ParameterStore& store, const std::string& name, const std::vector<int>& channels,
                                 std::mt19937_64& rng) {
        BackboneParams p;
        int in = 3;
        for (std::size_t l = 0; l < channels.size(); ++l) {
            p.convs.push_back(nn::Linear::create(store, name + ".conv" + std::to_string(l), 9 * in, channels[l], rng));
            in = channels[l];
        }
        return p;
    }
};

/// Strided 3×3 convolution stack; level l has resolution (W/2^l, H/2^l).
inline FeaturePyramid image_backbone(ad::Tape& tape, const Image& image, const BackboneParams& params) {
    if (image.pixels.rows() != image.shape.pixels() || image.pixels.cols() != 3)
        throw std::invalid_argument("image_backbone: image must be (W*H)×3");
    FeaturePyramid pyr;
    nn::FeatureImage x{image.shape, tape.constant(image.pixels)};
    for (std::size_t l = 0; l < params.convs.size(); ++l) {
        const auto& c = params.convs[l];
        x = nn::relu(nn::conv2d(x, tape.parameter(*c.weight), tape.parameter(*c.bias), 3, l == 0 ? 1 : 2));
        pyr.levels.push_back(x);
    }
    return pyr;
}

/// Bilinear sample of every pyramid level at uv / 2^l (clamped to the
/// border), concatenated over levels. Differentiable w.r.t. pyramid values.
inline ad::Var sample_image_features(const FeaturePyramid& pyr, const Matrix& uv) {
    const Index n = uv.rows();
    const Index total = pyr.channel_sum();
    struct Tap {
        Index pixel[4];
        double weight[4];
    };
    const std::size_t nl = pyr.levels.size();
    std::vector<Tap> taps(static_cast<std::size_t>(n) * nl);
    Matrix out(n, total);
    Index col = 0;
    for (std::size_t l = 0; l < nl; ++l) {
        const auto& lev = pyr.levels[l];
        const Matrix& f = lev.data.value();
        const Index c = f.cols();
        const double s = 1.0 / static_cast<double>(1 << l);
        const int w = lev.shape.width, h = lev.shape.height;
        for (Index i = 0; i < n; ++i) {
            const double u = std::clamp(uv(i, 0) * s, 0.0, static_cast<double>(w - 1));
            const double v = std::clamp(uv(i, 1) * s, 0.0, static_cast<double>(h - 1));
            const int u0 = std::min(static_cast<int>(std::floor(u)), std::max(0, w - 2));
            const int v0 = std::min(static_cast<int>(std::floor(v)), std::max(0, h - 2));
            const int u1 = std::min(u0 + 1, w - 1), v1 = std::min(v0 + 1, h - 1);
            const double a = u - u0, b = v - v0;
            Tap& tap = taps[static_cast<std::size_t>(i) * nl + l];
            tap.pixel[0] = static_cast<Index>(v0) * w + u0;
            tap.pixel[1] = static_cast<Index>(v0) * w + u1;
            tap.pixel[2] = static_cast<Index>(v1) * w + u0;
            tap.pixel[3] = static_cast<Index>(v1) * w + u1;
            tap.weight[0] = (1 - a) * (1 - b);
            tap.weight[1] = a * (1 - b);
            tap.weight[2] = (1 - a) * b;
            tap.weight[3] = a * b;
            auto row = out.block(i, col, 1, c);
            row.setZero();
            for (int k = 0; k < 4; ++k) row += tap.weight[k] * f.row(tap.pixel[k]);
        }
        col += c;
    }
    std::vector<ad::Var> parents;
    for (const auto& l : pyr.levels) parents.push_back(l.data);
    return parents.front().tape()->record(std::move(out), parents, [parents, taps = std::move(taps), nl, n](ad::Tape& t, const Matrix& g) {
        Index col0 = 0;
        for (std::size_t l = 0; l < nl; ++l) {
            const Index c = parents[l].cols();
            if (parents[l].requires_grad()) {
                Matrix& gl = t.grad_buffer(parents[l]);
                for (Index i = 0; i < n; ++i) {
                    const Tap& tap = taps[static_cast<std::size_t>(i) * nl + l];
                    for (int k = 0; k < 4; ++k) gl.row(tap.pixel[k]) += tap.weight[k] * g.block(i, col0, 1, c);
                }
            }
            col0 += c;
        }
    });
}

struct FuseParams {
    nn::Linear score;              // D → 1, shared across views
    ad::Parameter* no_view = nullptr;  // 1 × D

    static FuseParams create(ad::ParameterStore& store, const std::string& name, Index dim, std::mt19937_64& rng) {
        FuseParams p;
        p.score = nn::Linear::create(store, name + ".score", dim, 1, rng, 0.1);
        p.no_view = &store.add(name + ".no_view", Matrix::Zero(1, dim));
        return p;
    }
};

/// Softmax-weighted average over the views where each point is valid; points
/// valid in no view get the no-view embedding.
inline ad::Var fuse_multiview(ad::Tape& tape, const std::vector<ad::Var>& per_view,
                              const std::vector<std::vector<std::uint8_t>>& valid, const FuseParams& params) {
    if (per_view.empty() || per_view.size() != valid.size()) throw std::invalid_argument("fuse_multiview: need one valid mask per view");
    const std::size_t nv = per_view.size();
    const Index n = per_view[0].rows();
    const Index d = per_view[0].cols();
    std::vector<ad::Var> scores;
    for (const auto& f : per_view) scores.push_back(params.score(tape, f));
    ad::Var embed = tape.parameter(*params.no_view);

    Matrix alpha = Matrix::Zero(n, static_cast<Index>(nv));
    Matrix out(n, d);
    for (Index i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < nv; ++v)
            if (valid[v][static_cast<std::size_t>(i)]) m = std::max(m, scores[v].value()(i, 0));
        if (!std::isfinite(m)) {
            out.row(i) = embed.value().row(0);
            continue;
        }
        double z = 0.0;
        for (std::size_t v = 0; v < nv; ++v)
            if (valid[v][static_cast<std::size_t>(i)]) {
                alpha(i, static_cast<Index>(v)) = std::exp(scores[v].value()(i, 0) - m);
                z += alpha(i, static_cast<Index>(v));
            }
        alpha.row(i) /= z;
        out.row(i).setZero();
        for (std::size_t v = 0; v < nv; ++v)
            if (alpha(i, static_cast<Index>(v)) > 0) out.row(i) += alpha(i, static_cast<Index>(v)) * per_view[v].value().row(i);
    }
    std::vector<ad::Var> parents = per_view;
    parents.insert(parents.end(), scores.begin(), scores.end());
    parents.push_back(embed);
    return tape.record(std::move(out), parents, [per_view, scores, embed, alpha, valid, nv, n](ad::Tape& t, const Matrix& g) {
        Matrix gscore = Matrix::Zero(n, static_cast<Index>(nv));
        Matrix gembed = Matrix::Zero(1, g.cols());
        std::vector<Matrix*> gf(nv, nullptr);
        for (std::size_t v = 0; v < nv; ++v)
            if (per_view[v].requires_grad()) gf[v] = &t.grad_buffer(per_view[v]);
        for (Index i = 0; i < n; ++i) {
            bool any = false;
            double dot = 0.0;
            for (std::size_t v = 0; v < nv; ++v) {
                if (!valid[v][static_cast<std::size_t>(i)]) continue;
                any = true;
                const double a = alpha(i, static_cast<Index>(v));
                const double da = g.row(i).dot(per_view[v].value().row(i));
                gscore(i, static_cast<Index>(v)) = da;
                dot += a * da;
                if (gf[v]) gf[v]->row(i) += a * g.row(i);
            }
            if (!any) {
                gembed += g.row(i);
                continue;
            }
            for (std::size_t v = 0; v < nv; ++v)
                if (valid[v][static_cast<std::size_t>(i)])
                    gscore(i, static_cast<Index>(v)) = alpha(i, static_cast<Index>(v)) * (gscore(i, static_cast<Index>(v)) - dot);
        }
        for (std::size_t v = 0; v < nv; ++v) t.accumulate(scores[v], gscore.col(static_cast<Index>(v)));
        t.accumulate(embed, gembed);
    });
}

struct RefineParams {
    nn::Linear hidden;
    nn::Linear out;

    static RefineParams create(ad::ParameterStore& store, const std::string& name, Index in, Index hidden_dim,
                               Index out_dim, std::mt19937_64& rng) {
        return {nn::Linear::create(store, name + ".fc1", in, hidden_dim, rng),
                nn::Linear::create(store, name + ".fc2", hidden_dim, out_dim, rng)};
    }
};

/// Shared two-layer MLP applied to [features | attributes] of every point.
inline ad::Var refine_mlp(ad::Tape& tape, const ad::Var& features, const ad::Var& attributes, const RefineParams& p) {
    ad::Var x = attributes.valid() && attributes.cols() > 0 ? ad::concat_cols({features, attributes}) : features;
    return p.out(tape, ad::relu(p.hidden(tape, x)));
}

enum class VoxelReduce { mean, max };

/// Voxel index floor((p - min) / voxel_size); points outside the grid are
/// dropped; features of points sharing a voxel are reduced (mean by default).
/// Returns coordinates in first-occurrence order at stride 1.
inline sparse::SparseVoxelTensor voxelize(const Matrix& points, const ad::Var& features, const GridConfig& grid,
                                          int batch = 0, VoxelReduce reduce = VoxelReduce::mean) {
    if (!(grid.voxel_size > 0)) throw std::invalid_argument("voxelize: voxel size must be positive");
    if (features.rows() != points.rows()) throw std::invalid_argument("voxelize: one feature row per point");
    auto index = std::make_shared<sparse::CoordinateIndex>();
    std::vector<int> kept, segment;
    for (Index i = 0; i < points.rows(); ++i) {
        const auto v = grid.index_of(Vec3(points(i, 0), points(i, 1), points(i, 2)));
        if (!grid.contains(v.x(), v.y(), v.z())) continue;
        kept.push_back(static_cast<int>(i));
        segment.push_back(index->insert({batch, v.x(), v.y(), v.z()}).first);
    }
    const auto nvox = static_cast<Index>(index->size());
    ad::Var selected = ad::gather_rows(features, kept);
    if (reduce == VoxelReduce::mean) return {index, ad::segment_mean(selected, segment, nvox), 1};

    const Matrix& f = selected.value();
    Matrix out = Matrix::Constant(nvox, f.cols(), -std::numeric_limits<double>::infinity());
    std::vector<int> arg(static_cast<std::size_t>(nvox * f.cols()), -1);
    for (std::size_t k = 0; k < segment.size(); ++k)
        for (Index c = 0; c < f.cols(); ++c)
            if (f(static_cast<Index>(k), c) > out(segment[k], c)) {
                out(segment[k], c) = f(static_cast<Index>(k), c);
                arg[static_cast<std::size_t>(segment[k] * f.cols() + c)] = static_cast<int>(k);
            }
    ad::Var maxed = selected.tape()->record(std::move(out), {selected}, [selected, arg](ad::Tape& t, const Matrix& g) {
        Matrix& gs = t.grad_buffer(selected);
        for (Index r = 0; r < g.rows(); ++r)
            for (Index c = 0; c < g.cols(); ++c) gs(arg[static_cast<std::size_t>(r * g.cols() + c)], c) += g(r, c);
    });
    return {index, maxed, 1};
}

struct FusionConfig {
    std::vector<int> pyramid_channels{16, 32, 64};
    int hidden = 32;
    int out_channels = 16;
    VoxelReduce reduce = VoxelReduce::mean;
};

/// Per-point raw attributes: xyz normalized to [-1, 1] over the grid, then the
/// extra point columns (intensity, sweep age).
inline Matrix point_attributes(const Matrix& points, const GridConfig& grid) {
    Matrix a(points.rows(), points.cols());
    const Vec3 lo = grid.min, hi = grid.max();
    for (Index i = 0; i < points.rows(); ++i) {
        for (int k = 0; k < 3; ++k) a(i, k) = 2.0 * (points(i, k) - lo[k]) / (hi[k] - lo[k]) - 1.0;
        for (Index k = 3; k < points.cols(); ++k) a(i, k) = points(i, k);
    }
    return a;
}

/// The whole frontend: backbone per camera, projection, sampling, fusion,
/// refinement, voxelization.
class FusionFrontend {
public:
    FusionFrontend(ad::ParameterStore& store, const FusionConfig& cfg, Index point_columns, std::mt19937_64& rng,
                   const std::string& name = "fusion")
        : cfg_(cfg) {
        backbone_ = BackboneParams::create(store, name + ".backbone", cfg.pyramid_channels, rng);
        Index dim = 0;
        for (int c : cfg.pyramid_channels) dim += c;
        fuse_ = FuseParams::create(store, name + ".fuse", dim, rng);
        refine_ = RefineParams::create(store, name + ".refine", dim + point_columns, cfg.hidden, cfg.out_channels, rng);
    }

    const FusionConfig& config() const { return cfg_; }
    const BackboneParams& backbone() const { return backbone_; }
    const FuseParams& fuse() const { return fuse_; }
    const RefineParams& refine() const { return refine_; }

    /// Fused, refined per-point features (before voxelization).
    ad::Var point_features(ad::Tape& tape, const Matrix& points, const std::vector<Image>& images,
                           const std::vector<Camera>& cameras, const GridConfig& grid) const {
        if (images.size() != cameras.size()) throw std::invalid_argument("fusion: one image per camera");
        std::vector<ad::Var> per_view;
        std::vector<std::vector<std::uint8_t>> valid;
        for (std::size_t c = 0; c < cameras.size(); ++c) {
            const FeaturePyramid pyr = image_backbone(tape, images[c], backbone_);
            Projection proj = project_points(points, cameras[c]);
            per_view.push_back(sample_image_features(pyr, proj.uv));
            valid.push_back(std::move(proj.valid));
        }
        ad::Var fused = fuse_multiview(tape, per_view, valid, fuse_);
        return refine_mlp(tape, fused, tape.constant(point_attributes(points, grid)), refine_);
    }

    sparse::SparseVoxelTensor forward(ad::Tape& tape, const Matrix& points, const std::vector<Image>& images,
                                      const std::vector<Camera>& cameras, const GridConfig& grid, int batch = 0) const {
        if (points.rows() == 0) {
            return {std::make_shared<sparse::CoordinateIndex>(), tape.constant(Matrix::Zero(0, cfg_.out_channels)), 1};
        }
        return voxelize(points, point_features(tape, points, images, cameras, grid), grid, batch, cfg_.reduce);
    }

private:
    FusionConfig cfg_;
    BackboneParams backbone_;
    FuseParams fuse_;
    RefineParams refine_;
};

}  // namespace minkocc::fusion
