#pragma once

#include "minkocc/geometry.hpp"
#include "minkocc/nn/conv2d.hpp"
#include "minkocc/nn/layers.hpp"
#include "minkocc/sparse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace minkocc::render {

enum class CoverageMode { as_printed, closeness };

struct RenderConfig {
    double gamma = 1.0;
    double epsilon = 1.0;
    int spheres_per_pixel = 16;
    double z_near = 0.1;
    double z_far = 80.0;
    CoverageMode coverage = CoverageMode::closeness;

    void validate() const {
        if (!(gamma > 0)) throw std::invalid_argument("render: gamma must be positive");
        if (!(z_near < z_far) || z_near <= 0) throw std::invalid_argument("render: need 0 < z_near < z_far");
        if (spheres_per_pixel < 1) throw std::invalid_argument("render: spheres per pixel must be at least 1");
    }
};

/// Spheres at fixed voxel centers with differentiable features, radii and
/// opacities (N×d, N×1, N×1).
struct SphereCloud {
    Matrix centers;  // N×3 meters
    ad::Var features;
    ad::Var radii;
    ad::Var opacities;

    Index size() const { return centers.rows(); }
};

/// Linear heads mapping voxel features to radius and opacity.
struct SphereHeads {
    nn::Linear radius;
    nn::Linear opacity;
    double r_min = 0.1;

    /// Initialized so that spheres start at about `r_init` meters with
    /// opacity about 0.5.
    static SphereHeads create(ad::ParameterStore& store, const std::string& name, Index channels, double r_min,
                              double r_init, std::mt19937_64& rng) {
        SphereHeads h;
        h.radius = nn::Linear::create(store, name + ".radius", channels, 1, rng, 0.01);
        h.opacity = nn::Linear::create(store, name + ".opacity", channels, 1, rng, 0.01);
        h.r_min = r_min;
        const double excess = std::max(1e-3, r_init - r_min);
        h.radius.bias->value(0, 0) = std::log(std::expm1(excess));
        return h;
    }
};

inline SphereCloud spheres_from_voxels(ad::Tape& tape, const sparse::SparseVoxelTensor& x, const SphereHeads& heads,
                                       const GridConfig& grid, int batch = 0) {
    SphereCloud c;
    std::vector<int> rows;
    if (!x.empty()) {
        const auto& cs = x.coordinates();
        for (std::size_t r = 0; r < cs.size(); ++r)
            if (cs[r].batch == batch) rows.push_back(static_cast<int>(r));
    }
    c.centers.resize(static_cast<Index>(rows.size()), 3);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& v = x.coordinates()[static_cast<std::size_t>(rows[k])];
        c.centers.row(static_cast<Index>(k)) = grid.center(v.x, v.y, v.z).transpose();
    }
    if (!x.features.valid()) {
        c.features = tape.constant(Matrix::Zero(0, 0));
        c.radii = c.opacities = tape.constant(Matrix::Zero(0, 1));
        return c;
    }
    c.features = rows.size() == x.size() ? x.features : ad::gather_rows(x.features, rows);
    c.radii = ad::add_scalar(ad::softplus(heads.radius(tape, c.features)), heads.r_min);
    c.opacities = ad::sigmoid(heads.opacity(tape, c.features));
    return c;
}

/// Coverage term d from the ray-to-center distance ratio rho / r.
inline double coverage(double ratio, CoverageMode mode) {
    const double m = std::min(1.0, ratio);
    return mode == CoverageMode::closeness ? 1.0 - m : m;
}

inline double normalized_depth(double depth, const RenderConfig& cfg) {
    return (cfg.z_far - depth) / (cfg.z_far - cfg.z_near);
}

/// One sphere's contribution at one pixel.
struct Contribution {
    int sphere = 0;
    double depth = 0.0;
    double z = 0.0;
    double ratio = 0.0;  // rho / r
    double weight = 0.0;
};

/// Blending weights for the spheres of one pixel (opacity o, coverage d,
/// normalized depth z):
///   w_k = o_k d_k exp(o_k z_k gamma) / (exp(eps gamma) + sum_j o_j d_j exp(o_j z_j gamma)),
/// evaluated with the largest exponent subtracted.
inline std::vector<double> blend_weights(const std::vector<double>& o, const std::vector<double>& d,
                                         const std::vector<double>& z, const RenderConfig& cfg) {
    double m = cfg.epsilon * cfg.gamma;
    for (std::size_t k = 0; k < o.size(); ++k) m = std::max(m, o[k] * z[k] * cfg.gamma);
    double denom = std::exp(cfg.epsilon * cfg.gamma - m);
    std::vector<double> w(o.size());
    for (std::size_t k = 0; k < o.size(); ++k) {
        w[k] = o[k] * d[k] * std::exp(o[k] * z[k] * cfg.gamma - m);
        denom += w[k];
    }
    for (auto& v : w) v /= denom;
    return w;
}

/// Composited feature image of one camera plus the per-pixel contributions.
struct RenderResult {
    nn::FeatureImage image;
    std::shared_ptr<const std::vector<std::vector<Contribution>>> pixels;

    /// Weight-averaged depth per pixel; 0 where nothing contributes.
    std::vector<double> depth_map() const {
        std::vector<double> out(pixels->size(), 0.0);
        for (std::size_t p = 0; p < pixels->size(); ++p) {
            double ws = 0.0, wd = 0.0;
            for (const auto& c : (*pixels)[p]) {
                ws += c.weight;
                wd += c.weight * c.depth;
            }
            if (ws > 0) out[p] = wd / ws;
        }
        return out;
    }
};

/// Splats every sphere onto the pixels whose centers fall within its
/// screen-space radius r * fx / depth, keeps the M nearest spheres per pixel
/// (ties by sphere index), and composites F = sum w f.
inline RenderResult render_features(ad::Tape& tape, const SphereCloud& cloud, const Camera& cam, const RenderConfig& cfg) {
    cfg.validate();
    const nn::ImageShape shape{cam.width, cam.height};
    const Index n = cloud.size();
    const Index dim = cloud.features.valid() ? cloud.features.cols() : 0;
    auto pixels = std::make_shared<std::vector<std::vector<Contribution>>>(static_cast<std::size_t>(shape.pixels()));
    if (n == 0) {
        RenderResult res{{shape, tape.constant(Matrix::Zero(shape.pixels(), dim))}, pixels};
        return res;
    }
    const Matrix& r = cloud.radii.value();
    const Matrix& o = cloud.opacities.value();
    const Matrix& f = cloud.features.value();
    for (Index s = 0; s < n; ++s) {
        const Vec3 q = cam.to_camera(cloud.centers.row(s).transpose());
        const double depth = q.z();
        if (depth <= cfg.z_near || depth >= cfg.z_far) continue;
        const double u = cam.fx() * q.x() / depth + cam.cx();
        const double v = cam.fy() * q.y() / depth + cam.cy();
        const double rad = r(s, 0) * cam.fx() / depth;
        const int u0 = std::max(0, static_cast<int>(std::ceil(u - rad)));
        const int u1 = std::min(cam.width - 1, static_cast<int>(std::floor(u + rad)));
        const int v0 = std::max(0, static_cast<int>(std::ceil(v - rad)));
        const int v1 = std::min(cam.height - 1, static_cast<int>(std::floor(v + rad)));
        for (int pv = v0; pv <= v1; ++pv)
            for (int pu = u0; pu <= u1; ++pu) {
                const double dist = std::hypot(pu - u, pv - v);
                if (dist >= rad) continue;
                (*pixels)[static_cast<std::size_t>(pv * cam.width + pu)].push_back(
                    {static_cast<int>(s), depth, normalized_depth(depth, cfg), dist / rad, 0.0});
            }
    }
    const auto m = static_cast<std::size_t>(cfg.spheres_per_pixel);
    Matrix out = Matrix::Zero(shape.pixels(), dim);
    for (std::size_t p = 0; p < pixels->size(); ++p) {
        auto& list = (*pixels)[p];
        if (list.empty()) continue;
        auto nearer = [](const Contribution& a, const Contribution& b) {
            return a.depth < b.depth || (a.depth == b.depth && a.sphere < b.sphere);
        };
        if (list.size() > m) {
            std::nth_element(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(m), list.end(), nearer);
            list.resize(m);
        }
        std::sort(list.begin(), list.end(), [&](const auto& a, const auto& b) { return nearer(b, a); });
        std::vector<double> oo, dd, zz;
        for (const auto& c : list) {
            oo.push_back(o(c.sphere, 0));
            dd.push_back(coverage(c.ratio, cfg.coverage));
            zz.push_back(c.z);
        }
        const auto w = blend_weights(oo, dd, zz, cfg);
        for (std::size_t k = 0; k < list.size(); ++k) {
            list[k].weight = w[k];
            out.row(static_cast<Index>(p)) += w[k] * f.row(list[k].sphere);
        }
    }
    const ad::Var feats = cloud.features, radii = cloud.radii, opac = cloud.opacities;
    const RenderConfig c = cfg;
    ad::Var img = tape.record(out, {feats, radii, opac}, [feats, radii, opac, pixels, c](ad::Tape& t, const Matrix& g) {
        const Matrix& fv = feats.value();
        const Matrix& rv = radii.value();
        const Matrix& ov = opac.value();
        Matrix gf = Matrix::Zero(fv.rows(), fv.cols());
        Matrix gr = Matrix::Zero(rv.rows(), 1);
        Matrix go = Matrix::Zero(ov.rows(), 1);
        for (std::size_t p = 0; p < pixels->size(); ++p) {
            const auto& list = (*pixels)[p];
            if (list.empty()) continue;
            const auto gp = g.row(static_cast<Index>(p));
            double m = c.epsilon * c.gamma;
            for (const auto& k : list) m = std::max(m, ov(k.sphere, 0) * k.z * c.gamma);
            double denom = std::exp(c.epsilon * c.gamma - m);
            Eigen::RowVectorXd fpix = Eigen::RowVectorXd::Zero(fv.cols());
            for (const auto& k : list) {
                const double a = ov(k.sphere, 0) * coverage(k.ratio, c.coverage) * std::exp(ov(k.sphere, 0) * k.z * c.gamma - m);
                denom += a;
                fpix += k.weight * fv.row(k.sphere);
            }
            const double gdotf = gp.dot(fpix);
            for (const auto& k : list) {
                const int s = k.sphere;
                gf.row(s) += k.weight * gp;
                // dF/da_k = (f_k - F) / S with a_k the (shifted) numerator term.
                const double ga = (gp.dot(fv.row(s)) - gdotf) / denom;
                const double os = ov(s, 0);
                const double e = std::exp(os * k.z * c.gamma - m);
                const double d = coverage(k.ratio, c.coverage);
                go(s, 0) += ga * d * e * (1.0 + os * k.z * c.gamma);
                if (k.ratio < 1.0) {
                    // ratio = rho / r, so d ratio / d r = -ratio / r.
                    const double dd_dratio = c.coverage == CoverageMode::closeness ? -1.0 : 1.0;
                    gr(s, 0) += ga * os * e * dd_dratio * (-k.ratio / rv(s, 0));
                }
            }
        }
        if (feats.requires_grad()) t.accumulate(feats, gf);
        if (radii.requires_grad()) t.accumulate(radii, gr);
        if (opac.requires_grad()) t.accumulate(opac, go);
    });
    return {{shape, img}, pixels};
}

/// Conv layer parameters for the shader.
struct Conv2dParams {
    nn::Linear conv;
    int kernel = 3;

    static Conv2dParams create(ad::ParameterStore& store, const std::string& name, Index in, Index out, int k,
                               std::mt19937_64& rng, double gain = 1.0) {
        return {nn::Linear::create(store, name, static_cast<Index>(k) * k * in, out, rng, gain), k};
    }

    nn::FeatureImage operator()(ad::Tape& t, const nn::FeatureImage& x, int stride = 1) const {
        return nn::conv2d(x, t.parameter(*conv.weight), t.parameter(*conv.bias), kernel, stride);
    }
};

/// Two-down / two-up convolutional UNet from rendered features to class logits.
class NeuralShader {
public:
    NeuralShader(ad::ParameterStore& store, Index in_channels, Index width, Index classes, std::mt19937_64& rng,
                 const std::string& name = "shader") {
        enc0_ = Conv2dParams::create(store, name + ".enc0", in_channels, width, 3, rng);
        enc1_ = Conv2dParams::create(store, name + ".enc1", width, 2 * width, 3, rng);
        enc2_ = Conv2dParams::create(store, name + ".enc2", 2 * width, 2 * width, 3, rng);
        dec1_ = Conv2dParams::create(store, name + ".dec1", 4 * width, width, 3, rng);
        dec0_ = Conv2dParams::create(store, name + ".dec0", 2 * width, width, 3, rng);
        out_ = Conv2dParams::create(store, name + ".out", width, classes, 1, rng, 0.5);
    }

    nn::FeatureImage operator()(ad::Tape& t, const nn::FeatureImage& f) const {
        const auto e0 = nn::relu(enc0_(t, f));
        const auto e1 = nn::relu(enc1_(t, e0, 2));
        const auto e2 = nn::relu(enc2_(t, e1, 2));
        const auto d1 = nn::relu(dec1_(t, nn::concat(nn::upsample2x(e2, e1.shape), e1)));
        const auto d0 = nn::relu(dec0_(t, nn::concat(nn::upsample2x(d1, e0.shape), e0)));
        return out_(t, d0);
    }

    std::vector<ad::Parameter*> parameters() const {
        std::vector<ad::Parameter*> out;
        for (const auto* c : {&enc0_, &enc1_, &enc2_, &dec1_, &dec0_, &out_}) {
            out.push_back(c->conv.weight);
            out.push_back(c->conv.bias);
        }
        return out;
    }

private:
    Conv2dParams enc0_, enc1_, enc2_, dec1_, dec0_, out_;
};

}  // namespace minkocc::render
