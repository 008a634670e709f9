#pragma once

#include "minkocc/fusion/frontend.hpp"
#include "minkocc/labels.hpp"
#include "minkocc/losses/losses.hpp"
#include "minkocc/train/config.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace minkocc::train {

/// One training example after augmentation. `supervise` flags voxels whose
/// ground truth may be used as a 3D target.
struct Sample {
    Matrix points;
    Matrix sweeps;
    std::vector<fusion::Image> images;
    std::vector<losses::PseudoLabelImage> pseudo;
    std::vector<Camera> cameras;
    DenseVoxelGrid gt;
    std::vector<std::uint8_t> supervise;
};

/// Ego-frame symmetry: optional mirror of x, then `quarter_turns` × 90° about z.
struct GroundTransform {
    bool flip_x = false;
    int quarter_turns = 0;

    Mat3 matrix() const {
        Mat3 f = Mat3::Identity();
        if (flip_x) f(0, 0) = -1.0;
        Mat3 r = Mat3::Identity();
        for (int k = 0; k < ((quarter_turns % 4) + 4) % 4; ++k) {
            Mat3 q;
            q << 0, -1, 0, 1, 0, 0, 0, 0, 1;
            r = q * r;
        }
        return r * f;
    }
};

inline void check_symmetric(const GridConfig& g, bool square) {
    const Vec3 hi = g.max();
    if (std::abs(g.min.x() + hi.x()) > 1e-9 || std::abs(g.min.y() + hi.y()) > 1e-9 || (square && g.nx != g.ny))
        throw std::invalid_argument("augment: grid must be centered on the ego origin in x and y");
}

/// Applies `tr` to points (columns 0..2), sweeps, the label grid and the
/// camera extrinsics; images are untouched since each camera moves with the
/// scene.
inline Sample transform_3d(const Sample& in, const GroundTransform& tr) {
    check_symmetric(in.gt.grid, tr.quarter_turns % 2 != 0);
    const Mat3 m = tr.matrix();
    Sample out = in;
    const auto apply = [&](Matrix& p) {
        for (Index i = 0; i < p.rows(); ++i) {
            const Vec3 v = m * Vec3(p(i, 0), p(i, 1), p(i, 2));
            p(i, 0) = v.x();
            p(i, 1) = v.y();
            p(i, 2) = v.z();
        }
    };
    apply(out.points);
    apply(out.sweeps);
    Pose pose = Pose::Identity();
    pose.linear() = m;
    for (auto& c : out.cameras) c = c.transformed(pose);
    const auto& g = in.gt.grid;
    const Eigen::Matrix2i mi = m.topLeftCorner<2, 2>().cast<int>();
    for (int z = 0; z < g.nz; ++z)
        for (int y = 0; y < g.ny; ++y)
            for (int x = 0; x < g.nx; ++x) {
                // Centered doubled coordinates keep the index map exact.
                const Eigen::Vector2i c(2 * x + 1 - g.nx, 2 * y + 1 - g.ny);
                const Eigen::Vector2i d = mi * c;
                const int nx = (d.x() + g.nx - 1) / 2, ny = (d.y() + g.ny - 1) / 2;
                const auto src = g.linear(x, y, z), dst = g.linear(nx, ny, z);
                out.gt.labels[dst] = in.gt.labels[src];
                out.gt.mask[dst] = in.gt.mask[src];
                out.supervise[dst] = in.supervise[src];
            }
    return out;
}

/// Similarity warp of the image plane about the principal point:
/// p' = c + s R(theta) (p - c) + t.
struct ImageWarp {
    double scale = 1.0;
    double rotation = 0.0;
    double tx = 0.0;
    double ty = 0.0;

    bool identity() const { return scale == 1.0 && rotation == 0.0 && tx == 0.0 && ty == 0.0; }

    /// Camera whose projection equals the warped projection of `cam`
    /// (requires fx == fy).
    Camera apply(const Camera& cam) const {
        Camera c = cam;
        Mat3 rz = Mat3::Identity();
        rz(0, 0) = std::cos(rotation);
        rz(0, 1) = -std::sin(rotation);
        rz(1, 0) = std::sin(rotation);
        rz(1, 1) = std::cos(rotation);
        c.rotation = rz * cam.rotation;
        c.translation = rz * cam.translation;
        c.intrinsics(0, 0) *= scale;
        c.intrinsics(1, 1) *= scale;
        c.intrinsics(0, 2) += tx;
        c.intrinsics(1, 2) += ty;
        return c;
    }

    /// Source location of target pixel (u, v).
    std::pair<double, double> inverse(const Camera& cam, double u, double v) const {
        const double du = (u - tx - cam.cx()) / scale, dv = (v - ty - cam.cy()) / scale;
        const double cs = std::cos(rotation), sn = std::sin(rotation);
        return {cam.cx() + cs * du + sn * dv, cam.cy() - sn * du + cs * dv};
    }
};

/// Bilinear for RGB (zero outside), nearest for labels (unlabeled outside).
inline void warp_view(fusion::Image& image, losses::PseudoLabelImage& pseudo, const Camera& cam, const ImageWarp& w) {
    if (w.identity()) return;
    const int W = image.shape.width, H = image.shape.height;
    fusion::Image img{image.shape, Matrix::Zero(image.pixels.rows(), image.pixels.cols())};
    losses::PseudoLabelImage lab = pseudo;
    std::fill(lab.labels.begin(), lab.labels.end(), static_cast<std::uint8_t>(kUnlabeled));
    std::fill(lab.confidence.begin(), lab.confidence.end(), 0.0);
    for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
            const auto [su, sv] = w.inverse(cam, u, v);
            const Index dst = static_cast<Index>(v) * W + u;
            const int nu = static_cast<int>(std::lround(su)), nv = static_cast<int>(std::lround(sv));
            if (nu >= 0 && nv >= 0 && nu < W && nv < H) {
                const auto src = static_cast<std::size_t>(nv) * W + nu;
                lab.labels[static_cast<std::size_t>(dst)] = pseudo.labels[src];
                lab.confidence[static_cast<std::size_t>(dst)] = pseudo.confidence[src];
            }
            const int u0 = static_cast<int>(std::floor(su)), v0 = static_cast<int>(std::floor(sv));
            const double fu = su - u0, fv = sv - v0;
            for (int dv = 0; dv < 2; ++dv)
                for (int du = 0; du < 2; ++du) {
                    const int uu = u0 + du, vv = v0 + dv;
                    const double wt = (du ? fu : 1.0 - fu) * (dv ? fv : 1.0 - fv);
                    if (wt == 0.0 || uu < 0 || vv < 0 || uu >= W || vv >= H) continue;
                    img.pixels.row(dst) += wt * image.pixels.row(static_cast<Index>(vv) * W + uu);
                }
        }
    image = std::move(img);
    pseudo = std::move(lab);
}

/// Per-channel gain and offset, clamped to [0, 1].
inline void perturb_rgb(fusion::Image& image, double magnitude, std::mt19937_64& rng) {
    if (magnitude <= 0) return;
    std::uniform_real_distribution<double> u(-magnitude, magnitude);
    for (Index c = 0; c < image.pixels.cols(); ++c) {
        const double gain = 1.0 + u(rng), offset = u(rng);
        image.pixels.col(c) = (image.pixels.col(c).array() * gain + offset).cwiseMax(0.0).cwiseMin(1.0).matrix();
    }
}

inline Sample augment_3d(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
    GroundTransform tr;
    std::bernoulli_distribution coin(0.5);
    std::uniform_int_distribution<int> turns(0, 3);
    tr.flip_x = cfg.flip && coin(rng);
    const bool square = in.gt.grid.nx == in.gt.grid.ny;
    tr.quarter_turns = cfg.rotate ? (square ? turns(rng) : 2 * static_cast<int>(coin(rng))) : 0;
    Sample out = (tr.flip_x || tr.quarter_turns != 0) ? transform_3d(in, tr) : in;
    if (cfg.gt_dropout > 0) {
        std::bernoulli_distribution drop(cfg.gt_dropout);
        for (std::size_t i = 0; i < out.gt.labels.size(); ++i)
            if (out.gt.labels[i] != kFreeClass && drop(rng)) out.supervise[i] = 0;
    }
    return out;
}

inline Sample augment_2d(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
    Sample out = in;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t c = 0; c < out.cameras.size(); ++c) {
        ImageWarp w{1.0 + cfg.image_scale * u(rng), cfg.image_rotate * u(rng), cfg.image_shift * u(rng), cfg.image_shift * u(rng)};
        warp_view(out.images[c], out.pseudo[c], in.cameras[c], w);
        if (!w.identity()) out.cameras[c] = w.apply(in.cameras[c]);
        perturb_rgb(out.images[c], cfg.rgb, rng);
    }
    return out;
}

inline Sample augment(const Sample& in, const AugmentConfig& cfg, std::mt19937_64& rng) {
    if (!cfg.enabled) return in;
    return augment_2d(augment_3d(in, cfg, rng), cfg, rng);
}

}  // namespace minkocc::train
