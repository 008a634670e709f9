#pragma once

#include "minkocc/fusion/frontend.hpp"
#include "minkocc/geometry.hpp"
#include "minkocc/labels.hpp"
#include "minkocc/losses/losses.hpp"
#include "minkocc/raycast.hpp"
#include "minkocc/scene/scene.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace minkocc::scene {

inline constexpr double kDegree = std::numbers::pi / 180.0;

/// Rotating LiDAR: `rings` elevations evenly spaced over
/// [elevation_min, elevation_max] (radians) times `azimuth_steps` azimuths.
struct BeamConfig {
    int rings = 32;
    int azimuth_steps = 180;
    double elevation_min = -30.0 * kDegree;
    double elevation_max = 10.0 * kDegree;
    double max_range = 40.0;
    double range_noise = 0.02;
    Vec3 mount{0.0, 0.0, 1.2};

    void validate() const {
        if (rings < 1 || azimuth_steps < 1) throw std::invalid_argument("beam config: need at least one ring and azimuth");
        if (!(elevation_min <= elevation_max)) throw std::invalid_argument("beam config: elevation range reversed");
        if (!(max_range > 0) || !(range_noise >= 0)) throw std::invalid_argument("beam config: bad range settings");
    }

    /// Unit direction in the ego frame.
    Vec3 direction(int ring, int azimuth) const {
        const double el = rings == 1 ? elevation_min
                                     : elevation_min + (elevation_max - elevation_min) * ring / (rings - 1);
        const double az = 2.0 * std::numbers::pi * azimuth / azimuth_steps;
        return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
    }
};

/// Per-class return intensity.
inline double intensity_of(int label) { return 0.1 + 0.05 * label; }

/// One sweep from ego pose `ego` (ego → world). Returns N×4 rows
/// (x, y, z, intensity) in that sweep's ego frame, ring-major order.
inline Matrix simulate_lidar(const Scene& s, const Pose& ego, const BeamConfig& beam, std::mt19937_64& rng) {
    beam.validate();
    std::normal_distribution<double> noise(0.0, beam.range_noise);
    const Vec3 origin = ego * beam.mount;
    const Pose to_ego = ego.inverse();
    std::vector<double> rows;
    rows.reserve(static_cast<std::size_t>(beam.rings * beam.azimuth_steps) * 4);
    for (int r = 0; r < beam.rings; ++r) {
        for (int a = 0; a < beam.azimuth_steps; ++a) {
            const Vec3 d = ego.linear() * beam.direction(r, a);
            const auto hit = cast_ray(s, origin, d, beam.max_range);
            if (!hit) continue;
            const double range = hit->distance + (beam.range_noise > 0 ? noise(rng) : 0.0);
            const Vec3 p = to_ego * (origin + range * d);
            rows.insert(rows.end(), {p.x(), p.y(), p.z(), intensity_of(hit->label)});
        }
    }
    Matrix out(static_cast<Index>(rows.size() / 4), 4);
    for (Index i = 0; i < out.rows(); ++i)
        for (Index c = 0; c < 4; ++c) out(i, c) = rows[static_cast<std::size_t>(i * 4 + c)];
    return out;
}

struct Sweep {
    Matrix points;
    std::optional<Pose> pose;
    double timestamp = 0.0;
};

/// sweeps[0] is the current sweep, followed by older ones.
struct SweepSet {
    std::vector<Sweep> sweeps;
};

/// Simulates one sweep per trajectory pose of the scene.
inline SweepSet simulate_sweeps(const Scene& s, const BeamConfig& beam, std::mt19937_64& rng) {
    SweepSet out;
    for (const auto& tp : s.trajectory) out.sweeps.push_back({simulate_lidar(s, tp.pose, beam, rng), tp.pose, tp.timestamp});
    return out;
}

/// Concatenates all sweeps in the current ego frame with an appended age
/// column (seconds before the current sweep). Output is N×(d+1).
inline Matrix accumulate_sweeps(const SweepSet& set) {
    if (set.sweeps.empty()) throw std::invalid_argument("accumulate_sweeps: no sweeps");
    for (std::size_t k = 0; k < set.sweeps.size(); ++k) {
        if (!set.sweeps[k].pose) throw std::invalid_argument("accumulate_sweeps: sweep " + std::to_string(k) + " has no pose");
        if (k > 0 && !(set.sweeps[k].timestamp < set.sweeps[k - 1].timestamp))
            throw std::invalid_argument("accumulate_sweeps: timestamps must decrease into the past");
    }
    const Index d = set.sweeps[0].points.cols();
    Index n = 0;
    for (const auto& s : set.sweeps) {
        if (s.points.rows() > 0 && s.points.cols() != d) throw std::invalid_argument("accumulate_sweeps: column mismatch");
        n += s.points.rows();
    }
    const Pose current_inv = set.sweeps[0].pose->inverse();
    Matrix out(n, d + 1);
    Index row = 0;
    for (const auto& s : set.sweeps) {
        const Pose rel = current_inv * *s.pose;
        const double age = set.sweeps[0].timestamp - s.timestamp;
        for (Index i = 0; i < s.points.rows(); ++i, ++row) {
            const Vec3 p = rel * Vec3(s.points(i, 0), s.points(i, 1), s.points(i, 2));
            out(row, 0) = p.x();
            out(row, 1) = p.y();
            out(row, 2) = p.z();
            for (Index c = 3; c < d; ++c) out(row, c) = s.points(i, c);
            out(row, d) = age;
        }
    }
    return out;
}

struct CameraRigConfig {
    int count = 4;
    int width = 64;
    int height = 48;
    double fov = 90.0 * kDegree;
    Vec3 mount{0.0, 0.0, 1.0};
};

/// `count` level cameras at evenly spaced yaws starting along +x.
inline std::vector<Camera> camera_rig(const CameraRigConfig& cfg) {
    if (cfg.count < 0) throw std::invalid_argument("camera rig: negative camera count");
    std::vector<Camera> cams;
    for (int i = 0; i < cfg.count; ++i)
        cams.push_back(Camera::looking(2.0 * std::numbers::pi * i / cfg.count, cfg.mount, cfg.width, cfg.height, cfg.fov));
    for (const auto& c : cams) c.validate();
    return cams;
}

/// First surface seen through each pixel (row v * W + u); nullopt for sky.
inline std::vector<std::optional<SurfaceHit>> trace_camera(const Scene& s, const Camera& cam, double max_range = 200.0) {
    std::vector<std::optional<SurfaceHit>> out(static_cast<std::size_t>(cam.width * cam.height));
    const Vec3 o = cam.origin();
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u)
            out[static_cast<std::size_t>(v * cam.width + u)] = cast_ray(s, o, cam.ray_direction(u, v), max_range);
    return out;
}

/// Marks every grid cell a ray passes through up to half a voxel beyond its
/// first hit.
inline void mark_visible(const Scene& s, DenseVoxelGrid& g, const Vec3& o, const Vec3& d, double max_range) {
    const auto hit = cast_ray(s, o, d, max_range);
    const double t_max = hit ? hit->distance + 0.5 * g.grid.voxel_size : max_range;
    traverse_grid(g.grid, o, d, t_max, [&](const Eigen::Vector3i& c, double, double) {
        g.mask[g.grid.linear(c.x(), c.y(), c.z())] = 1;
        return true;
    });
}

/// Labels each voxel by the class at its center. The visibility mask holds
/// the voxels reached by camera rays (supersampled per pixel) or by LiDAR
/// beams from any trajectory pose, stopping just past the first hit.
inline DenseVoxelGrid rasterize_ground_truth(const Scene& s, const GridConfig& grid, const std::vector<Camera>& cameras,
                                             const BeamConfig& beam, int supersample = 2) {
    if (supersample < 1) throw std::invalid_argument("rasterize_ground_truth: supersample must be >= 1");
    auto g = DenseVoxelGrid::filled(grid, kFreeClass, false);
    for (int z = 0; z < grid.nz; ++z)
        for (int y = 0; y < grid.ny; ++y)
            for (int x = 0; x < grid.nx; ++x) g.set(x, y, z, s.label_at(grid.center(x, y, z)));

    const double reach = (grid.max() - grid.min).norm() * 2.0 + 1.0;
    for (const auto& cam : cameras) {
        const Vec3 o = cam.origin();
        for (int v = 0; v < cam.height * supersample; ++v)
            for (int u = 0; u < cam.width * supersample; ++u) {
                const double pu = (u + 0.5) / supersample - 0.5, pv = (v + 0.5) / supersample - 0.5;
                mark_visible(s, g, o, cam.ray_direction(pu, pv), reach);
            }
    }
    for (const auto& tp : s.trajectory) {
        const Vec3 o = tp.pose * beam.mount;
        for (int r = 0; r < beam.rings; ++r)
            for (int a = 0; a < beam.azimuth_steps; ++a)
                mark_visible(s, g, o, tp.pose.linear() * beam.direction(r, a), beam.max_range);
    }
    return g;
}

struct PseudoLabelNoise {
    double p_drop = 0.1;
    double p_flip = 0.1;
    double clean_low = 0.8, clean_high = 1.0;
    double corrupt_low = 0.3, corrupt_high = 0.6;

    void validate() const {
        if (!(p_drop >= 0 && p_flip >= 0 && p_drop + p_flip <= 1.0))
            throw std::invalid_argument("pseudo-label noise: probabilities must be nonnegative and sum to at most 1");
        if (!(0 <= clean_low && clean_low <= clean_high && clean_high <= 1 && 0 <= corrupt_low &&
              corrupt_low <= corrupt_high && corrupt_high <= 1))
            throw std::invalid_argument("pseudo-label noise: confidence ranges must lie in [0, 1]");
    }
};

enum class RegionFate : std::uint8_t { clean, dropped, flipped };

/// Class a detector plausibly mistakes `label` for.
inline int confusable(int label) {
    switch (label) {
        case kCar: return kTruck;
        case kTruck: return kCar;
        case kPedestrian: return kBicycle;
        case kDriveableSurface: return kSidewalk;
        case kSidewalk: return kDriveableSurface;
        default: return label % (kFreeClass - 1) + 1;
    }
}

struct RegionDraw {
    RegionFate fate = RegionFate::clean;
    double confidence = 1.0;
};

/// One fate and confidence per region, drawn in order.
inline std::vector<RegionDraw> draw_regions(std::size_t n, const PseudoLabelNoise& noise, std::mt19937_64& rng) {
    noise.validate();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<RegionDraw> out(n);
    for (auto& r : out) {
        const double x = u(rng);
        r.fate = x < noise.p_drop ? RegionFate::dropped
                 : x < noise.p_drop + noise.p_flip ? RegionFate::flipped
                                                   : RegionFate::clean;
        const double c = u(rng);
        if (r.fate == RegionFate::dropped) r.confidence = 0.0;
        else if (r.fate == RegionFate::flipped) r.confidence = noise.corrupt_low + c * (noise.corrupt_high - noise.corrupt_low);
        else r.confidence = noise.clean_low + c * (noise.clean_high - noise.clean_low);
    }
    return out;
}

/// Region key of a hit: the primitive index, or -1 - class for ground.
inline int region_key(const SurfaceHit& h) { return h.primitive >= 0 ? h.primitive : -1 - h.label; }

/// First-hit semantics per pixel with region-level corruption. Sky pixels
/// are unlabeled with confidence 0.
inline losses::PseudoLabelImage render_pseudo_labels(const std::vector<std::optional<SurfaceHit>>& hits, const Camera& cam,
                                                     const PseudoLabelNoise& noise, std::mt19937_64& rng) {
    losses::PseudoLabelImage out{cam.width, cam.height, std::vector<std::uint8_t>(hits.size(), kUnlabeled),
                                 std::vector<double>(hits.size(), 0.0)};
    std::map<int, std::size_t> regions;
    for (const auto& h : hits)
        if (h) regions.emplace(region_key(*h), 0);
    std::size_t next = 0;
    for (auto& [key, idx] : regions) idx = next++;
    const auto draws = draw_regions(regions.size(), noise, rng);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        if (!hits[i]) continue;
        const auto& d = draws[regions.at(region_key(*hits[i]))];
        if (d.fate == RegionFate::dropped) continue;
        out.labels[i] = static_cast<std::uint8_t>(d.fate == RegionFate::flipped ? confusable(hits[i]->label) : hits[i]->label);
        out.confidence[i] = d.confidence;
    }
    return out;
}

inline losses::PseudoLabelImage render_pseudo_labels(const Scene& s, const Camera& cam, const PseudoLabelNoise& noise,
                                                     std::mt19937_64& rng) {
    return render_pseudo_labels(trace_camera(s, cam), cam, noise, rng);
}

/// Shaded palette colors in [0, 1] with optional Gaussian pixel noise.
inline fusion::Image render_rgb(const std::vector<std::optional<SurfaceHit>>& hits, const Camera& cam, double pixel_noise,
                                std::mt19937_64& rng) {
    fusion::Image img{{cam.width, cam.height}, Matrix(static_cast<Index>(hits.size()), 3)};
    const Vec3 light = Vec3(0.3, 0.2, 0.9).normalized();
    const Vec3 sky(0.53, 0.81, 0.92);
    std::normal_distribution<double> noise(0.0, pixel_noise);
    for (std::size_t i = 0; i < hits.size(); ++i) {
        Vec3 c = sky;
        if (hits[i]) {
            const auto& rgb = kPalette[static_cast<std::size_t>(hits[i]->label)];
            const double shade = 0.35 + 0.65 * std::max(0.0, hits[i]->normal.dot(light));
            c = shade * Vec3(rgb[0], rgb[1], rgb[2]) / 255.0;
        }
        for (int ch = 0; ch < 3; ++ch) {
            const double n = pixel_noise > 0 ? noise(rng) : 0.0;
            img.pixels(static_cast<Index>(i), ch) = std::clamp(c[ch] + n, 0.0, 1.0);
        }
    }
    return img;
}

}  // namespace minkocc::scene
