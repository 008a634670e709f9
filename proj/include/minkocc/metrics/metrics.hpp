#pragma once

#include "minkocc/geometry.hpp"
#include "minkocc/labels.hpp"
#include "minkocc/raycast.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace minkocc::metrics {

using ClassArray = std::array<std::uint64_t, kClassCount>;

struct ConfusionCounts {
    ClassArray tp{}, fp{}, fn{};

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        for (int c = 0; c < kClassCount; ++c) {
            tp[c] += o.tp[c];
            fp[c] += o.fp[c];
            fn[c] += o.fn[c];
        }
        return *this;
    }

    bool present(int c) const { return tp[c] + fp[c] + fn[c] > 0; }
    double iou(int c) const { return present(c) ? static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c] + fn[c]) : 0.0; }
};

struct ClassScores {
    std::array<double, kClassCount> iou{};
    std::array<bool, kClassCount> present{};
    /// Mean over present non-free classes; 1 when none are present (pred and
    /// gt then agree everywhere under the mask).
    double mean = 1.0;
};

inline ClassScores scores(const ConfusionCounts& c) {
    ClassScores s;
    double sum = 0.0;
    int n = 0;
    for (int k = 0; k < kClassCount; ++k) {
        s.present[k] = k != kFreeClass && c.present(k);
        s.iou[k] = c.iou(k);
        if (s.present[k]) sum += s.iou[k], ++n;
    }
    if (n > 0) s.mean = sum / n;
    return s;
}

inline void check_same_shape(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<std::uint8_t>& mask) {
    if (!(pred.grid == gt.grid) || pred.labels.size() != gt.labels.size() || mask.size() != gt.labels.size())
        throw std::invalid_argument("metrics: prediction, ground truth and mask differ in shape");
}

/// Per-class counts over voxels with mask != 0.
inline ConfusionCounts confusion(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<std::uint8_t>& mask) {
    check_same_shape(pred, gt, mask);
    ConfusionCounts c;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
        if (!mask[i]) continue;
        const int p = pred.labels[i], g = gt.labels[i];
        if (p == g) {
            ++c.tp[p];
        } else {
            ++c.fp[p];
            ++c.fn[g];
        }
    }
    return c;
}

inline ClassScores miou(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<std::uint8_t>& mask) {
    return scores(confusion(pred, gt, mask));
}

/// Uses the ground-truth visibility mask.
inline ClassScores miou(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt) { return miou(pred, gt, gt.mask); }

struct RayHit {
    Eigen::Vector3i voxel;
    double distance = 0.0;
    int label = kFreeClass;
};

/// First non-free voxel with mask != 0 along a unit ray, with the
/// parametric distance at which the ray enters it.
inline std::optional<RayHit> ray_first_hit(const DenseVoxelGrid& g, const std::vector<std::uint8_t>& mask, const Vec3& origin,
                                           const Vec3& direction) {
    if (std::abs(direction.norm() - 1.0) > 1e-9) throw std::invalid_argument("ray_first_hit: direction must be unit length");
    std::optional<RayHit> hit;
    traverse_grid(g.grid, origin, direction, std::numeric_limits<double>::infinity(),
                  [&](const Eigen::Vector3i& c, double t_in, double) {
                      const auto i = g.grid.linear(c.x(), c.y(), c.z());
                      if (g.labels[i] == kFreeClass || !mask[i]) return true;
                      hit = RayHit{c, t_in, g.labels[i]};
                      return false;
                  });
    return hit;
}

inline std::optional<RayHit> ray_first_hit(const DenseVoxelGrid& g, const Vec3& origin, const Vec3& direction) {
    return ray_first_hit(g, g.mask, origin, direction);
}

struct Ray {
    Vec3 origin;
    Vec3 direction;
};

inline const std::vector<double>& default_thresholds() {
    static const std::vector<double> t{1.0, 2.0, 4.0};
    return t;
}

/// Ray-level counts per threshold. A ray is a true positive for class c at
/// threshold tau when both grids first hit class c with depths within tau;
/// otherwise the predicted hit (if any) is a false positive and the
/// ground-truth hit (if any) a false negative.
struct RayCounts {
    std::vector<double> thresholds = default_thresholds();
    std::vector<ConfusionCounts> counts = std::vector<ConfusionCounts>(default_thresholds().size());

    RayCounts& operator+=(const RayCounts& o) {
        if (o.thresholds != thresholds) throw std::invalid_argument("ray counts: thresholds differ");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }

    /// Per-threshold mean class IoU.
    std::vector<double> per_threshold() const {
        std::vector<double> out;
        for (const auto& c : counts) out.push_back(scores(c).mean);
        return out;
    }

    /// Class mean, then threshold mean.
    double score() const {
        const auto v = per_threshold();
        double s = 0.0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    }
};

/// Both grids are read through the ground-truth mask.
inline RayCounts ray_counts(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<Ray>& rays,
                            const std::vector<double>& thresholds = default_thresholds()) {
    check_same_shape(pred, gt, gt.mask);
    RayCounts out;
    out.thresholds = thresholds;
    out.counts.assign(thresholds.size(), {});
    for (const auto& r : rays) {
        const auto hp = ray_first_hit(pred, gt.mask, r.origin, r.direction);
        const auto hg = ray_first_hit(gt, gt.mask, r.origin, r.direction);
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            auto& c = out.counts[t];
            if (hp && hg && hp->label == hg->label && std::abs(hp->distance - hg->distance) <= thresholds[t]) {
                ++c.tp[hp->label];
                continue;
            }
            if (hp) ++c.fp[hp->label];
            if (hg) ++c.fn[hg->label];
        }
    }
    return out;
}

inline double rayiou(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<Ray>& rays,
                     const std::vector<double>& thresholds = default_thresholds()) {
    return ray_counts(pred, gt, rays, thresholds).score();
}

/// Query rays in a rotating-LiDAR pattern from `origin`.
inline std::vector<Ray> lidar_rays(const Vec3& origin, int rings, int azimuth_steps, double elevation_min, double elevation_max) {
    std::vector<Ray> rays;
    for (int r = 0; r < rings; ++r) {
        const double el = rings == 1 ? elevation_min : elevation_min + (elevation_max - elevation_min) * r / (rings - 1);
        for (int a = 0; a < azimuth_steps; ++a) {
            const double az = 2.0 * std::numbers::pi * a / azimuth_steps;
            rays.push_back({origin, Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el))});
        }
    }
    return rays;
}

/// Dataset-level evaluation summary.
struct Report {
    ConfusionCounts voxels;
    RayCounts rays;
    int frames = 0;

    void add(const DenseVoxelGrid& pred, const DenseVoxelGrid& gt, const std::vector<Ray>& query) {
        voxels += confusion(pred, gt, gt.mask);
        rays += ray_counts(pred, gt, query, rays.thresholds);
        ++frames;
    }

    double miou() const { return scores(voxels).mean; }
    double rayiou() const { return rays.score(); }

    nlohmann::json to_json() const {
        const auto s = scores(voxels);
        nlohmann::json j;
        j["frames"] = frames;
        j["protocol"] =
            "mIoU over visible voxels, free excluded, classes absent from both grids skipped; RayIoU from LiDAR-pattern "
            "query rays at the ego sensor, per-class IoU averaged over classes then thresholds";
        j["miou"] = s.mean;
        j["classes"] = nlohmann::json::array();
        for (int c = 0; c < kFreeClass; ++c)
            j["classes"].push_back({{"id", c}, {"name", std::string(kClassNames[c])}, {"present", s.present[c]},
                                    {"iou", s.present[c] ? nlohmann::json(s.iou[c]) : nlohmann::json()},
                                    {"tp", voxels.tp[c]}, {"fp", voxels.fp[c]}, {"fn", voxels.fn[c]}});
        j["rayiou"] = rays.score();
        j["rayiou_thresholds"] = rays.thresholds;
        j["rayiou_per_threshold"] = rays.per_threshold();
        return j;
    }

    /// Aligned table: one row per non-free class in label order, then the
    /// summary scores.
    std::string to_text() const {
        const auto s = scores(voxels);
        std::ostringstream o;
        o << "# RayIoU: LiDAR-pattern query rays from the ego sensor; thresholds";
        for (double t : rays.thresholds) o << ' ' << t;
        o << " m; class mean then threshold mean\n";
        o << std::left << std::setw(22) << "class" << std::right << std::setw(10) << "IoU" << '\n';
        o << std::fixed << std::setprecision(4);
        for (int c = 0; c < kFreeClass; ++c) {
            o << std::left << std::setw(22) << kClassNames[c] << std::right << std::setw(10);
            if (s.present[c]) o << s.iou[c];
            else o << "-";
            o << '\n';
        }
        o << std::left << std::setw(22) << "mIoU" << std::right << std::setw(10) << s.mean << '\n';
        const auto per = rays.per_threshold();
        for (std::size_t t = 0; t < per.size(); ++t) {
            std::ostringstream name;
            name << "RayIoU@" << std::setprecision(0) << std::fixed << rays.thresholds[t] << "m";
            o << std::left << std::setw(22) << name.str() << std::right << std::setw(10) << per[t] << '\n';
        }
        o << std::left << std::setw(22) << "RayIoU" << std::right << std::setw(10) << rays.score() << '\n';
        return o.str();
    }
};

}  // namespace minkocc::metrics
