#pragma once

#include "minkocc/geometry.hpp"
#include "minkocc/labels.hpp"
#include "minkocc/raycast.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace minkocc::scene {

enum class Shape : std::uint8_t { box = 0, cylinder = 1 };

/// A solid standing on the ground. Boxes use half_extent in their yawed
/// frame; cylinders use half_extent.x() as radius and half_extent.z() as
/// half height.
struct Primitive {
    Shape shape = Shape::box;
    Vec3 center = Vec3::Zero();
    Vec3 half_extent = Vec3::Ones();
    double yaw = 0.0;
    int label = kCar;

    double radius() const { return half_extent.x(); }

    Vec3 dir_to_local(const Vec3& d) const {
        const double c = std::cos(yaw), s = std::sin(yaw);
        return {c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()};
    }
    Vec3 dir_from_local(const Vec3& d) const {
        const double c = std::cos(yaw), s = std::sin(yaw);
        return {c * d.x() - s * d.y(), s * d.x() + c * d.y(), d.z()};
    }
    Vec3 to_local(const Vec3& p) const { return dir_to_local(p - center); }

    bool contains(const Vec3& p) const {
        const Vec3 q = to_local(p);
        if (shape == Shape::box)
            return std::abs(q.x()) <= half_extent.x() && std::abs(q.y()) <= half_extent.y() &&
                   std::abs(q.z()) <= half_extent.z();
        return q.x() * q.x() + q.y() * q.y() <= radius() * radius() && std::abs(q.z()) <= half_extent.z();
    }

    /// Radius of the smallest vertical cylinder about the center that holds
    /// the footprint.
    double footprint_radius() const {
        return shape == Shape::box ? std::hypot(half_extent.x(), half_extent.y()) : radius();
    }
};

/// True when the ground footprints of a and b come within `margin` meters
/// along some separating axis (conservative for boxes).
inline bool footprints_overlap(const Primitive& a, const Primitive& b, double margin) {
    const Eigen::Vector2d ca = a.center.head<2>(), cb = b.center.head<2>();
    if (a.shape == Shape::cylinder && b.shape == Shape::cylinder)
        return (cb - ca).norm() < a.radius() + b.radius() + margin;
    if (a.shape == Shape::cylinder) return footprints_overlap(b, a, margin);
    if (b.shape == Shape::cylinder) {
        const Vec3 q = a.to_local(b.center);
        const double dx = std::max(std::abs(q.x()) - a.half_extent.x(), 0.0);
        const double dy = std::max(std::abs(q.y()) - a.half_extent.y(), 0.0);
        return std::hypot(dx, dy) < b.radius() + margin;
    }
    const auto axes = [](const Primitive& p) {
        return std::array<Eigen::Vector2d, 2>{Eigen::Vector2d(std::cos(p.yaw), std::sin(p.yaw)),
                                              Eigen::Vector2d(-std::sin(p.yaw), std::cos(p.yaw))};
    };
    const auto ua = axes(a), ub = axes(b);
    const Eigen::Vector2d gap = cb - ca;
    for (const auto& n : {ua[0], ua[1], ub[0], ub[1]}) {
        const double ra = a.half_extent.x() * std::abs(n.dot(ua[0])) + a.half_extent.y() * std::abs(n.dot(ua[1]));
        const double rb = b.half_extent.x() * std::abs(n.dot(ub[0])) + b.half_extent.y() * std::abs(n.dot(ub[1]));
        if (std::abs(n.dot(gap)) >= ra + rb + margin) return false;
    }
    return true;
}

struct TimedPose {
    Pose pose = Pose::Identity();
    double timestamp = 0.0;
};

/// Static world in the current ego frame: a ground plane split into a road
/// band (|y| <= road_half_width) and sidewalk, plus standing primitives.
struct Scene {
    double ground_z = -0.6;
    double road_half_width = 6.0;
    std::vector<Primitive> primitives;
    /// Ego poses (ego → world), current first, then older with strictly
    /// decreasing timestamps.
    std::vector<TimedPose> trajectory;
    int requested = 0;
    int failed = 0;

    int ground_label(const Vec3& p) const { return std::abs(p.y()) <= road_half_width ? kDriveableSurface : kSidewalk; }

    /// Semantic class at a point: the containing primitive, else ground at or
    /// below the plane, else free.
    int label_at(const Vec3& p) const {
        for (const auto& prim : primitives)
            if (prim.contains(p)) return prim.label;
        if (p.z() <= ground_z) return ground_label(p);
        return kFreeClass;
    }
};

struct SceneConfig {
    int cars = 5;
    int trucks = 2;
    int pedestrians = 6;
    /// Footprint centers satisfy |x|, |y| <= extent - footprint radius.
    double extent = 14.0;
    double ego_clearance = 2.5;
    double margin = 0.3;
    int max_retries = 200;
    int past_sweeps = 4;
    double sweep_interval = 0.5;
    double max_speed = 3.0;
    double ground_z = -0.6;
    double road_half_width = 6.0;

    void validate() const {
        if (cars < 0 || trucks < 0 || pedestrians < 0) throw std::invalid_argument("scene config: negative primitive count");
        if (!(extent > 0) || !(margin >= 0) || !(ego_clearance >= 0) || max_retries < 1)
            throw std::invalid_argument("scene config: placement ranges must be positive");
        if (past_sweeps < 0 || !(sweep_interval > 0) || !(max_speed >= 0))
            throw std::invalid_argument("scene config: invalid trajectory settings");
        if (!(road_half_width > 0)) throw std::invalid_argument("scene config: road width must be positive");
    }
};

/// Deterministic in (rng state, config). Placement uses rejection sampling;
/// primitives that exhaust the retry budget are counted in Scene::failed.
inline Scene generate_scene(std::mt19937_64& rng, const SceneConfig& cfg) {
    cfg.validate();
    using Uniform = std::uniform_real_distribution<double>;
    Scene s;
    s.ground_z = cfg.ground_z;
    s.road_half_width = cfg.road_half_width;
    const double speed = Uniform(0.0, cfg.max_speed)(rng);
    for (int k = 0; k <= cfg.past_sweeps; ++k) {
        TimedPose tp;
        tp.timestamp = -k * cfg.sweep_interval;
        tp.pose = Pose::Identity();
        tp.pose.translation() = Vec3(speed * tp.timestamp, 0.0, 0.0);
        s.trajectory.push_back(tp);
    }

    const auto place = [&](Primitive p, bool on_road) {
        ++s.requested;
        for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
            const double r = p.footprint_radius();
            const double lim = cfg.extent - r;
            double y;
            if (on_road) {
                y = Uniform(-cfg.road_half_width + p.half_extent.y(), cfg.road_half_width - p.half_extent.y())(rng);
            } else {
                const double mag = Uniform(cfg.road_half_width + r, lim)(rng);
                y = (rng() & 1) ? mag : -mag;
            }
            p.center = Vec3(Uniform(-lim, lim)(rng), y, cfg.ground_z + p.half_extent.z());
            if (p.shape == Shape::box) p.yaw = ((rng() & 1) ? 0.0 : std::numbers::pi) + Uniform(-0.15, 0.15)(rng);
            bool ok = true;
            for (const auto& tp : s.trajectory)
                if ((p.center.head<2>() - tp.pose.translation().head<2>()).norm() < r + cfg.ego_clearance) ok = false;
            for (const auto& q : s.primitives)
                if (ok && footprints_overlap(p, q, cfg.margin)) ok = false;
            if (ok) {
                s.primitives.push_back(p);
                return;
            }
        }
        ++s.failed;
    };

    for (int i = 0; i < cfg.trucks; ++i) {
        Primitive p;
        p.label = kTruck;
        p.half_extent = Vec3(Uniform(2.8, 4.2)(rng), Uniform(1.15, 1.3)(rng), Uniform(1.4, 1.75)(rng));
        place(p, true);
    }
    for (int i = 0; i < cfg.cars; ++i) {
        Primitive p;
        p.label = kCar;
        p.half_extent = Vec3(Uniform(1.8, 2.3)(rng), Uniform(0.85, 1.0)(rng), Uniform(0.7, 0.85)(rng));
        place(p, true);
    }
    for (int i = 0; i < cfg.pedestrians; ++i) {
        Primitive p;
        p.shape = Shape::cylinder;
        p.label = kPedestrian;
        const double r = Uniform(0.36, 0.45)(rng);
        p.half_extent = Vec3(r, r, Uniform(0.8, 0.95)(rng));
        place(p, false);
    }
    return s;
}

/// Nearest t > eps where o + t d meets the primitive's surface, with the
/// outward unit normal there.
inline std::optional<std::pair<double, Vec3>> intersect(const Primitive& p, const Vec3& o, const Vec3& d) {
    constexpr double eps = 1e-9;
    const Vec3 q = p.to_local(o);
    const Vec3 e = p.dir_to_local(d);
    const Vec3& h = p.half_extent;
    if (p.shape == Shape::box) {
        const auto span = ray_aabb(q, e, -h, h);
        if (!span) return std::nullopt;
        const double t = span->first > eps ? span->first : span->second;
        if (t <= eps) return std::nullopt;
        const Vec3 x = q + t * e;
        int axis = 0;
        double best = -1.0;
        for (int a = 0; a < 3; ++a) {
            const double f = std::abs(x[a]) / h[a];
            if (f > best) best = f, axis = a;
        }
        Vec3 n = Vec3::Zero();
        n[axis] = x[axis] >= 0 ? 1.0 : -1.0;
        return std::make_pair(t, p.dir_from_local(n));
    }
    const double r = p.radius();
    std::optional<std::pair<double, Vec3>> best;
    const auto offer = [&](double t, const Vec3& n) {
        if (t > eps && (!best || t < best->first)) best = std::make_pair(t, n);
    };
    const double a = e.x() * e.x() + e.y() * e.y();
    if (a > 0) {
        const double b = q.x() * e.x() + q.y() * e.y();
        const double c = q.x() * q.x() + q.y() * q.y() - r * r;
        const double disc = b * b - a * c;
        if (disc >= 0) {
            const double root = std::sqrt(disc);
            for (double t : {(-b - root) / a, (-b + root) / a}) {
                const Vec3 x = q + t * e;
                if (std::abs(x.z()) <= h.z()) offer(t, Vec3(x.x() / r, x.y() / r, 0.0));
            }
        }
    }
    if (e.z() != 0) {
        for (double zc : {-h.z(), h.z()}) {
            const double t = (zc - q.z()) / e.z();
            const Vec3 x = q + t * e;
            if (x.x() * x.x() + x.y() * x.y() <= r * r) offer(t, Vec3(0.0, 0.0, zc > 0 ? 1.0 : -1.0));
        }
    }
    if (best) best->second = p.dir_from_local(best->second);
    return best;
}

struct SurfaceHit {
    double distance = 0.0;
    int label = kFreeClass;
    /// Index into Scene::primitives, or -1 for the ground.
    int primitive = -1;
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitZ();
};

/// First surface along the unit ray within max_range.
inline std::optional<SurfaceHit> cast_ray(const Scene& s, const Vec3& o, const Vec3& d, double max_range) {
    std::optional<SurfaceHit> hit;
    if (d.z() < 0 && o.z() > s.ground_z) {
        const double t = (s.ground_z - o.z()) / d.z();
        if (t <= max_range) {
            SurfaceHit h;
            h.distance = t;
            h.point = o + t * d;
            h.point.z() = s.ground_z;
            h.label = s.ground_label(h.point);
            hit = h;
        }
    }
    for (std::size_t i = 0; i < s.primitives.size(); ++i) {
        const auto r = intersect(s.primitives[i], o, d);
        if (!r || r->first > max_range || (hit && r->first >= hit->distance)) continue;
        SurfaceHit h;
        h.distance = r->first;
        h.point = o + r->first * d;
        h.normal = r->second;
        h.label = s.primitives[i].label;
        h.primitive = static_cast<int>(i);
        hit = h;
    }
    return hit;
}

}  // namespace minkocc::scene
