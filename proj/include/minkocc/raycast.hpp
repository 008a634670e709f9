#pragma once

#include "minkocc/geometry.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>

namespace minkocc {

/// Parametric interval [t0, t1] where the ray o + t d lies inside the box
/// [lo, hi]; nullopt when it never does.
inline std::optional<std::pair<double, double>> ray_aabb(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        if (d[a] == 0.0) {
            if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
            continue;
        }
        double ta = (lo[a] - o[a]) / d[a];
        double tb = (hi[a] - o[a]) / d[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) return std::nullopt;
    return std::make_pair(t0, t1);
}

/// Integer voxel walk along o + t d for t in [0, t_max]. Calls
/// `visit(cell, t_in, t_out)` for each grid cell in order until it returns
/// false. Rays starting outside the grid begin at their entry point. Ties
/// between axes step x before y before z.
template <typename Visit>
void traverse_grid(const GridConfig& grid, const Vec3& o, const Vec3& d, double t_max, Visit&& visit) {
    const auto span = ray_aabb(o, d, grid.min, grid.max());
    if (!span) return;
    double t = std::max(0.0, span->first);
    const double t_end = std::min(t_max, span->second);
    if (t > t_end) return;

    const Vec3 q = (o + t * d - grid.min) / grid.voxel_size;
    const Eigen::Vector3i dims(grid.nx, grid.ny, grid.nz);
    Eigen::Vector3i cell, step;
    Vec3 next, delta;
    for (int a = 0; a < 3; ++a) {
        cell[a] = std::clamp(static_cast<int>(std::floor(q[a])), 0, dims[a] - 1);
        if (d[a] > 0) {
            step[a] = 1;
            delta[a] = grid.voxel_size / d[a];
            next[a] = (grid.min[a] + (cell[a] + 1) * grid.voxel_size - o[a]) / d[a];
        } else if (d[a] < 0) {
            step[a] = -1;
            delta[a] = -grid.voxel_size / d[a];
            next[a] = (grid.min[a] + cell[a] * grid.voxel_size - o[a]) / d[a];
        } else {
            step[a] = 0;
            delta[a] = next[a] = std::numeric_limits<double>::infinity();
        }
    }
    while (true) {
        int a = 0;
        if (next[1] < next[a]) a = 1;
        if (next[2] < next[a]) a = 2;
        const double t_out = std::min(next[a], t_end);
        if (!visit(cell, t, t_out)) return;
        if (next[a] >= t_end) return;
        t = next[a];
        cell[a] += step[a];
        if (cell[a] < 0 || cell[a] >= dims[a]) return;
        next[a] += delta[a];
    }
}

}  // namespace minkocc
