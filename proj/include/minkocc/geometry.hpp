#pragma once

#include "minkocc/ad/tape.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace minkocc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Pose = Eigen::Isometry3d;

/// Metric voxel grid: `dims` cells of `voxel_size` meters starting at `min`.
struct GridConfig {
    int nx = 64;
    int ny = 64;
    int nz = 8;
    Vec3 min{-16.0, -16.0, -1.0};
    double voxel_size = 0.5;

    Vec3 max() const { return min + voxel_size * Vec3(nx, ny, nz); }
    std::size_t cell_count() const { return static_cast<std::size_t>(nx) * ny * nz; }
    bool contains(int x, int y, int z) const { return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz; }
    std::size_t linear(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * ny + static_cast<std::size_t>(y)) * nx + static_cast<std::size_t>(x);
    }
    Vec3 center(int x, int y, int z) const { return min + voxel_size * Vec3(x + 0.5, y + 0.5, z + 0.5); }
    /// floor((p - min) / voxel_size); may lie outside the grid.
    Eigen::Vector3i index_of(const Vec3& p) const {
        const Vec3 q = (p - min) / voxel_size;
        return {static_cast<int>(std::floor(q.x())), static_cast<int>(std::floor(q.y())), static_cast<int>(std::floor(q.z()))};
    }

    friend bool operator==(const GridConfig& a, const GridConfig& b) {
        return a.nx == b.nx && a.ny == b.ny && a.nz == b.nz && a.min == b.min && a.voxel_size == b.voxel_size;
    }

    /// 64×64×8 at 0.5 m over (-16,-16,-1)→(16,16,3).
    static GridConfig desk() { return {}; }
    /// Same extent at 0.25 m.
    static GridConfig desk_fine() { return {128, 128, 16, Vec3(-16.0, -16.0, -1.0), 0.25}; }
    /// 200×200×16 at 0.4 m over (-40,-40,-1)→(40,40,5.4).
    static GridConfig full() { return {200, 200, 16, Vec3(-40.0, -40.0, -1.0), 0.4}; }

    static GridConfig preset(const std::string& name) {
        if (name == "desk") return desk();
        if (name == "desk-fine") return desk_fine();
        if (name == "full") return full();
        throw std::invalid_argument("unknown grid preset: " + name);
    }
};

/// Pinhole camera. Extrinsics map the ego frame into the camera frame
/// (x right, y down, z forward): p_cam = R p + t. Pixel centers sit at
/// integer (u, v).
struct Camera {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    Mat3 intrinsics = Mat3::Identity();
    int width = 64;
    int height = 48;

    double fx() const { return intrinsics(0, 0); }
    double fy() const { return intrinsics(1, 1); }
    double cx() const { return intrinsics(0, 2); }
    double cy() const { return intrinsics(1, 2); }

    Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }
    /// Camera center in the ego frame.
    Vec3 origin() const { return -rotation.transpose() * translation; }
    /// Unit ray direction (ego frame) through pixel (u, v).
    Vec3 ray_direction(double u, double v) const {
        const Vec3 d_cam((u - cx()) / fx(), (v - cy()) / fy(), 1.0);
        return (rotation.transpose() * d_cam).normalized();
    }
    Vec3 back_project(double u, double v, double depth) const {
        const Vec3 p_cam((u - cx()) / fx() * depth, (v - cy()) / fy() * depth, depth);
        return rotation.transpose() * (p_cam - translation);
    }
    bool in_image(double u, double v) const { return u >= -0.5 && v >= -0.5 && u < width - 0.5 && v < height - 0.5; }

    void validate() const {
        if (std::abs(rotation.determinant() - 1.0) > 1e-6) throw std::invalid_argument("camera rotation must have det 1");
        if ((rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
            throw std::invalid_argument("camera rotation must be orthonormal");
        if (intrinsics(1, 0) != 0 || intrinsics(2, 0) != 0 || intrinsics(2, 1) != 0 || intrinsics(2, 2) != 1.0)
            throw std::invalid_argument("camera intrinsics must be upper triangular with K22 = 1");
        if (!(fx() > 0) || !(fy() > 0)) throw std::invalid_argument("camera focal lengths must be positive");
        if (!in_image(cx(), cy())) throw std::invalid_argument("principal point outside image");
    }

    /// Camera at ego position `center` looking along yaw (radians about +z),
    /// level with the ground, with horizontal field of view `fov`.
    static Camera looking(double yaw, const Vec3& center, int width, int height, double fov) {
        Camera c;
        const Vec3 forward(std::cos(yaw), std::sin(yaw), 0.0);
        const Vec3 right(std::sin(yaw), -std::cos(yaw), 0.0);
        const Vec3 down(0.0, 0.0, -1.0);
        c.rotation.row(0) = right.transpose();
        c.rotation.row(1) = down.transpose();
        c.rotation.row(2) = forward.transpose();
        c.translation = -c.rotation * center;
        const double f = 0.5 * width / std::tan(0.5 * fov);
        c.intrinsics << f, 0, 0.5 * (width - 1), 0, f, 0.5 * (height - 1), 0, 0, 1;
        c.width = width;
        c.height = height;
        return c;
    }

    /// Camera after transforming the ego frame by `t` (p' = t p).
    Camera transformed(const Pose& t) const {
        Camera c = *this;
        const Mat3 tr = t.linear();
        c.rotation = rotation * tr.transpose();
        c.translation = translation - c.rotation * t.translation();
        return c;
    }
};

/// Projection of points into one camera.
struct Projection {
    Matrix uv;  // N×2 continuous pixels
    std::vector<double> depth;
    std::vector<std::uint8_t> valid;
};

/// Pinhole projection of the first three columns of `points`. valid iff depth
/// > 0 and (u, v) falls inside the image.
inline Projection project_points(const Matrix& points, const Camera& cam) {
    const Index n = points.rows();
    Projection p;
    p.uv.resize(n, 2);
    p.depth.resize(static_cast<std::size_t>(n));
    p.valid.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const Vec3 q = cam.to_camera(Vec3(points(i, 0), points(i, 1), points(i, 2)));
        const double z = q.z();
        p.depth[static_cast<std::size_t>(i)] = z;
        if (z > 0) {
            const Vec3 h = cam.intrinsics * q;
            p.uv(i, 0) = h.x() / z;
            p.uv(i, 1) = h.y() / z;
        } else {
            p.uv(i, 0) = p.uv(i, 1) = 0.0;
        }
        p.valid[static_cast<std::size_t>(i)] = z > 0 && cam.in_image(p.uv(i, 0), p.uv(i, 1));
    }
    return p;
}

}  // namespace minkocc
