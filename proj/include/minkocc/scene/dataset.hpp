#pragma once

#include "minkocc/io/mocc.hpp"
#include "minkocc/scene/scene.hpp"
#include "minkocc/scene/sensors.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Dataset layout:
//   <root>/manifest.json        configs, grid, camera calibrations, class
//                               counts over the train split, split lists
//   <root>/frames/<name>.mocc   points, sweeps, then per camera (image,
//                               pseudo labels, confidences), then GT labels
//                               and visibility mask

namespace minkocc::scene {

inline constexpr int kDatasetVersion = 1;

struct DatasetConfig {
    std::uint64_t seed = 0;
    int frames = 8;
    GridConfig grid = GridConfig::desk();
    SceneConfig scene;
    BeamConfig beam;
    CameraRigConfig cameras;
    PseudoLabelNoise pseudo;
    double pixel_noise = 0.01;
    int visibility_supersample = 2;
    /// The last `val_frames` frames form the validation split.
    int val_frames = 0;

    void validate() const {
        if (frames < 1) throw std::invalid_argument("dataset config: need at least one frame");
        if (val_frames < 0 || val_frames >= frames) throw std::invalid_argument("dataset config: val_frames must leave a train split");
        if (!(pixel_noise >= 0)) throw std::invalid_argument("dataset config: pixel noise must be nonnegative");
        scene.validate();
        beam.validate();
        pseudo.validate();
    }
};

struct Frame {
    std::string name;
    /// Current sweep, N×4 (x, y, z, intensity).
    Matrix points;
    /// Accumulated sweeps, N×5 (x, y, z, intensity, age).
    Matrix sweeps;
    std::vector<fusion::Image> images;
    std::vector<losses::PseudoLabelImage> pseudo;
    DenseVoxelGrid gt;
};

struct Dataset {
    DatasetConfig config;
    std::vector<Camera> cameras;
    std::array<std::uint64_t, kClassCount> class_counts{};
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<Frame> frames;

    const GridConfig& grid() const { return config.grid; }

    const Frame& frame(const std::string& name) const {
        for (const auto& f : frames)
            if (f.name == name) return f;
        throw std::out_of_range("dataset has no frame " + name);
    }

    std::vector<const Frame*> split(const std::string& which) const {
        const auto& names = which == "train" ? train : which == "val" ? val : throw std::invalid_argument("unknown split " + which);
        std::vector<const Frame*> out;
        for (const auto& n : names) out.push_back(&frame(n));
        return out;
    }
};

/// Independent generator for (seed, frame, stream).
inline std::mt19937_64 frame_rng(std::uint64_t seed, int frame, int stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(frame), static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

inline std::string frame_name(int index) {
    std::ostringstream s;
    s << "frame_" << std::setw(4) << std::setfill('0') << index;
    return s.str();
}

inline Frame generate_frame(const DatasetConfig& cfg, const std::vector<Camera>& cameras, int index) {
    auto scene_rng = frame_rng(cfg.seed, index, 0);
    auto lidar_rng = frame_rng(cfg.seed, index, 1);
    auto camera_rng = frame_rng(cfg.seed, index, 2);
    const Scene s = generate_scene(scene_rng, cfg.scene);
    Frame f;
    f.name = frame_name(index);
    const SweepSet sweeps = simulate_sweeps(s, cfg.beam, lidar_rng);
    f.points = sweeps.sweeps.front().points;
    f.sweeps = accumulate_sweeps(sweeps);
    for (const auto& cam : cameras) {
        const auto hits = trace_camera(s, cam);
        f.images.push_back(render_rgb(hits, cam, cfg.pixel_noise, camera_rng));
        f.pseudo.push_back(render_pseudo_labels(hits, cam, cfg.pseudo, camera_rng));
    }
    f.gt = rasterize_ground_truth(s, cfg.grid, cameras, cfg.beam, cfg.visibility_supersample);
    return f;
}

inline std::array<std::uint64_t, kClassCount> count_classes(const Dataset& d) {
    std::array<std::uint64_t, kClassCount> n{};
    for (const auto* f : d.split("train")) {
        const auto c = f->gt.class_counts();
        for (int k = 0; k < kClassCount; ++k) n[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)];
    }
    return n;
}

inline Dataset generate_dataset(const DatasetConfig& cfg) {
    cfg.validate();
    Dataset d;
    d.config = cfg;
    d.cameras = camera_rig(cfg.cameras);
    for (int i = 0; i < cfg.frames; ++i) {
        d.frames.push_back(generate_frame(cfg, d.cameras, i));
        (i < cfg.frames - cfg.val_frames ? d.train : d.val).push_back(d.frames.back().name);
    }
    d.class_counts = count_classes(d);
    return d;
}

namespace json_io {

using nlohmann::json;

inline json vec(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
inline Vec3 vec(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline json mat(const Mat3& m) {
    json j = json::array();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) j.push_back(m(r, c));
    return j;
}
inline Mat3 mat(const json& j) {
    Mat3 m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m(r, c) = j.at(static_cast<std::size_t>(r * 3 + c)).get<double>();
    return m;
}

inline json grid(const GridConfig& g) {
    return {{"nx", g.nx}, {"ny", g.ny}, {"nz", g.nz}, {"min", vec(g.min)}, {"voxel_size", g.voxel_size}};
}
inline GridConfig grid(const json& j) {
    return {j.at("nx").get<int>(), j.at("ny").get<int>(), j.at("nz").get<int>(), vec(j.at("min")), j.at("voxel_size").get<double>()};
}

inline json camera(const Camera& c) {
    return {{"rotation", mat(c.rotation)}, {"translation", vec(c.translation)}, {"intrinsics", mat(c.intrinsics)},
            {"width", c.width}, {"height", c.height}};
}
inline Camera camera(const json& j) {
    Camera c;
    c.rotation = mat(j.at("rotation"));
    c.translation = vec(j.at("translation"));
    c.intrinsics = mat(j.at("intrinsics"));
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.validate();
    return c;
}

inline json config(const DatasetConfig& c) {
    const auto& s = c.scene;
    const auto& b = c.beam;
    const auto& r = c.cameras;
    const auto& p = c.pseudo;
    return {{"seed", c.seed},
            {"frames", c.frames},
            {"grid", grid(c.grid)},
            {"scene",
             {{"cars", s.cars}, {"trucks", s.trucks}, {"pedestrians", s.pedestrians}, {"extent", s.extent},
              {"ego_clearance", s.ego_clearance}, {"margin", s.margin}, {"max_retries", s.max_retries},
              {"past_sweeps", s.past_sweeps}, {"sweep_interval", s.sweep_interval}, {"max_speed", s.max_speed},
              {"ground_z", s.ground_z}, {"road_half_width", s.road_half_width}}},
            {"beam",
             {{"rings", b.rings}, {"azimuth_steps", b.azimuth_steps}, {"elevation_min", b.elevation_min},
              {"elevation_max", b.elevation_max}, {"max_range", b.max_range}, {"range_noise", b.range_noise},
              {"mount", vec(b.mount)}}},
            {"camera_rig", {{"count", r.count}, {"width", r.width}, {"height", r.height}, {"fov", r.fov}, {"mount", vec(r.mount)}}},
            {"pseudo_noise",
             {{"p_drop", p.p_drop}, {"p_flip", p.p_flip}, {"clean", {p.clean_low, p.clean_high}},
              {"corrupt", {p.corrupt_low, p.corrupt_high}}}},
            {"pixel_noise", c.pixel_noise},
            {"visibility_supersample", c.visibility_supersample},
            {"val_frames", c.val_frames}};
}

inline DatasetConfig config(const json& j) {
    DatasetConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.frames = j.at("frames").get<int>();
    c.grid = grid(j.at("grid"));
    const auto& s = j.at("scene");
    c.scene.cars = s.at("cars").get<int>();
    c.scene.trucks = s.at("trucks").get<int>();
    c.scene.pedestrians = s.at("pedestrians").get<int>();
    c.scene.extent = s.at("extent").get<double>();
    c.scene.ego_clearance = s.at("ego_clearance").get<double>();
    c.scene.margin = s.at("margin").get<double>();
    c.scene.max_retries = s.at("max_retries").get<int>();
    c.scene.past_sweeps = s.at("past_sweeps").get<int>();
    c.scene.sweep_interval = s.at("sweep_interval").get<double>();
    c.scene.max_speed = s.at("max_speed").get<double>();
    c.scene.ground_z = s.at("ground_z").get<double>();
    c.scene.road_half_width = s.at("road_half_width").get<double>();
    const auto& b = j.at("beam");
    c.beam.rings = b.at("rings").get<int>();
    c.beam.azimuth_steps = b.at("azimuth_steps").get<int>();
    c.beam.elevation_min = b.at("elevation_min").get<double>();
    c.beam.elevation_max = b.at("elevation_max").get<double>();
    c.beam.max_range = b.at("max_range").get<double>();
    c.beam.range_noise = b.at("range_noise").get<double>();
    c.beam.mount = vec(b.at("mount"));
    const auto& r = j.at("camera_rig");
    c.cameras.count = r.at("count").get<int>();
    c.cameras.width = r.at("width").get<int>();
    c.cameras.height = r.at("height").get<int>();
    c.cameras.fov = r.at("fov").get<double>();
    c.cameras.mount = vec(r.at("mount"));
    const auto& p = j.at("pseudo_noise");
    c.pseudo.p_drop = p.at("p_drop").get<double>();
    c.pseudo.p_flip = p.at("p_flip").get<double>();
    c.pseudo.clean_low = p.at("clean").at(0).get<double>();
    c.pseudo.clean_high = p.at("clean").at(1).get<double>();
    c.pseudo.corrupt_low = p.at("corrupt").at(0).get<double>();
    c.pseudo.corrupt_high = p.at("corrupt").at(1).get<double>();
    c.pixel_noise = j.at("pixel_noise").get<double>();
    c.visibility_supersample = j.at("visibility_supersample").get<int>();
    c.val_frames = j.at("val_frames").get<int>();
    return c;
}

}  // namespace json_io

inline std::vector<io::Array> encode_frame(const Frame& f) {
    std::vector<io::Array> a;
    a.push_back(io::make_array(f.points));
    a.push_back(io::make_array(f.sweeps));
    for (std::size_t c = 0; c < f.images.size(); ++c) {
        a.push_back(io::make_array(f.images[c].pixels));
        const auto& p = f.pseudo[c];
        const std::vector<std::int32_t> labels(p.labels.begin(), p.labels.end());
        const std::vector<std::uint64_t> shape{static_cast<std::uint64_t>(p.height), static_cast<std::uint64_t>(p.width)};
        a.push_back(io::make_array<std::int32_t>(labels, shape));
        a.push_back(io::make_array<double>(p.confidence, shape));
    }
    const std::vector<std::uint64_t> dims{static_cast<std::uint64_t>(f.gt.grid.nz), static_cast<std::uint64_t>(f.gt.grid.ny),
                                          static_cast<std::uint64_t>(f.gt.grid.nx)};
    const std::vector<std::int32_t> labels(f.gt.labels.begin(), f.gt.labels.end());
    const std::vector<std::int32_t> mask(f.gt.mask.begin(), f.gt.mask.end());
    a.push_back(io::make_array<std::int32_t>(labels, dims));
    a.push_back(io::make_array<std::int32_t>(mask, dims));
    return a;
}

inline Frame decode_frame(const std::vector<io::Array>& a, const std::string& name, const GridConfig& grid,
                          const std::vector<Camera>& cameras) {
    const auto fail = [&](const std::string& what) { return io::FormatError("frame " + name + ": " + what); };
    if (a.size() != 4 + 3 * cameras.size()) throw fail("unexpected record count " + std::to_string(a.size()));
    const auto u8 = [&](const io::Array& arr, std::size_t n, int hi) {
        const auto v = io::values<std::int32_t>(arr);
        if (v.size() != n) throw fail("label array has the wrong size");
        std::vector<std::uint8_t> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (v[i] < 0 || v[i] > hi) throw fail("label value out of range");
            out[i] = static_cast<std::uint8_t>(v[i]);
        }
        return out;
    };
    Frame f;
    f.name = name;
    f.points = io::to_matrix(a[0]);
    f.sweeps = io::to_matrix(a[1]);
    for (std::size_t c = 0; c < cameras.size(); ++c) {
        const auto& cam = cameras[c];
        const auto n = static_cast<std::size_t>(cam.width * cam.height);
        fusion::Image img{{cam.width, cam.height}, io::to_matrix(a[2 + 3 * c])};
        if (img.pixels.rows() != static_cast<Index>(n) || img.pixels.cols() != 3) throw fail("image shape mismatch");
        losses::PseudoLabelImage p{cam.width, cam.height, u8(a[3 + 3 * c], n, kFreeClass - 1),
                                   io::values<double>(a[4 + 3 * c])};
        if (p.confidence.size() != n) throw fail("confidence shape mismatch");
        f.images.push_back(std::move(img));
        f.pseudo.push_back(std::move(p));
    }
    f.gt.grid = grid;
    f.gt.labels = u8(a[a.size() - 2], grid.cell_count(), kFreeClass);
    f.gt.mask = u8(a[a.size() - 1], grid.cell_count(), 1);
    return f;
}

inline void write_dataset(const Dataset& d, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "frames");
    for (const auto& f : d.frames) io::write_file(root / "frames" / (f.name + ".mocc"), encode_frame(f));
    nlohmann::json m;
    m["format"] = "minkocc-dataset";
    m["version"] = kDatasetVersion;
    m["config"] = json_io::config(d.config);
    m["grid"] = json_io::grid(d.config.grid);
    m["class_names"] = nlohmann::json::array();
    for (auto n : kClassNames) m["class_names"].push_back(std::string(n));
    m["class_counts"] = d.class_counts;
    m["cameras"] = nlohmann::json::array();
    for (const auto& c : d.cameras) m["cameras"].push_back(json_io::camera(c));
    m["splits"] = {{"train", d.train}, {"val", d.val}};
    std::vector<std::string> names;
    for (const auto& f : d.frames) names.push_back(f.name);
    m["frames"] = names;
    const std::string text = m.dump(2) + "\n";
    io::write_bytes_atomic(root / "manifest.json",
                           std::span<const std::byte>(reinterpret_cast<const std::byte*>(text.data()), text.size()));
}

inline Dataset load_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const auto manifest_path = root / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw io::FormatError(manifest_path.string() + ": cannot open manifest");
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw io::FormatError(manifest_path.string() + ": " + e.what());
    }
    if (m.value("format", "") != "minkocc-dataset") throw io::FormatError(manifest_path.string() + ": not a dataset manifest");
    if (m.value("version", -1) != kDatasetVersion)
        throw io::FormatError(manifest_path.string() + ": unsupported dataset version " + m.value("version", nlohmann::json()).dump());
    Dataset d;
    try {
        d.config = json_io::config(m.at("config"));
        if (!(json_io::grid(m.at("grid")) == d.config.grid)) throw io::FormatError(manifest_path.string() + ": grid disagrees with config");
        for (const auto& c : m.at("cameras")) d.cameras.push_back(json_io::camera(c));
        d.class_counts = m.at("class_counts").get<std::array<std::uint64_t, kClassCount>>();
        d.train = m.at("splits").at("train").get<std::vector<std::string>>();
        d.val = m.at("splits").at("val").get<std::vector<std::string>>();
        for (const auto& name : m.at("frames").get<std::vector<std::string>>()) {
            const auto path = root / "frames" / (name + ".mocc");
            if (!fs::exists(path)) throw io::FormatError("frame " + name + ": missing file " + path.string());
            d.frames.push_back(decode_frame(io::read_file(path), name, d.config.grid, d.cameras));
        }
    } catch (const nlohmann::json::exception& e) {
        throw io::FormatError(manifest_path.string() + ": " + e.what());
    }
    return d;
}

}  // namespace minkocc::scene
