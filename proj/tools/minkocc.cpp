#include "minkocc/metrics/metrics.hpp"
#include "minkocc/scene/dataset.hpp"
#include "minkocc/train/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace minkocc;
using nlohmann::json;

namespace {

void write_ppm(const fs::path& path, int width, int height, const std::vector<std::array<std::uint8_t, 3>>& rgb) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << width << ' ' << height << "\n255\n";
    for (const auto& p : rgb) out.write(reinterpret_cast<const char*>(p.data()), 3);
}

void write_text(const fs::path& path, const std::string& s) {
    io::write_bytes_atomic(path, std::as_bytes(std::span<const char>(s.data(), s.size())));
}

/// Parses trailing "--key value" pairs into config overrides.
json collect_overrides(const std::vector<std::string>& extras) {
    json j = json::object();
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const auto& a = extras[i];
        if (a.rfind("--", 0) != 0 || a.size() < 3) throw std::invalid_argument("unexpected argument " + a);
        const auto eq = a.find('=');
        if (eq != std::string::npos) {
            train::apply_override(j, a.substr(2, eq - 2), a.substr(eq + 1));
            continue;
        }
        if (i + 1 >= extras.size()) throw std::invalid_argument("missing value for " + a);
        train::apply_override(j, a.substr(2), extras[++i]);
    }
    return j;
}

int gen_data(std::uint64_t seed, int frames, const std::string& preset, const fs::path& out, double noise, double drop,
             int val_frames) {
    scene::DatasetConfig cfg;
    cfg.seed = seed;
    cfg.frames = frames;
    cfg.grid = GridConfig::preset(preset);
    cfg.pseudo.p_flip = noise;
    cfg.pseudo.p_drop = drop;
    cfg.val_frames = val_frames;
    const auto d = scene::generate_dataset(cfg);
    scene::write_dataset(d, out);
    std::cout << "wrote " << d.frames.size() << " frames to " << out.string() << '\n';
    return 0;
}

int train_cmd(const fs::path& data_dir, const fs::path& out, const std::string& config_path, const std::string& preset,
              bool resume, const std::vector<std::string>& extras) {
    const auto data = scene::load_dataset(data_dir);
    json user = json::object();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("cannot read config " + config_path);
        user = json::parse(in);
    }
    user.merge_patch(collect_overrides(extras));
    const auto defaults = preset == "desk" ? train::TrainConfig::desk() : train::TrainConfig{};
    const auto cfg = train::from_json(user, defaults);
    fs::create_directories(out);
    write_text(out / "config.json", train::to_json(cfg).dump(2));
    train::Trainer tr(data, cfg);
    const fs::path ckpt = out / "checkpoint";
    const fs::path log_path = out / "log.csv";
    if (resume) {
        tr.restore(ckpt);
        std::cout << "resumed at step " << tr.step() << '\n';
    }
    std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!resume) log << train::csv_header() << '\n';
    const long every = std::max(1L, tr.total_steps() / 20);
    train::run_training(tr, &log, ckpt, [&](const train::StepLog& s) {
        if (s.step % every == 0 || s.step + 1 == tr.total_steps())
            std::cout << "step " << s.step << '/' << tr.total_steps() << " phase " << s.phase << " total " << s.total << '\n';
    });
    std::cout << "checkpoint " << ckpt.string() << '\n';
    return 0;
}

train::LoadedModel load_for(const fs::path& ckpt, const scene::Dataset& data) {
    auto m = train::load_checkpoint(ckpt);
    if (!(m.grid == data.grid())) throw std::invalid_argument("checkpoint grid differs from the dataset grid");
    return m;
}

int eval_cmd(const fs::path& data_dir, const fs::path& ckpt, const std::string& split, const std::string& out) {
    const auto data = scene::load_dataset(data_dir);
    const auto m = load_for(ckpt, data);
    const auto report = train::evaluate(*m.model, data, split);
    std::cout << report.to_text();
    if (!out.empty()) {
        write_text(fs::path(out + ".json"), report.to_json().dump(2));
        write_text(fs::path(out + ".txt"), report.to_text());
    }
    return 0;
}

std::vector<std::array<std::uint8_t, 3>> label_colors(const std::vector<int>& labels) {
    std::vector<std::array<std::uint8_t, 3>> out;
    for (int l : labels) out.push_back(kPalette[static_cast<std::size_t>(l)]);
    return out;
}

/// First-hit label per pixel by traversing the voxel grid.
std::vector<int> trace_labels(const DenseVoxelGrid& g, const Camera& cam) {
    std::vector<int> out;
    const auto all = std::vector<std::uint8_t>(g.labels.size(), 1);
    for (int v = 0; v < cam.height; ++v)
        for (int u = 0; u < cam.width; ++u) {
            const auto hit = metrics::ray_first_hit(g, all, cam.origin(), cam.ray_direction(u, v));
            out.push_back(hit ? hit->label : kUnlabeled);
        }
    return out;
}

int render_cmd(const fs::path& data_dir, const std::string& ckpt, const std::string& frame_name, int camera,
               const std::string& mode, const fs::path& out) {
    const auto data = scene::load_dataset(data_dir);
    const auto& f = frame_name.empty() ? data.frames.front() : data.frame(frame_name);
    if (camera < 0 || static_cast<std::size_t>(camera) >= data.cameras.size()) throw std::invalid_argument("no camera " + std::to_string(camera));
    const Camera& cam = data.cameras[static_cast<std::size_t>(camera)];
    const auto& img = f.images[static_cast<std::size_t>(camera)];
    std::vector<std::array<std::uint8_t, 3>> rgb;
    if (mode == "rgb") {
        for (Index i = 0; i < img.pixels.rows(); ++i) {
            std::array<std::uint8_t, 3> p{};
            for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(img.pixels(i, c), 0.0, 1.0)));
            rgb.push_back(p);
        }
    } else if (mode == "pseudo") {
        const auto& ps = f.pseudo[static_cast<std::size_t>(camera)];
        rgb = label_colors(std::vector<int>(ps.labels.begin(), ps.labels.end()));
    } else if (mode == "gt") {
        rgb = label_colors(trace_labels(f.gt, cam));
    } else if (mode == "voxels" || mode == "shaded") {
        if (ckpt.empty()) throw std::invalid_argument("mode " + mode + " needs --checkpoint");
        const auto m = load_for(ckpt, data);
        if (mode == "voxels") {
            rgb = label_colors(trace_labels(m.model->predict(f.points, f.images, data.cameras), cam));
        } else {
            ad::Tape t;
            const auto dec = m.model->forward(t, f.points, f.images, data.cameras, false);
            const auto logits = m.model->render_logits(t, dec.output, cam);
            std::vector<int> labels;
            const Matrix& x = logits.data.value();
            for (Index i = 0; i < x.rows(); ++i) {
                Index k = 0;
                x.row(i).maxCoeff(&k);
                labels.push_back(static_cast<int>(k));
            }
            rgb = label_colors(labels);
        }
    } else {
        throw std::invalid_argument("unknown render mode " + mode);
    }
    write_ppm(out, cam.width, cam.height, rgb);
    std::cout << "wrote " << out.string() << '\n';
    return 0;
}

int bench_cmd(const fs::path& data_dir, const fs::path& ckpt, int repeats, int warmup, const std::string& out) {
    const auto data = scene::load_dataset(data_dir);
    const auto m = load_for(ckpt, data);
    const auto b = train::bench(*m.model, data, repeats, warmup);
    const auto& g = data.grid();
    json j{{"voxel_size", g.voxel_size}, {"grid", {g.nx, g.ny, g.nz}}, {"samples", b.samples}, {"mean_ms", b.mean_ms},
           {"p50_ms", b.p50_ms}, {"p95_ms", b.p95_ms}, {"peak_rss_kb", b.peak_rss_kb}};
    std::cout << j.dump(2) << '\n';
    if (!out.empty()) write_text(out, j.dump(2));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse semantic occupancy: synthetic data, training, evaluation"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    std::uint64_t seed = 0;
    int frames = 8, val_frames = 0;
    std::string preset = "desk";
    std::string out;
    double noise = 0.1, drop = 0.1;
    gen->add_option("--seed", seed, "Dataset seed");
    gen->add_option("--frames", frames, "Number of frames");
    gen->add_option("--grid-preset", preset, "desk, desk-fine or full")->check(CLI::IsMember({"desk", "desk-fine", "full"}));
    gen->add_option("--out", out, "Output directory")->required();
    gen->add_option("--noise", noise, "Pseudo-label flip probability");
    gen->add_option("--drop", drop, "Pseudo-label drop probability");
    gen->add_option("--val-frames", val_frames, "Frames held out for validation");

    auto* tr = app.add_subcommand("train", "Train a model; trailing --key value pairs override the config");
    tr->allow_extras();
    std::string data_dir, config_path, train_preset = "desk";
    bool resume = false;
    tr->add_option("--data", data_dir, "Dataset directory")->required();
    tr->add_option("--out", out, "Run directory")->required();
    tr->add_option("--config", config_path, "JSON config file");
    tr->add_option("--preset", train_preset, "Defaults: desk or base")->check(CLI::IsMember({"desk", "base"}));
    tr->add_flag("--resume", resume, "Resume from the run's checkpoint");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ckpt, split = "train", report;
    ev->add_option("--data", data_dir, "Dataset directory")->required();
    ev->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    ev->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));
    ev->add_option("--out", report, "Report path prefix (.json and .txt)");

    auto* rd = app.add_subcommand("render", "Render a camera view to PPM");
    std::string frame_name, mode = "shaded";
    int camera = 0;
    rd->add_option("--data", data_dir, "Dataset directory")->required();
    rd->add_option("--checkpoint", ckpt, "Checkpoint directory");
    rd->add_option("--frame", frame_name, "Frame name (default: first)");
    rd->add_option("--camera", camera, "Camera index");
    rd->add_option("--mode", mode, "shaded, voxels, gt, pseudo or rgb")
        ->check(CLI::IsMember({"shaded", "voxels", "gt", "pseudo", "rgb"}));
    rd->add_option("--out", out, "Output .ppm")->required();

    auto* bn = app.add_subcommand("bench", "Measure inference latency");
    int repeats = 3, warmup = 1;
    bn->add_option("--data", data_dir, "Dataset directory")->required();
    bn->add_option("--checkpoint", ckpt, "Checkpoint directory")->required();
    bn->add_option("--repeats", repeats, "Passes over the frames")->check(CLI::PositiveNumber);
    bn->add_option("--warmup", warmup, "Untimed passes")->check(CLI::NonNegativeNumber);
    bn->add_option("--out", report, "JSON output path");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*gen) return gen_data(seed, frames, preset, out, noise, drop, val_frames);
        if (*tr) return train_cmd(data_dir, out, config_path, train_preset, resume, tr->remaining());
        if (*ev) return eval_cmd(data_dir, ckpt, split, report);
        if (*rd) return render_cmd(data_dir, ckpt, frame_name, camera, mode, out);
        if (*bn) return bench_cmd(data_dir, ckpt, repeats, warmup, report);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
