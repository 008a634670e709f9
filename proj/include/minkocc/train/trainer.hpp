#pragma once

#include "minkocc/io/mocc.hpp"
#include "minkocc/losses/losses.hpp"
#include "minkocc/metrics/metrics.hpp"
#include "minkocc/scene/dataset.hpp"
#include "minkocc/train/augment.hpp"
#include "minkocc/train/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace minkocc::train {

inline constexpr int kCheckpointVersion = 1;

/// Cosine decay from `base` at step 0 to 0 at step total - 1.
inline double cosine_lr(double base, long step, long total) {
    if (total <= 1) return base;
    const double t = std::clamp(static_cast<double>(step) / static_cast<double>(total - 1), 0.0, 1.0);
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One Adam update with bias correction for update number `t` (1-based).
inline void adam_step(const std::vector<ad::Parameter*>& params, double lr, long t, const AdamConfig& a = {}) {
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t));
    for (auto* p : params) {
        if (p->grad.size() == 0) continue;
        p->adam_m = a.beta1 * p->adam_m + (1.0 - a.beta1) * p->grad;
        p->adam_v = a.beta2 * p->adam_v + (1.0 - a.beta2) * p->grad.cwiseProduct(p->grad);
        p->value.array() -= lr * (p->adam_m.array() / c1) / ((p->adam_v.array() / c2).sqrt() + a.epsilon);
    }
}

inline double grad_norm(const std::vector<ad::Parameter*>& params) {
    double s = 0.0;
    for (const auto* p : params)
        if (p->grad.size() > 0) s += p->grad.squaredNorm();
    return std::sqrt(s);
}

inline std::uint64_t config_hash(const TrainConfig& cfg, const GridConfig& grid) {
    json j = to_json(cfg);
    j["grid"] = scene::json_io::grid(grid);
    const std::string s = j.dump();
    return io::fnv1a64(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

inline Sample make_sample(const scene::Frame& f, const std::vector<Camera>& cameras) {
    return {f.points, f.sweeps, f.images, f.pseudo, cameras, f.gt, std::vector<std::uint8_t>(f.gt.labels.size(), 1)};
}

/// Distinct in-grid voxels hit by the rows of `points`.
inline std::vector<sparse::Coordinate> occupied_voxels(const Matrix& points, const GridConfig& grid) {
    std::vector<std::uint8_t> seen(grid.cell_count(), 0);
    std::vector<sparse::Coordinate> out;
    for (Index i = 0; i < points.rows(); ++i) {
        const auto c = grid.index_of(Vec3(points(i, 0), points(i, 1), points(i, 2)));
        if (!grid.contains(c.x(), c.y(), c.z())) continue;
        const auto k = grid.linear(c.x(), c.y(), c.z());
        if (seen[k]) continue;
        seen[k] = 1;
        out.push_back({0, c.x(), c.y(), c.z()});
    }
    return out;
}

/// Non-free ground-truth voxels that are supervised.
inline std::vector<sparse::Coordinate> occupied_voxels(const DenseVoxelGrid& gt, const std::vector<std::uint8_t>& supervise) {
    std::vector<sparse::Coordinate> out;
    const auto& g = gt.grid;
    for (int z = 0; z < g.nz; ++z)
        for (int y = 0; y < g.ny; ++y)
            for (int x = 0; x < g.nx; ++x) {
                const auto k = g.linear(x, y, z);
                if (gt.labels[k] != kFreeClass && supervise[k]) out.push_back({0, x, y, z});
            }
    return out;
}

struct LossTerms {
    ad::Var total;
    std::optional<double> l3d;
    std::optional<double> l2d;
    double bce = 0.0;
};

struct StepLog {
    long step = 0;
    int phase = 1;
    std::optional<double> l3d;
    std::optional<double> l2d;
    double bce = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
    bool clipped = false;
};

inline std::string csv_header() { return "step,phase,l_3d,l_2d,l_bce,total,lr,grad_norm,clipped"; }

inline std::string csv_row(const StepLog& s) {
    std::ostringstream o;
    o.precision(10);
    o << s.step << ',' << s.phase << ',';
    if (s.l3d) o << *s.l3d;
    o << ',';
    if (s.l2d) o << *s.l2d;
    o << ',' << s.bce << ',' << s.total << ',' << s.lr << ',' << s.grad_norm << ',' << (s.clipped ? 1 : 0);
    return o.str();
}

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Trainer {
public:
    Trainer(const scene::Dataset& data, const TrainConfig& cfg)
        : data_(data), cfg_(cfg), model_(cfg.model, data.grid(), cfg.seed) {
        cfg_.validate();
        if (data.train.empty()) throw std::invalid_argument("trainer: dataset has no training frames");
        train_ = data.split("train");
        const auto per_epoch = static_cast<long>((train_.size() + cfg_.batch_size - 1) / cfg_.batch_size);
        total_ = cfg_.steps > 0 ? cfg_.steps : per_epoch * cfg_.epochs;
        schedule_ = {cfg_.alpha, total_};
        const auto s = static_cast<double>(train_.size());
        labeled_ = cfg_.alpha_unit == "scenes" ? static_cast<std::size_t>(std::ceil(cfg_.alpha * s - 1e-9)) : train_.size();
        balance_.beta = cfg_.beta;
        balance_.counts.assign(data.class_counts.begin(), data.class_counts.end());
    }

    const TrainConfig& config() const { return cfg_; }
    const losses::PhaseSchedule& schedule() const { return schedule_; }
    long total_steps() const { return total_; }
    long step() const { return step_; }
    bool done() const { return step_ >= total_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }

    /// |step - switch| <= clip_window.
    bool clipping_active(long step) const { return std::abs(step - schedule_.warm_steps()) <= cfg_.clip_window; }

    /// Frames of `step`: a per-epoch permutation of the training split, or
    /// of its labeled prefix during warm-start when alpha counts scenes.
    std::vector<const scene::Frame*> batch(long step) const {
        const bool subset = schedule_.warm_start(step) && labeled_ < train_.size();
        const std::size_t pool = subset ? labeled_ : train_.size();
        const auto per_epoch = static_cast<long>((pool + cfg_.batch_size - 1) / cfg_.batch_size);
        const long epoch = step / per_epoch, slot = step % per_epoch;
        std::vector<std::size_t> order(pool);
        std::iota(order.begin(), order.end(), 0);
        std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                          static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(subset ? 1 : 0)};
        std::mt19937_64 rng(seq);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<const scene::Frame*> out;
        for (std::size_t i = static_cast<std::size_t>(slot) * cfg_.batch_size;
             i < std::min(pool, static_cast<std::size_t>(slot + 1) * cfg_.batch_size); ++i)
            out.push_back(train_[order[i]]);
        return out;
    }

    /// Loss of one sample at `step`.
    LossTerms sample_loss(ad::Tape& t, const Sample& s, long step) const {
        const int depth = model_.depth();
        const bool warm = schedule_.warm_start(step);
        const auto& grid = data_.grid();
        const auto occupied = warm ? occupied_voxels(s.gt, s.supervise) : occupied_voxels(s.sweeps, grid);
        const auto targets = genunet::level_targets(occupied, depth);
        const auto dec = model_.forward(t, s.points, s.images, s.cameras, true, &targets);

        std::vector<ad::Var> logits;
        std::vector<Matrix> labels;
        for (std::size_t i = 0; i < dec.levels.size(); ++i) {
            const auto& lo = dec.levels[i];
            const auto level = static_cast<std::size_t>(depth - 2) - i;
            Matrix y = genunet::keep_labels(lo.tensor, *targets[level]);
            if (level == 0 && warm && lo.tensor.size() > 0) {
                std::vector<int> rows;
                const auto& cs = lo.tensor.coordinates();
                for (std::size_t r = 0; r < cs.size(); ++r)
                    if (supervised(s, cs[r])) rows.push_back(static_cast<int>(r));
                if (rows.size() < cs.size()) {
                    Matrix yk(static_cast<Index>(rows.size()), 1);
                    for (std::size_t k = 0; k < rows.size(); ++k) yk(static_cast<Index>(k), 0) = y(rows[k], 0);
                    logits.push_back(ad::gather_rows(lo.keep_logits, rows));
                    labels.push_back(std::move(yk));
                    continue;
                }
            }
            logits.push_back(lo.keep_logits);
            labels.push_back(std::move(y));
        }
        const ad::Var bce = losses::occupancy_bce(t, logits, labels);

        LossTerms out;
        out.bce = bce.scalar();
        losses::SemanticLoss sem{losses::SemanticKind::dense_3d, t.constant(Matrix::Zero(1, 1))};
        if (warm) {
            if (!dec.output.empty()) {
                const auto cls = model_.unet().classify(t, dec.output);
                std::vector<int> rows, y;
                const auto& cs = dec.output.coordinates();
                for (std::size_t r = 0; r < cs.size(); ++r) {
                    if (!supervised(s, cs[r])) continue;
                    rows.push_back(static_cast<int>(r));
                    y.push_back(grid.contains(cs[r].x, cs[r].y, cs[r].z) ? s.gt.at(cs[r].x, cs[r].y, cs[r].z) : kFreeClass);
                }
                if (!rows.empty()) {
                    const ad::Var sel = rows.size() == cs.size() ? cls.logits : ad::gather_rows(cls.logits, rows);
                    sem.value = losses::class_balanced_ce(t, sel, y, balance_);
                }
            }
            out.l3d = sem.value.scalar();
        } else {
            sem.kind = losses::SemanticKind::pseudo_2d;
            std::vector<ad::Var> views;
            std::vector<double> w;
            for (std::size_t c = 0; c < s.cameras.size(); ++c) {
                if (dec.output.empty()) break;
                const auto logits2d = model_.render_logits(t, dec.output, s.cameras[c]);
                views.push_back(losses::soft_ce_2d(t, logits2d.data, s.pseudo[c]));
                w.push_back(1.0 / static_cast<double>(s.cameras.size()));
            }
            if (!views.empty()) sem.value = ad::weighted_sum(views, w);
            out.l2d = sem.value.scalar();
        }
        out.total = losses::total_loss(schedule_, step, sem, bce, {cfg_.lambda1, cfg_.lambda2});
        return out;
    }

    StepLog train_step() {
        if (done()) throw std::logic_error("trainer: all steps already run");
        const long step = step_;
        StepLog log;
        log.step = step;
        log.phase = schedule_.phase(step);
        log.lr = cosine_lr(cfg_.lr, step, total_);
        model_.store().zero_grad();
        const auto frames = batch(step);
        const double inv = 1.0 / static_cast<double>(frames.size());
        double l3d = 0, l2d = 0;
        for (std::size_t k = 0; k < frames.size(); ++k) {
            std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                              static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                              static_cast<std::uint32_t>(k)};
            std::mt19937_64 rng(seq);
            const Sample s = augment(make_sample(*frames[k], data_.cameras), cfg_.augment, rng);
            ad::Tape t;
            const LossTerms lt = sample_loss(t, s, step);
            const auto check = [&](double v, const char* what) {
                if (!std::isfinite(v))
                    throw NonFiniteLoss("step " + std::to_string(step) + ": non-finite " + what + " (" + frames[k]->name + ")");
            };
            check(lt.bce, "l_bce");
            if (lt.l3d) check(*lt.l3d, "l_3d");
            if (lt.l2d) check(*lt.l2d, "l_2d");
            check(lt.total.scalar(), "total");
            t.backward(ad::scale(lt.total, inv));
            log.bce += inv * lt.bce;
            log.total += inv * lt.total.scalar();
            if (lt.l3d) l3d += inv * *lt.l3d;
            if (lt.l2d) l2d += inv * *lt.l2d;
        }
        if (log.phase == 1) log.l3d = l3d;
        else log.l2d = l2d;
        const auto params = model_.store().trainable();
        log.grad_norm = grad_norm(params);
        if (!std::isfinite(log.grad_norm)) throw NonFiniteLoss("step " + std::to_string(step) + ": non-finite gradient norm");
        if (clipping_active(step) && log.grad_norm > cfg_.grad_clip_norm) {
            const double k = cfg_.grad_clip_norm / log.grad_norm;
            for (auto* p : params)
                if (p->grad.size() > 0) p->grad *= k;
            log.clipped = true;
        }
        adam_step(params, log.lr, step + 1);
        ++step_;
        return log;
    }

    /// Parameters, Adam moments and the step counter.
    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        std::vector<io::Array> arrays;
        json params = json::array();
        for (const auto* p : model_.store().all()) {
            arrays.push_back(io::make_array(p->value));
            arrays.push_back(io::make_array(p->adam_m));
            arrays.push_back(io::make_array(p->adam_v));
            params.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
        }
        io::write_file(dir / "params.mocc", arrays);
        json m{{"format", "minkocc-checkpoint"},
               {"version", kCheckpointVersion},
               {"step", step_},
               {"total_steps", total_},
               {"config_hash", config_hash(cfg_, data_.grid())},
               {"config", to_json(cfg_)},
               {"grid", scene::json_io::grid(data_.grid())},
               {"params", params}};
        const std::string s = m.dump(2);
        io::write_bytes_atomic(dir / "checkpoint.json", std::as_bytes(std::span<const char>(s.data(), s.size())));
    }

    /// Restores state written by save() with the same config and grid.
    void restore(const std::filesystem::path& dir) {
        const json m = read_manifest(dir);
        if (m.at("config_hash").get<std::uint64_t>() != config_hash(cfg_, data_.grid()))
            throw io::FormatError((dir / "checkpoint.json").string() + ": config or grid differs from the checkpoint");
        load_parameters(dir, model_.store(), m);
        step_ = m.at("step").get<long>();
    }

    static json read_manifest(const std::filesystem::path& dir) {
        const auto path = dir / "checkpoint.json";
        std::ifstream in(path);
        if (!in) throw io::FormatError(path.string() + ": missing file");
        try {
            json m = json::parse(in);
            if (m.at("format") != "minkocc-checkpoint") throw io::FormatError(path.string() + ": not a checkpoint");
            if (m.at("version").get<int>() != kCheckpointVersion)
                throw io::FormatError(path.string() + ": unsupported checkpoint version");
            return m;
        } catch (const json::exception& e) {
            throw io::FormatError(path.string() + ": " + e.what());
        }
    }

    static void load_parameters(const std::filesystem::path& dir, ad::ParameterStore& store, const json& manifest) {
        const auto arrays = io::read_file(dir / "params.mocc");
        const auto all = store.all();
        const auto& names = manifest.at("params");
        if (names.size() != all.size() || arrays.size() != 3 * all.size())
            throw io::FormatError((dir / "params.mocc").string() + ": parameter count differs from the model");
        for (std::size_t i = 0; i < all.size(); ++i) {
            auto* p = all[i];
            if (names[i].at("name") != p->name) throw io::FormatError((dir / "params.mocc").string() + ": unexpected parameter " + names[i].at("name").get<std::string>());
            Matrix v = io::to_matrix(arrays[3 * i]), mm = io::to_matrix(arrays[3 * i + 1]), vv = io::to_matrix(arrays[3 * i + 2]);
            if (v.rows() != p->value.rows() || v.cols() != p->value.cols())
                throw io::FormatError((dir / "params.mocc").string() + ": shape mismatch for " + p->name);
            p->value = std::move(v);
            p->adam_m = std::move(mm);
            p->adam_v = std::move(vv);
        }
    }

private:
    static bool supervised(const Sample& s, const sparse::Coordinate& c) {
        const auto& g = s.gt.grid;
        return !g.contains(c.x, c.y, c.z) || s.supervise[g.linear(c.x, c.y, c.z)];
    }

    const scene::Dataset& data_;
    TrainConfig cfg_;
    Model model_;
    std::vector<const scene::Frame*> train_;
    long total_ = 0;
    losses::PhaseSchedule schedule_;
    std::size_t labeled_ = 0;
    losses::ClassBalance balance_;
    long step_ = 0;
};

/// Runs the remaining steps, appending CSV rows to `log` and checkpointing
/// into `checkpoint_dir` (if non-empty) every period and at the end.
inline void run_training(Trainer& tr, std::ostream* log, const std::filesystem::path& checkpoint_dir,
                         const std::function<void(const StepLog&)>& on_step = {}) {
    const auto& cfg = tr.config();
    const long per_epoch = std::max(1L, tr.total_steps() / cfg.epochs);
    const long period = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : per_epoch;
    while (!tr.done()) {
        const StepLog s = tr.train_step();
        if (log) *log << csv_row(s) << '\n' << std::flush;
        if (on_step) on_step(s);
        if (!checkpoint_dir.empty() && (tr.step() % period == 0 || tr.done())) tr.save(checkpoint_dir);
    }
}

struct LoadedModel {
    TrainConfig config;
    GridConfig grid;
    long step = 0;
    std::unique_ptr<Model> model;
};

/// Model weights from a checkpoint directory, for inference.
inline LoadedModel load_checkpoint(const std::filesystem::path& dir) {
    const json m = Trainer::read_manifest(dir);
    LoadedModel out;
    try {
        out.config = from_json(m.at("config"));
        out.grid = scene::json_io::grid(m.at("grid"));
        out.step = m.at("step").get<long>();
    } catch (const json::exception& e) {
        throw io::FormatError((dir / "checkpoint.json").string() + ": " + e.what());
    }
    out.model = std::make_unique<Model>(out.config.model, out.grid, out.config.seed);
    Trainer::load_parameters(dir, out.model->store(), m);
    return out;
}

/// Query rays from the LiDAR mount in the beam pattern of the dataset.
inline std::vector<metrics::Ray> query_rays(const scene::BeamConfig& b) {
    return metrics::lidar_rays(b.mount, b.rings, b.azimuth_steps, b.elevation_min, b.elevation_max);
}

/// Metrics of `model` over a split; predictions are read through the ground
/// truth visibility mask.
inline metrics::Report evaluate(const Model& model, const scene::Dataset& data, const std::string& split = "train") {
    if (!(model.grid() == data.grid())) throw std::invalid_argument("evaluate: model grid differs from the dataset grid");
    metrics::Report report;
    const auto rays = query_rays(data.config.beam);
    for (const auto* f : data.split(split)) {
        DenseVoxelGrid pred = model.predict(f->points, f->images, data.cameras);
        pred.mask = f->gt.mask;
        report.add(pred, f->gt, rays);
    }
    return report;
}

struct BenchResult {
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    long peak_rss_kb = 0;
    int samples = 0;
};

/// Peak resident set size of this process in kB (VmHWM), 0 if unknown.
inline long peak_rss_kb() {
    std::ifstream in("/proc/self/status");
    std::string line;
    while (std::getline(in, line))
        if (line.rfind("VmHWM:", 0) == 0) return std::stol(line.substr(6));
    return 0;
}

/// Per-frame inference latency after `warmup` untimed passes.
inline BenchResult bench(const Model& model, const scene::Dataset& data, int repeats = 3, int warmup = 1,
                         const std::string& split = "train") {
    const auto frames = data.split(split);
    for (int i = 0; i < warmup; ++i) (void)model.predict(frames.front()->points, frames.front()->images, data.cameras);
    std::vector<double> ms;
    for (int r = 0; r < repeats; ++r)
        for (const auto* f : frames) {
            const auto t0 = std::chrono::steady_clock::now();
            (void)model.predict(f->points, f->images, data.cameras);
            ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
    BenchResult b;
    b.samples = static_cast<int>(ms.size());
    b.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    std::sort(ms.begin(), ms.end());
    const auto pct = [&](double q) {
        const double pos = q * static_cast<double>(ms.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, ms.size() - 1);
        return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
    };
    b.p50_ms = pct(0.5);
    b.p95_ms = pct(0.95);
    b.peak_rss_kb = peak_rss_kb();
    return b;
}

}  // namespace minkocc::train
