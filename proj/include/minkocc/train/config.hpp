#pragma once

#include "minkocc/render/sphere_renderer.hpp"

#include <json.hpp>

#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace minkocc::train {

using nlohmann::json;

struct AugmentConfig {
    bool enabled = true;
    bool flip = true;
    /// Rotations about z by multiples of 90 degrees.
    bool rotate = true;
    double gt_dropout = 0.05;
    double image_shift = 2.0;
    double image_scale = 0.05;
    double image_rotate = 3.0 * std::numbers::pi / 180.0;
    double rgb = 0.05;
};

struct ModelConfig {
    std::vector<int> pyramid_channels{16, 32, 64};
    int fusion_hidden = 32;
    int fusion_out = 16;
    std::vector<int> unet_channels{32, 64, 128};
    int kernel_size = 3;
    double prune_threshold = 0.5;
    int se_reduction = 4;
    int shader_width = 16;
    /// Sphere radius bounds as multiples of the voxel size.
    double r_min = 0.1;
    double r_init = 0.866;
    /// What the spheres carry into the renderer: decoder "features" or the
    /// 3D head's class "logits".
    std::string render_source = "features";
    render::RenderConfig render;
};

struct TrainConfig {
    double alpha = 0.1;
    std::string alpha_unit = "steps";
    double lr = 1e-4;
    int epochs = 30;
    int batch_size = 2;
    /// Total optimizer steps; 0 derives epochs × ceil(train frames / batch).
    long steps = 0;
    double lambda1 = 0.5;
    double lambda2 = 1.0;
    double beta = 0.9;
    double grad_clip_norm = 1.0;
    long clip_window = 50;
    std::uint64_t seed = 0;
    /// Checkpoint period in steps; 0 checkpoints once per epoch.
    long checkpoint_every = 0;
    AugmentConfig augment;
    ModelConfig model;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("config: alpha must lie in [0, 1]");
        if (alpha_unit != "steps" && alpha_unit != "scenes") throw std::invalid_argument("config: alpha_unit must be steps or scenes");
        if (!(lr > 0)) throw std::invalid_argument("config: lr must be positive");
        if (epochs < 1 || batch_size < 1 || steps < 0) throw std::invalid_argument("config: epochs and batch_size must be positive");
        if (!(beta >= 0 && beta < 1)) throw std::invalid_argument("config: beta must lie in [0, 1)");
        if (!(lambda1 >= 0 && lambda2 >= 0)) throw std::invalid_argument("config: loss weights must be nonnegative");
        if (!(grad_clip_norm > 0) || clip_window < 0) throw std::invalid_argument("config: invalid clipping settings");
        if (model.pyramid_channels.empty() || model.unet_channels.size() < 2)
            throw std::invalid_argument("config: need a pyramid and at least two UNet levels");
        if (!(model.r_min > 0 && model.r_init > model.r_min)) throw std::invalid_argument("config: need 0 < r_min < r_init");
        if (model.render_source != "features" && model.render_source != "logits")
            throw std::invalid_argument("config: render_source must be features or logits");
        if (!(augment.gt_dropout >= 0 && augment.gt_dropout < 1)) throw std::invalid_argument("config: gt_dropout must lie in [0, 1)");
        model.render.validate();
    }

    /// Desk-scale training: narrower UNet and a larger step size so a CPU
    /// overfit converges in minutes.
    static TrainConfig desk() {
        TrainConfig c;
        c.lr = 1e-3;
        c.model.unet_channels = {16, 32, 64};
        c.model.pyramid_channels = {8, 16, 16};
        return c;
    }
};

inline json to_json(const TrainConfig& c) {
    const auto& a = c.augment;
    const auto& m = c.model;
    const auto& r = m.render;
    return {{"alpha", c.alpha},
            {"alpha_unit", c.alpha_unit},
            {"lr", c.lr},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"beta", c.beta},
            {"grad_clip_norm", c.grad_clip_norm},
            {"clip_window", c.clip_window},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"augment",
             {{"enabled", a.enabled}, {"flip", a.flip}, {"rotate", a.rotate}, {"gt_dropout", a.gt_dropout},
              {"image_shift", a.image_shift}, {"image_scale", a.image_scale}, {"image_rotate", a.image_rotate}, {"rgb", a.rgb}}},
            {"model",
             {{"pyramid_channels", m.pyramid_channels}, {"fusion_hidden", m.fusion_hidden}, {"fusion_out", m.fusion_out},
              {"unet_channels", m.unet_channels}, {"kernel_size", m.kernel_size}, {"prune_threshold", m.prune_threshold},
              {"se_reduction", m.se_reduction}, {"shader_width", m.shader_width}, {"r_min", m.r_min}, {"r_init", m.r_init},
              {"render_source", m.render_source},
              {"render",
               {{"gamma", r.gamma}, {"epsilon", r.epsilon}, {"spheres_per_pixel", r.spheres_per_pixel}, {"z_near", r.z_near},
                {"z_far", r.z_far},
                {"coverage", r.coverage == render::CoverageMode::closeness ? "closeness" : "as_printed"}}}}}};
}

namespace detail {

inline void check_known(const json& user, const json& known, const std::string& path) {
    if (!user.is_object()) return;
    for (const auto& [k, v] : user.items()) {
        if (!known.contains(k)) throw std::invalid_argument("config: unknown key " + path + k);
        if (known.at(k).is_object()) check_known(v, known.at(k), path + k + ".");
    }
}

}  // namespace detail

/// Keys absent from `j` keep their defaults; unknown keys are rejected.
inline TrainConfig from_json(const json& j, const TrainConfig& defaults = {}) {
    json merged = to_json(defaults);
    detail::check_known(j, merged, "");
    merged.merge_patch(j);
    TrainConfig c;
    const auto& a = merged.at("augment");
    const auto& m = merged.at("model");
    const auto& r = m.at("render");
    try {
        c.alpha = merged.at("alpha").get<double>();
        c.alpha_unit = merged.at("alpha_unit").get<std::string>();
        c.lr = merged.at("lr").get<double>();
        c.epochs = merged.at("epochs").get<int>();
        c.batch_size = merged.at("batch_size").get<int>();
        c.steps = merged.at("steps").get<long>();
        c.lambda1 = merged.at("lambda1").get<double>();
        c.lambda2 = merged.at("lambda2").get<double>();
        c.beta = merged.at("beta").get<double>();
        c.grad_clip_norm = merged.at("grad_clip_norm").get<double>();
        c.clip_window = merged.at("clip_window").get<long>();
        c.seed = merged.at("seed").get<std::uint64_t>();
        c.checkpoint_every = merged.at("checkpoint_every").get<long>();
        c.augment.enabled = a.at("enabled").get<bool>();
        c.augment.flip = a.at("flip").get<bool>();
        c.augment.rotate = a.at("rotate").get<bool>();
        c.augment.gt_dropout = a.at("gt_dropout").get<double>();
        c.augment.image_shift = a.at("image_shift").get<double>();
        c.augment.image_scale = a.at("image_scale").get<double>();
        c.augment.image_rotate = a.at("image_rotate").get<double>();
        c.augment.rgb = a.at("rgb").get<double>();
        c.model.pyramid_channels = m.at("pyramid_channels").get<std::vector<int>>();
        c.model.fusion_hidden = m.at("fusion_hidden").get<int>();
        c.model.fusion_out = m.at("fusion_out").get<int>();
        c.model.unet_channels = m.at("unet_channels").get<std::vector<int>>();
        c.model.kernel_size = m.at("kernel_size").get<int>();
        c.model.prune_threshold = m.at("prune_threshold").get<double>();
        c.model.se_reduction = m.at("se_reduction").get<int>();
        c.model.shader_width = m.at("shader_width").get<int>();
        c.model.r_min = m.at("r_min").get<double>();
        c.model.r_init = m.at("r_init").get<double>();
        c.model.render_source = m.at("render_source").get<std::string>();
        c.model.render.gamma = r.at("gamma").get<double>();
        c.model.render.epsilon = r.at("epsilon").get<double>();
        c.model.render.spheres_per_pixel = r.at("spheres_per_pixel").get<int>();
        c.model.render.z_near = r.at("z_near").get<double>();
        c.model.render.z_far = r.at("z_far").get<double>();
        const auto cov = r.at("coverage").get<std::string>();
        if (cov != "closeness" && cov != "as_printed") throw std::invalid_argument("config: coverage must be closeness or as_printed");
        c.model.render.coverage = cov == "closeness" ? render::CoverageMode::closeness : render::CoverageMode::as_printed;
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Applies a dotted-key override such as ("model.render.gamma", "2"). The
/// value is parsed as JSON when possible, else taken as a string.
inline void apply_override(json& j, const std::string& key, const std::string& value) {
    json v;
    try {
        v = json::parse(value);
    } catch (const json::exception&) {
        v = value;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw std::invalid_argument("config: malformed key " + key);
        if (dot == std::string::npos) {
            (*node)[part] = v;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

}  // namespace minkocc::train
