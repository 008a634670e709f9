#pragma once

#include "minkocc/fusion/frontend.hpp"
#include "minkocc/genunet/genunet.hpp"
#include "minkocc/render/sphere_renderer.hpp"
#include "minkocc/train/config.hpp"

#include <random>

namespace minkocc::train {

inline constexpr Index kPointColumns = 4;

/// Fusion frontend, generative UNet, sphere heads and neural shader sharing
/// one parameter store.
class Model {
public:
    Model(const ModelConfig& cfg, const GridConfig& grid, std::uint64_t seed)
        : cfg_(cfg), grid_(grid) {
        std::mt19937_64 rng(seed);
        fusion_.emplace(store_,
                        fusion::FusionConfig{cfg.pyramid_channels, cfg.fusion_hidden, cfg.fusion_out, fusion::VoxelReduce::mean},
                        kPointColumns, rng);
        genunet::UNetConfig u;
        u.in_channels = cfg.fusion_out;
        u.channels = cfg.unet_channels;
        u.kernel_size = cfg.kernel_size;
        u.prune_threshold = cfg.prune_threshold;
        u.se_reduction = cfg.se_reduction;
        unet_.emplace(store_, u, rng);
        const int c0 = cfg.unet_channels.front();
        heads_ = render::SphereHeads::create(store_, "spheres", c0, cfg.r_min * grid.voxel_size, cfg.r_init * grid.voxel_size, rng);
        shader_.emplace(store_, cfg.render_source == "logits" ? kClassCount : c0, cfg.shader_width, kClassCount, rng);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const GridConfig& grid() const { return grid_; }
    ad::ParameterStore& store() { return store_; }
    const ad::ParameterStore& store() const { return store_; }
    const fusion::FusionFrontend& frontend() const { return *fusion_; }
    const genunet::GenUNet& unet() const { return *unet_; }
    const render::SphereHeads& heads() const { return heads_; }
    const render::NeuralShader& shader() const { return *shader_; }
    int depth() const { return unet_->config().depth(); }

    /// Encoder and decoder on one sample. `targets` teacher-forces the
    /// decoder during training.
    genunet::DecodeResult forward(ad::Tape& t, const Matrix& points, const std::vector<fusion::Image>& images,
                                  const std::vector<Camera>& cameras, bool training,
                                  const std::vector<sparse::CoordinateSet>* targets = nullptr) const {
        const auto x = fusion_->forward(t, points, images, cameras, grid_);
        if (x.empty()) {
            genunet::DecodeResult r;
            r.output = {std::make_shared<sparse::CoordinateIndex>(), t.constant(Matrix::Zero(0, cfg_.unet_channels.front())), 1};
            return r;
        }
        return unet_->decode(t, unet_->encode(t, x, training), training, targets);
    }

    /// Dense argmax labels, free where the decoder produced no voxel.
    DenseVoxelGrid predict(const Matrix& points, const std::vector<fusion::Image>& images,
                           const std::vector<Camera>& cameras) const {
        ad::Tape t;
        const auto dec = forward(t, points, images, cameras, false);
        if (dec.output.empty()) return DenseVoxelGrid::filled(grid_);
        const auto cls = unet_->classify(t, dec.output);
        return genunet::to_dense_labels(dec.output, cls.probabilities, grid_).grid;
    }

    /// Class logits rendered into one camera.
    nn::FeatureImage render_logits(ad::Tape& t, const sparse::SparseVoxelTensor& x, const Camera& cam) const {
        auto cloud = render::spheres_from_voxels(t, x, heads_, grid_);
        if (cfg_.render_source == "logits" && cloud.size() > 0) cloud.features = unet_->head()(t, cloud.features);
        return (*shader_)(t, render::render_features(t, cloud, cam, cfg_.render).image);
    }

private:
    ModelConfig cfg_;
    GridConfig grid_;
    ad::ParameterStore store_;
    std::optional<fusion::FusionFrontend> fusion_;
    std::optional<genunet::GenUNet> unet_;
    render::SphereHeads heads_;
    std::optional<render::NeuralShader> shader_;
};

}  // namespace minkocc::train
