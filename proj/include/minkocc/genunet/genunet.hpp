#pragma once

#include "minkocc/labels.hpp"
#include "minkocc/nn/layers.hpp"
#include "minkocc/sparse/ops.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace minkocc::genunet {

using sparse::CoordinateSet;
using sparse::SparseVoxelTensor;

struct UNetConfig {
    int in_channels = 16;
    std::vector<int> channels{32, 64, 128};  // one entry per level; level l has stride 2^l
    int kernel_size = 3;
    double prune_threshold = 0.5;
    int class_count = kClassCount;
    int se_reduction = 4;

    int depth() const { return static_cast<int>(channels.size()); }

    void validate() const {
        if (channels.empty()) throw std::invalid_argument("unet: depth must be at least 1");
        for (int c : channels)
            if (c <= 0) throw std::invalid_argument("unet: channels must be positive");
        if (class_count < 2) throw std::invalid_argument("unet: need at least two classes");
        if (in_channels <= 0 || kernel_size < 1) throw std::invalid_argument("unet: bad input channels or kernel");
    }
};

/// Sparse convolution parameters.
struct SparseConv {
    ad::Parameter* weight = nullptr;
    ad::Parameter* bias = nullptr;
    int kernel_size = 1;

    static SparseConv create(ad::ParameterStore& store, const std::string& name, int in, int out, int k,
                             std::mt19937_64& rng, bool with_bias = true, double gain = 1.0) {
        const Index kvol = static_cast<Index>(k) * k * k;
        SparseConv c;
        c.weight = &store.add(name + ".weight", nn::he_normal(rng, kvol * in, out, static_cast<double>(kvol * in), gain));
        if (with_bias) c.bias = &store.add(name + ".bias", Matrix::Zero(1, out));
        c.kernel_size = k;
        return c;
    }

    sparse::ConvWeights bind(ad::Tape& t) const {
        return {t.parameter(*weight), bias ? t.parameter(*bias) : ad::Var{}, kernel_size};
    }
};

inline ad::Var apply_norm(ad::Tape& t, const nn::Norm& n, const ad::Var& x, bool training) {
    return sparse::batch_norm_rows(x, t.parameter(*n.gamma), t.parameter(*n.beta), n.running_mean->value,
                                   n.running_var->value, training);
}

inline SparseVoxelTensor norm_relu(ad::Tape& t, const nn::Norm& n, const SparseVoxelTensor& x, bool training) {
    return x.with_features(ad::relu(apply_norm(t, n, x.features, training)));
}

struct SqueezeExcite {
    nn::Linear reduce;
    nn::Linear expand;

    static SqueezeExcite create(ad::ParameterStore& store, const std::string& name, int c, int r, std::mt19937_64& rng) {
        const int hidden = std::max(1, c / r);
        return {nn::Linear::create(store, name + ".reduce", c, hidden, rng),
                nn::Linear::create(store, name + ".expand", hidden, c, rng)};
    }

    SparseVoxelTensor operator()(ad::Tape& t, const SparseVoxelTensor& x) const {
        return sparse::squeeze_excite(x, {t.parameter(*reduce.weight), t.parameter(*reduce.bias),
                                          t.parameter(*expand.weight), t.parameter(*expand.bias)});
    }
};

/// conv-norm-relu, conv-norm, residual add, relu, squeeze-excite.
struct ResidualBlock {
    SparseConv conv1, conv2;
    nn::Norm norm1, norm2;
    SqueezeExcite se;
    std::optional<SparseConv> projection;

    static ResidualBlock create(ad::ParameterStore& store, const std::string& name, int in, int out, int k, int r,
                                std::mt19937_64& rng) {
        ResidualBlock b;
        b.conv1 = SparseConv::create(store, name + ".conv1", in, out, k, rng, false);
        b.norm1 = nn::Norm::create(store, name + ".norm1", out);
        b.conv2 = SparseConv::create(store, name + ".conv2", out, out, k, rng, false);
        b.norm2 = nn::Norm::create(store, name + ".norm2", out);
        b.se = SqueezeExcite::create(store, name + ".se", out, r, rng);
        if (in != out) b.projection = SparseConv::create(store, name + ".proj", in, out, 1, rng, false);
        return b;
    }

    SparseVoxelTensor operator()(ad::Tape& t, const SparseVoxelTensor& x, bool training) const {
        if (x.empty()) return x.with_features(t.constant(Matrix::Zero(0, norm1.gamma->value.cols())));
        SparseVoxelTensor h = norm_relu(t, norm1, sparse::conv(x, conv1.bind(t)), training);
        h = sparse::conv(h, conv2.bind(t));
        ad::Var skip = projection ? sparse::conv(x, projection->bind(t)).features : x.features;
        return se(t, h.with_features(ad::relu(ad::add(apply_norm(t, norm2, h.features, training), skip))));
    }
};

/// Decoder output of one level. `tensor` is the unpruned generative expansion
/// and `keep_logits` is aligned to its rows; `kept` is the pruned tensor after
/// the skip connection and refinement.
struct LevelOutput {
    SparseVoxelTensor tensor;
    ad::Var keep_logits;
    SparseVoxelTensor kept;
};

struct DecodeResult {
    SparseVoxelTensor output;          // stride 1
    std::vector<LevelOutput> levels;   // deepest-but-one first, stride 1 last
};

struct ClassOutput {
    ad::Var logits;
    Matrix probabilities;
};

/// Occupied coordinates of every level: the stride-1 set max-pooled to
/// stride 2^l (floor to the stride grid).
inline std::vector<CoordinateSet> level_targets(const std::vector<sparse::Coordinate>& occupied, int depth) {
    std::vector<CoordinateSet> out;
    for (int l = 0; l < depth; ++l) {
        const int s = 1 << l;
        auto idx = std::make_shared<sparse::CoordinateIndex>();
        for (const auto& c : occupied)
            idx->insert({c.batch, sparse::floor_to_stride(c.x, s), sparse::floor_to_stride(c.y, s), sparse::floor_to_stride(c.z, s)});
        out.push_back(std::move(idx));
    }
    return out;
}

/// Binary keep targets for the rows of a generated tensor.
inline Matrix keep_labels(const SparseVoxelTensor& t, const sparse::CoordinateIndex& target) {
    Matrix y(static_cast<Index>(t.size()), 1);
    const auto& cs = t.coordinates();
    for (std::size_t r = 0; r < cs.size(); ++r) y(static_cast<Index>(r), 0) = target.contains(cs[r]) ? 1.0 : 0.0;
    return y;
}

/// Sum of decoder features and encoder features on coordinates present in both.
inline SparseVoxelTensor skip_sum(const SparseVoxelTensor& decoder, const SparseVoxelTensor& encoder) {
    if (decoder.empty() || encoder.empty()) return decoder;
    if (decoder.channels() != encoder.channels()) throw std::invalid_argument("skip: channel mismatch");
    std::vector<int> enc_rows, dec_rows;
    const auto& cs = decoder.coordinates();
    for (std::size_t r = 0; r < cs.size(); ++r)
        if (const auto e = encoder.coords->find(cs[r])) {
            enc_rows.push_back(*e);
            dec_rows.push_back(static_cast<int>(r));
        }
    if (enc_rows.empty()) return decoder;
    ad::Var moved = ad::segment_sum(ad::gather_rows(encoder.features, std::move(enc_rows)), std::move(dec_rows),
                                    static_cast<Index>(decoder.size()));
    return decoder.with_features(ad::add(decoder.features, moved));
}

class GenUNet {
public:
    GenUNet(ad::ParameterStore& store, const UNetConfig& cfg, std::mt19937_64& rng, const std::string& name = "unet")
        : cfg_(cfg) {
        cfg.validate();
        const int depth = cfg.depth();
        int in = cfg.in_channels;
        for (int l = 0; l < depth; ++l) {
            const std::string p = name + ".enc" + std::to_string(l);
            const int c = cfg.channels[static_cast<std::size_t>(l)];
            enc_blocks_.push_back(ResidualBlock::create(store, p, in, c, cfg.kernel_size, cfg.se_reduction, rng));
            if (l + 1 < depth) {
                const int next = cfg.channels[static_cast<std::size_t>(l + 1)];
                down_.push_back(SparseConv::create(store, p + ".down", c, next, 2, rng, false));
                down_norm_.push_back(nn::Norm::create(store, p + ".down_norm", next));
                in = next;
            }
        }
        for (int l = depth - 2; l >= 0; --l) {
            const std::string p = name + ".dec" + std::to_string(l);
            const int c = cfg.channels[static_cast<std::size_t>(l)];
            const int deeper = cfg.channels[static_cast<std::size_t>(l + 1)];
            Decoder d;
            d.up = SparseConv::create(store, p + ".up", deeper, c, 2, rng, false);
            d.up_norm = nn::Norm::create(store, p + ".up_norm", c);
            d.keep = SparseConv::create(store, p + ".keep", c, 1, 1, rng, true, 0.1);
            d.refine = SparseConv::create(store, p + ".refine", c, c, cfg.kernel_size, rng, false);
            d.refine_norm = nn::Norm::create(store, p + ".refine_norm", c);
            dec_.push_back(d);
        }
        head_ = nn::Linear::create(store, name + ".head", cfg.channels.front(), cfg.class_count, rng, 0.5);
    }

    const UNetConfig& config() const { return cfg_; }
    /// Keep head of decoder step i (deepest first).
    const SparseConv& keep_head(std::size_t i) const { return dec_[i].keep; }
    const nn::Linear& head() const { return head_; }

    std::vector<SparseVoxelTensor> encode(ad::Tape& t, const SparseVoxelTensor& input, bool training) const {
        if (input.stride != 1) throw std::invalid_argument("encode: input must have stride 1");
        std::vector<SparseVoxelTensor> out;
        SparseVoxelTensor x = input;
        for (std::size_t l = 0; l < enc_blocks_.size(); ++l) {
            x = enc_blocks_[l](t, x, training);
            out.push_back(x);
            if (l < down_.size()) {
                if (x.empty()) {
                    x = {x.coords, t.constant(Matrix::Zero(0, down_[l].weight->value.cols())), x.stride * 2};
                    continue;
                }
                x = norm_relu(t, down_norm_[l], sparse::conv(x, down_[l].bind(t), 2), training);
            }
        }
        return out;
    }

    /// Decoder from the deepest level up. With `targets` (one set per level,
    /// from level_targets), target-occupied coordinates are always kept.
    DecodeResult decode(ad::Tape& t, const std::vector<SparseVoxelTensor>& enc, bool training,
                        const std::vector<CoordinateSet>* targets = nullptr) const {
        if (enc.size() != enc_blocks_.size()) throw std::invalid_argument("decode: encoder level count mismatch");
        DecodeResult res;
        SparseVoxelTensor x = enc.back();
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            const auto level = static_cast<std::size_t>(cfg_.depth() - 2) - i;
            const Decoder& d = dec_[i];
            const Index c = d.up_norm.gamma->value.cols();
            LevelOutput lo;
            if (x.empty()) {
                auto none = std::make_shared<sparse::CoordinateIndex>();
                lo.tensor = {none, t.constant(Matrix::Zero(0, c)), x.stride / 2};
                lo.keep_logits = t.constant(Matrix::Zero(0, 1));
                lo.kept = lo.tensor;
                res.levels.push_back(lo);
                x = lo.kept;
                continue;
            }
            lo.tensor = norm_relu(t, d.up_norm, sparse::generative_transposed_conv(x, d.up.bind(t), 2), training);
            lo.keep_logits = sparse::conv(lo.tensor, d.keep.bind(t)).features;
            std::vector<std::uint8_t> force;
            if (targets) {
                const Matrix y = keep_labels(lo.tensor, *(*targets)[level]);
                force.resize(static_cast<std::size_t>(y.rows()));
                for (Index r = 0; r < y.rows(); ++r) force[static_cast<std::size_t>(r)] = y(r, 0) > 0.5;
            }
            const Matrix& logits = lo.keep_logits.value();
            SparseVoxelTensor kept = sparse::prune(
                lo.tensor, std::span<const double>(logits.data(), static_cast<std::size_t>(logits.rows())),
                cfg_.prune_threshold, force);
            kept = skip_sum(kept, enc[level]);
            if (!kept.empty()) {
                SparseVoxelTensor r = norm_relu(t, d.refine_norm, sparse::conv(kept, d.refine.bind(t)), training);
                kept = kept.with_features(ad::add(kept.features, r.features));
            }
            lo.kept = kept;
            res.levels.push_back(lo);
            x = kept;
        }
        res.output = x;
        return res;
    }

    ClassOutput classify(ad::Tape& t, const SparseVoxelTensor& x) const {
        ClassOutput out;
        out.logits = head_(t, x.features);
        out.probabilities = ad::softmax_rows(out.logits.value());
        return out;
    }

private:
    struct Decoder {
        SparseConv up;
        nn::Norm up_norm;
        SparseConv keep;
        SparseConv refine;
        nn::Norm refine_norm;
    };

    UNetConfig cfg_;
    std::vector<ResidualBlock> enc_blocks_;
    std::vector<SparseConv> down_;
    std::vector<nn::Norm> down_norm_;
    std::vector<Decoder> dec_;
    nn::Linear head_;
};

/// Argmax class at each coordinate of `x`, free elsewhere. Coordinates outside
/// the grid are dropped and counted.
struct DenseLabels {
    DenseVoxelGrid grid;
    std::size_t dropped = 0;
};

inline DenseLabels to_dense_labels(const SparseVoxelTensor& x, const Matrix& probabilities, const GridConfig& grid,
                                   int batch = 0) {
    if (static_cast<std::size_t>(probabilities.rows()) != x.size())
        throw std::invalid_argument("to_dense_labels: one probability row per voxel");
    DenseLabels out{DenseVoxelGrid::filled(grid), 0};
    if (x.empty()) return out;
    const auto& cs = x.coordinates();
    for (std::size_t r = 0; r < cs.size(); ++r) {
        const auto& c = cs[r];
        if (c.batch != batch) continue;
        if (!grid.contains(c.x, c.y, c.z)) {
            ++out.dropped;
            continue;
        }
        Index k = 0;
        probabilities.row(static_cast<Index>(r)).maxCoeff(&k);
        out.grid.set(c.x, c.y, c.z, static_cast<int>(k));
    }
    return out;
}

}  // namespace minkocc::genunet
