#pragma once

#include "minkocc/ad/ops.hpp"
#include "minkocc/labels.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace minkocc::losses {

/// Mean binary cross-entropy with logits over every row of every level.
/// Empty levels contribute nothing; with no rows at all the loss is 0.
inline ad::Var occupancy_bce(ad::Tape& tape, const std::vector<ad::Var>& logits, const std::vector<Matrix>& targets) {
    if (logits.size() != targets.size()) throw std::invalid_argument("occupancy_bce: one target per level");
    Index total = 0;
    for (std::size_t l = 0; l < logits.size(); ++l) {
        if (logits[l].rows() != targets[l].rows() || (logits[l].rows() > 0 && logits[l].cols() != 1))
            throw std::invalid_argument("occupancy_bce: targets must align with level rows");
        total += logits[l].rows();
    }
    if (total == 0) return tape.constant(Matrix::Zero(1, 1));
    double sum = 0.0;
    for (std::size_t l = 0; l < logits.size(); ++l) {
        const Matrix& x = logits[l].value();
        for (Index r = 0; r < x.rows(); ++r) {
            const double v = x(r, 0), y = targets[l](r, 0);
            sum += std::max(v, 0.0) - v * y + std::log1p(std::exp(-std::abs(v)));
        }
    }
    Matrix out(1, 1);
    out(0, 0) = sum / static_cast<double>(total);
    return tape.record(std::move(out), logits, [logits, targets, total](ad::Tape& t, const Matrix& g) {
        const double s = g(0, 0) / static_cast<double>(total);
        for (std::size_t l = 0; l < logits.size(); ++l) {
            if (!logits[l].requires_grad() || logits[l].rows() == 0) continue;
            const Matrix& x = logits[l].value();
            Matrix gx(x.rows(), 1);
            for (Index r = 0; r < x.rows(); ++r) gx(r, 0) = s * (ad::detail::stable_sigmoid(x(r, 0)) - targets[l](r, 0));
            t.accumulate(logits[l], gx);
        }
    });
}

/// Per-class weights (1 - beta) / (1 - beta^n_y) from dataset voxel counts.
struct ClassBalance {
    double beta = 0.9;
    std::vector<std::uint64_t> counts;

    double weight(int label) const {
        if (label < 0 || static_cast<std::size_t>(label) >= counts.size())
            throw std::invalid_argument("class balance: unknown label " + std::to_string(label));
        const auto n = counts[static_cast<std::size_t>(label)];
        if (n == 0) throw std::invalid_argument("class balance: no count for label " + std::to_string(label));
        return (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(n)));
    }

    void validate() const {
        if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("class balance: beta must lie in [0, 1)");
    }
};

namespace detail {

/// Shared forward/backward for weighted softmax cross-entropy:
/// sum_r scale_r * -log softmax(x_r)[y_r] / norm. Rows with scale 0 are skipped.
inline ad::Var weighted_ce(ad::Tape& tape, const ad::Var& logits, std::vector<int> labels, std::vector<double> scale,
                           double norm) {
    const Matrix& x = logits.value();
    const Matrix p = ad::softmax_rows(x);
    double sum = 0.0;
    for (Index r = 0; r < x.rows(); ++r) {
        const auto k = static_cast<std::size_t>(r);
        if (scale[k] == 0.0) continue;
        const double m = x.row(r).maxCoeff();
        const double lse = m + std::log((x.row(r).array() - m).exp().sum());
        sum += scale[k] * (lse - x(r, labels[k]));
    }
    Matrix out(1, 1);
    out(0, 0) = norm > 0 ? sum / norm : 0.0;
    return tape.record(std::move(out), {logits}, [logits, p, labels = std::move(labels), scale = std::move(scale), norm](ad::Tape& t, const Matrix& g) {
        if (norm <= 0) return;
        Matrix& gx = t.grad_buffer(logits);
        const double s = g(0, 0) / norm;
        for (Index r = 0; r < p.rows(); ++r) {
            const auto k = static_cast<std::size_t>(r);
            if (scale[k] == 0.0) continue;
            gx.row(r) += s * scale[k] * p.row(r);
            gx(r, labels[k]) -= s * scale[k];
        }
    });
}

}  // namespace detail

/// Mean over rows of weight(y) * -log softmax(logits)[y].
inline ad::Var class_balanced_ce(ad::Tape& tape, const ad::Var& logits, const std::vector<int>& labels,
                                 const ClassBalance& balance) {
    balance.validate();
    if (static_cast<std::size_t>(logits.rows()) != labels.size())
        throw std::invalid_argument("class_balanced_ce: one label per row");
    std::vector<double> w(labels.size());
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0 || labels[r] >= logits.cols())
            throw std::invalid_argument("class_balanced_ce: unknown label " + std::to_string(labels[r]));
        w[r] = balance.weight(labels[r]);
    }
    return detail::weighted_ce(tape, logits, labels, std::move(w), static_cast<double>(labels.size()));
}

/// Per-pixel pseudo labels (0 = unlabeled) and confidences in [0, 1].
struct PseudoLabelImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> labels;
    std::vector<double> confidence;

    std::size_t labeled_count() const {
        std::size_t n = 0;
        for (auto l : labels) n += l != kUnlabeled;
        return n;
    }

    void validate() const {
        const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
        if (labels.size() != n || confidence.size() != n) throw std::invalid_argument("pseudo labels: shape mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (confidence[i] < 0 || confidence[i] > 1) throw std::invalid_argument("pseudo labels: confidence outside [0, 1]");
            if (labels[i] == kUnlabeled && confidence[i] != 0) throw std::invalid_argument("pseudo labels: unlabeled pixel with confidence");
        }
    }
};

/// Confidence-weighted cross-entropy over labeled pixels, divided by the
/// labeled-pixel count.
inline ad::Var soft_ce_2d(ad::Tape& tape, const ad::Var& logits, const PseudoLabelImage& pseudo) {
    const auto n = static_cast<std::size_t>(pseudo.width) * static_cast<std::size_t>(pseudo.height);
    if (static_cast<std::size_t>(logits.rows()) != n || pseudo.labels.size() != n || pseudo.confidence.size() != n)
        throw std::invalid_argument("soft_ce_2d: logits and pseudo labels differ in shape");
    std::vector<int> labels(n);
    std::vector<double> scale(n, 0.0);
    std::size_t labeled = 0;
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = pseudo.labels[i];
        if (labels[i] == kUnlabeled) continue;
        if (labels[i] >= logits.cols()) throw std::invalid_argument("soft_ce_2d: label outside class range");
        scale[i] = pseudo.confidence[i];
        ++labeled;
    }
    return detail::weighted_ce(tape, logits, std::move(labels), std::move(scale), static_cast<double>(labeled));
}

/// Warm-start steps are [0, ceil(alpha * total)).
struct PhaseSchedule {
    double alpha = 0.1;
    long total = 0;

    long warm_steps() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("phase schedule: alpha must lie in [0, 1]");
        // The tolerance keeps products like 0.1 * 30 from rounding up a step.
        return static_cast<long>(std::ceil(alpha * static_cast<double>(total) - 1e-9));
    }
    bool warm_start(long step) const { return step < warm_steps(); }
    int phase(long step) const { return warm_start(step) ? 1 : 2; }
};

enum class SemanticKind { dense_3d, pseudo_2d };

struct SemanticLoss {
    SemanticKind kind;
    ad::Var value;
};

struct LossWeights {
    double lambda1 = 0.5;
    double lambda2 = 1.0;
};

/// lambda1 * semantic + lambda2 * bce. The semantic term must be the 3D loss
/// during warm-start and the 2D loss afterwards.
inline ad::Var total_loss(const PhaseSchedule& schedule, long step, const SemanticLoss& semantic, const ad::Var& bce,
                          const LossWeights& w = {}) {
    const SemanticKind expected = schedule.warm_start(step) ? SemanticKind::dense_3d : SemanticKind::pseudo_2d;
    if (semantic.kind != expected)
        throw std::logic_error(std::string("total_loss: step ") + std::to_string(step) + " expects the " +
                               (expected == SemanticKind::dense_3d ? "3D" : "2D") + " semantic loss");
    return ad::weighted_sum({semantic.value, bce}, {w.lambda1, w.lambda2});
}

}  // namespace minkocc::losses
