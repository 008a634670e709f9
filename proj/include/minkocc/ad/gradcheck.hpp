#pragma once

#include "minkocc/ad/tape.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

namespace minkocc::ad {

using InputLoss = std::function<Var(Tape&, const std::vector<Var>&)>;
using ParameterLoss = std::function<Var(Tape&)>;

namespace detail {
inline double rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}
inline void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("check_gradients: non-finite ") + what);
}
}  // namespace detail

/// Central-difference check of d(loss)/d(inputs). Returns
/// max |analytic - numeric| / max(1, |numeric|) over every input entry.
inline double check_gradients(const InputLoss& fn, std::vector<Matrix> inputs, double step = 1e-4) {
    std::vector<Matrix> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& m : inputs) leaves.push_back(tape.variable(m));
        Var loss = fn(tape, leaves);
        detail::require_finite(loss.scalar(), "loss");
        tape.backward(loss);
        for (const auto& l : leaves) analytic.push_back(tape.grad(l));
    }
    auto eval = [&](const std::vector<Matrix>& xs) {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& m : xs) leaves.push_back(tape.variable(m));
        const double v = fn(tape, leaves).scalar();
        detail::require_finite(v, "loss");
        return v;
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (Index i = 0; i < inputs[k].size(); ++i) {
            detail::require_finite(analytic[k].data()[i], "gradient");
            const double x0 = inputs[k].data()[i];
            inputs[k].data()[i] = x0 + step;
            const double fp = eval(inputs);
            inputs[k].data()[i] = x0 - step;
            const double fm = eval(inputs);
            inputs[k].data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * step);
            worst = std::max(worst, detail::rel_error(analytic[k].data()[i], numeric));
        }
    }
    return worst;
}

/// Same check against Parameter values. When max_entries_per_param > 0, a
/// seeded random subset of each parameter's entries is probed.
inline double check_parameter_gradients(const ParameterLoss& fn, const std::vector<Parameter*>& params,
                                        double step = 1e-4, std::size_t max_entries_per_param = 0,
                                        std::uint64_t seed = 7) {
    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = fn(tape);
        detail::require_finite(loss.scalar(), "loss");
        tape.backward(loss);
    }
    std::vector<Matrix> analytic;
    for (auto* p : params) analytic.push_back(p->grad);

    auto eval = [&] {
        Tape tape;
        const double v = fn(tape).scalar();
        detail::require_finite(v, "loss");
        return v;
    };
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Parameter& p = *params[k];
        std::vector<Index> entries;
        if (max_entries_per_param == 0 || static_cast<std::size_t>(p.value.size()) <= max_entries_per_param) {
            for (Index i = 0; i < p.value.size(); ++i) entries.push_back(i);
        } else {
            std::uniform_int_distribution<Index> pick(0, p.value.size() - 1);
            for (std::size_t j = 0; j < max_entries_per_param; ++j) entries.push_back(pick(rng));
        }
        for (Index i : entries) {
            detail::require_finite(analytic[k].data()[i], "gradient");
            const double x0 = p.value.data()[i];
            p.value.data()[i] = x0 + step;
            const double fp = eval();
            p.value.data()[i] = x0 - step;
            const double fm = eval();
            p.value.data()[i] = x0;
            const double numeric = (fp - fm) / (2.0 * step);
            worst = std::max(worst, detail::rel_error(analytic[k].data()[i], numeric));
        }
    }
    return worst;
}

}  // namespace minkocc::ad
