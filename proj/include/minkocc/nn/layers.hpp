#pragma once

#include "minkocc/ad/ops.hpp"

#include <cmath>
#include <random>
#include <string>

namespace minkocc::nn {

/// Gaussian init with std = gain * sqrt(2 / fan_in).
inline Matrix he_normal(std::mt19937_64& rng, Index rows, Index cols, double fan_in, double gain = 1.0) {
    std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / std::max(1.0, fan_in)));
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

/// Dense layer y = x W + b with parameters "<name>.weight" and "<name>.bias".
struct Linear {
    ad::Parameter* weight = nullptr;
    ad::Parameter* bias = nullptr;

    static Linear create(ad::ParameterStore& store, const std::string& name, Index in, Index out, std::mt19937_64& rng,
                         double gain = 1.0, bool with_bias = true) {
        Linear l;
        l.weight = &store.add(name + ".weight", he_normal(rng, in, out, static_cast<double>(in), gain));
        if (with_bias) l.bias = &store.add(name + ".bias", Matrix::Zero(1, out));
        return l;
    }

    ad::Var operator()(ad::Tape& t, const ad::Var& x) const {
        return ad::linear(x, t.parameter(*weight), bias ? t.parameter(*bias) : ad::Var{});
    }
    Index in() const { return weight->value.rows(); }
    Index out() const { return weight->value.cols(); }
};

/// Per-channel affine normalization with running statistics buffers.
struct Norm {
    ad::Parameter* gamma = nullptr;
    ad::Parameter* beta = nullptr;
    ad::Parameter* running_mean = nullptr;
    ad::Parameter* running_var = nullptr;

    static Norm create(ad::ParameterStore& store, const std::string& name, Index channels) {
        Norm n;
        n.gamma = &store.add(name + ".gamma", Matrix::Ones(1, channels));
        n.beta = &store.add(name + ".beta", Matrix::Zero(1, channels));
        n.running_mean = &store.add(name + ".running_mean", Matrix::Zero(1, channels), false);
        n.running_var = &store.add(name + ".running_var", Matrix::Ones(1, channels), false);
        return n;
    }
};

}  // namespace minkocc::nn
