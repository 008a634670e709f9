#pragma once

#include "minkocc/ad/tape.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

// Dense differentiable primitives. Feature matrices are row-major, one row per
// point/voxel/pixel.

namespace minkocc::ad {

namespace detail {
inline void require_same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw std::invalid_argument("operands on different tapes");
}
inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
inline double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
inline double stable_softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    detail::require_same_tape(a, b);
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Matrix out = a.value() * b.value();
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
        if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
    });
}

inline Var add(const Var& a, const Var& b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "add");
    return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "sub");
    return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (b.requires_grad()) t.accumulate(b, -g);
    });
}

/// a (N×C) + row (1×C) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
    detail::require_same_tape(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape");
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
        t.accumulate(a, g);
        if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_tape(a, b);
    detail::require_same_shape(a.value(), b.value(), "mul");
    Matrix out = a.value().cwiseProduct(b.value());
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
        if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
        if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
    });
}

/// Row scaling: out(i, j) = a(i, j) * s(i, 0).
inline Var mul_col(const Var& a, const Var& s) {
    detail::require_same_tape(a, s);
    if (s.cols() != 1 || s.rows() != a.rows()) throw std::invalid_argument("mul_col: scale shape");
    Matrix out = a.value();
    for (Index i = 0; i < out.rows(); ++i) out.row(i) *= s.value()(i, 0);
    return a.tape()->record(std::move(out), {a, s}, [a, s](Tape& t, const Matrix& g) {
        if (a.requires_grad()) {
            Matrix ga = g;
            for (Index i = 0; i < ga.rows(); ++i) ga.row(i) *= s.value()(i, 0);
            t.accumulate(a, ga);
        }
        if (s.requires_grad()) t.accumulate(s, g.cwiseProduct(a.value()).rowwise().sum());
    });
}

inline Var scale(const Var& a, double k) {
    return a.tape()->record(a.value() * k, {a}, [a, k](Tape& t, const Matrix& g) { t.accumulate(a, g * k); });
}

inline Var relu(const Var& a) {
    Matrix out = a.value().cwiseMax(0.0);
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        Matrix ga = g;
        const Matrix& x = a.value();
        for (Index i = 0; i < ga.size(); ++i)
            if (!(x.data()[i] > 0.0)) ga.data()[i] = 0.0;
        t.accumulate(a, ga);
    });
}

inline Var sigmoid(const Var& a) {
    Matrix out = a.value().unaryExpr([](double x) { return detail::stable_sigmoid(x); });
    Matrix saved = out;
    return a.tape()->record(std::move(out), {a}, [a, saved](Tape& t, const Matrix& g) {
        t.accumulate(a, g.cwiseProduct(saved.cwiseProduct((1.0 - saved.array()).matrix())));
    });
}

inline Var softplus(const Var& a) {
    Matrix out = a.value().unaryExpr([](double x) { return detail::stable_softplus(x); });
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        Matrix s = a.value().unaryExpr([](double x) { return detail::stable_sigmoid(x); });
        t.accumulate(a, g.cwiseProduct(s));
    });
}

inline Var add_scalar(const Var& a, double k) {
    Matrix out = a.value().array() + k;
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

inline Var sum(const Var& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
        t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
    });
}

inline Var mean(const Var& a) {
    const double n = static_cast<double>(std::max<Index>(1, a.value().size()));
    return scale(sum(a), 1.0 / n);
}

/// Weighted sum of scalar Vars.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
    if (terms.empty() || terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: arity");
    Matrix out(1, 1);
    out(0, 0) = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) out(0, 0) += weights[i] * terms[i].scalar();
    return terms[0].tape()->record(std::move(out), terms, [terms, weights](Tape& t, const Matrix& g) {
        for (std::size_t i = 0; i < terms.size(); ++i)
            t.accumulate(terms[i], Matrix::Constant(1, 1, g(0, 0) * weights[i]));
    });
}

/// out.row(k) = a.row(rows[k]).
inline Var gather_rows(const Var& a, std::vector<int> rows) {
    Matrix out(static_cast<Index>(rows.size()), a.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = a.value().row(rows[k]);
    return a.tape()->record(std::move(out), {a}, [a, rows = std::move(rows)](Tape& t, const Matrix& g) {
        Matrix& ga = t.grad_buffer(a);
        for (std::size_t k = 0; k < rows.size(); ++k) ga.row(rows[k]) += g.row(static_cast<Index>(k));
    });
}

/// out.row(segment[k]) += a.row(k); rows of out with no members are zero.
inline Var segment_sum(const Var& a, std::vector<int> segment, Index segments) {
    if (static_cast<Index>(segment.size()) != a.rows()) throw std::invalid_argument("segment_sum: length");
    Matrix out = Matrix::Zero(segments, a.cols());
    for (std::size_t k = 0; k < segment.size(); ++k) out.row(segment[k]) += a.value().row(static_cast<Index>(k));
    return a.tape()->record(std::move(out), {a}, [a, segment = std::move(segment)](Tape& t, const Matrix& g) {
        Matrix& ga = t.grad_buffer(a);
        for (std::size_t k = 0; k < segment.size(); ++k) ga.row(static_cast<Index>(k)) += g.row(segment[k]);
    });
}

/// Segment mean; empty segments yield zero rows.
inline Var segment_mean(const Var& a, const std::vector<int>& segment, Index segments) {
    std::vector<double> count(static_cast<std::size_t>(segments), 0.0);
    for (int s : segment) count[static_cast<std::size_t>(s)] += 1.0;
    Var summed = segment_sum(a, segment, segments);
    Matrix inv(segments, 1);
    for (Index s = 0; s < segments; ++s) inv(s, 0) = count[static_cast<std::size_t>(s)] > 0 ? 1.0 / count[static_cast<std::size_t>(s)] : 0.0;
    return mul_col(summed, a.tape()->constant(std::move(inv)));
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const Index rows = parts[0].rows();
    Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return parts[0].tape()->record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
        Index c0 = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) t.accumulate(p, g.middleCols(c0, p.cols()));
            c0 += p.cols();
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const Index cols = parts[0].cols();
    Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    Index r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return parts[0].tape()->record(std::move(out), parts, [parts](Tape& t, const Matrix& g) {
        Index r0 = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) t.accumulate(p, g.middleRows(r0, p.rows()));
            r0 += p.rows();
        }
    });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
    Matrix out = a.value().middleCols(start, count);
    return a.tape()->record(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
        t.grad_buffer(a).middleCols(start, count) += g;
    });
}

/// x·W + b for a row-major batch of inputs.
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, weight);
    return bias.valid() ? add_row(y, bias) : y;
}

/// Row-wise softmax (not recorded; for inference and oracles).
inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        double z = 0.0;
        for (Index j = 0; j < logits.cols(); ++j) {
            p(i, j) = std::exp(logits(i, j) - m);
            z += p(i, j);
        }
        p.row(i) /= z;
    }
    return p;
}

}  // namespace minkocc::ad
