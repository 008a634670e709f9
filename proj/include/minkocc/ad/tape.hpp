#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace minkocc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

}  // namespace minkocc

namespace minkocc::ad {

/// A named trainable (or buffer) array together with its gradient and Adam moments.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
    bool trainable = true;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Insertion-ordered parameter registry. Order is the serialization order.
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Parameter& add(std::string name, Matrix init, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = std::move(init);
        p->trainable = trainable;
        p->zero_grad();
        p->adam_m.setZero(p->value.rows(), p->value.cols());
        p->adam_v.setZero(p->value.rows(), p->value.cols());
        index_.emplace(std::move(name), params_.size());
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Parameter& at(std::string_view name) {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + std::string(name));
        return *params_[it->second];
    }
    const Parameter& at(std::string_view name) const {
        return const_cast<ParameterStore*>(this)->at(name);
    }
    bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

    std::vector<Parameter*> all() const {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<Parameter*> trainable() const {
        std::vector<Parameter*> out;
        for (const auto& p : params_)
            if (p->trainable) out.push_back(p.get());
        return out;
    }
    std::size_t size() const { return params_.size(); }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
        return n;
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }

    inline const Matrix& value() const;
    inline bool requires_grad() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape. Each recorded node keeps its forward value and a closure
/// that maps the node's output gradient onto its parents. Backward replays the
/// closures in reverse recording order.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Matrix&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}); }
    Var variable(Matrix value) { return push(std::move(value), true, nullptr, {}); }
    Var parameter(Parameter& p) { return push(p.value, p.trainable, &p, {}); }

    /// Records an op. The node requires grad iff any parent does; the closure is
    /// dropped otherwise.
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || (p.valid() && p.requires_grad());
        return push(std::move(value), rg, nullptr, rg ? std::move(backward) : Backward{});
    }
    Var record(Matrix value, const std::vector<Var>& parents, Backward backward) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || (p.valid() && p.requires_grad());
        return push(std::move(value), rg, nullptr, rg ? std::move(backward) : Backward{});
    }

    const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    /// Zero-initialized gradient buffer of a node, for ops that scatter into it.
    Matrix& grad_buffer(const Var& v) {
        Node& n = nodes_[static_cast<std::size_t>(v.id())];
        if (n.grad.size() == 0 && n.value.size() != 0) n.grad.setZero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void accumulate(const Var& v, const Matrix& g) {
        if (!v.valid() || !v.requires_grad()) return;
        Node& n = nodes_[static_cast<std::size_t>(v.id())];
        if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
            throw std::logic_error("gradient shape mismatch");
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Gradient of a node after backward; zeros when nothing reached it.
    Matrix grad(const Var& v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id())];
        if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(const Var& loss) {
        if (loss.tape() != this) throw std::invalid_argument("loss recorded on a different tape");
        if (loss.value().size() != 1) throw std::invalid_argument("backward requires a scalar loss");
        if (!loss.requires_grad()) return;
        grad_buffer(loss)(0, 0) += 1.0;
        for (int i = loss.id(); i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this, n.grad);
            if (n.param != nullptr) {
                if (n.param->grad.size() == 0)
                    n.param->grad = n.grad;
                else
                    n.param->grad += n.grad;
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        Backward backward;
    };

    Var push(Matrix value, bool rg, Parameter* param, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix{}, rg, param, std::move(backward)});
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace minkocc::ad
