#pragma once

// Dense reverse-mode autodiff over row-major float64 arrays.
//
// A Graph is a tape: every operation appends a node whose inputs already
// exist, so node order is a topological order. backward() walks the tape in
// reverse once and then releases it.

#include <Eigen/Core>
#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "miro/error.hpp"

namespace miro::diff {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class Array {
public:
    Array() = default;

    Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        const std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
        if (n != data_.size()) {
            throw ShapeError("array: shape " + shape_string(shape_) + " holds " + std::to_string(n) +
                             " values but " + std::to_string(data_.size()) + " were given");
        }
    }

    static Array zeros(Shape shape) { return filled(std::move(shape), 0.0); }

    static Array filled(Shape shape, double value) {
        const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
        return Array(std::move(shape), std::vector<double>(n, value));
    }

    static Array scalar(double value) { return Array({}, {value}); }

    static Array vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Array({n}, std::move(values));
    }

    /// Row-major matrix from nested rows.
    static Array matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> data;
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("array: ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Array({r, c}, std::move(data));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }
    bool is_scalar() const noexcept { return data_.size() == 1; }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> mutable_data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double item() const {
        if (!is_scalar()) throw ShapeError("array: item() on shape " + shape_string(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Array&, const Array&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline ConstMap as_matrix(const Array& a) {
    return ConstMap(a.data().data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

inline MutMap as_matrix(Array& a) {
    return MutMap(a.mutable_data().data(), static_cast<Eigen::Index>(a.rows()),
                  static_cast<Eigen::Index>(a.cols()));
}

// GELU in its tanh form, 0.5 x (1 + tanh(k (x + a x^3))), vectorised through
// Eigen's exp. tanh(u) is written as 1 - 2 / (1 + exp(2u)), which saturates
// cleanly to +-1.
inline constexpr double kGeluK = 0.79788456080286535588;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

inline void gelu_forward(std::span<const double> x, std::span<double> out) {
    const Eigen::Map<const Eigen::ArrayXd> xa(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::Map<Eigen::ArrayXd> o(out.data(), static_cast<Eigen::Index>(out.size()));
    const Eigen::ArrayXd th = 1.0 - 2.0 / (1.0 + (2.0 * kGeluK * (xa + kGeluA * xa.cube())).exp());
    o = 0.5 * xa * (1.0 + th);
}

inline void gelu_backward(std::span<const double> x, std::span<const double> g, std::span<double> out) {
    const auto n = static_cast<Eigen::Index>(x.size());
    const Eigen::Map<const Eigen::ArrayXd> xa(x.data(), n);
    const Eigen::Map<const Eigen::ArrayXd> ga(g.data(), n);
    Eigen::Map<Eigen::ArrayXd> o(out.data(), n);
    const Eigen::ArrayXd th = 1.0 - 2.0 / (1.0 + (2.0 * kGeluK * (xa + kGeluA * xa.cube())).exp());
    o = ga * (0.5 * (1.0 + th) + 0.5 * xa * (1.0 - th.square()) * kGeluK * (1.0 + 3.0 * kGeluA * xa.square()));
}

}  // namespace detail

/// Keeps large temporaries on the heap instead of fresh mmap/munmap pairs.
/// Training allocates many same-sized arrays per step; call once at startup.
inline void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
}

enum class Op {
    leaf,
    add,
    sub,
    mul,
    matmul,
    affine,
    gelu,
    sin,
    cos,
    sum,
    mean,
    mse,
    concat,
    pool_mean,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::matmul: return "matmul";
        case Op::affine: return "affine";
        case Op::gelu: return "gelu";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::mse: return "mse";
        case Op::concat: return "concat";
        case Op::pool_mean: return "pool_mean";
    }
    return "?";
}

/// Handle to a node of one Graph.
struct Var {
    std::size_t id = 0;
    friend bool operator==(Var, Var) = default;
};

/// Gradients of a scalar root with respect to every node, indexed by Var.
class Gradients {
public:
    explicit Gradients(std::vector<Array> grads) : grads_(std::move(grads)) {}
    const Array& operator[](Var v) const { return grads_.at(v.id); }
    std::size_t size() const noexcept { return grads_.size(); }

private:
    std::vector<Array> grads_;
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(Graph&&) noexcept = default;

    Var input(Array value) {
        const bool finite = value.all_finite();
        return push(Op::leaf, {}, std::move(value), finite);
    }

    /// Leaf that refers to `value` without copying it; `value` must outlive
    /// the graph.
    Var borrow(const Array& value) {
        nodes_.push_back(Node{Op::leaf, {}, Array(), value.all_finite(), &value});
        return Var{nodes_.size() - 1};
    }

    const Array& value(Var v) const {
        ensure_live("value");
        return node(v).get();
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    bool released() const noexcept { return released_; }
    Op op(Var v) const { return node(v).op; }
    std::span<const std::size_t> inputs(Var v) const { return node(v).inputs; }

    Var add(Var a, Var b) { return elementwise(Op::add, a, b, [](double x, double y) { return x + y; }); }
    Var sub(Var a, Var b) { return elementwise(Op::sub, a, b, [](double x, double y) { return x - y; }); }
    Var mul(Var a, Var b) { return elementwise(Op::mul, a, b, [](double x, double y) { return x * y; }); }

    Var matmul(Var a, Var b) {
        const Array& x = checked(a, "matmul");
        const Array& y = checked(b, "matmul");
        if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
            throw ShapeError("matmul: incompatible shapes " + shape_string(x.shape()) + " and " +
                             shape_string(y.shape()));
        }
        Array out = Array::zeros({x.shape()[0], y.shape()[1]});
        detail::as_matrix(out).noalias() = detail::as_matrix(x) * detail::as_matrix(y);
        return push_result(Op::matmul, {a.id, b.id}, std::move(out));
    }

    /// x[m,k] * w[k,n] + bias[n], bias added to every row.
    Var affine(Var x, Var w, Var bias) {
        const Array& xv = checked(x, "affine");
        const Array& wv = checked(w, "affine");
        const Array& bv = checked(bias, "affine");
        if (xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0] ||
            bv.size() != wv.shape()[1]) {
            throw ShapeError("affine: incompatible shapes " + shape_string(xv.shape()) + ", " +
                             shape_string(wv.shape()) + " and bias " + shape_string(bv.shape()));
        }
        Array out = Array::zeros({xv.shape()[0], wv.shape()[1]});
        auto o = detail::as_matrix(out);
        o.noalias() = detail::as_matrix(xv) * detail::as_matrix(wv);
        const Eigen::Map<const Eigen::RowVectorXd> b(bv.data().data(), static_cast<Eigen::Index>(bv.size()));
        o.rowwise() += b;
        return push_result(Op::affine, {x.id, w.id, bias.id}, std::move(out));
    }

    Var gelu(Var a) {
        const Array& x = checked(a, "gelu");
        Array out = Array::zeros(x.shape());
        detail::gelu_forward(x.data(), out.mutable_data());
        return push_result(Op::gelu, {a.id}, std::move(out));
    }
    Var sin(Var a) { return unary(Op::sin, a, [](double x) { return std::sin(x); }); }
    Var cos(Var a) { return unary(Op::cos, a, [](double x) { return std::cos(x); }); }

    Var sum(Var a) {
        const Array& x = checked(a, "sum");
        double s = 0.0;
        for (double v : x.data()) s += v;
        return push_result(Op::sum, {a.id}, Array::scalar(s));
    }

    Var mean(Var a) {
        const Array& x = checked(a, "mean");
        if (x.empty()) throw ShapeError("mean: empty array");
        double s = 0.0;
        for (double v : x.data()) s += v;
        return push_result(Op::mean, {a.id}, Array::scalar(s / static_cast<double>(x.size())));
    }

    /// Mean of squared differences over all elements.
    Var mse(Var a, Var b) {
        const Array& x = checked(a, "mse");
        const Array& y = checked(b, "mse");
        if (x.shape() != y.shape()) {
            throw ShapeError("mse: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
        }
        if (x.empty()) throw ShapeError("mse: empty arrays");
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double d = x[i] - y[i];
            s += d * d;
        }
        return push_result(Op::mse, {a.id, b.id}, Array::scalar(s / static_cast<double>(x.size())));
    }

    /// Column-wise concatenation of rank-2 arrays sharing a row count.
    Var concat(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("concat: no operands");
        const std::size_t rows = checked(parts[0], "concat").rows();
        std::size_t cols = 0;
        for (Var p : parts) {
            const Array& v = checked(p, "concat");
            if (v.rank() != 2 || v.rows() != rows) {
                throw ShapeError("concat: operand " + shape_string(v.shape()) + " does not have " +
                                 std::to_string(rows) + " rows");
            }
            cols += v.cols();
        }
        Array out = Array::zeros({rows, cols});
        std::size_t offset = 0;
        std::vector<std::size_t> ids;
        for (Var p : parts) {
            const Array& v = node(p).get();
            for (std::size_t r = 0; r < rows; ++r) {
                std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(r * v.cols()), v.cols(),
                            out.mutable_data().begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
            }
            offset += v.cols();
            ids.push_back(p.id);
        }
        return push_result(Op::concat, std::move(ids), std::move(out));
    }
    Var concat(std::initializer_list<Var> parts) { return concat(std::span(parts.begin(), parts.size())); }

    /// Elementwise mean of same-shaped operands. Each element is summed in
    /// ascending value order, so the result does not depend on operand order.
    Var pool_mean(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("pool_mean: no operands");
        const Shape& shape = checked(parts[0], "pool_mean").shape();
        std::vector<const Array*> vals;
        std::vector<std::size_t> ids;
        for (Var p : parts) {
            const Array& v = checked(p, "pool_mean");
            if (v.shape() != shape) {
                throw ShapeError("pool_mean: shape mismatch " + shape_string(shape) + " vs " +
                                 shape_string(v.shape()));
            }
            vals.push_back(&v);
            ids.push_back(p.id);
        }
        const std::size_t k = vals.size();
        const double inv = 1.0 / static_cast<double>(k);
        Array out = Array::zeros(shape);
        std::vector<double> scratch(k);
        for (std::size_t i = 0; i < out.size(); ++i) {
            for (std::size_t t = 0; t < k; ++t) scratch[t] = (*vals[t])[i];
            std::sort(scratch.begin(), scratch.end());
            double s = 0.0;
            for (double v : scratch) s += v;
            out[i] = s * inv;
        }
        return push_result(Op::pool_mean, std::move(ids), std::move(out));
    }

    /// Reverse sweep from a scalar root. Consumes the graph: node values are
    /// released and further use raises GraphError.
    Gradients backward(Var root) {
        ensure_live("backward");
        if (!node(root).get().is_scalar()) {
            throw GraphError("backward: root must be scalar, got shape " + shape_string(node(root).get().shape()));
        }
        std::vector<Array> grads(nodes_.size());
        grads[root.id] = Array::scalar(1.0);
        for (std::size_t idx = root.id + 1; idx-- > 0;) {
            if (grads[idx].empty()) continue;
            propagate(idx, grads);
        }
        for (std::size_t idx = 0; idx < nodes_.size(); ++idx) {
            if (grads[idx].empty()) grads[idx] = Array::zeros(nodes_[idx].get().shape());
        }
        release();
        return Gradients(std::move(grads));
    }

    void release() {
        for (auto& n : nodes_) {
            n.value = Array();
            n.borrowed = nullptr;
        }
        released_ = true;
    }

private:
    struct Node {
        Op op;
        std::vector<std::size_t> inputs;
        Array value;
        bool finite;
        const Array* borrowed = nullptr;

        const Array& get() const { return borrowed ? *borrowed : value; }
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw GraphError("graph: unknown node " + std::to_string(v.id));
        return nodes_[v.id];
    }

    void ensure_live(const char* what) const {
        if (released_) throw GraphError(std::string(what) + ": graph already consumed");
    }

    const Array& checked(Var v, const char* op) const {
        ensure_live(op);
        const Node& n = node(v);
        if (!n.finite) {
            throw NonFiniteError(std::string(op) + ": operand node " + std::to_string(v.id) +
                                 " contains non-finite values");
        }
        return n.get();
    }

    Var push(Op op, std::vector<std::size_t> inputs, Array value, bool finite) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), finite, nullptr});
        return Var{nodes_.size() - 1};
    }

    Var push_result(Op op, std::vector<std::size_t> inputs, Array value) {
        const bool finite = value.all_finite();
        return push(op, std::move(inputs), std::move(value), finite);
    }

    template <class F>
    Var elementwise(Op op, Var a, Var b, F f) {
        const Array& x = checked(a, op_name(op));
        const Array& y = checked(b, op_name(op));
        if (x.shape() == y.shape()) {
            Array out = Array::zeros(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
            return push_result(op, {a.id, b.id}, std::move(out));
        }
        if (x.is_scalar() && x.rank() == 0) {
            const double s = x[0];
            Array out = Array::zeros(y.shape());
            for (std::size_t i = 0; i < y.size(); ++i) out[i] = f(s, y[i]);
            return push_result(op, {a.id, b.id}, std::move(out));
        }
        if (y.is_scalar() && y.rank() == 0) {
            const double s = y[0];
            Array out = Array::zeros(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], s);
            return push_result(op, {a.id, b.id}, std::move(out));
        }
        throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                         shape_string(y.shape()));
    }

    template <class F>
    Var unary(Op op, Var a, F f) {
        const Array& x = checked(a, op_name(op));
        Array out = Array::zeros(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
        return push_result(op, {a.id}, std::move(out));
    }

    static void accumulate(std::vector<Array>& grads, std::size_t id, Array g) {
        if (grads[id].empty()) {
            grads[id] = std::move(g);
            return;
        }
        auto dst = grads[id].mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    // dL/d(operand) for an elementwise op whose operand may be a broadcast scalar.
    static Array reduce_to(const Array& operand, Array g) {
        if (operand.shape() == g.shape()) return g;
        double s = 0.0;
        for (double v : g.data()) s += v;
        return Array(operand.shape(), {s});
    }

    static double scalar_or(const Array& a, std::size_t i) { return a.size() == 1 ? a[0] : a[i]; }

    void propagate(std::size_t idx, std::vector<Array>& grads) {
        const Node& n = nodes_[idx];
        const Array& g = grads[idx];
        switch (n.op) {
            case Op::leaf: break;
            case Op::add:
            case Op::sub: {
                const Array& a = nodes_[n.inputs[0]].get();
                const Array& b = nodes_[n.inputs[1]].get();
                accumulate(grads, n.inputs[0], reduce_to(a, g));
                Array gb = g;
                if (n.op == Op::sub) {
                    for (double& v : gb.mutable_data()) v = -v;
                }
                accumulate(grads, n.inputs[1], reduce_to(b, std::move(gb)));
                break;
            }
            case Op::mul: {
                const Array& a = nodes_[n.inputs[0]].get();
                const Array& b = nodes_[n.inputs[1]].get();
                Array ga = Array::zeros(g.shape());
                Array gb = Array::zeros(g.shape());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] = g[i] * scalar_or(b, i);
                    gb[i] = g[i] * scalar_or(a, i);
                }
                accumulate(grads, n.inputs[0], reduce_to(a, std::move(ga)));
                accumulate(grads, n.inputs[1], reduce_to(b, std::move(gb)));
                break;
            }
            case Op::matmul:
            case Op::affine: {
                const Array& a = nodes_[n.inputs[0]].get();
                const Array& b = nodes_[n.inputs[1]].get();
                const auto gm = detail::as_matrix(g);
                Array ga = Array::zeros(a.shape());
                detail::as_matrix(ga).noalias() = gm * detail::as_matrix(b).transpose();
                Array gb = Array::zeros(b.shape());
                detail::as_matrix(gb).noalias() = detail::as_matrix(a).transpose() * gm;
                accumulate(grads, n.inputs[0], std::move(ga));
                accumulate(grads, n.inputs[1], std::move(gb));
                if (n.op == Op::affine) {
                    const Array& bias = nodes_[n.inputs[2]].get();
                    Array gbias = Array::zeros(bias.shape());
                    const std::size_t cols = g.cols();
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                        for (std::size_t c = 0; c < cols; ++c) gbias[c] += g[r * cols + c];
                    }
                    accumulate(grads, n.inputs[2], std::move(gbias));
                }
                break;
            }
            case Op::gelu: {
                const Array& x = nodes_[n.inputs[0]].get();
                Array gx = Array::zeros(x.shape());
                detail::gelu_backward(x.data(), g.data(), gx.mutable_data());
                accumulate(grads, n.inputs[0], std::move(gx));
                break;
            }
            case Op::sin:
            case Op::cos: {
                const Array& x = nodes_[n.inputs[0]].get();
                Array gx = Array::zeros(x.shape());
                for (std::size_t i = 0; i < x.size(); ++i) {
                    const double v = x[i];
                    const double d = n.op == Op::sin ? std::cos(v) : -std::sin(v);
                    gx[i] = g[i] * d;
                }
                accumulate(grads, n.inputs[0], std::move(gx));
                break;
            }
            case Op::sum:
            case Op::mean: {
                const Array& x = nodes_[n.inputs[0]].get();
                const double scale = n.op == Op::sum ? g[0] : g[0] / static_cast<double>(x.size());
                accumulate(grads, n.inputs[0], Array::filled(x.shape(), scale));
                break;
            }
            case Op::mse: {
                const Array& a = nodes_[n.inputs[0]].get();
                const Array& b = nodes_[n.inputs[1]].get();
                const double scale = 2.0 * g[0] / static_cast<double>(a.size());
                Array ga = Array::zeros(a.shape());
                Array gb = Array::zeros(b.shape());
                for (std::size_t i = 0; i < a.size(); ++i) {
                    ga[i] = scale * (a[i] - b[i]);
                    gb[i] = -ga[i];
                }
                accumulate(grads, n.inputs[0], std::move(ga));
                accumulate(grads, n.inputs[1], std::move(gb));
                break;
            }
            case Op::concat: {
                const std::size_t rows = g.rows();
                const std::size_t cols = g.cols();
                std::size_t offset = 0;
                for (std::size_t in : n.inputs) {
                    const Array& part = nodes_[in].get();
                    Array gp = Array::zeros(part.shape());
                    const std::size_t pc = part.cols();
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] = g[r * cols + offset + c];
                    }
                    offset += pc;
                    accumulate(grads, in, std::move(gp));
                }
                break;
            }
            case Op::pool_mean: {
                const double inv = 1.0 / static_cast<double>(n.inputs.size());
                for (std::size_t in : n.inputs) {
                    Array gp = g;
                    for (double& v : gp.mutable_data()) v *= inv;
                    accumulate(grads, in, std::move(gp));
                }
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    bool released_ = false;
};

/// Adam first/second moments for a fixed list of parameter tensors.
struct AdamState {
    std::vector<Array> first_moment;
    std::vector<Array> second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(std::span<const Array> params) {
        AdamState s;
        for (const auto& p : params) {
            s.first_moment.push_back(Array::zeros(p.shape()));
            s.second_moment.push_back(Array::zeros(p.shape()));
        }
        return s;
    }
};

/// One bias-corrected Adam update, applied in place.
template <class ParamRange>
void adam_step(ParamRange&& params, std::span<const Array> grads, AdamState& state, double lr) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValidationError("adam: learning rate must be positive, got " + std::to_string(lr));
    const std::size_t count = std::size(params);
    if (count != grads.size() || count != state.first_moment.size() || count != state.second_moment.size()) {
        throw ShapeError("adam: " + std::to_string(count) + " params, " + std::to_string(grads.size()) +
                         " grads, " + std::to_string(state.first_moment.size()) + " moment slots");
    }
    std::size_t i = 0;
    for (Array& p : params) {
        if (p.shape() != grads[i].shape() || p.shape() != state.first_moment[i].shape()) {
            throw ShapeError("adam: tensor " + std::to_string(i) + " param " + shape_string(p.shape()) +
                             " vs grad " + shape_string(grads[i].shape()));
        }
        ++i;
    }
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    i = 0;
    for (Array& p : params) {
        auto w = p.mutable_data();
        auto m = state.first_moment[i].mutable_data();
        auto v = state.second_moment[i].mutable_data();
        const auto g = grads[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / c1;
            const double vhat = v[k] / c2;
            w[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
        ++i;
    }
}

}  // namespace miro::diff
