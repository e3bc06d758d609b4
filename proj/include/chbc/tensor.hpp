#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chbc/error.hpp"

// Dense tensors with define-by-run reverse-mode autodiff.
//
// Values are 64-bit floats. Each operation allocates a fresh node holding
// its result, parent links and a backprop closure; calling backward() on a
// scalar output runs a reverse topological sweep that visits every node
// exactly once. Graphs are rebuilt per forward pass and never reused.
//
// Tensors are value-like handles (shared_ptr) and may move between threads;
// a graph under construction is confined to the thread building it. No
// operation mutates its inputs' value buffers.

namespace chbc {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backprop;  // accumulates this->grad into parents
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != numel_of(shape))
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad.assign(n->values.size(), 0.0);
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> vals(numel_of(shape), v);
        return from(std::move(shape), std::move(vals), requires_grad);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }
    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 1.0, requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from(Shape{}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const& { return node_->shape; }
    Shape shape() const&& { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->values.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    // Rvalue overloads copy: the buffers live inside the node a temporary
    // handle would otherwise free at the end of the expression.
    const std::vector<double>& values() const& { return node_->values; }
    std::vector<double> values() const&& { return node_->values; }
    const std::vector<double>& grad() const& { return node_->grad; }
    std::vector<double> grad() const&& { return node_->grad; }

    // Direct buffer access, for parameter initialization and optimizer
    // updates between steps; never used by graph operations.
    std::vector<double>& data() { return node_->values; }
    std::vector<double>& grad_data() { return node_->grad; }

    double value() const {
        if (numel() != 1) throw ContractError("value(): tensor is not a scalar");
        return node_->values[0];
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    // Reverse-mode sweep from a 0-d output. Every reachable node is visited
    // exactly once, in reverse topological order.
    void backward() const {
        if (!node_->shape.empty())
            throw ContractError("backward() requires a 0-d scalar, got " +
                                shape_str(node_->shape));
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<std::pair<TensorNode*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                TensorNode* p = n->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        if (node_->requires_grad) node_->grad[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backprop) (*it)->backprop();
    }

    std::shared_ptr<TensorNode> node() const { return node_; }
    TensorNode* raw() const { return node_.get(); }

  private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

inline Tensor make_node(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    for (const auto& p : parents) {
        n->parents.push_back(p.node());
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) n->grad.assign(n->values.size(), 0.0);
    return Tensor(std::move(n));
}

// Trailing-dimension broadcast: shapes are right-aligned, each pair of dims
// must be equal or one of them 1 (missing leading dims count as 1). The
// channel-axis broadcast of a spatial mask over features is handled by the
// dedicated broadcast_mul below, not here.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;  // 0 where the input broadcasts
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out.resize(r);
    std::vector<std::size_t> da(r, 1), db(r, 1);
    std::copy(a.begin(), a.end(), da.begin() + (r - a.size()));
    std::copy(b.begin(), b.end(), db.begin() + (r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
        if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                                 " and " + shape_str(b) + " do not broadcast");
        plan.out[i] = std::max(da[i], db[i]);
    }
    auto strides_for = [&](const std::vector<std::size_t>& d) {
        std::vector<std::size_t> st(r, 0);
        std::size_t acc = 1;
        for (std::size_t i = r; i-- > 0;) {
            st[i] = (d[i] == 1) ? 0 : acc;
            acc *= d[i];
        }
        return st;
    };
    plan.stride_a = strides_for(da);
    plan.stride_b = strides_for(db);
    return plan;
}

using BinFwd = double (*)(double, double);
using BinBwd = double (*)(double g, double a, double b);  // contribution per input

inline Tensor binary_ew(const Tensor& a, const Tensor& b, const char* op,
                        BinFwd f, BinBwd dfa, BinBwd dfb) {
    if (a.shape() == b.shape()) {  // common case, flat loop
        const auto& av = a.values();
        const auto& bv = b.values();
        std::vector<double> out(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
        Tensor y = make_node(a.shape(), std::move(out), {a, b});
        if (y.requires_grad()) {
            TensorNode* yn = y.raw();
            TensorNode* an = a.raw();
            TensorNode* bn = b.raw();
            y.node()->backprop = [yn, an, bn, dfa, dfb]() {
                for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                    const double g = yn->grad[i];
                    if (an->requires_grad) an->grad[i] += dfa(g, an->values[i], bn->values[i]);
                    if (bn->requires_grad) bn->grad[i] += dfb(g, an->values[i], bn->values[i]);
                }
            };
        }
        return y;
    }
    BroadcastPlan plan = broadcast_plan(a.shape(), b.shape(), op);
    const std::size_t n = numel_of(plan.out);
    const std::size_t r = plan.out.size();
    std::vector<double> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        out[lin] = f(av[ia], bv[ib]);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += plan.stride_a[d];
            ib += plan.stride_b[d];
            if (idx[d] < plan.out[d]) break;
            idx[d] = 0;
            ia -= plan.stride_a[d] * plan.out[d];
            ib -= plan.stride_b[d] * plan.out[d];
        }
    }
    Tensor y = make_node(plan.out, std::move(out), {a, b});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        TensorNode* bn = b.raw();
        y.node()->backprop = [yn, an, bn, plan, dfa, dfb]() {
            const std::size_t r = plan.out.size();
            const std::size_t n = yn->grad.size();
            std::vector<std::size_t> idx(r, 0);
            std::size_t ia = 0, ib = 0;
            for (std::size_t lin = 0; lin < n; ++lin) {
                const double g = yn->grad[lin];
                if (an->requires_grad) an->grad[ia] += dfa(g, an->values[ia], bn->values[ib]);
                if (bn->requires_grad) bn->grad[ib] += dfb(g, an->values[ia], bn->values[ib]);
                for (std::size_t d = r; d-- > 0;) {
                    ++idx[d];
                    ia += plan.stride_a[d];
                    ib += plan.stride_b[d];
                    if (idx[d] < plan.out[d]) break;
                    idx[d] = 0;
                    ia -= plan.stride_a[d] * plan.out[d];
                    ib -= plan.stride_b[d] * plan.out[d];
                }
            }
        };
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise suite
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double g, double, double y) { return g / y; },
        [](double g, double x, double y) { return -g * x / (y * y); });
}

inline Tensor scalar_mul(const Tensor& a, double k) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * k;
    Tensor y = detail::make_node(a.shape(), std::move(out), {a});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        y.node()->backprop = [yn, an, k]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i] * k;
        };
    }
    return y;
}

inline Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c;
    Tensor y = detail::make_node(a.shape(), std::move(out), {a});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        y.node()->backprop = [yn, an]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i) an->grad[i] += yn->grad[i];
        };
    }
    return y;
}

// Natural log with an optional floor: computes ln(max(x, eps)). Probability
// tensors pass eps = 1e-8 so zero entries stay finite; the gradient below
// the floor is 0.
inline Tensor log(const Tensor& a, double eps = 0.0) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::log(std::max(a.values()[i], eps));
    Tensor y = detail::make_node(a.shape(), std::move(out), {a});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        y.node()->backprop = [yn, an, eps]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i) {
                const double x = an->values[i];
                if (x >= eps) an->grad[i] += yn->grad[i] / x;
            }
        };
    }
    return y;
}

inline Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
    Tensor y = detail::make_node(a.shape(), std::move(out), {a});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        y.node()->backprop = [yn, an]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                an->grad[i] += yn->grad[i] * yn->values[i];
        };
    }
    return y;
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.values()[i], 0.0);
    Tensor y = detail::make_node(a.shape(), std::move(out), {a});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        y.node()->backprop = [yn, an]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i)
                if (an->values[i] > 0.0) an->grad[i] += yn->grad[i];
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            if (x == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
        }
    Tensor y = detail::make_node({m, n}, std::move(out), {a, b});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* an = a.raw();
        TensorNode* bn = b.raw();
        y.node()->backprop = [yn, an, bn, m, k, n]() {
            const double* g = yn->grad.data();
            if (an->requires_grad) {  // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += g[i * n + j] * bn->values[p * n + j];
                        an->grad[i * k + p] += acc;
                    }
            }
            if (bn->requires_grad) {  // dB = A^T * G
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double x = an->values[i * k + p];
                        if (x == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            bn->grad[p * n + j] += x * g[i * n + j];
                    }
            }
        };
    }
    return y;
}

// Cross-correlation with zero padding, NCHW. H' = (H + 2p - k)/stride + 1.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t padding = 0) {
    if (x.rank() != 4 || w.rank() != 4)
        throw DimensionError("conv2d: expected 4-d input and kernel, got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                             " != kernel channels " + std::to_string(w.dim(1)));
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t OC = w.dim(0), K = w.dim(2);
    if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: kernel must be square");
    if (K > H + 2 * padding || K > W + 2 * padding)
        throw DimensionError("conv2d: kernel " + std::to_string(K) +
                             " larger than padded input " + shape_str(x.shape()));
    const std::size_t OH = (H + 2 * padding - K) / stride + 1;
    const std::size_t OW = (W + 2 * padding - K) / stride + 1;
    std::vector<double> out(B * OC * OH * OW, 0.0);
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    const auto pad = static_cast<std::ptrdiff_t>(padding);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oc = 0; oc < OC; ++oc)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t kh = 0; kh < K; ++kh) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * stride + kh) - pad;
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * stride + kw) - pad;
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += xv[((b * C + c) * H + ih) * W + iw] *
                                       wv[((oc * C + c) * K + kh) * K + kw];
                            }
                        }
                    out[((b * OC + oc) * OH + oh) * OW + ow] = acc;
                }
    Tensor y = detail::make_node({B, OC, OH, OW}, std::move(out), {x, w});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* wn = w.raw();
        y.node()->backprop = [yn, xn, wn, B, C, H, W, OC, K, OH, OW, stride, pad]() {
            const double* g = yn->grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t oc = 0; oc < OC; ++oc)
                    for (std::size_t oh = 0; oh < OH; ++oh)
                        for (std::size_t ow = 0; ow < OW; ++ow) {
                            const double gv = g[((b * OC + oc) * OH + oh) * OW + ow];
                            if (gv == 0.0) continue;
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t kh = 0; kh < K; ++kh) {
                                    const std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * stride + kh) - pad;
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t kw = 0; kw < K; ++kw) {
                                        const std::ptrdiff_t iw =
                                            static_cast<std::ptrdiff_t>(ow * stride + kw) - pad;
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        const std::size_t xi = ((b * C + c) * H + ih) * W + iw;
                                        const std::size_t wi = ((oc * C + c) * K + kh) * K + kw;
                                        if (xn->requires_grad)
                                            xn->grad[xi] += gv * wn->values[wi];
                                        if (wn->requires_grad)
                                            wn->grad[wi] += gv * xn->values[xi];
                                    }
                                }
                        }
        };
    }
    return y;
}

inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("add_row_bias: " + shape_str(x.shape()) + " + " +
                             shape_str(b.shape()));
    const std::size_t B = x.dim(0), N = x.dim(1);
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) out[i * N + j] += b.values()[j];
    Tensor y = detail::make_node(x.shape(), std::move(out), {x, b});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* bn = b.raw();
        y.node()->backprop = [yn, xn, bn, B, N]() {
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < N; ++j) {
                    const double g = yn->grad[i * N + j];
                    if (xn->requires_grad) xn->grad[i * N + j] += g;
                    if (bn->requires_grad) bn->grad[j] += g;
                }
        };
    }
    return y;
}

inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 4 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("add_channel_bias: " + shape_str(x.shape()) + " + " +
                             shape_str(b.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.values());
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < HW; ++s) out[(i * C + c) * HW + s] += b.values()[c];
    Tensor y = detail::make_node(x.shape(), std::move(out), {x, b});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* bn = b.raw();
        y.node()->backprop = [yn, xn, bn, B, C, HW]() {
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < HW; ++s) {
                        const double g = yn->grad[(i * C + c) * HW + s];
                        if (xn->requires_grad) xn->grad[(i * C + c) * HW + s] += g;
                        if (bn->requires_grad) bn->grad[c] += g;
                    }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// Softmax, reductions, shape ops
// ---------------------------------------------------------------------------

// Row-wise temperature softmax with max-subtraction stabilization.
inline Tensor softmax_t(const Tensor& logits, double temperature) {
    if (temperature <= 0.0)
        throw ParameterError("softmax_t: temperature must be > 0, got " +
                             std::to_string(temperature));
    if (logits.rank() != 2)
        throw DimensionError("softmax_t: expected 2-d logits, got " +
                             shape_str(logits.shape()));
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    std::vector<double> out(B * C);
    for (std::size_t i = 0; i < B; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < C; ++j)
            mx = std::max(mx, logits.values()[i * C + j] / temperature);
        double sum = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
            const double e = std::exp(logits.values()[i * C + j] / temperature - mx);
            out[i * C + j] = e;
            sum += e;
        }
        for (std::size_t j = 0; j < C; ++j) out[i * C + j] /= sum;
    }
    Tensor y = detail::make_node(logits.shape(), std::move(out), {logits});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = logits.raw();
        y.node()->backprop = [yn, xn, B, C, temperature]() {
            for (std::size_t i = 0; i < B; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < C; ++j)
                    dot += yn->grad[i * C + j] * yn->values[i * C + j];
                for (std::size_t j = 0; j < C; ++j)
                    xn->grad[i * C + j] += yn->values[i * C + j] *
                                           (yn->grad[i * C + j] - dot) / temperature;
            }
        };
    }
    return y;
}

inline Tensor sum_all(const Tensor& x) {
    double s = std::accumulate(x.values().begin(), x.values().end(), 0.0);
    Tensor y = detail::make_node({}, {s}, {x});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        y.node()->backprop = [yn, xn]() {
            const double g = yn->grad[0];
            for (auto& gi : xn->grad) gi += g;
        };
    }
    return y;
}

// B x C x H x W -> B x C, summing over the spatial grid.
inline Tensor sum_spatial(const Tensor& x) {
    if (x.rank() != 4)
        throw DimensionError("sum_spatial: expected 4-d input, got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(B * C, 0.0);
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t s = 0; s < HW; ++s) out[bc] += x.values()[bc * HW + s];
    Tensor y = detail::make_node({B, C}, std::move(out), {x});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        y.node()->backprop = [yn, xn, B, C, HW]() {
            for (std::size_t bc = 0; bc < B * C; ++bc)
                for (std::size_t s = 0; s < HW; ++s) xn->grad[bc * HW + s] += yn->grad[bc];
        };
    }
    return y;
}

// Mean over spatial dims per channel; upstream gradient distributes g/(H*W).
inline Tensor avg_pool_spatial(const Tensor& x) {
    if (x.rank() != 4)
        throw DimensionError("avg_pool_spatial: expected 4-d input, got " +
                             shape_str(x.shape()));
    const double hw = static_cast<double>(x.dim(2) * x.dim(3));
    return scalar_mul(sum_spatial(x), 1.0 / hw);
}

// Order-preserving concatenation of B x C_i blocks along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ParameterError("concat_channels: empty input list");
    const std::size_t B = xs[0].dim(0);
    std::size_t total = 0;
    for (const auto& x : xs) {
        if (x.rank() != 2)
            throw DimensionError("concat_channels: expected 2-d inputs, got " +
                                 shape_str(x.shape()));
        if (x.dim(0) != B)
            throw DimensionError("concat_channels: batch mismatch, " + std::to_string(B) +
                                 " vs " + std::to_string(x.dim(0)));
        total += x.dim(1);
    }
    std::vector<double> out(B * total);
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t C = x.dim(1);
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < C; ++j)
                out[i * total + off + j] = x.values()[i * C + j];
        off += C;
    }
    Tensor y = detail::make_node({B, total}, std::move(out), xs);
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        std::vector<TensorNode*> parts;
        for (const auto& x : xs) parts.push_back(x.raw());
        y.node()->backprop = [yn, parts, B, total]() {
            std::size_t off = 0;
            for (TensorNode* p : parts) {
                const std::size_t C = p->shape[1];
                if (p->requires_grad)
                    for (std::size_t i = 0; i < B; ++i)
                        for (std::size_t j = 0; j < C; ++j)
                            p->grad[i * C + j] += yn->grad[i * total + off + j];
                off += C;
            }
        };
    }
    return y;
}

// Row normalization y = x / rowsum(x); rows must have positive sums.
inline Tensor normalize_rows(const Tensor& x) {
    if (x.rank() != 2)
        throw DimensionError("normalize_rows: expected 2-d input, got " +
                             shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1);
    std::vector<double> out(B * C);
    std::vector<double> sums(B, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < C; ++j) sums[i] += x.values()[i * C + j];
        for (std::size_t j = 0; j < C; ++j) out[i * C + j] = x.values()[i * C + j] / sums[i];
    }
    Tensor y = detail::make_node(x.shape(), std::move(out), {x});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        y.node()->backprop = [yn, xn, B, C, sums]() {
            for (std::size_t i = 0; i < B; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < C; ++j)
                    dot += yn->grad[i * C + j] * yn->values[i * C + j];
                for (std::size_t j = 0; j < C; ++j)
                    xn->grad[i * C + j] += (yn->grad[i * C + j] - dot) / sums[i];
            }
        };
    }
    return y;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    Tensor y = detail::make_node(std::move(shape), std::vector<double>(x.values()), {x});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        y.node()->backprop = [yn, xn]() {
            for (std::size_t i = 0; i < yn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// Channel-axis broadcasts
// ---------------------------------------------------------------------------

// Features (B x C x H x W) gated by a spatial mask (B x H x W); the mask
// broadcasts over the channel axis.
inline Tensor broadcast_mul(const Tensor& x, const Tensor& mask) {
    if (x.rank() != 4 || mask.rank() != 3 || x.dim(0) != mask.dim(0) ||
        x.dim(2) != mask.dim(1) || x.dim(3) != mask.dim(2))
        throw DimensionError("broadcast_mul: features " + shape_str(x.shape()) +
                             " vs mask " + shape_str(mask.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < HW; ++s)
                out[(b * C + c) * HW + s] =
                    x.values()[(b * C + c) * HW + s] * mask.values()[b * HW + s];
    Tensor y = detail::make_node(x.shape(), std::move(out), {x, mask});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* mn = mask.raw();
        y.node()->backprop = [yn, xn, mn, B, C, HW]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < HW; ++s) {
                        const std::size_t xi = (b * C + c) * HW + s;
                        const double g = yn->grad[xi];
                        if (xn->requires_grad) xn->grad[xi] += g * mn->values[b * HW + s];
                        if (mn->requires_grad) mn->grad[b * HW + s] += g * xn->values[xi];
                    }
        };
    }
    return y;
}

// Per-(sample, channel) scaling: y(b,c,:,:) = x(b,c,:,:) * s(b,c).
inline Tensor scale_channels(const Tensor& x, const Tensor& s) {
    if (x.rank() != 4 || s.rank() != 2 || x.dim(0) != s.dim(0) || x.dim(1) != s.dim(1))
        throw DimensionError("scale_channels: " + shape_str(x.shape()) + " vs " +
                             shape_str(s.shape()));
    const std::size_t BC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(x.numel());
    for (std::size_t bc = 0; bc < BC; ++bc)
        for (std::size_t p = 0; p < HW; ++p)
            out[bc * HW + p] = x.values()[bc * HW + p] * s.values()[bc];
    Tensor y = detail::make_node(x.shape(), std::move(out), {x, s});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* sn = s.raw();
        y.node()->backprop = [yn, xn, sn, BC, HW]() {
            for (std::size_t bc = 0; bc < BC; ++bc)
                for (std::size_t p = 0; p < HW; ++p) {
                    const double g = yn->grad[bc * HW + p];
                    if (xn->requires_grad) xn->grad[bc * HW + p] += g * sn->values[bc];
                    if (sn->requires_grad) sn->grad[bc] += g * xn->values[bc * HW + p];
                }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// Attention primitives
// ---------------------------------------------------------------------------

// Weighted channel reduction: out(b,m,n) = sum_c w(c, cls[b]) * x(b,c,m,n).
// Weights are stored input-major (C x K); gradients flow to both features
// and the selected weight columns.
inline Tensor cam_project(const Tensor& x, const Tensor& w,
                          const std::vector<std::size_t>& classes) {
    if (x.rank() != 4 || w.rank() != 2 || x.dim(1) != w.dim(0))
        throw DimensionError("cam_project: features " + shape_str(x.shape()) +
                             " vs weights " + shape_str(w.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::size_t K = w.dim(1);
    if (classes.size() != B)
        throw DimensionError("cam_project: " + std::to_string(classes.size()) +
                             " class indices for batch " + std::to_string(B));
    for (std::size_t b = 0; b < B; ++b)
        if (classes[b] >= K)
            throw ParameterError("cam_project: class index " + std::to_string(classes[b]) +
                                 " out of range [0, " + std::to_string(K) + ")");
    std::vector<double> out(B * HW, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double wv = w.values()[c * K + classes[b]];
            if (wv == 0.0) continue;
            for (std::size_t s = 0; s < HW; ++s)
                out[b * HW + s] += wv * x.values()[(b * C + c) * HW + s];
        }
    Tensor y = detail::make_node({B, x.dim(2), x.dim(3)}, std::move(out), {x, w});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        TensorNode* wn = w.raw();
        y.node()->backprop = [yn, xn, wn, classes, B, C, HW, K]() {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t wi = c * K + classes[b];
                    for (std::size_t s = 0; s < HW; ++s) {
                        const double g = yn->grad[b * HW + s];
                        if (xn->requires_grad)
                            xn->grad[(b * C + c) * HW + s] += g * wn->values[wi];
                        if (wn->requires_grad)
                            wn->grad[wi] += g * xn->values[(b * C + c) * HW + s];
                    }
                }
        };
    }
    return y;
}

// Per-sample min-max normalization of spatial maps to [0,1]. Flat maps
// (max == min) normalize to 0.5 everywhere with zero gradient.
inline Tensor minmax_normalize(const Tensor& x) {
    if (x.rank() != 3)
        throw DimensionError("minmax_normalize: expected B x H x W, got " +
                             shape_str(x.shape()));
    const std::size_t B = x.dim(0), HW = x.dim(1) * x.dim(2);
    std::vector<double> out(x.numel());
    std::vector<std::size_t> arg_min(B), arg_max(B);
    std::vector<bool> flat(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t imin = 0, imax = 0;
        for (std::size_t s = 1; s < HW; ++s) {
            if (x.values()[b * HW + s] < x.values()[b * HW + imin]) imin = s;
            if (x.values()[b * HW + s] > x.values()[b * HW + imax]) imax = s;
        }
        arg_min[b] = imin;
        arg_max[b] = imax;
        const double lo = x.values()[b * HW + imin], hi = x.values()[b * HW + imax];
        flat[b] = (hi == lo);
        for (std::size_t s = 0; s < HW; ++s)
            out[b * HW + s] = flat[b] ? 0.5 : (x.values()[b * HW + s] - lo) / (hi - lo);
    }
    Tensor y = detail::make_node(x.shape(), std::move(out), {x});
    if (y.requires_grad()) {
        TensorNode* yn = y.raw();
        TensorNode* xn = x.raw();
        y.node()->backprop = [yn, xn, arg_min, arg_max, flat, B, HW]() {
            for (std::size_t b = 0; b < B; ++b) {
                if (flat[b]) continue;
                const double lo = xn->values[b * HW + arg_min[b]];
                const double hi = xn->values[b * HW + arg_max[b]];
                const double d = hi - lo;
                double gsum = 0.0, gysum = 0.0;
                for (std::size_t s = 0; s < HW; ++s) {
                    const double g = yn->grad[b * HW + s];
                    gsum += g;
                    gysum += g * yn->values[b * HW + s];
                }
                for (std::size_t s = 0; s < HW; ++s)
                    xn->grad[b * HW + s] += yn->grad[b * HW + s] / d;
                xn->grad[b * HW + arg_min[b]] += (gysum - gsum) / d;
                xn->grad[b * HW + arg_max[b]] -= gysum / d;
            }
        };
    }
    return y;
}

// ---------------------------------------------------------------------------
// Seeded initializers
// ---------------------------------------------------------------------------

inline Tensor rand_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                           bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> vals(numel_of(shape));
    for (auto& v : vals) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

inline Tensor rand_normal(Shape shape, double mean, double stddev, std::mt19937_64& rng,
                          bool requires_grad = false) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> vals(numel_of(shape));
    for (auto& v : vals) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(vals), requires_grad);
}

}  // namespace chbc
