#include "rat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "rat/error.hpp"

namespace rat {
namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad;
    }
};

}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

struct TensorAccess {
    static const NodePtr& node(const Tensor& t) {
        if (!t.node_) {
            throw UsageError("operation on an undefined tensor");
        }
        return t.node_;
    }
    static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }
};

namespace {

thread_local bool g_grad_enabled = true;

const NodePtr& node_of(const Tensor& t) { return TensorAccess::node(t); }

// Creates an op result. The backward closure is only kept when a graph is being recorded.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    const bool needs = g_grad_enabled && std::any_of(parents.begin(), parents.end(),
                                                     [](const NodePtr& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return TensorAccess::wrap(std::move(node));
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
    const auto rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const auto da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const auto db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw UsageError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `in` expressed over the axes of `out`; broadcast axes get stride 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> strides(out.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = 0; i < in.size(); ++i) {
        const auto in_axis = in.size() - 1 - i;
        const auto out_axis = out.size() - 1 - i;
        strides[out_axis] = in[in_axis] == 1 ? 0 : stride;
        stride *= in[in_axis];
    }
    return strides;
}

// Odometer over a shape that tracks linear offsets into several strided operands.
class OffsetWalker {
  public:
    OffsetWalker(const Shape& shape, std::vector<std::vector<std::size_t>> strides)
        : shape_(shape), strides_(std::move(strides)), index_(shape.size(), 0), offsets_(strides_.size(), 0) {}

    std::size_t offset(std::size_t operand) const { return offsets_[operand]; }

    void next() {
        for (std::size_t axis = shape_.size(); axis-- > 0;) {
            ++index_[axis];
            for (std::size_t k = 0; k < strides_.size(); ++k) {
                offsets_[k] += strides_[k][axis];
            }
            if (index_[axis] < shape_[axis]) {
                return;
            }
            for (std::size_t k = 0; k < strides_.size(); ++k) {
                offsets_[k] -= strides_[k][axis] * shape_[axis];
            }
            index_[axis] = 0;
        }
    }

  private:
    const Shape& shape_;
    std::vector<std::vector<std::size_t>> strides_;
    std::vector<std::size_t> index_;
    std::vector<std::size_t> offsets_;
};

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
    const auto& na = node_of(a);
    const auto& nb = node_of(b);
    auto apply = [kind](double x, double y) {
        switch (kind) {
            case BinaryKind::Add: return x + y;
            case BinaryKind::Sub: return x - y;
            case BinaryKind::Mul: return x * y;
        }
        return 0.0;
    };
    if (na->shape == nb->shape) {
        std::vector<double> out(na->value.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = apply(na->value[i], nb->value[i]);
        }
        return make_result(na->shape, std::move(out), {na, nb}, [kind](Node& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            const auto& g = self.grad;
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga[i] += kind == BinaryKind::Mul ? g[i] * pb.value[i] : g[i];
                }
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    gb[i] += kind == BinaryKind::Mul ? g[i] * pa.value[i] : (kind == BinaryKind::Sub ? -g[i] : g[i]);
                }
            }
        });
    }
    Shape out_shape = broadcast_shapes(na->shape, nb->shape);
    auto sa = aligned_strides(na->shape, out_shape);
    auto sb = aligned_strides(nb->shape, out_shape);
    std::vector<double> out(numel(out_shape));
    {
        OffsetWalker walk(out_shape, {sa, sb});
        for (std::size_t i = 0; i < out.size(); ++i, walk.next()) {
            out[i] = apply(na->value[walk.offset(0)], nb->value[walk.offset(1)]);
        }
    }
    return make_result(out_shape, std::move(out), {na, nb}, [kind, out_shape, sa, sb](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto* ga = pa.requires_grad ? &pa.ensure_grad() : nullptr;
        auto* gb = pb.requires_grad ? &pb.ensure_grad() : nullptr;
        OffsetWalker walk(out_shape, {sa, sb});
        for (std::size_t i = 0; i < self.grad.size(); ++i, walk.next()) {
            const double g = self.grad[i];
            const auto ia = walk.offset(0);
            const auto ib = walk.offset(1);
            if (ga) {
                (*ga)[ia] += kind == BinaryKind::Mul ? g * pb.value[ib] : g;
            }
            if (gb) {
                (*gb)[ib] += kind == BinaryKind::Mul ? g * pa.value[ia] : (kind == BinaryKind::Sub ? -g : g);
            }
        }
    });
}

// Elementwise unary op given value and derivative functions of the input.
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
    const auto& nx = node_of(x);
    std::vector<double> out(nx->value.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(nx->value[i]);
    }
    return make_result(nx->shape, std::move(out), {nx}, [df](Node& self) {
        auto& px = *self.parents[0];
        auto& gx = px.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += self.grad[i] * df(px.value[i]);
        }
    });
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? "," : "") + std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = rat::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    if (rat::numel(shape) != values.size()) {
        throw UsageError("tensor of shape " + shape_str(shape) + " cannot hold " + std::to_string(values.size()) +
                         " values");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    if (requires_grad) {
        node->ensure_grad();
    }
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_of(*this)->shape; }
std::size_t Tensor::numel() const { return node_of(*this)->value.size(); }
std::span<const double> Tensor::data() const { return node_of(*this)->value; }
std::span<double> Tensor::mutable_data() const { return node_of(*this)->value; }

double Tensor::item() const {
    const auto& n = node_of(*this);
    if (n->value.size() != 1) {
        throw UsageError("item() on a tensor with " + std::to_string(n->value.size()) + " elements");
    }
    return n->value[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }
std::span<const double> Tensor::grad() const { return node_of(*this)->grad; }
std::span<double> Tensor::mutable_grad() const { return node_of(*this)->grad; }

void Tensor::zero_grad() const {
    auto& n = *node_of(*this);
    n.grad.assign(n.value.size(), 0.0);
}

void Tensor::backward() const {
    const auto& root = node_of(*this);
    if (root->value.size() != 1) {
        throw UsageError("backward() needs a scalar loss, got shape " + shape_str(root->shape));
    }
    if (root->backward_done) {
        throw UsageError("backward() called twice on the same graph");
    }
    root->backward_done = true;
    if (!root->requires_grad) {
        return;
    }

    // Iterative post-order DFS yields parents before children.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && !node->grad.empty()) {
            node->backward_fn(*node);
        }
    }
    for (Node* node : order) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->parents.clear();
        }
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul); }

Tensor scale(const Tensor& a, double factor) {
    return unary(a, [factor](double x) { return x * factor; }, [factor](double) { return factor; });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

Tensor relu(const Tensor& x) {
    return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    auto sig = [](double v) {
        if (v >= 0.0) {
            return 1.0 / (1.0 + std::exp(-v));
        }
        const double e = std::exp(v);
        return e / (1.0 + e);
    };
    return unary(x, sig, [sig](double v) {
        const double s = sig(v);
        return s * (1.0 - s);
    });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    const auto& na = node_of(a);
    const auto& nb = node_of(b);
    if (na->shape.size() < 2 || nb->shape.size() < 2) {
        throw UsageError("matmul needs operands of rank >= 2");
    }
    const auto m = na->shape[na->shape.size() - 2];
    const auto p = na->shape.back();
    const auto bp = transpose_b ? nb->shape.back() : nb->shape[nb->shape.size() - 2];
    const auto n = transpose_b ? nb->shape[nb->shape.size() - 2] : nb->shape.back();
    if (p != bp) {
        throw UsageError("matmul inner dimensions differ: " + shape_str(na->shape) + " x " + shape_str(nb->shape) +
                         (transpose_b ? "^T" : ""));
    }
    const Shape batch_a(na->shape.begin(), na->shape.end() - 2);
    const Shape batch_b(nb->shape.begin(), nb->shape.end() - 2);
    Shape batch = broadcast_shapes(batch_a, batch_b);
    auto sa = aligned_strides(batch_a, batch);
    auto sb = aligned_strides(batch_b, batch);
    for (auto& s : sa) {
        s *= m * p;
    }
    for (auto& s : sb) {
        s *= p * n;
    }
    const auto batches = numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    // b element (k, j) lives at k * n + j, or j * p + k when transposed.
    const std::size_t bk = transpose_b ? 1 : n;
    const std::size_t bj = transpose_b ? p : 1;

    std::vector<double> out(batches * m * n, 0.0);
    {
        OffsetWalker walk(batch, {sa, sb});
        for (std::size_t t = 0; t < batches; ++t, walk.next()) {
            const double* A = na->value.data() + walk.offset(0);
            const double* B = nb->value.data() + walk.offset(1);
            double* C = out.data() + t * m * n;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t k = 0; k < p; ++k) {
                    const double aik = A[i * p + k];
                    for (std::size_t j = 0; j < n; ++j) {
                        C[i * n + j] += aik * B[k * bk + j * bj];
                    }
                }
            }
        }
    }
    return make_result(out_shape, std::move(out), {na, nb}, [=](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        auto* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        auto* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        OffsetWalker walk(batch, {sa, sb});
        for (std::size_t t = 0; t < batches; ++t, walk.next()) {
            const double* A = pa.value.data() + walk.offset(0);
            const double* B = pb.value.data() + walk.offset(1);
            const double* G = self.grad.data() + t * m * n;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t k = 0; k < p; ++k) {
                    double acc = 0.0;
                    const double aik = A[i * p + k];
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = G[i * n + j];
                        acc += g * B[k * bk + j * bj];
                        if (gb) {
                            gb[walk.offset(1) + k * bk + j * bj] += aik * g;
                        }
                    }
                    if (ga) {
                        ga[walk.offset(0) + i * p + k] += acc;
                    }
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const auto& nx = node_of(x);
    const auto& nw = node_of(weight);
    if (nw->shape.size() != 2 || nx->shape.empty() || nx->shape.back() != nw->shape[0]) {
        throw UsageError("linear: input " + shape_str(nx->shape) + " does not match weight " + shape_str(nw->shape));
    }
    const auto in = nw->shape[0];
    const auto outd = nw->shape[1];
    const auto rows = nx->value.size() / in;
    NodePtr nb;
    if (bias.defined()) {
        nb = node_of(bias);
        if (nb->shape != Shape{outd}) {
            throw UsageError("linear: bias shape " + shape_str(nb->shape) + " does not match " + std::to_string(outd));
        }
    }
    Shape out_shape = nx->shape;
    out_shape.back() = outd;
    std::vector<double> out(rows * outd, 0.0);
    const double* X = nx->value.data();
    const double* W = nw->value.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* Y = out.data() + r * outd;
        if (nb) {
            std::copy(nb->value.begin(), nb->value.end(), Y);
        }
        for (std::size_t k = 0; k < in; ++k) {
            const double xk = X[r * in + k];
            const double* Wk = W + k * outd;
            for (std::size_t j = 0; j < outd; ++j) {
                Y[j] += xk * Wk[j];
            }
        }
    }
    std::vector<NodePtr> parents{nx, nw};
    if (nb) {
        parents.push_back(nb);
    }
    return make_result(out_shape, std::move(out), std::move(parents), [=](Node& self) {
        auto& px = *self.parents[0];
        auto& pw = *self.parents[1];
        Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        const double* G = self.grad.data();
        if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t k = 0; k < in; ++k) {
                    const double* Wk = pw.value.data() + k * outd;
                    double acc = 0.0;
                    for (std::size_t j = 0; j < outd; ++j) {
                        acc += G[r * outd + j] * Wk[j];
                    }
                    gx[r * in + k] += acc;
                }
            }
        }
        if (pw.requires_grad) {
            auto& gw = pw.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t k = 0; k < in; ++k) {
                    const double xk = px.value[r * in + k];
                    double* GWk = gw.data() + k * outd;
                    for (std::size_t j = 0; j < outd; ++j) {
                        GWk[j] += xk * G[r * outd + j];
                    }
                }
            }
        }
        if (pb && pb->requires_grad) {
            auto& gb = pb->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < outd; ++j) {
                    gb[j] += G[r * outd + j];
                }
            }
        }
    });
}

Tensor softmax_lastdim(const Tensor& x, const Mask* mask) {
    const auto& nx = node_of(x);
    if (nx->shape.empty()) {
        throw UsageError("softmax on a scalar");
    }
    const auto len = nx->shape.back();
    const auto rows = nx->value.size() / len;
    std::vector<double> out(nx->value.size(), 0.0);

    // Per-row mask offsets and the mask stride along the last axis.
    std::vector<std::size_t> mask_row_offset;
    std::size_t mask_step = 0;
    if (mask) {
        if (numel(mask->shape) != mask->data.size()) {
            throw UsageError("mask data does not match its shape");
        }
        if (broadcast_shapes(mask->shape, nx->shape) != nx->shape) {
            throw UsageError("mask " + shape_str(mask->shape) + " does not broadcast to " + shape_str(nx->shape));
        }
        const auto strides = aligned_strides(mask->shape, nx->shape);
        mask_step = strides.back();
        const Shape row_shape(nx->shape.begin(), nx->shape.end() - 1);
        std::vector<std::size_t> row_strides(strides.begin(), strides.end() - 1);
        mask_row_offset.resize(rows);
        OffsetWalker walk(row_shape, {row_strides});
        for (std::size_t r = 0; r < rows; ++r, walk.next()) {
            mask_row_offset[r] = walk.offset(0);
        }
    }
    auto keep = [&](std::size_t r, std::size_t j) {
        return !mask || mask->data[mask_row_offset[r] + j * mask_step] != 0;
    };

    for (std::size_t r = 0; r < rows; ++r) {
        const double* X = nx->value.data() + r * len;
        double* Y = out.data() + r * len;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < len; ++j) {
            if (keep(r, j)) {
                mx = std::max(mx, X[j]);
                any = true;
            }
        }
        if (!any) {
            throw UsageError("softmax row " + std::to_string(r) + " is fully masked");
        }
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
            if (keep(r, j)) {
                Y[j] = std::exp(X[j] - mx);
                total += Y[j];
            }
        }
        for (std::size_t j = 0; j < len; ++j) {
            Y[j] /= total;
        }
    }
    return make_result(nx->shape, out, {nx}, [len, rows, y = out](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* Y = y.data() + r * len;
            const double* G = self.grad.data() + r * len;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                dot += G[j] * Y[j];
            }
            for (std::size_t j = 0; j < len; ++j) {
                gx[r * len + j] += Y[j] * (G[j] - dot);
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto& nx = node_of(x);
    const auto& ng = node_of(gamma);
    const auto& nbeta = node_of(beta);
    if (nx->shape.empty()) {
        throw UsageError("layer_norm on a scalar");
    }
    const auto d = nx->shape.back();
    if (ng->value.size() != d || nbeta->value.size() != d) {
        throw UsageError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
    }
    const auto rows = nx->value.size() / d;
    std::vector<double> xhat(nx->value.size());
    std::vector<double> inv_std(rows);
    std::vector<double> out(nx->value.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* X = nx->value.data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu += X[j];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            var += (X[j] - mu) * (X[j] - mu);
        }
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (X[j] - mu) * inv_std[r];
            out[r * d + j] = ng->value[j] * xhat[r * d + j] + nbeta->value[j];
        }
    }
    return make_result(nx->shape, std::move(out), {nx, ng, nbeta},
                       [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pbeta = *self.parents[2];
                           const double* G = self.grad.data();
                           if (pg.requires_grad || pbeta.requires_grad) {
                               auto& gg = pg.ensure_grad();
                               auto& gb = pbeta.ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t j = 0; j < d; ++j) {
                                       gg[j] += G[r * d + j] * xhat[r * d + j];
                                       gb[j] += G[r * d + j];
                                   }
                               }
                           }
                           if (px.requires_grad) {
                               auto& gx = px.ensure_grad();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   double mean_dxhat = 0.0;
                                   double mean_dxhat_xhat = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dxhat = G[r * d + j] * pg.value[j];
                                       mean_dxhat += dxhat;
                                       mean_dxhat_xhat += dxhat * xhat[r * d + j];
                                   }
                                   mean_dxhat *= inv_d;
                                   mean_dxhat_xhat *= inv_d;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const double dxhat = G[r * d + j] * pg.value[j];
                                       gx[r * d + j] +=
                                           inv_std[r] * (dxhat - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                                   }
                               }
                           }
                       });
}

Tensor reshape(const Tensor& x, Shape shape) {
    const auto& nx = node_of(x);
    if (numel(shape) != nx->value.size()) {
        throw UsageError("cannot reshape " + shape_str(nx->shape) + " to " + shape_str(shape));
    }
    return make_result(std::move(shape), nx->value, {nx}, [](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += self.grad[i];
        }
    });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const auto& nx = node_of(x);
    const auto rank = nx->shape.size();
    if (axes.size() != rank) {
        throw UsageError("permute: expected " + std::to_string(rank) + " axes");
    }
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * nx->shape[i];
    }
    Shape out_shape(rank);
    std::vector<std::size_t> strides(rank);
    std::vector<bool> used(rank, false);
    for (std::size_t i = 0; i < rank; ++i) {
        if (axes[i] >= rank || used[axes[i]]) {
            throw UsageError("permute: axes are not a permutation");
        }
        used[axes[i]] = true;
        out_shape[i] = nx->shape[axes[i]];
        strides[i] = in_strides[axes[i]];
    }
    std::vector<double> out(nx->value.size());
    {
        OffsetWalker walk(out_shape, {strides});
        for (std::size_t i = 0; i < out.size(); ++i, walk.next()) {
            out[i] = nx->value[walk.offset(0)];
        }
    }
    return make_result(out_shape, std::move(out), {nx}, [out_shape, strides](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        OffsetWalker walk(out_shape, {strides});
        for (std::size_t i = 0; i < self.grad.size(); ++i, walk.next()) {
            gx[walk.offset(0)] += self.grad[i];
        }
    });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw UsageError("concat of zero tensors");
    }
    std::vector<NodePtr> nodes;
    std::vector<std::size_t> widths;
    const Shape& first = node_of(parts[0])->shape;
    if (first.empty()) {
        throw UsageError("concat of scalars");
    }
    std::size_t total = 0;
    for (const auto& p : parts) {
        const auto& n = node_of(p);
        if (n->shape.size() != first.size() || !std::equal(first.begin(), first.end() - 1, n->shape.begin())) {
            throw UsageError("concat: leading dimensions differ");
        }
        nodes.push_back(n);
        widths.push_back(n->shape.back());
        total += n->shape.back();
    }
    const auto rows = numel(first) / first.back();
    Shape out_shape = first;
    out_shape.back() = total;
    std::vector<double> out(rows * total);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            std::copy_n(nodes[k]->value.data() + r * widths[k], widths[k], out.data() + r * total + col);
            col += widths[k];
        }
    }
    return make_result(out_shape, std::move(out), nodes, [rows, total, widths](Node& self) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& parent = *self.parents[k];
            if (parent.requires_grad) {
                auto& g = parent.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < widths[k]; ++j) {
                        g[r * widths[k] + j] += self.grad[r * total + col + j];
                    }
                }
            }
            col += widths[k];
        }
    });
}

Tensor sum(const Tensor& x) {
    const auto& nx = node_of(x);
    double total = 0.0;
    for (double v : nx->value) {
        total += v;
    }
    return make_result({}, {total}, {nx}, [](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (auto& g : gx) {
            g += self.grad[0];
        }
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
    const auto& nx = node_of(x);
    if (nx->shape.empty()) {
        throw UsageError("take_rows on a scalar");
    }
    const auto width = nx->shape.back();
    const auto available = nx->value.size() / width;
    std::vector<double> out(rows.size() * width);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= available) {
            throw UsageError("take_rows: row " + std::to_string(rows[i]) + " out of range");
        }
        std::copy_n(nx->value.data() + rows[i] * width, width, out.data() + i * width);
    }
    std::vector<std::size_t> picked(rows.begin(), rows.end());
    return make_result({rows.size(), width}, std::move(out), {nx}, [width, picked](Node& self) {
        auto& gx = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < picked.size(); ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                gx[picked[i] * width + j] += self.grad[i * width + j];
            }
        }
    });
}

Tensor gather_rows(const std::vector<Tensor>& tables, std::span<const RowRef> refs, Shape out_shape) {
    if (tables.empty() || out_shape.empty()) {
        throw UsageError("gather_rows needs tables and an output shape");
    }
    const auto width = out_shape.back();
    std::vector<NodePtr> nodes;
    for (const auto& t : tables) {
        const auto& n = node_of(t);
        if (n->shape.size() != 2 || n->shape[1] != width) {
            throw UsageError("gather_rows: table shape " + shape_str(n->shape) + " has the wrong width");
        }
        nodes.push_back(n);
    }
    if (refs.size() * width != numel(out_shape)) {
        throw UsageError("gather_rows: " + std::to_string(refs.size()) + " rows do not fill " + shape_str(out_shape));
    }
    std::vector<double> out(refs.size() * width);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].table >= nodes.size() || refs[i].row >= nodes[refs[i].table]->shape[0]) {
            throw UsageError("gather_rows: reference out of range");
        }
        std::copy_n(nodes[refs[i].table]->value.data() + refs[i].row * width, width, out.data() + i * width);
    }
    std::vector<RowRef> kept(refs.begin(), refs.end());
    return make_result(std::move(out_shape), std::move(out), nodes, [width, kept](Node& self) {
        for (std::size_t i = 0; i < kept.size(); ++i) {
            auto& table = *self.parents[kept[i].table];
            if (!table.requires_grad) {
                continue;
            }
            auto& g = table.ensure_grad();
            for (std::size_t j = 0; j < width; ++j) {
                g[kept[i].row * width + j] += self.grad[i * width + j];
            }
        }
    });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels) {
    const auto& nz = node_of(logits);
    if (nz->value.size() != labels.size() || labels.empty()) {
        throw UsageError("bce_with_logits: " + std::to_string(nz->value.size()) + " logits vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const auto n = static_cast<double>(labels.size());
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double z = nz->value[i];
        total += std::max(z, 0.0) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
    }
    std::vector<double> y(labels.begin(), labels.end());
    return make_result({}, {total / n}, {nz}, [n, y = std::move(y)](Node& self) {
        auto& pz = *self.parents[0];
        auto& gz = pz.ensure_grad();
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double z = pz.value[i];
            const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            gz[i] += self.grad[0] * (s - y[i]) / n;
        }
    });
}

}  // namespace rat
