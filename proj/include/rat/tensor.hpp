#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rat {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Boolean tensor (1 = keep) broadcastable against a Tensor under numpy rules.
struct Mask {
    Shape shape;
    std::vector<std::uint8_t> data;
};

namespace detail {
struct Node;
}

// Dense row-major float64 tensor with reverse-mode gradients.
//
// Tensor is a shared handle: copies alias the same storage. Operations record a graph
// node whenever gradient recording is enabled and some input requires gradients.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(std::size_t axis) const { return shape().at(axis); }
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data() const;
    double item() const;

    bool requires_grad() const;
    // Empty until a gradient has been accumulated (leaves that require grad start at zero).
    std::span<const double> grad() const;
    std::span<double> mutable_grad() const;
    void zero_grad() const;

    // Accumulates d(this)/d(leaf) into every reachable leaf that requires gradients and
    // releases the recorded graph. Throws UsageError for non-scalars and on a second call.
    void backward() const;

    bool is_same(const Tensor& other) const { return node_ == other.node_; }

  private:
    friend struct TensorAccess;
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

bool grad_enabled();

// Elementwise with numpy broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// a[..., m, p] x b[..., p, n] (or b[..., n, p] when transpose_b) with broadcast batch dims.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Masked entries get exactly zero weight. Throws UsageError if a row is fully masked.
Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat_lastdim(const std::vector<Tensor>& parts);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Row gather: views x as [numel / last, last] and returns the listed rows, shape [rows.size(), last].
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);

struct RowRef {
    std::size_t table = 0;
    std::size_t row = 0;
};

// Builds a tensor of shape out_shape (last dim = table width) by copying table rows.
Tensor gather_rows(const std::vector<Tensor>& tables, std::span<const RowRef> refs, Shape out_shape);

// Mean binary cross-entropy on logits; labels in {0, 1}.
Tensor bce_with_logits(const Tensor& logits, std::span<const double> labels);

}  // namespace rat
