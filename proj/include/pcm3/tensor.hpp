#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcm3/errors.hpp"

namespace pcm3 {

// Dense float64 row-major tensors with taped reverse-mode autodiff.
// Shapes are static per graph; the tape is rebuilt every training step.

using Shape = std::vector<int>;

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    scalar_mul,
    scalar_add,
    matmul,
    transpose,
    concat_cols,
    concat_rows,
    slice_rows,
    slice_cols,
    reshape,
    sum_all,
    mean_all,
    sum_cols,
    exp_op,
    log_op,
    sqrt_op,
    tanh_op,
    sigmoid_op,
    relu_op,
    l2_normalize,
    log_softmax,
    row_dot,
    add_rowvec,
    add_cols_at,
    stop_gradient,
};

const char* op_name(OpKind k);

class Tensor;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized like data iff requires_grad
    bool requires_grad = false;
    OpKind kind = OpKind::leaf;
    std::uint64_t tape_serial = 0;  // 0 = not on any tape
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t size() const { return data.size(); }
};

Tensor make_node(OpKind kind, Shape shape, std::vector<double> data,
                 std::span<const Tensor> inputs,
                 std::function<void(TensorImpl&)> backward_body);

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->data.size(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    // 2D accessors; rank-1 tensors count as single-row.
    int rows() const;
    int cols() const;

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> mutable_grad() { return impl_->grad; }
    void zero_grad();

    double scalar_value() const;
    double at(int r, int c) const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<detail::TensorImpl> shared_impl() const { return impl_; }

private:
    friend class Tape;
    friend Tensor detail::make_node(OpKind, Shape, std::vector<double>,
                                    std::span<const Tensor>,
                                    std::function<void(detail::TensorImpl&)>);
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Records op outputs in creation order (creation order is topological by
// construction); backward walks the record in exact reverse.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // loss must be a scalar recorded on this tape.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t serial() const { return serial_; }

private:
    friend Tensor detail::make_node(OpKind, Shape, std::vector<double>,
                                    std::span<const Tensor>,
                                    std::function<void(detail::TensorImpl&)>);
    std::vector<std::shared_ptr<detail::TensorImpl>> nodes_;
    std::uint64_t serial_;
    Tape* previous_ = nullptr;
    bool backward_done_ = false;
};

// Disables gradient recording in scope; outputs become plain constants.
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

// Test hook: scales the gradient flowing out of one op kind so that
// gradient verification suites can prove they catch a broken rule.
void set_backward_fault(OpKind kind);
void clear_backward_fault();

// ---- forward ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_cols(const Tensor& a);  // N x M -> N x 1, reduction over last axis
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a);  // eps 1e-12 under the square root
Tensor log_softmax_rows(const Tensor& a);   // row max subtracted
Tensor row_dot(const Tensor& a, const Tensor& b);  // N x M, N x M -> N x 1
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // N x M + 1 x M
Tensor add_cols_at(const Tensor& a, const Tensor& v, std::span<const int> col_idx);
Tensor stop_gradient(const Tensor& a);

void backward(const Tensor& loss);

// ---- optimizer ----
struct SgdState {
    double learning_rate = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    // velocity buffers keyed by parameter identity
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> velocity;
};

// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v; grads zeroed.
void sgd_step(std::span<Tensor> params, SgdState& state);

// ---- gradient verification ----
// Rebuilds the loss via `build_loss` and compares analytic grads against
// central finite differences (h = 1e-5) on up to `max_coords_per_param`
// sampled coordinates. Returns max |analytic-numeric| / max(1e-8, |numeric|).
double grad_check(const std::function<Tensor()>& build_loss, std::span<Tensor> params,
                  std::uint64_t sample_seed = 0, int max_coords_per_param = 24);

}  // namespace pcm3
