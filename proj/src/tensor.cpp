#include "pcm3/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "pcm3/rng.hpp"

namespace pcm3 {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
thread_local bool g_fault_active = false;
thread_local OpKind g_fault_kind = OpKind::leaf;
std::uint64_t g_next_tape_serial = 1;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void ensure_finite(const std::vector<double>& data, OpKind kind) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op_name(kind) + "'");
        }
    }
}

std::pair<int, int> rows_cols(const Shape& shape) {
    if (shape.size() == 1) return {1, shape[0]};
    if (shape.size() == 2) return {shape[0], shape[1]};
    throw DimensionError("op requires rank-1 or rank-2 tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, OpKind kind) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string("shape mismatch in op '") + op_name(kind) + "'");
    }
}

// C(n x m) += A(n x k) * B(k x m)
void gemm_nn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<std::size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(n x m) += A(n x k) * B(m x k)^T
void gemm_nt(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C(n x m) += A(k x n)^T * B(k x m)
void gemm_tn(const double* a, const double* b, double* c, int n, int k, int m) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<std::size_t>(p) * n;
        const double* brow = b + static_cast<std::size_t>(p) * m;
        for (int i = 0; i < n; ++i) {
            const double av = arow[i];
            double* crow = c + static_cast<std::size_t>(i) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

Tensor unary_pointwise(OpKind kind, const Tensor& a, const std::function<double(double)>& f,
                       // dy/dx expressed in terms of (x, y)
                       const std::function<double(double, double)>& df) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a.data()[i]);
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(kind, a.shape(), std::move(out), inputs,
                             [pa, df](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (std::size_t i = 0; i < self.size(); ++i) {
                                     pa->grad[i] += self.grad[i] * df(pa->data[i], self.data[i]);
                                 }
                             });
}

}  // namespace

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scalar_mul: return "scalar_mul";
        case OpKind::scalar_add: return "scalar_add";
        case OpKind::matmul: return "matmul";
        case OpKind::transpose: return "transpose";
        case OpKind::concat_cols: return "concat_cols";
        case OpKind::concat_rows: return "concat_rows";
        case OpKind::slice_rows: return "slice_rows";
        case OpKind::slice_cols: return "slice_cols";
        case OpKind::reshape: return "reshape";
        case OpKind::sum_all: return "sum_all";
        case OpKind::mean_all: return "mean_all";
        case OpKind::sum_cols: return "sum_cols";
        case OpKind::exp_op: return "exp";
        case OpKind::log_op: return "log";
        case OpKind::sqrt_op: return "sqrt";
        case OpKind::tanh_op: return "tanh";
        case OpKind::sigmoid_op: return "sigmoid";
        case OpKind::relu_op: return "relu";
        case OpKind::l2_normalize: return "l2_normalize";
        case OpKind::log_softmax: return "log_softmax";
        case OpKind::row_dot: return "row_dot";
        case OpKind::add_rowvec: return "add_rowvec";
        case OpKind::add_cols_at: return "add_cols_at";
        case OpKind::stop_gradient: return "stop_gradient";
    }
    return "?";
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("data length does not match shape");
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

int Tensor::rows() const { return rows_cols(impl_->shape).first; }
int Tensor::cols() const { return rows_cols(impl_->shape).second; }

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::scalar_value() const {
    if (size() != 1) throw ContractError("scalar_value on non-scalar tensor");
    return impl_->data[0];
}

double Tensor::at(int r, int c) const {
    auto [nr, nc] = rows_cols(impl_->shape);
    if (r < 0 || r >= nr || c < 0 || c >= nc) throw DimensionError("index out of range");
    return impl_->data[static_cast<std::size_t>(r) * nc + c];
}

// ---- Tape ----

Tape::Tape() : serial_(g_next_tape_serial++) {
    previous_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss");
    }
    auto* li = loss.impl();
    if (!li->requires_grad || li->tape_serial != serial_) {
        throw ContractError("loss is not recorded on this tape");
    }
    if (backward_done_) throw ContractError("backward already run on this tape");
    backward_done_ = true;

    li->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        detail::TensorImpl& node = **it;
        if (!node.backward_fn) continue;
        const bool faulted = g_fault_active && node.kind == g_fault_kind;
        if (faulted) {
            for (double& g : node.grad) g *= 1.5;
        }
        node.backward_fn(node);
        if (faulted) {
            for (double& g : node.grad) g /= 1.5;
        }
    }
}

void backward(const Tensor& loss) {
    if (g_active_tape == nullptr) throw ContractError("backward with no active tape");
    g_active_tape->backward(loss);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_backward_fault(OpKind kind) {
    g_fault_active = true;
    g_fault_kind = kind;
}

void clear_backward_fault() { g_fault_active = false; }

// ---- node factory ----

namespace detail {

Tensor make_node(OpKind kind, Shape shape, std::vector<double> data,
                 std::span<const Tensor> inputs,
                 std::function<void(TensorImpl&)> backward_body) {
    ensure_finite(data, kind);
    bool track = g_grad_enabled && g_active_tape != nullptr;
    if (track) {
        track = std::any_of(inputs.begin(), inputs.end(),
                            [](const Tensor& t) { return t.requires_grad(); });
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->kind = kind;
    if (track) {
        impl->requires_grad = true;
        impl->grad.assign(impl->data.size(), 0.0);
        impl->tape_serial = g_active_tape->serial();
        impl->backward_fn = std::move(backward_body);
        g_active_tape->nodes_.push_back(impl);
    }
    return Tensor(std::move(impl));
}

}  // namespace detail

// ---- ops ----

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, OpKind::add);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    const Tensor inputs[] = {a, b};
    auto pa = a.shared_impl();
    auto pb = b.shared_impl();
    return detail::make_node(OpKind::add, a.shape(), std::move(out), inputs,
                             [pa, pb](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
                                 if (pb->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pb->grad[i] += self.grad[i];
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, OpKind::sub);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    const Tensor inputs[] = {a, b};
    auto pa = a.shared_impl();
    auto pb = b.shared_impl();
    return detail::make_node(OpKind::sub, a.shape(), std::move(out), inputs,
                             [pa, pb](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
                                 if (pb->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pb->grad[i] -= self.grad[i];
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, OpKind::mul);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    const Tensor inputs[] = {a, b};
    auto pa = a.shared_impl();
    auto pb = b.shared_impl();
    return detail::make_node(OpKind::mul, a.shape(), std::move(out), inputs,
                             [pa, pb](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i)
                                         pa->grad[i] += self.grad[i] * pb->data[i];
                                 if (pb->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i)
                                         pb->grad[i] += self.grad[i] * pa->data[i];
                             });
}

Tensor scalar_mul(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::scalar_mul, a.shape(), std::move(out), inputs,
                             [pa, s](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (std::size_t i = 0; i < self.size(); ++i)
                                     pa->grad[i] += self.grad[i] * s;
                             });
}

Tensor scalar_add(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::scalar_add, a.shape(), std::move(out), inputs,
                             [pa](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (std::size_t i = 0; i < self.size(); ++i)
                                     pa->grad[i] += self.grad[i];
                             });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    auto [n, k] = rows_cols(a.shape());
    auto [k2, m] = rows_cols(b.shape());
    if (k != k2) throw DimensionError("matmul inner dimensions disagree");
    std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
    const Tensor inputs[] = {a, b};
    auto pa = a.shared_impl();
    auto pb = b.shared_impl();
    return detail::make_node(OpKind::matmul, {n, m}, std::move(out), inputs,
                             [pa, pb, n, k, m](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     gemm_nt(self.grad.data(), pb->data.data(), pa->grad.data(), n, m, k);
                                 if (pb->requires_grad)
                                     gemm_tn(pa->data.data(), self.grad.data(), pb->grad.data(), k, n, m);
                             });
}

Tensor transpose(const Tensor& a) {
    auto [n, m] = rows_cols(a.shape());
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<std::size_t>(j) * n + i] = a.data()[static_cast<std::size_t>(i) * m + j];
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::transpose, {m, n}, std::move(out), inputs,
                             [pa, n, m](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (int i = 0; i < m; ++i)
                                     for (int j = 0; j < n; ++j)
                                         pa->grad[static_cast<std::size_t>(j) * m + i] +=
                                             self.grad[static_cast<std::size_t>(i) * n + j];
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const int n = rows_cols(parts[0].shape()).first;
    int total = 0;
    for (const Tensor& t : parts) {
        auto [r, c] = rows_cols(t.shape());
        if (r != n) throw DimensionError("concat_cols row counts disagree");
        total += c;
    }
    std::vector<double> out(static_cast<std::size_t>(n) * total);
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    std::vector<int> widths;
    impls.reserve(parts.size());
    int off = 0;
    for (const Tensor& t : parts) {
        const int c = rows_cols(t.shape()).second;
        for (int i = 0; i < n; ++i) {
            std::memcpy(out.data() + static_cast<std::size_t>(i) * total + off,
                        t.data().data() + static_cast<std::size_t>(i) * c,
                        static_cast<std::size_t>(c) * sizeof(double));
        }
        impls.push_back(t.shared_impl());
        widths.push_back(c);
        off += c;
    }
    return detail::make_node(OpKind::concat_cols, {n, total}, std::move(out), parts,
                             [impls, widths, n, total](detail::TensorImpl& self) {
                                 int off2 = 0;
                                 for (std::size_t p = 0; p < impls.size(); ++p) {
                                     const int c = widths[p];
                                     if (impls[p]->requires_grad) {
                                         for (int i = 0; i < n; ++i)
                                             for (int j = 0; j < c; ++j)
                                                 impls[p]->grad[static_cast<std::size_t>(i) * c + j] +=
                                                     self.grad[static_cast<std::size_t>(i) * total + off2 + j];
                                     }
                                     off2 += c;
                                 }
                             });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const int m = rows_cols(parts[0].shape()).second;
    int total = 0;
    for (const Tensor& t : parts) {
        auto [r, c] = rows_cols(t.shape());
        if (c != m) throw DimensionError("concat_rows column counts disagree");
        total += r;
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total) * m);
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    std::vector<int> heights;
    for (const Tensor& t : parts) {
        out.insert(out.end(), t.data().begin(), t.data().end());
        impls.push_back(t.shared_impl());
        heights.push_back(rows_cols(t.shape()).first);
    }
    return detail::make_node(OpKind::concat_rows, {total, m}, std::move(out), parts,
                             [impls, heights, m](detail::TensorImpl& self) {
                                 std::size_t off = 0;
                                 for (std::size_t p = 0; p < impls.size(); ++p) {
                                     const std::size_t len = static_cast<std::size_t>(heights[p]) * m;
                                     if (impls[p]->requires_grad) {
                                         for (std::size_t i = 0; i < len; ++i)
                                             impls[p]->grad[i] += self.grad[off + i];
                                     }
                                     off += len;
                                 }
                             });
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
    auto [n, m] = rows_cols(a.shape());
    if (r0 < 0 || r1 > n || r0 >= r1) throw DimensionError("slice_rows range invalid");
    std::vector<double> out(a.data().begin() + static_cast<std::size_t>(r0) * m,
                            a.data().begin() + static_cast<std::size_t>(r1) * m);
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::slice_rows, {r1 - r0, m}, std::move(out), inputs,
                             [pa, r0, m](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 const std::size_t base = static_cast<std::size_t>(r0) * m;
                                 for (std::size_t i = 0; i < self.size(); ++i)
                                     pa->grad[base + i] += self.grad[i];
                             });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    auto [n, m] = rows_cols(a.shape());
    if (c0 < 0 || c1 > m || c0 >= c1) throw DimensionError("slice_cols range invalid");
    const int w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(n) * w);
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data() + static_cast<std::size_t>(i) * w,
                    a.data().data() + static_cast<std::size_t>(i) * m + c0,
                    static_cast<std::size_t>(w) * sizeof(double));
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::slice_cols, {n, w}, std::move(out), inputs,
                             [pa, c0, m, w, n](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (int i = 0; i < n; ++i)
                                     for (int j = 0; j < w; ++j)
                                         pa->grad[static_cast<std::size_t>(i) * m + c0 + j] +=
                                             self.grad[static_cast<std::size_t>(i) * w + j];
                             });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) throw DimensionError("reshape changes element count");
    std::vector<double> out(a.data().begin(), a.data().end());
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::reshape, std::move(shape), std::move(out), inputs,
                             [pa](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (std::size_t i = 0; i < self.size(); ++i)
                                     pa->grad[i] += self.grad[i];
                             });
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::sum_all, {1}, {s}, inputs,
                             [pa](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 const double g = self.grad[0];
                                 for (double& pg : pa->grad) pg += g;
                             });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::mean_all, {1}, {s * inv}, inputs,
                             [pa, inv](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 const double g = self.grad[0] * inv;
                                 for (double& pg : pa->grad) pg += g;
                             });
}

Tensor sum_cols(const Tensor& a) {
    auto [n, m] = rows_cols(a.shape());
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += row[j];
        out[i] = s;
    }
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::sum_cols, {n, 1}, std::move(out), inputs,
                             [pa, n, m](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (int i = 0; i < n; ++i) {
                                     const double g = self.grad[i];
                                     double* row = pa->grad.data() + static_cast<std::size_t>(i) * m;
                                     for (int j = 0; j < m; ++j) row[j] += g;
                                 }
                             });
}

Tensor exp(const Tensor& a) {
    return unary_pointwise(OpKind::exp_op, a, [](double x) { return std::exp(x); },
                           [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double v : a.data()) {
        if (v <= 0.0) throw NumericError("log of non-positive value");
    }
    return unary_pointwise(OpKind::log_op, a, [](double x) { return std::log(x); },
                           [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    for (double v : a.data()) {
        if (v < 0.0) throw NumericError("sqrt of negative value");
    }
    return unary_pointwise(OpKind::sqrt_op, a, [](double x) { return std::sqrt(x); },
                           [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary_pointwise(OpKind::tanh_op, a, [](double x) { return std::tanh(x); },
                           [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    auto f = [](double x) {
        if (x >= 0.0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    };
    return unary_pointwise(OpKind::sigmoid_op, a, f,
                           [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
    return unary_pointwise(OpKind::relu_op, a, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor l2_normalize_rows(const Tensor& a) {
    auto [n, m] = rows_cols(a.shape());
    std::vector<double> out(a.size());
    std::vector<double> norms(n);
    for (int i = 0; i < n; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * m;
        double ss = 0.0;
        for (int j = 0; j < m; ++j) ss += row[j] * row[j];
        if (ss == 0.0) throw NumericError("l2_normalize of zero-norm vector");
        const double norm = std::sqrt(ss + 1e-12);
        norms[i] = norm;
        for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(i) * m + j] = row[j] / norm;
    }
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::l2_normalize, a.shape(), std::move(out), inputs,
                             [pa, norms, n, m](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (int i = 0; i < n; ++i) {
                                     const std::size_t base = static_cast<std::size_t>(i) * m;
                                     const double* y = self.data.data() + base;
                                     const double* gy = self.grad.data() + base;
                                     double dot = 0.0;
                                     for (int j = 0; j < m; ++j) dot += gy[j] * y[j];
                                     const double inv = 1.0 / norms[i];
                                     for (int j = 0; j < m; ++j)
                                         pa->grad[base + j] += (gy[j] - y[j] * dot) * inv;
                                 }
                             });
}

Tensor log_softmax_rows(const Tensor& a) {
    auto [n, m] = rows_cols(a.shape());
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i) {
        const double* row = a.data().data() + static_cast<std::size_t>(i) * m;
        double mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += std::exp(row[j] - mx);
        const double lse = std::log(s);
        for (int j = 0; j < m; ++j)
            out[static_cast<std::size_t>(i) * m + j] = row[j] - mx - lse;
    }
    const Tensor inputs[] = {a};
    auto pa = a.shared_impl();
    return detail::make_node(OpKind::log_softmax, a.shape(), std::move(out), inputs,
                             [pa, n, m](detail::TensorImpl& self) {
                                 if (!pa->requires_grad) return;
                                 for (int i = 0; i < n; ++i) {
                                     const std::size_t base = static_cast<std::size_t>(i) * m;
                                     double gsum = 0.0;
                                     for (int j = 0; j < m; ++j) gsum += self.grad[base + j];
                                     for (int j = 0; j < m; ++j)
                                         pa->grad[base + j] +=
                                             self.grad[base + j] - std::exp(self.data[base + j]) * gsum;
                                 }
                             });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, OpKind::row_dot);
    auto [n, m] = rows_cols(a.shape());
    std::vector<double> out(n, 0.0);
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * m;
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += a.data()[base + j] * b.data()[base + j];
        out[i] = s;
    }
    const Tensor inputs[] = {a, b};
    auto pa = a.shared_impl();
    auto pb = b.shared_impl();
    return detail::make_node(OpKind::row_dot, {n, 1}, std::move(out), inputs,
                             [pa, pb, n, m](detail::TensorImpl& self) {
                                 for (int i = 0; i < n; ++i) {
                                     const double g = self.grad[i];
                                     const std::size_t base = static_cast<std::size_t>(i) * m;
                                     if (pa->requires_grad)
                                         for (int j = 0; j < m; ++j) pa->grad[base + j] += g * pb->data[base + j];
                                     if (pb->requires_grad)
                                         for (int j = 0; j < m; ++j) pb->grad[base + j] += g * pa->data[base + j];
                                 }
                             });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    auto [n, m] = rows_cols(a.shape());
    auto [vr, vc] = rows_cols(v.shape());
    if (vr != 1 || vc != m) throw DimensionError("add_rowvec vector width disagrees");
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out[static_cast<std::size_t>(i) * m + j] =
                a.data()[static_cast<std::size_t>(i) * m + j] + v.data()[j];
    const Tensor inputs[] = {a, v};
    auto pa = a.shared_impl();
    auto pv = v.shared_impl();
    return detail::make_node(OpKind::add_rowvec, a.shape(), std::move(out), inputs,
                             [pa, pv, n, m](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
                                 if (pv->requires_grad)
                                     for (int i = 0; i < n; ++i)
                                         for (int j = 0; j < m; ++j)
                                             pv->grad[j] += self.grad[static_cast<std::size_t>(i) * m + j];
                             });
}

Tensor add_cols_at(const Tensor& a, const Tensor& v, std::span<const int> col_idx) {
    auto [n, m] = rows_cols(a.shape());
    auto [vr, vc] = rows_cols(v.shape());
    if (vr != 1 || static_cast<std::size_t>(vc) != col_idx.size())
        throw DimensionError("add_cols_at vector/index length disagree");
    for (int c : col_idx) {
        if (c < 0 || c >= m) throw DimensionError("add_cols_at column index out of range");
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int i = 0; i < n; ++i)
        for (std::size_t k = 0; k < col_idx.size(); ++k)
            out[static_cast<std::size_t>(i) * m + col_idx[k]] += v.data()[k];
    std::vector<int> idx(col_idx.begin(), col_idx.end());
    const Tensor inputs[] = {a, v};
    auto pa = a.shared_impl();
    auto pv = v.shared_impl();
    return detail::make_node(OpKind::add_cols_at, a.shape(), std::move(out), inputs,
                             [pa, pv, idx, n, m](detail::TensorImpl& self) {
                                 if (pa->requires_grad)
                                     for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
                                 if (pv->requires_grad)
                                     for (int i = 0; i < n; ++i)
                                         for (std::size_t k = 0; k < idx.size(); ++k)
                                             pv->grad[k] += self.grad[static_cast<std::size_t>(i) * m + idx[k]];
                             });
}

Tensor stop_gradient(const Tensor& a) {
    // Identity forward (bit-identical), never on the tape.
    return Tensor::from_data(a.shape(), std::vector<double>(a.data().begin(), a.data().end()), false);
}

// ---- optimizer ----

void sgd_step(std::span<Tensor> params, SgdState& state) {
    for (Tensor& p : params) {
        if (!p.requires_grad() || p.grad().empty()) {
            throw ContractError("sgd_step on parameter with no gradient buffer");
        }
    }
    for (Tensor& p : params) {
        auto* impl = p.impl();
        auto& v = state.velocity[impl];
        if (v.size() != impl->data.size()) v.assign(impl->data.size(), 0.0);
        for (std::size_t i = 0; i < impl->data.size(); ++i) {
            v[i] = state.momentum * v[i] + impl->grad[i] + state.weight_decay * impl->data[i];
            impl->data[i] -= state.learning_rate * v[i];
        }
        p.zero_grad();
    }
}

// ---- gradient verification ----

double grad_check(const std::function<Tensor()>& build_loss, std::span<Tensor> params,
                  std::uint64_t sample_seed, int max_coords_per_param) {
    for (Tensor& p : params) p.zero_grad();
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = build_loss();
        tape.backward(loss);
    }
    analytic.reserve(params.size());
    for (Tensor& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

    const double h = 1e-5;
    double worst = 0.0;
    auto rng = CounterRng::keyed(sample_seed, "gradcheck");
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        std::vector<std::size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (static_cast<int>(coords.size()) > max_coords_per_param) {
            // partial Fisher-Yates, keep the first max_coords_per_param
            for (int i = 0; i < max_coords_per_param; ++i) {
                const std::size_t j = i + rng.next_below(coords.size() - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(max_coords_per_param);
        }
        for (std::size_t c : coords) {
            const double orig = p.mutable_data()[c];
            p.mutable_data()[c] = orig + h;
            const double lp = build_loss().scalar_value();
            p.mutable_data()[c] = orig - h;
            const double lm = build_loss().scalar_value();
            p.mutable_data()[c] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double rel = std::abs(analytic[pi][c] - numeric) /
                               std::max(1e-8, std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    for (Tensor& p : params) p.zero_grad();
    return worst;
}

}  // namespace pcm3
