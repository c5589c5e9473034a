#include "pcm3/losses.hpp"

#include <cmath>

namespace pcm3 {

namespace {

Tensor queue_anchors_transposed(const MemoryQueue& queue) {
    if (queue.empty()) throw ContractError("loss requires a non-empty memory queue");
    NoGradGuard no_grad;
    return transpose(queue.as_tensor());  // e x K
}

}  // namespace

Tensor info_nce(const Tensor& z_q, const Tensor& z_k, const MemoryQueue& queue, double tau) {
    if (tau <= 0.0) throw ConfigError("temperature must be positive");
    if (z_q.shape() != z_k.shape()) throw DimensionError("positive pair shapes disagree");
    const Tensor anchors_t = queue_anchors_transposed(queue);
    auto pos = row_dot(z_q, stop_gradient(z_k));
    auto negs = matmul(z_q, anchors_t);
    auto logits = concat_cols(std::vector<Tensor>{pos, negs});
    auto logp = log_softmax_rows(scalar_mul(logits, 1.0 / tau));
    return scalar_mul(mean_all(slice_cols(logp, 0, 1)), -1.0);
}

Tensor mixed_key(const Tensor& zk1, const Tensor& zk2, double lambda) {
    if (zk1.shape() != zk2.shape()) throw DimensionError("mixed_key shapes disagree");
    if (lambda == 0.0) return stop_gradient(zk1);
    if (lambda == 1.0) return stop_gradient(zk2);
    const int n = zk1.rows();
    const int m = zk1.cols();
    std::vector<double> out(zk1.size());
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * m;
        double ss = 0.0;
        for (int j = 0; j < m; ++j) {
            const double v = (1.0 - lambda) * zk1.data()[base + j] + lambda * zk2.data()[base + j];
            out[base + j] = v;
            ss += v * v;
        }
        if (ss < 1e-18) {
            throw NumericError("mixed key collapsed to zero norm (antipodal inputs)");
        }
        const double inv = 1.0 / std::sqrt(ss);
        for (int j = 0; j < m; ++j) out[base + j] *= inv;
    }
    return Tensor::from_data(zk1.shape(), std::move(out));
}

Tensor relational_kl(const Tensor& z_student, const Tensor& z_teacher, const MemoryQueue& queue,
                     double tau_q, double tau_k) {
    if (tau_q <= 0.0 || tau_k <= 0.0) throw ConfigError("temperature must be positive");
    const Tensor anchors_t = queue_anchors_transposed(queue);
    Tensor teacher_probs;
    {
        NoGradGuard no_grad;
        auto t_logits = scalar_mul(matmul(stop_gradient(z_teacher), anchors_t), 1.0 / tau_k);
        teacher_probs = exp(log_softmax_rows(t_logits));
    }
    auto s_logits = scalar_mul(matmul(z_student, anchors_t), 1.0 / tau_q);
    auto logp = log_softmax_rows(s_logits);
    auto ce_rows = sum_cols(mul(teacher_probs, logp));
    return scalar_mul(mean_all(ce_rows), -1.0);
}

Tensor masked_mse(const Tensor& x, const Tensor& pred, std::span<const MaskSpec> specs) {
    if (x.shape() != pred.shape()) throw DimensionError("masked_mse shapes disagree");
    const int batch = x.rows();
    if (static_cast<int>(specs.size()) != batch) {
        throw DimensionError("one MaskSpec per batch row required");
    }
    const int cells = specs[0].frames * specs[0].joints;
    if (x.cols() != cells * 3) throw DimensionError("mask shape does not match sequences");

    std::vector<double> mask_weights(static_cast<std::size_t>(batch) * cells);
    std::vector<double> inv_counts(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        const auto& spec = specs[static_cast<std::size_t>(b)];
        if (spec.frames * spec.joints != cells) throw DimensionError("ragged mask specs");
        const int n_masked = spec.masked_count();
        if (n_masked == 0) throw ContractError("masked_mse requires at least one masked cell");
        inv_counts[static_cast<std::size_t>(b)] = 1.0 / n_masked;
        for (int c = 0; c < cells; ++c) {
            mask_weights[static_cast<std::size_t>(b) * cells + c] =
                spec.visible[static_cast<std::size_t>(c)] ? 0.0 : 1.0;
        }
    }
    const Tensor masked_cells = Tensor::from_data({batch, cells}, std::move(mask_weights));
    const Tensor inv_n = Tensor::from_data({batch, 1}, std::move(inv_counts));

    auto residual = sub(stop_gradient(x), pred);
    auto sq = mul(residual, residual);
    auto per_cell = sum_cols(reshape(sq, {batch * cells, 3}));
    // sqrt backward uses the zero subgradient at exactly zero residual
    auto norms = reshape(sqrt(per_cell), {batch, cells});
    auto per_sample = mul(sum_cols(mul(norms, masked_cells)), inv_n);
    return mean_all(per_sample);
}

double weighted_total(double info_sum, double kl_sum, double mse, const LossOptions& opts) {
    return info_sum + opts.lambda_kl * kl_sum + opts.lambda_mask * mse;
}

std::pair<Tensor, LossBreakdown> total_loss(const PositivePairSet& pairs, const Tensor& x,
                                            const Tensor& pred, std::span<const MaskSpec> specs,
                                            const MemoryQueue& queue, const LossOptions& opts,
                                            const LossTerms& terms) {
    LossBreakdown bd;
    bd.tau = opts.tau;
    bd.tau_q = opts.tau_q;
    bd.tau_k = opts.tau_k;
    bd.lambda_mask = opts.lambda_mask;
    bd.lambda_kl = opts.lambda_kl;

    std::vector<Tensor> info_terms, kl_terms;
    auto add_pair = [&](const Tensor& zq, const Tensor& zk, double& info_out, double& kl_out) {
        auto info = info_nce(zq, zk, queue, opts.tau);
        auto kl = relational_kl(zq, zk, queue, opts.tau_q, opts.tau_k);
        info_out = info.scalar_value();
        kl_out = kl.scalar_value();
        info_terms.push_back(std::move(info));
        kl_terms.push_back(std::move(kl));
    };
    if (terms.intra) add_pair(pairs.z_intra, pairs.zk_intra, bd.info_intra, bd.kl_intra);
    if (terms.inter) add_pair(pairs.z_inter, pairs.zk_inter, bd.info_inter, bd.kl_inter);
    if (terms.mask_pair) add_pair(pairs.z_mask, pairs.zk_intra, bd.info_mask, bd.kl_mask);
    if (terms.predict_pair) add_pair(pairs.z_predict, pairs.zk_intra, bd.info_predict, bd.kl_predict);

    Tensor total;
    auto accumulate = [&](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
    for (const auto& t : info_terms) accumulate(t);
    if (opts.lambda_kl != 0.0 || !kl_terms.empty()) {
        Tensor kl_total;
        for (const auto& t : kl_terms) kl_total = kl_total.defined() ? add(kl_total, t) : t;
        if (kl_total.defined()) accumulate(scalar_mul(kl_total, opts.lambda_kl));
    }
    if (terms.mse) {
        auto mse = masked_mse(x, pred, specs);
        bd.mask_mse = mse.scalar_value();
        accumulate(scalar_mul(mse, opts.lambda_mask));
    }
    if (!total.defined()) throw ContractError("total_loss with every term disabled");
    bd.total = total.scalar_value();
    return {total, bd};
}

}  // namespace pcm3
