#pragma once

#include <span>

#include "pcm3/augment.hpp"
#include "pcm3/model.hpp"
#include "pcm3/tensor.hpp"

namespace pcm3 {

struct LossOptions {
    double tau = 0.07;    // InfoNCE temperature
    double tau_q = 0.1;   // distillation student temperature
    double tau_k = 0.05;  // distillation teacher temperature
    double lambda_mask = 40.0;
    double lambda_kl = 1.0;
};

// Which objective terms participate (the pretraining modes gate these).
struct LossTerms {
    bool intra = true;
    bool inter = true;
    bool mask_pair = true;
    bool predict_pair = true;
    bool mse = true;
};

struct LossBreakdown {
    double info_intra = 0.0, info_inter = 0.0, info_mask = 0.0, info_predict = 0.0;
    double kl_intra = 0.0, kl_inter = 0.0, kl_mask = 0.0, kl_predict = 0.0;
    double mask_mse = 0.0;
    double total = 0.0;
    double tau = 0.0, tau_q = 0.0, tau_k = 0.0;
    double lambda_mask = 0.0, lambda_kl = 0.0;

    double info_sum() const { return info_intra + info_inter + info_mask + info_predict; }
    double kl_sum() const { return kl_intra + kl_inter + kl_mask + kl_predict; }
};

// Query-side embeddings live on the tape; key-side embeddings are constants.
struct PositivePairSet {
    Tensor z_intra, z_inter, z_mask, z_predict;  // query side
    Tensor zk_intra, zk_inter;                   // z' and z'_inter
};

// -log exp(zq.zk/tau) / (exp(zq.zk/tau) + sum_i exp(zq.m_i/tau)), batch mean.
Tensor info_nce(const Tensor& z_q, const Tensor& z_k, const MemoryQueue& queue, double tau);

// (1-lambda)*zk1 + lambda*zk2, re-normalized to the unit sphere. Endpoints
// return the corresponding input exactly.
Tensor mixed_key(const Tensor& zk1, const Tensor& zk2, double lambda);

// Cross-entropy between teacher softmax(z_teacher.m/tau_k) and student
// softmax(z_student.m/tau_q) over the queue anchors, batch mean. The teacher
// distribution is computed off the tape.
Tensor relational_kl(const Tensor& z_student, const Tensor& z_teacher, const MemoryQueue& queue,
                     double tau_q, double tau_k);

// Mean over masked (frame, joint) cells of the Euclidean norm of the
// 3-vector residual, then mean over the batch.
Tensor masked_mse(const Tensor& x, const Tensor& pred, std::span<const MaskSpec> specs);

double weighted_total(double info_sum, double kl_sum, double mse, const LossOptions& opts);

std::pair<Tensor, LossBreakdown> total_loss(const PositivePairSet& pairs, const Tensor& x,
                                            const Tensor& pred, std::span<const MaskSpec> specs,
                                            const MemoryQueue& queue, const LossOptions& opts,
                                            const LossTerms& terms = {});

}  // namespace pcm3
