#pragma once

#include <functional>
#include <optional>
#include <string>

#include "pcm3/augment.hpp"
#include "pcm3/losses.hpp"
#include "pcm3/model.hpp"
#include "pcm3/skeleton.hpp"

namespace pcm3 {

enum class TrainMode { contrastive_only, masked_only, multi_task, pcm3, pcm3_stopgrad };

std::string mode_name(TrainMode mode);
TrainMode parse_mode(const std::string& name);

struct TrainConfig {
    int epochs = 45;
    double lr = 0.02;
    int lr_drop_epoch = 35;
    double lr_drop_factor = 0.1;
    int batch = 32;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double tau = 0.07;
    double tau_q = 0.1;
    double tau_k = 0.05;
    double lambda_mask = 40.0;
    double lambda_kl = 1.0;
    double mask_ratio = 0.6;
    int mask_clips = 4;
    MaskStrategy mask_strategy = MaskStrategy::topology;
    bool prompts_enabled = true;
    IntraParams intra;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);

    LossOptions loss_options() const {
        return LossOptions{tau, tau_q, tau_k, lambda_mask, lambda_kl};
    }
};

// 0.02 before the drop epoch, 0.002 at and after (paper schedule, scaled).
double lr_at(int epoch, const TrainConfig& cfg);

struct StepRecord {
    int epoch = 0;
    int step = 0;
    LossBreakdown loss;
    double lr = 0.0;
    double wall_ms = 0.0;
    bool warmup = false;
};

class Trainer {
public:
    Trainer(LabeledDataset train_data, const ModelConfig& model_cfg, const TrainConfig& cfg,
            TrainMode mode);

    // One optimization step over the given sample indices.
    StepRecord pretrain_step(std::span<const std::size_t> indices, int epoch, int step_in_epoch);

    // Full schedule; invokes the sink after every step.
    void pretrain(const std::function<void(const StepRecord&)>& on_step = {});

    Model& model() { return model_; }
    const Model& model() const { return model_; }
    TrainMode mode() const { return mode_; }
    const TrainConfig& config() const { return cfg_; }
    int steps_per_epoch() const;

    // Parameters the optimizer owns in the current mode.
    const std::vector<Tensor>& optimized_params() const { return opt_params_; }

    // Checkpoint with prompts disabled for inference (parameters retained).
    void save(const std::string& path) const;

private:
    struct BatchViews;
    BatchViews build_views(std::span<const std::size_t> indices, int epoch) const;

    LabeledDataset data_;
    ModelConfig model_cfg_;
    TrainConfig cfg_;
    TrainMode mode_;
    Model model_;
    SgdState opt_;
    std::vector<Tensor> opt_params_;
    BodyPartition partition_;
    std::uint64_t epochs_done_ = 0;
    std::uint64_t steps_done_ = 0;
};

// Metrics CSV: one row per step.
// epoch,step,info_intra,info_inter,info_mask,info_predict,kl_total,mask_mse,total,lr,wall_ms,warmup
std::string metrics_csv_header();
std::string metrics_csv_row(const StepRecord& rec);

}  // namespace pcm3
