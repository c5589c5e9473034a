#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcm3/model.hpp"
#include "pcm3/skeleton.hpp"
#include "pcm3/trainer.hpp"

namespace pcm3 {

struct FeatureBank {
    int dim = 0;
    std::vector<double> features;  // N x dim, row-major
    std::vector<int> labels;
    std::string split;

    std::size_t size() const { return labels.size(); }
    std::span<const double> row(std::size_t i) const {
        return std::span(features).subspan(i * static_cast<std::size_t>(dim),
                                           static_cast<std::size_t>(dim));
    }
};

struct ProbeResult {
    std::string task;
    double accuracy = 0.0;
    double train_accuracy = 0.0;
    std::vector<double> per_class;
};

// Prompt-free query-encoder features; never mutates the model.
FeatureBank extract_features(Model& model, const LabeledDataset& ds);

// Cosine-similarity k-NN label transfer; ties broken by lowest train index.
ProbeResult knn_eval(const FeatureBank& train, const FeatureBank& test, int k = 1);

// Multinomial logistic regression on frozen features, full-batch GD.
ProbeResult linear_probe(const FeatureBank& train, const FeatureBank& test, int epochs = 200,
                         double lr = 0.5);

enum class OcclusionKind { spatial, temporal };

struct OcclusionResult {
    ProbeResult probe;                 // mean occluded accuracy
    double clean_accuracy = 0.0;
    double degradation = 0.0;          // clean - mean occluded
    std::vector<double> trial_ratios;  // realized per-trial ratios
};

// Per-trial ratio ~ U(0.3, 0.7); spatial zeroes whole body parts, temporal a
// contiguous frame block. Occluded test features are scored by KNN against
// the clean train bank.
OcclusionResult occlusion_eval(Model& model, const FeatureBank& clean_train,
                               const LabeledDataset& test, OcclusionKind kind, int trials,
                               std::uint64_t seed);

SkeletonSequence occlude_spatial(const SkeletonSequence& s, const BodyPartition& partition,
                                 double ratio, CounterRng& rng, double* realized_ratio);
SkeletonSequence occlude_temporal(const SkeletonSequence& s, double ratio, CounterRng& rng,
                                  double* realized_ratio);

// Mean masked reconstruction error over fresh topology masks. Refuses
// checkpoints without a trained decoder unless explicitly overridden.
double masked_pred_error(Model& model, TrainMode mode, const LabeledDataset& test, double ratio,
                         int trials, std::uint64_t seed, bool allow_untrained_decoder = false);

// Same metric with an arbitrary reconstruction function (test oracles).
double masked_pred_error_with(
    const std::function<SkeletonSequence(const SkeletonSequence& masked)>& predict,
    const LabeledDataset& test, double ratio, int clips, int trials, std::uint64_t seed);

// Appends one entry to a JSON-array report file (created if absent).
void append_report(const std::string& path, const nlohmann::json& entry);

std::uint64_t config_hash(const nlohmann::json& config);

}  // namespace pcm3
