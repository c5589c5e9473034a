#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pcm3/skeleton.hpp"
#include "pcm3/tensor.hpp"

namespace pcm3 {

struct ModelConfig {
    int frames = 16;
    int joints = 15;
    int hidden = 32;  // recurrent width per direction
    int layers = 1;
    int embed_dim = 32;   // e, contrastive embedding
    int prompt_dim = 16;  // r, task-prompt width
    int decoder_hidden = 32;
    int queue_capacity = 512;
    double momentum_alpha = 0.99;
    // The encoder consumes motion deviations: each joint's temporal mean is
    // subtracted and the residual rescaled. Keeps the static pose from
    // drowning the movement signal.
    bool center_input = true;
    double input_gain = 10.0;

    int input_size() const { return joints * 3; }
    int feature_dim() const { return 2 * hidden; }  // d, bidirectional concat

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

enum class Side { query, key };
enum class Domain { intra, inter, mask, predict };
enum class Task { cl, mp };

// Fixed-capacity FIFO of past key embeddings (the contrastive negatives).
class MemoryQueue {
public:
    MemoryQueue(int capacity, int dim);

    // Appends rows of a (n x dim) unit-norm matrix; evicts oldest beyond capacity.
    void enqueue(const Tensor& embeddings);
    void enqueue_row(std::span<const double> row);

    int size() const { return count_; }
    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    bool empty() const { return count_ == 0; }

    // Anchors oldest-first as a (size x dim) constant tensor.
    Tensor as_tensor() const;
    std::vector<double> snapshot() const;  // same order, flat

    void assign(std::span<const double> rows_oldest_first, int rows);

private:
    int capacity_;
    int dim_;
    int count_ = 0;
    int start_ = 0;
    std::vector<double> ring_;  // capacity x dim
};

struct PromptSet {
    Tensor intra, inter, mask, predict;  // input-space, length J*3
    Tensor cl, mp;                       // feature-space, length r
    std::vector<int> channels;           // r distinct indices into [0, d)
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }

    // x: (B x T*J*3). Key-side work never joins the gradient tape.
    Tensor encode(const Tensor& x, Side side, Domain domain, bool prompts_enabled);
    // task cl: unit embedding through the side's projector; task mp: prompted
    // feature for the decoder.
    Tensor project(const Tensor& feat, Side side, Task task, bool prompts_enabled);
    // feature-conditioned recurrent decoding back to (B x T*J*3).
    Tensor decode(const Tensor& feat_mp);

    // theta_k <- alpha*theta_k + (1-alpha)*theta_q
    void momentum_update();

    MemoryQueue& queue() { return queue_; }
    const MemoryQueue& queue() const { return queue_; }
    PromptSet& prompts() { return prompts_; }
    const PromptSet& prompts() const { return prompts_; }

    std::vector<Tensor> encoder_q_params() const;
    std::vector<Tensor> projector_q_params() const;
    std::vector<Tensor> decoder_params() const;
    std::vector<std::pair<std::string, Tensor>> named_params() const;  // includes key side
    Tensor find_param(const std::string& name) const;

    // Prompt-free feature of a single sequence through the query encoder.
    std::vector<double> inference_feature(const SkeletonSequence& s);

private:
    struct GruCell {
        Tensor w_r, u_r, b_r, w_z, u_z, b_z, w_n, u_n, b_n;
    };
    struct GruLayer {
        GruCell fw, bw;
    };
    struct Encoder {
        std::vector<GruLayer> layers;
    };
    struct Projector {
        Tensor w1, b1, w2, b2;
    };
    struct Decoder {
        GruCell cell;
        Tensor w_out, b_out;
    };

    Tensor encode_with(const Encoder& enc, const Tensor& x, Domain domain, bool prompts_enabled);
    Tensor gru_step(const GruCell& cell, const Tensor& x_t, const Tensor& h) const;

    ModelConfig cfg_;
    Encoder enc_q_, enc_k_;
    Projector proj_q_, proj_k_;
    Decoder dec_;
    PromptSet prompts_;
    MemoryQueue queue_;
};

Tensor batch_tensor(std::span<const SkeletonSequence> batch);
Tensor sequence_tensor(const SkeletonSequence& s);

// Checkpoint: "PCM3" magic, version, JSON block, named float64 parameter
// blobs, prompt channel indices, queue contents, RNG cursor.
struct RngCursor {
    std::uint64_t seed = 0;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    bool operator==(const RngCursor&) const = default;
};

void save_checkpoint(const Model& model, const std::string& path, const nlohmann::json& extra,
                     const RngCursor& rng);

struct LoadedCheckpoint {
    Model model;
    nlohmann::json extra;
    RngCursor rng;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace pcm3
