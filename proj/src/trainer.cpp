#include "pcm3/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

namespace pcm3 {

std::string mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::contrastive_only: return "contrastive_only";
        case TrainMode::masked_only: return "masked_only";
        case TrainMode::multi_task: return "multi_task";
        case TrainMode::pcm3: return "pcm3";
        case TrainMode::pcm3_stopgrad: return "pcm3_stopgrad";
    }
    return "?";
}

TrainMode parse_mode(const std::string& name) {
    for (TrainMode m : {TrainMode::contrastive_only, TrainMode::masked_only, TrainMode::multi_task,
                        TrainMode::pcm3, TrainMode::pcm3_stopgrad}) {
        if (mode_name(m) == name) return m;
    }
    throw ConfigError("unknown training mode '" + name + "'");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"lr", lr},
            {"lr_drop_epoch", lr_drop_epoch},
            {"lr_drop_factor", lr_drop_factor},
            {"batch", batch},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"tau", tau},
            {"tau_q", tau_q},
            {"tau_k", tau_k},
            {"lambda_mask", lambda_mask},
            {"lambda_kl", lambda_kl},
            {"mask_ratio", mask_ratio},
            {"mask_clips", mask_clips},
            {"mask_strategy", mask_strategy == MaskStrategy::topology ? "topology" : "random"},
            {"prompts_enabled", prompts_enabled},
            {"crop_min", intra.crop_min},
            {"crop_max", intra.crop_max},
            {"shear_max", intra.shear_max},
            {"jitter_prob", intra.jitter_prob},
            {"jitter_amp", intra.jitter_amp},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.lr_drop_epoch = j.at("lr_drop_epoch").get<int>();
    c.lr_drop_factor = j.at("lr_drop_factor").get<double>();
    c.batch = j.at("batch").get<int>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.tau = j.at("tau").get<double>();
    c.tau_q = j.at("tau_q").get<double>();
    c.tau_k = j.at("tau_k").get<double>();
    c.lambda_mask = j.at("lambda_mask").get<double>();
    c.lambda_kl = j.at("lambda_kl").get<double>();
    c.mask_ratio = j.at("mask_ratio").get<double>();
    c.mask_clips = j.at("mask_clips").get<int>();
    const auto strategy = j.at("mask_strategy").get<std::string>();
    if (strategy == "topology") {
        c.mask_strategy = MaskStrategy::topology;
    } else if (strategy == "random") {
        c.mask_strategy = MaskStrategy::random;
    } else {
        throw ConfigError("unknown mask strategy '" + strategy + "'");
    }
    c.prompts_enabled = j.at("prompts_enabled").get<bool>();
    c.intra.crop_min = j.at("crop_min").get<double>();
    c.intra.crop_max = j.at("crop_max").get<double>();
    c.intra.shear_max = j.at("shear_max").get<double>();
    c.intra.jitter_prob = j.at("jitter_prob").get<double>();
    c.intra.jitter_amp = j.at("jitter_amp").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs) {
        throw ConfigError("epoch " + std::to_string(epoch) + " outside schedule");
    }
    return epoch >= cfg.lr_drop_epoch ? cfg.lr * cfg.lr_drop_factor : cfg.lr;
}

namespace {

bool uses_contrastive(TrainMode mode) { return mode != TrainMode::masked_only; }
bool uses_mask_branch(TrainMode mode) { return mode != TrainMode::contrastive_only; }
bool uses_predict_pair(TrainMode mode) {
    return mode == TrainMode::pcm3 || mode == TrainMode::pcm3_stopgrad;
}

double tensor_norm(const Tensor& t) {
    double ss = 0.0;
    for (double v : t.data()) ss += v * v;
    return std::sqrt(ss);
}

}  // namespace

Trainer::Trainer(LabeledDataset train_data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                 TrainMode mode)
    : data_(std::move(train_data)),
      model_cfg_(model_cfg),
      cfg_(cfg),
      mode_(mode),
      model_(model_cfg, cfg.seed),
      partition_(default_partition(model_cfg.joints)) {
    if (data_.sequences.empty()) throw ConfigError("training dataset is empty");
    if (cfg_.batch < 2 && uses_contrastive(mode_)) {
        throw ConfigError("contrastive modes need batch >= 2 for inter mixing");
    }
    if (static_cast<int>(data_.size()) < cfg_.batch) {
        throw ConfigError("dataset smaller than one batch");
    }
    opt_.momentum = cfg_.momentum;
    opt_.weight_decay = cfg_.weight_decay;
    opt_.learning_rate = cfg_.lr;

    // Key-side parameters are excluded structurally; prompts join only when
    // their branch exists in this mode.
    for (const auto& t : model_.encoder_q_params()) opt_params_.push_back(t);
    if (uses_contrastive(mode_)) {
        for (const auto& t : model_.projector_q_params()) opt_params_.push_back(t);
    }
    if (uses_mask_branch(mode_)) {
        for (const auto& t : model_.decoder_params()) opt_params_.push_back(t);
    }
    if (cfg_.prompts_enabled) {
        auto& p = model_.prompts();
        if (uses_contrastive(mode_)) {
            opt_params_.push_back(p.intra);
            opt_params_.push_back(p.inter);
            opt_params_.push_back(p.cl);
        }
        if (uses_mask_branch(mode_)) {
            opt_params_.push_back(p.mask);
            opt_params_.push_back(p.mp);
        }
        if (uses_predict_pair(mode_)) opt_params_.push_back(p.predict);
    }
}

int Trainer::steps_per_epoch() const {
    return static_cast<int>(data_.size()) / cfg_.batch;  // incomplete tail batch dropped
}

struct Trainer::BatchViews {
    std::vector<SkeletonSequence> original;
    std::vector<SkeletonSequence> intra;     // s_intra, query view
    std::vector<SkeletonSequence> intra_key; // s', key view
    std::vector<SkeletonSequence> inter;     // mixed views
    std::vector<double> inter_lambda;
    std::vector<int> inter_partner;          // batch position of s2
    std::vector<SkeletonSequence> masked;
    std::vector<MaskSpec> specs;
};

Trainer::BatchViews Trainer::build_views(std::span<const std::size_t> indices, int epoch) const {
    BatchViews v;
    const int b = static_cast<int>(indices.size());
    v.original.reserve(indices.size());
    for (std::size_t idx : indices) v.original.push_back(data_.sequences[idx]);

    if (uses_contrastive(mode_)) {
        v.intra.reserve(indices.size());
        v.intra_key.reserve(indices.size());
        for (std::size_t pos = 0; pos < indices.size(); ++pos) {
            const auto idx = static_cast<std::uint64_t>(indices[pos]);
            auto r1 = CounterRng::keyed(cfg_.seed, "view-q", {static_cast<std::uint64_t>(epoch), idx});
            auto r2 = CounterRng::keyed(cfg_.seed, "view-k", {static_cast<std::uint64_t>(epoch), idx});
            v.intra.push_back(intra_transform(v.original[pos], cfg_.intra, r1));
            v.intra_key.push_back(intra_transform(v.original[pos], cfg_.intra, r2));
        }
        for (std::size_t pos = 0; pos < indices.size(); ++pos) {
            const auto idx = static_cast<std::uint64_t>(indices[pos]);
            auto rng = CounterRng::keyed(cfg_.seed, "mix", {static_cast<std::uint64_t>(epoch), idx});
            int partner = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(b - 1)));
            if (partner >= static_cast<int>(pos)) ++partner;
            const int kind = rng.uniform_int(0, 2);
            MixResult mr;
            if (kind == 0) {
                mr = mixup(v.intra[pos], v.intra[static_cast<std::size_t>(partner)],
                           rng.next_double());
            } else if (kind == 1) {
                mr = cutmix(v.intra[pos], v.intra[static_cast<std::size_t>(partner)], rng,
                            rng.uniform(0.2, 0.8));
            } else {
                mr = resizemix(v.intra[pos], v.intra[static_cast<std::size_t>(partner)], rng,
                               rng.uniform(0.2, 0.8));
            }
            v.inter.push_back(std::move(mr.mixed));
            v.inter_lambda.push_back(mr.lambda);
            v.inter_partner.push_back(partner);
        }
    }
    if (uses_mask_branch(mode_)) {
        for (std::size_t pos = 0; pos < indices.size(); ++pos) {
            const auto idx = static_cast<std::uint64_t>(indices[pos]);
            auto rng = CounterRng::keyed(cfg_.seed, "mask", {static_cast<std::uint64_t>(epoch), idx});
            // the original skeleton is masked, not an augmented view
            auto spec = make_mask(model_cfg_.frames, model_cfg_.joints, partition_,
                                  cfg_.mask_ratio, cfg_.mask_clips, cfg_.mask_strategy, rng);
            v.masked.push_back(apply_mask(v.original[pos], spec));
            v.specs.push_back(std::move(spec));
        }
    }
    return v;
}

StepRecord Trainer::pretrain_step(std::span<const std::size_t> indices, int epoch,
                                  int step_in_epoch) {
    if (indices.empty()) throw ContractError("pretrain_step on empty batch");
    const auto t0 = std::chrono::steady_clock::now();
    const bool prompts = cfg_.prompts_enabled;
    const int b = static_cast<int>(indices.size());

    const auto views = build_views(indices, epoch);
    auto& queue = model_.queue();
    const bool warmup = uses_contrastive(mode_) && queue.size() < queue.capacity();

    std::vector<std::pair<std::string, double>> branch_norms;
    StepRecord rec;
    rec.epoch = epoch;
    rec.step = step_in_epoch;
    rec.lr = lr_at(epoch, cfg_);
    rec.warmup = warmup;

    try {
        Tensor zk_prime, zk_inter;
        bool enqueued_early = false;
        if (uses_contrastive(mode_)) {
            // key side first: an empty queue is seeded from this batch's keys
            const auto x_prime = batch_tensor(views.intra_key);
            const auto feat_k = model_.encode(x_prime, Side::key, Domain::intra, prompts);
            zk_prime = model_.project(feat_k, Side::key, Task::cl, prompts);
            branch_norms.emplace_back("zk_prime", tensor_norm(zk_prime));

            const auto x_intra = batch_tensor(views.intra);
            const auto feat_k1 = model_.encode(x_intra, Side::key, Domain::intra, prompts);
            const auto zk1 = model_.project(feat_k1, Side::key, Task::cl, prompts);
            std::vector<Tensor> mixed_rows;
            mixed_rows.reserve(static_cast<std::size_t>(b));
            {
                NoGradGuard no_grad;
                for (int i = 0; i < b; ++i) {
                    const auto a = slice_rows(zk1, i, i + 1);
                    const auto c = slice_rows(zk1, views.inter_partner[static_cast<std::size_t>(i)],
                                              views.inter_partner[static_cast<std::size_t>(i)] + 1);
                    mixed_rows.push_back(
                        mixed_key(a, c, views.inter_lambda[static_cast<std::size_t>(i)]));
                }
                zk_inter = concat_rows(mixed_rows);
            }

            if (queue.empty()) {
                queue.enqueue(zk_prime);
                enqueued_early = true;
            }
        }

        Tape tape;
        PositivePairSet pairs;
        LossTerms terms;
        terms.intra = terms.inter = uses_contrastive(mode_);
        terms.mask_pair = terms.predict_pair = uses_predict_pair(mode_);
        terms.mse = uses_mask_branch(mode_);

        Tensor x_batch, s_predict;
        if (uses_mask_branch(mode_)) {
            x_batch = batch_tensor(views.original);
            const auto x_mask = batch_tensor(views.masked);
            const auto feat_mask = model_.encode(x_mask, Side::query, Domain::mask, prompts);
            branch_norms.emplace_back("feat_mask", tensor_norm(feat_mask));
            const auto feat_mp = model_.project(feat_mask, Side::query, Task::mp, prompts);
            s_predict = model_.decode(feat_mp);
            branch_norms.emplace_back("s_predict", tensor_norm(s_predict));
            if (uses_predict_pair(mode_)) {
                pairs.z_mask = model_.project(feat_mask, Side::query, Task::cl, prompts);
                const Tensor predict_in =
                    mode_ == TrainMode::pcm3_stopgrad ? stop_gradient(s_predict) : s_predict;
                const auto feat_pred =
                    model_.encode(predict_in, Side::query, Domain::predict, prompts);
                pairs.z_predict = model_.project(feat_pred, Side::query, Task::cl, prompts);
            }
        }
        if (uses_contrastive(mode_)) {
            const auto x_intra = batch_tensor(views.intra);
            const auto feat_intra = model_.encode(x_intra, Side::query, Domain::intra, prompts);
            pairs.z_intra = model_.project(feat_intra, Side::query, Task::cl, prompts);
            branch_norms.emplace_back("z_intra", tensor_norm(pairs.z_intra));

            const auto x_inter = batch_tensor(views.inter);
            const auto feat_inter = model_.encode(x_inter, Side::query, Domain::inter, prompts);
            pairs.z_inter = model_.project(feat_inter, Side::query, Task::cl, prompts);
            pairs.zk_intra = zk_prime;
            pairs.zk_inter = zk_inter;
        }

        Tensor total;
        if (uses_contrastive(mode_)) {
            auto [t, bd] = total_loss(pairs, x_batch, s_predict, views.specs, queue,
                                      cfg_.loss_options(), terms);
            total = t;
            rec.loss = bd;
        } else {
            auto mse = masked_mse(x_batch, s_predict, views.specs);
            rec.loss.mask_mse = mse.scalar_value();
            rec.loss.lambda_mask = cfg_.lambda_mask;
            rec.loss.lambda_kl = cfg_.lambda_kl;
            total = scalar_mul(mse, cfg_.lambda_mask);
            rec.loss.total = total.scalar_value();
        }
        if (!std::isfinite(rec.loss.total)) throw NumericError("non-finite total loss");

        tape.backward(total);
        opt_.learning_rate = rec.lr;
        sgd_step(opt_params_, opt_);

        if (uses_contrastive(mode_)) {
            model_.momentum_update();
            if (!enqueued_early) queue.enqueue(zk_prime);
        }
    } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << e.what() << "; branch norms:";
        for (const auto& [name, norm] : branch_norms) msg << ' ' << name << '=' << norm;
        throw NumericError(msg.str());
    }

    ++steps_done_;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return rec;
}

void Trainer::pretrain(const std::function<void(const StepRecord&)>& on_step) {
    const int n = static_cast<int>(data_.size());
    const int steps = steps_per_epoch();
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        std::vector<std::size_t> order(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
        auto rng = CounterRng::keyed(cfg_.seed, "shuffle", {static_cast<std::uint64_t>(epoch)});
        for (int i = 0; i < n - 1; ++i) {
            const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - i)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        for (int s = 0; s < steps; ++s) {
            const auto rec = pretrain_step(
                std::span(order).subspan(static_cast<std::size_t>(s) * cfg_.batch,
                                         static_cast<std::size_t>(cfg_.batch)),
                epoch, s);
            if (on_step) on_step(rec);
        }
        ++epochs_done_;
    }
}

void Trainer::save(const std::string& path) const {
    nlohmann::json extra = {{"mode", mode_name(mode_)},
                            {"prompts_enabled", false},  // prompts dropped for inference
                            {"train", cfg_.to_json()}};
    save_checkpoint(model_, path, extra, RngCursor{cfg_.seed, epochs_done_, steps_done_});
}

std::string metrics_csv_header() {
    return "epoch,step,info_intra,info_inter,info_mask,info_predict,kl_total,mask_mse,total,lr,"
           "wall_ms,warmup";
}

std::string metrics_csv_row(const StepRecord& rec) {
    std::ostringstream out;
    out.precision(17);
    out << rec.epoch << ',' << rec.step << ',' << rec.loss.info_intra << ',' << rec.loss.info_inter
        << ',' << rec.loss.info_mask << ',' << rec.loss.info_predict << ',' << rec.loss.kl_sum()
        << ',' << rec.loss.mask_mse << ',' << rec.loss.total << ',' << rec.lr << ',' << rec.wall_ms
        << ',' << (rec.warmup ? 1 : 0);
    return out.str();
}

}  // namespace pcm3
