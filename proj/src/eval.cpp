#include "pcm3/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "pcm3/augment.hpp"
#include "pcm3/losses.hpp"

namespace pcm3 {

FeatureBank extract_features(Model& model, const LabeledDataset& ds) {
    FeatureBank bank;
    bank.dim = model.config().feature_dim();
    bank.split = ds.split;
    bank.labels = ds.labels;
    bank.features.reserve(ds.size() * static_cast<std::size_t>(bank.dim));
    for (const auto& s : ds.sequences) {
        const auto f = model.inference_feature(s);
        bank.features.insert(bank.features.end(), f.begin(), f.end());
    }
    return bank;
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

int num_classes(const FeatureBank& a, const FeatureBank& b) {
    int c = 0;
    for (int l : a.labels) c = std::max(c, l + 1);
    for (int l : b.labels) c = std::max(c, l + 1);
    return c;
}

ProbeResult score(const std::string& task, const FeatureBank& test,
                  const std::vector<int>& predictions) {
    ProbeResult r;
    r.task = task;
    int classes = 0;
    for (int l : test.labels) classes = std::max(classes, l + 1);
    std::vector<int> correct(static_cast<std::size_t>(classes), 0);
    std::vector<int> total(static_cast<std::size_t>(classes), 0);
    int hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const int label = test.labels[i];
        ++total[static_cast<std::size_t>(label)];
        if (predictions[i] == label) {
            ++hits;
            ++correct[static_cast<std::size_t>(label)];
        }
    }
    r.accuracy = test.size() ? static_cast<double>(hits) / test.size() : 0.0;
    for (int c = 0; c < classes; ++c) {
        r.per_class.push_back(total[static_cast<std::size_t>(c)]
                                  ? static_cast<double>(correct[static_cast<std::size_t>(c)]) /
                                        total[static_cast<std::size_t>(c)]
                                  : 0.0);
    }
    return r;
}

}  // namespace

ProbeResult knn_eval(const FeatureBank& train, const FeatureBank& test, int k) {
    if (train.size() == 0 || test.size() == 0) throw ContractError("knn_eval on empty bank");
    if (train.dim != test.dim) throw DimensionError("feature banks have different widths");
    if (k < 1 || k > static_cast<int>(train.size())) throw ConfigError("invalid k for knn_eval");

    std::vector<int> predictions(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
        // top-k by similarity; ties resolved toward the lowest train index
        std::vector<std::pair<double, std::size_t>> best;  // (similarity, index)
        for (std::size_t j = 0; j < train.size(); ++j) {
            const double sim = cosine(test.row(i), train.row(j));
            if (static_cast<int>(best.size()) < k) {
                best.emplace_back(sim, j);
                std::push_heap(best.begin(), best.end(), std::greater<>{});
            } else if (sim > best.front().first) {
                std::pop_heap(best.begin(), best.end(), std::greater<>{});
                best.back() = {sim, j};
                std::push_heap(best.begin(), best.end(), std::greater<>{});
            }
        }
        std::sort(best.begin(), best.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::map<int, int> votes;
        for (const auto& [sim, j] : best) ++votes[train.labels[j]];
        int winner = train.labels[best[0].second];
        int winner_votes = votes[winner];
        for (const auto& [label, count] : votes) {
            if (count > winner_votes) {
                winner = label;
                winner_votes = count;
            }
        }
        predictions[i] = winner;
    }
    return score("knn", test, predictions);
}

ProbeResult linear_probe(const FeatureBank& train, const FeatureBank& test, int epochs,
                         double lr) {
    if (train.size() == 0 || test.size() == 0) throw ContractError("linear_probe on empty bank");
    const int classes = num_classes(train, test);
    if (classes < 2) throw ContractError("linear_probe needs at least two classes");
    const int n = static_cast<int>(train.size());
    const int d = train.dim;

    const Tensor x = Tensor::from_data({n, d}, train.features);
    std::vector<double> onehot(static_cast<std::size_t>(n) * classes, 0.0);
    for (int i = 0; i < n; ++i) {
        onehot[static_cast<std::size_t>(i) * classes + train.labels[static_cast<std::size_t>(i)]] =
            1.0;
    }
    const Tensor y = Tensor::from_data({n, classes}, std::move(onehot));
    Tensor w = Tensor::zeros({d, classes}, true);
    Tensor b = Tensor::zeros({1, classes}, true);

    SgdState opt;
    opt.learning_rate = lr;
    opt.momentum = 0.0;
    opt.weight_decay = 0.0;
    Tensor params[] = {w, b};
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Tape tape;
        auto logp = log_softmax_rows(add_rowvec(matmul(x, w), b));
        auto loss = scalar_mul(sum_all(mul(y, logp)), -1.0 / n);
        tape.backward(loss);
        sgd_step(params, opt);
    }

    auto predict = [&](const FeatureBank& bank) {
        std::vector<int> out(bank.size());
        for (std::size_t i = 0; i < bank.size(); ++i) {
            const auto row = bank.row(i);
            int arg = 0;
            double top = -1e300;
            for (int c = 0; c < classes; ++c) {
                double logit = b.data()[static_cast<std::size_t>(c)];
                for (int j = 0; j < d; ++j) {
                    logit += row[static_cast<std::size_t>(j)] *
                             w.data()[static_cast<std::size_t>(j) * classes + c];
                }
                if (logit > top) {
                    top = logit;
                    arg = c;
                }
            }
            out[i] = arg;
        }
        return out;
    };
    auto result = score("linear", test, predict(test));
    const auto train_pred = predict(train);
    int hits = 0;
    for (std::size_t i = 0; i < train.size(); ++i) hits += (train_pred[i] == train.labels[i]);
    result.train_accuracy = static_cast<double>(hits) / train.size();
    return result;
}

SkeletonSequence occlude_spatial(const SkeletonSequence& s, const BodyPartition& partition,
                                 double ratio, CounterRng& rng, double* realized_ratio) {
    const int num_parts = partition.num_parts();
    const int k = std::clamp(static_cast<int>(std::lround(ratio * num_parts)), 1, num_parts);
    if (realized_ratio) *realized_ratio = static_cast<double>(k) / num_parts;
    std::vector<int> order(static_cast<std::size_t>(num_parts));
    for (int i = 0; i < num_parts; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(num_parts - i)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    SkeletonSequence out = s;
    for (int i = 0; i < k; ++i) {
        for (int j : partition.parts[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]) {
            for (int t = 0; t < s.frames; ++t) {
                for (int a = 0; a < 3; ++a) out.at(t, j, a) = 0.0;
            }
        }
    }
    return out;
}

SkeletonSequence occlude_temporal(const SkeletonSequence& s, double ratio, CounterRng& rng,
                                  double* realized_ratio) {
    const int block = std::clamp(static_cast<int>(std::lround(ratio * s.frames)), 1, s.frames);
    if (realized_ratio) *realized_ratio = static_cast<double>(block) / s.frames;
    const int start = block == s.frames ? 0 : rng.uniform_int(0, s.frames - block);
    SkeletonSequence out = s;
    for (int t = start; t < start + block; ++t) {
        for (int j = 0; j < s.joints; ++j) {
            for (int a = 0; a < 3; ++a) out.at(t, j, a) = 0.0;
        }
    }
    return out;
}

OcclusionResult occlusion_eval(Model& model, const FeatureBank& clean_train,
                               const LabeledDataset& test, OcclusionKind kind, int trials,
                               std::uint64_t seed) {
    if (trials < 1) throw ConfigError("occlusion_eval needs at least one trial");
    const auto partition = default_partition(model.config().joints);

    OcclusionResult result;
    {
        auto clean_bank = extract_features(model, test);
        result.clean_accuracy = knn_eval(clean_train, clean_bank).accuracy;
    }

    double acc_sum = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        auto trial_rng = CounterRng::keyed(seed, "occlusion-trial",
                                           {static_cast<std::uint64_t>(trial)});
        const double ratio = trial_rng.uniform(0.3, 0.7);
        double realized = 0.0;

        FeatureBank bank;
        bank.dim = model.config().feature_dim();
        bank.split = test.split;
        bank.labels = test.labels;
        for (std::size_t i = 0; i < test.size(); ++i) {
            auto rng = CounterRng::keyed(seed, "occlusion",
                                         {static_cast<std::uint64_t>(trial),
                                          static_cast<std::uint64_t>(i)});
            const auto occluded =
                kind == OcclusionKind::spatial
                    ? occlude_spatial(test.sequences[i], partition, ratio, rng, &realized)
                    : occlude_temporal(test.sequences[i], ratio, rng, &realized);
            const auto f = model.inference_feature(occluded);
            bank.features.insert(bank.features.end(), f.begin(), f.end());
        }
        result.trial_ratios.push_back(realized);
        acc_sum += knn_eval(clean_train, bank).accuracy;
    }
    result.probe.task = kind == OcclusionKind::spatial ? "occlusion-spatial" : "occlusion-temporal";
    result.probe.accuracy = acc_sum / trials;
    result.degradation = result.clean_accuracy - result.probe.accuracy;
    return result;
}

double masked_pred_error_with(
    const std::function<SkeletonSequence(const SkeletonSequence& masked)>& predict,
    const LabeledDataset& test, double ratio, int clips, int trials, std::uint64_t seed) {
    if (test.sequences.empty()) throw ContractError("masked_pred_error on empty dataset");
    const auto partition = default_partition(test.sequences[0].joints);
    NoGradGuard no_grad;
    double sum = 0.0;
    std::size_t count = 0;
    for (int trial = 0; trial < trials; ++trial) {
        for (std::size_t i = 0; i < test.size(); ++i) {
            auto rng = CounterRng::keyed(seed, "maskpred",
                                         {static_cast<std::uint64_t>(trial),
                                          static_cast<std::uint64_t>(i)});
            const auto& x = test.sequences[i];
            const auto spec = make_mask(x.frames, x.joints, partition, ratio, clips,
                                        MaskStrategy::topology, rng);
            const auto pred = predict(apply_mask(x, spec));
            std::vector<MaskSpec> specs = {spec};
            sum += masked_mse(sequence_tensor(x), sequence_tensor(pred), specs).scalar_value();
            ++count;
        }
    }
    return sum / static_cast<double>(count);
}

double masked_pred_error(Model& model, TrainMode mode, const LabeledDataset& test, double ratio,
                         int trials, std::uint64_t seed, bool allow_untrained_decoder) {
    if (mode == TrainMode::contrastive_only && !allow_untrained_decoder) {
        throw CapabilityError(
            "checkpoint was pretrained in contrastive_only mode and has no trained decoder");
    }
    auto predict = [&](const SkeletonSequence& masked) {
        NoGradGuard no_grad;
        const auto x = sequence_tensor(masked);
        const auto feat = model.encode(x, Side::query, Domain::mask, /*prompts_enabled=*/false);
        const auto out = model.decode(feat);
        SkeletonSequence s(masked.frames, masked.joints);
        std::copy(out.data().begin(), out.data().end(), s.coords.begin());
        return s;
    };
    return masked_pred_error_with(predict, test, ratio, std::min(4, model.config().frames),
                                  trials, seed);
}

void append_report(const std::string& path, const nlohmann::json& entry) {
    nlohmann::json report = nlohmann::json::array();
    {
        std::ifstream in(path);
        if (in) {
            try {
                in >> report;
            } catch (const nlohmann::json::exception&) {
                throw FormatError("existing report is not valid JSON: " + path, 0);
            }
            if (!report.is_array()) throw FormatError("existing report is not an array", 0);
        }
    }
    report.push_back(entry);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + path);
    out << report.dump(2) << "\n";
}

std::uint64_t config_hash(const nlohmann::json& config) {
    const std::string s = config.dump();
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace pcm3
