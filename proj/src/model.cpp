#include "pcm3/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "pcm3/rng.hpp"

namespace pcm3 {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'M', '3'};
constexpr std::uint32_t kVersion = 1;

Tensor init_matrix(int rows, int cols, int fan_in, CounterRng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data({rows, cols}, std::move(data), true);
}

Tensor clone_param(const Tensor& t) {
    return Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
                             true);
}

void ema_into(Tensor& key, const Tensor& query, double alpha) {
    auto kd = key.mutable_data();
    auto qd = query.data();
    for (std::size_t i = 0; i < kd.size(); ++i) kd[i] = alpha * kd[i] + (1.0 - alpha) * qd[i];
}

}  // namespace

nlohmann::json ModelConfig::to_json() const {
    return {{"frames", frames},
            {"joints", joints},
            {"hidden", hidden},
            {"layers", layers},
            {"embed_dim", embed_dim},
            {"prompt_dim", prompt_dim},
            {"decoder_hidden", decoder_hidden},
            {"queue_capacity", queue_capacity},
            {"momentum_alpha", momentum_alpha},
            {"center_input", center_input},
            {"input_gain", input_gain}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.frames = j.at("frames").get<int>();
    c.joints = j.at("joints").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.layers = j.at("layers").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.prompt_dim = j.at("prompt_dim").get<int>();
    c.decoder_hidden = j.at("decoder_hidden").get<int>();
    c.queue_capacity = j.at("queue_capacity").get<int>();
    c.momentum_alpha = j.at("momentum_alpha").get<double>();
    c.center_input = j.at("center_input").get<bool>();
    c.input_gain = j.at("input_gain").get<double>();
    return c;
}

// ---- MemoryQueue ----

MemoryQueue::MemoryQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
    if (capacity < 1 || dim < 1) throw ConfigError("queue capacity and dim must be positive");
    ring_.assign(static_cast<std::size_t>(capacity) * dim, 0.0);
}

void MemoryQueue::enqueue_row(std::span<const double> row) {
    if (static_cast<int>(row.size()) != dim_) throw DimensionError("queue row width mismatch");
    double ss = 0.0;
    for (double v : row) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
        throw ContractError("enqueue of non-unit embedding");
    }
    int slot;
    if (count_ < capacity_) {
        slot = (start_ + count_) % capacity_;
        ++count_;
    } else {
        slot = start_;  // overwrite oldest
        start_ = (start_ + 1) % capacity_;
    }
    std::copy(row.begin(), row.end(), ring_.begin() + static_cast<std::size_t>(slot) * dim_);
}

void MemoryQueue::enqueue(const Tensor& embeddings) {
    const int n = embeddings.rows();
    if (embeddings.cols() != dim_) throw DimensionError("queue embedding width mismatch");
    for (int i = 0; i < n; ++i) {
        enqueue_row(embeddings.data().subspan(static_cast<std::size_t>(i) * dim_,
                                              static_cast<std::size_t>(dim_)));
    }
}

std::vector<double> MemoryQueue::snapshot() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(count_) * dim_);
    for (int i = 0; i < count_; ++i) {
        const int slot = (start_ + i) % capacity_;
        const auto* p = ring_.data() + static_cast<std::size_t>(slot) * dim_;
        out.insert(out.end(), p, p + dim_);
    }
    return out;
}

Tensor MemoryQueue::as_tensor() const {
    if (count_ == 0) throw ContractError("memory queue is empty");
    return Tensor::from_data({count_, dim_}, snapshot());
}

void MemoryQueue::assign(std::span<const double> rows_oldest_first, int rows) {
    if (rows > capacity_ || static_cast<std::size_t>(rows) * dim_ != rows_oldest_first.size()) {
        throw DimensionError("queue assign size mismatch");
    }
    count_ = rows;
    start_ = 0;
    std::fill(ring_.begin(), ring_.end(), 0.0);
    std::copy(rows_oldest_first.begin(), rows_oldest_first.end(), ring_.begin());
}

// ---- Model ----

Model::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), queue_(cfg.queue_capacity, cfg.embed_dim) {
    auto rng = CounterRng::keyed(seed, "init");
    const int d = cfg_.feature_dim();

    auto make_cell = [&](int in, int h) {
        GruCell c;
        c.w_r = init_matrix(in, h, in, rng);
        c.u_r = init_matrix(h, h, h, rng);
        c.b_r = Tensor::zeros({1, h}, true);
        c.w_z = init_matrix(in, h, in, rng);
        c.u_z = init_matrix(h, h, h, rng);
        // positive update-gate bias lengthens the initial memory horizon
        c.b_z = Tensor::full({1, h}, 1.5, true);
        c.w_n = init_matrix(in, h, in, rng);
        c.u_n = init_matrix(h, h, h, rng);
        c.b_n = Tensor::zeros({1, h}, true);
        return c;
    };

    for (int l = 0; l < cfg_.layers; ++l) {
        const int in = l == 0 ? cfg_.input_size() : d;
        GruLayer layer;
        layer.fw = make_cell(in, cfg_.hidden);
        layer.bw = make_cell(in, cfg_.hidden);
        enc_q_.layers.push_back(std::move(layer));
    }
    proj_q_.w1 = init_matrix(d, d, d, rng);
    proj_q_.b1 = Tensor::zeros({1, d}, true);
    proj_q_.w2 = init_matrix(d, cfg_.embed_dim, d, rng);
    proj_q_.b2 = Tensor::zeros({1, cfg_.embed_dim}, true);

    dec_.cell = make_cell(d, cfg_.decoder_hidden);
    dec_.w_out = init_matrix(cfg_.decoder_hidden, cfg_.input_size(), cfg_.decoder_hidden, rng);
    dec_.b_out = Tensor::zeros({1, cfg_.input_size()}, true);

    prompts_.intra = Tensor::zeros({1, cfg_.input_size()}, true);
    prompts_.inter = Tensor::zeros({1, cfg_.input_size()}, true);
    prompts_.mask = Tensor::zeros({1, cfg_.input_size()}, true);
    prompts_.predict = Tensor::zeros({1, cfg_.input_size()}, true);
    prompts_.cl = Tensor::zeros({1, cfg_.prompt_dim}, true);
    prompts_.mp = Tensor::zeros({1, cfg_.prompt_dim}, true);
    if (cfg_.prompt_dim > d) throw ConfigError("prompt_dim must not exceed feature dim");
    auto chan_rng = CounterRng::keyed(seed, "prompt-channels");
    std::vector<int> all(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) all[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < cfg_.prompt_dim; ++i) {
        const int j = i + static_cast<int>(chan_rng.next_below(static_cast<std::uint64_t>(d - i)));
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
    }
    prompts_.channels.assign(all.begin(), all.begin() + cfg_.prompt_dim);

    // Key side starts as an exact copy of the query side.
    auto clone_cell = [](const GruCell& c) {
        GruCell k;
        k.w_r = clone_param(c.w_r);
        k.u_r = clone_param(c.u_r);
        k.b_r = clone_param(c.b_r);
        k.w_z = clone_param(c.w_z);
        k.u_z = clone_param(c.u_z);
        k.b_z = clone_param(c.b_z);
        k.w_n = clone_param(c.w_n);
        k.u_n = clone_param(c.u_n);
        k.b_n = clone_param(c.b_n);
        return k;
    };
    for (const auto& layer : enc_q_.layers) {
        GruLayer kl;
        kl.fw = clone_cell(layer.fw);
        kl.bw = clone_cell(layer.bw);
        enc_k_.layers.push_back(std::move(kl));
    }
    proj_k_.w1 = clone_param(proj_q_.w1);
    proj_k_.b1 = clone_param(proj_q_.b1);
    proj_k_.w2 = clone_param(proj_q_.w2);
    proj_k_.b2 = clone_param(proj_q_.b2);
}

Tensor Model::gru_step(const GruCell& cell, const Tensor& x_t, const Tensor& h) const {
    auto r = sigmoid(add_rowvec(add(matmul(x_t, cell.w_r), matmul(h, cell.u_r)), cell.b_r));
    auto z = sigmoid(add_rowvec(add(matmul(x_t, cell.w_z), matmul(h, cell.u_z)), cell.b_z));
    auto n = tanh(add_rowvec(add(matmul(x_t, cell.w_n), mul(r, matmul(h, cell.u_n))), cell.b_n));
    auto keep = scalar_add(scalar_mul(z, -1.0), 1.0);  // 1 - z
    return add(mul(keep, n), mul(z, h));
}

Tensor Model::encode_with(const Encoder& enc, const Tensor& x, Domain domain,
                          bool prompts_enabled) {
    const int in = cfg_.input_size();
    const int T = cfg_.frames;
    if (x.cols() != T * in) throw DimensionError("encode input width != T*J*3");
    const int batch = x.rows();

    Tensor seq = x;
    if (cfg_.center_input) {
        // subtract the per-channel temporal mean, rescale the motion residual
        Tensor mean = slice_cols(seq, 0, in);
        for (int t = 1; t < T; ++t) mean = add(mean, slice_cols(seq, t * in, (t + 1) * in));
        mean = scalar_mul(mean, 1.0 / T);
        std::vector<Tensor> centered;
        centered.reserve(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
            centered.push_back(sub(slice_cols(seq, t * in, (t + 1) * in), mean));
        }
        seq = scalar_mul(concat_cols(centered), cfg_.input_gain);
    }
    if (prompts_enabled) {
        const Tensor* p = nullptr;
        switch (domain) {
            case Domain::intra: p = &prompts_.intra; break;
            case Domain::inter: p = &prompts_.inter; break;
            case Domain::mask: p = &prompts_.mask; break;
            case Domain::predict: p = &prompts_.predict; break;
        }
        // Broadcast the domain prompt across frames.
        std::vector<Tensor> tiles(static_cast<std::size_t>(T), *p);
        seq = add_rowvec(seq, concat_cols(tiles));
    }

    Tensor feat;
    for (std::size_t l = 0; l < enc.layers.size(); ++l) {
        const int in_l = l == 0 ? in : cfg_.feature_dim();
        const auto& layer = enc.layers[l];
        std::vector<Tensor> h_fw(static_cast<std::size_t>(T));
        std::vector<Tensor> h_bw(static_cast<std::size_t>(T));
        Tensor h = Tensor::zeros({batch, cfg_.hidden});
        for (int t = 0; t < T; ++t) {
            h = gru_step(layer.fw, slice_cols(seq, t * in_l, (t + 1) * in_l), h);
            h_fw[static_cast<std::size_t>(t)] = h;
        }
        h = Tensor::zeros({batch, cfg_.hidden});
        for (int t = T - 1; t >= 0; --t) {
            h = gru_step(layer.bw, slice_cols(seq, t * in_l, (t + 1) * in_l), h);
            h_bw[static_cast<std::size_t>(t)] = h;
        }
        feat = concat_cols(std::vector<Tensor>{h_fw[static_cast<std::size_t>(T - 1)],
                                               h_bw[0]});
        if (l + 1 < enc.layers.size()) {
            std::vector<Tensor> steps;
            steps.reserve(static_cast<std::size_t>(T));
            for (int t = 0; t < T; ++t) {
                steps.push_back(concat_cols(std::vector<Tensor>{
                    h_fw[static_cast<std::size_t>(t)], h_bw[static_cast<std::size_t>(t)]}));
            }
            seq = concat_cols(steps);
        }
    }
    return feat;
}

Tensor Model::encode(const Tensor& x, Side side, Domain domain, bool prompts_enabled) {
    if (side == Side::key) {
        NoGradGuard no_grad;
        return encode_with(enc_k_, x, domain, prompts_enabled);
    }
    return encode_with(enc_q_, x, domain, prompts_enabled);
}

Tensor Model::project(const Tensor& feat, Side side, Task task, bool prompts_enabled) {
    if (feat.cols() != cfg_.feature_dim()) throw DimensionError("project input width != d");
    auto run = [&](const Projector& proj) {
        Tensor f = feat;
        if (prompts_enabled) {
            const Tensor& p = task == Task::cl ? prompts_.cl : prompts_.mp;
            f = add_cols_at(f, p, prompts_.channels);
        }
        if (task == Task::mp) return f;
        auto h1 = relu(add_rowvec(matmul(f, proj.w1), proj.b1));
        // normalization is scale-invariant; the pre-scale keeps the epsilon
        // under the root negligible even for small pre-normalization outputs
        return l2_normalize_rows(scalar_mul(add_rowvec(matmul(h1, proj.w2), proj.b2), 1024.0));
    };
    if (side == Side::key) {
        NoGradGuard no_grad;
        return run(proj_k_);
    }
    return run(proj_q_);
}

Tensor Model::decode(const Tensor& feat_mp) {
    if (feat_mp.cols() != cfg_.feature_dim()) throw DimensionError("decode input width != d");
    const int batch = feat_mp.rows();
    Tensor h = Tensor::zeros({batch, cfg_.decoder_hidden});
    std::vector<Tensor> frames;
    frames.reserve(static_cast<std::size_t>(cfg_.frames));
    for (int t = 0; t < cfg_.frames; ++t) {
        h = gru_step(dec_.cell, feat_mp, h);
        frames.push_back(add_rowvec(matmul(h, dec_.w_out), dec_.b_out));
    }
    return concat_cols(frames);
}

void Model::momentum_update() {
    const double a = cfg_.momentum_alpha;
    auto cell_pairs = [&](GruCell& k, const GruCell& q) {
        ema_into(k.w_r, q.w_r, a);
        ema_into(k.u_r, q.u_r, a);
        ema_into(k.b_r, q.b_r, a);
        ema_into(k.w_z, q.w_z, a);
        ema_into(k.u_z, q.u_z, a);
        ema_into(k.b_z, q.b_z, a);
        ema_into(k.w_n, q.w_n, a);
        ema_into(k.u_n, q.u_n, a);
        ema_into(k.b_n, q.b_n, a);
    };
    for (std::size_t l = 0; l < enc_q_.layers.size(); ++l) {
        cell_pairs(enc_k_.layers[l].fw, enc_q_.layers[l].fw);
        cell_pairs(enc_k_.layers[l].bw, enc_q_.layers[l].bw);
    }
    ema_into(proj_k_.w1, proj_q_.w1, a);
    ema_into(proj_k_.b1, proj_q_.b1, a);
    ema_into(proj_k_.w2, proj_q_.w2, a);
    ema_into(proj_k_.b2, proj_q_.b2, a);
}

namespace {

void push_cell(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
               const Tensor& w_r, const Tensor& u_r, const Tensor& b_r, const Tensor& w_z,
               const Tensor& u_z, const Tensor& b_z, const Tensor& w_n, const Tensor& u_n,
               const Tensor& b_n) {
    out.emplace_back(prefix + ".w_r", w_r);
    out.emplace_back(prefix + ".u_r", u_r);
    out.emplace_back(prefix + ".b_r", b_r);
    out.emplace_back(prefix + ".w_z", w_z);
    out.emplace_back(prefix + ".u_z", u_z);
    out.emplace_back(prefix + ".b_z", b_z);
    out.emplace_back(prefix + ".w_n", w_n);
    out.emplace_back(prefix + ".u_n", u_n);
    out.emplace_back(prefix + ".b_n", b_n);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> Model::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto push_encoder = [&](const Encoder& e, const std::string& name) {
        for (std::size_t l = 0; l < e.layers.size(); ++l) {
            const auto& layer = e.layers[l];
            const std::string base = name + ".l" + std::to_string(l);
            push_cell(out, base + ".fw", layer.fw.w_r, layer.fw.u_r, layer.fw.b_r, layer.fw.w_z,
                      layer.fw.u_z, layer.fw.b_z, layer.fw.w_n, layer.fw.u_n, layer.fw.b_n);
            push_cell(out, base + ".bw", layer.bw.w_r, layer.bw.u_r, layer.bw.b_r, layer.bw.w_z,
                      layer.bw.u_z, layer.bw.b_z, layer.bw.w_n, layer.bw.u_n, layer.bw.b_n);
        }
    };
    push_encoder(enc_q_, "enc_q");
    push_encoder(enc_k_, "enc_k");
    out.emplace_back("proj_q.w1", proj_q_.w1);
    out.emplace_back("proj_q.b1", proj_q_.b1);
    out.emplace_back("proj_q.w2", proj_q_.w2);
    out.emplace_back("proj_q.b2", proj_q_.b2);
    out.emplace_back("proj_k.w1", proj_k_.w1);
    out.emplace_back("proj_k.b1", proj_k_.b1);
    out.emplace_back("proj_k.w2", proj_k_.w2);
    out.emplace_back("proj_k.b2", proj_k_.b2);
    push_cell(out, "dec.cell", dec_.cell.w_r, dec_.cell.u_r, dec_.cell.b_r, dec_.cell.w_z,
              dec_.cell.u_z, dec_.cell.b_z, dec_.cell.w_n, dec_.cell.u_n, dec_.cell.b_n);
    out.emplace_back("dec.w_out", dec_.w_out);
    out.emplace_back("dec.b_out", dec_.b_out);
    out.emplace_back("prompt.intra", prompts_.intra);
    out.emplace_back("prompt.inter", prompts_.inter);
    out.emplace_back("prompt.mask", prompts_.mask);
    out.emplace_back("prompt.predict", prompts_.predict);
    out.emplace_back("prompt.cl", prompts_.cl);
    out.emplace_back("prompt.mp", prompts_.mp);
    return out;
}

Tensor Model::find_param(const std::string& name) const {
    for (auto& [n, t] : named_params()) {
        if (n == name) return t;
    }
    throw ContractError("no parameter named " + name);
}

std::vector<Tensor> Model::encoder_q_params() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named_params()) {
        if (n.starts_with("enc_q.")) out.push_back(t);
    }
    return out;
}

std::vector<Tensor> Model::projector_q_params() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named_params()) {
        if (n.starts_with("proj_q.")) out.push_back(t);
    }
    return out;
}

std::vector<Tensor> Model::decoder_params() const {
    std::vector<Tensor> out;
    for (auto& [n, t] : named_params()) {
        if (n.starts_with("dec.")) out.push_back(t);
    }
    return out;
}

std::vector<double> Model::inference_feature(const SkeletonSequence& s) {
    NoGradGuard no_grad;
    const Tensor x = sequence_tensor(s);
    const Tensor feat = encode_with(enc_q_, x, Domain::intra, /*prompts_enabled=*/false);
    return {feat.data().begin(), feat.data().end()};
}

Tensor sequence_tensor(const SkeletonSequence& s) {
    return Tensor::from_data({1, s.frames * s.joints * 3},
                             std::vector<double>(s.coords.begin(), s.coords.end()));
}

Tensor batch_tensor(std::span<const SkeletonSequence> batch) {
    if (batch.empty()) throw ContractError("empty batch");
    const int width = batch[0].frames * batch[0].joints * 3;
    std::vector<double> data;
    data.reserve(batch.size() * static_cast<std::size_t>(width));
    for (const auto& s : batch) {
        if (s.frames * s.joints * 3 != width) throw DimensionError("ragged batch");
        data.insert(data.end(), s.coords.begin(), s.coords.end());
    }
    return Tensor::from_data({static_cast<int>(batch.size()), width}, std::move(data));
}

// ---- checkpoint io ----

namespace {

struct CkptWriter {
    std::ofstream out;
    explicit CkptWriter(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    void u64(std::uint64_t v) {
        u32(static_cast<std::uint32_t>(v));
        u32(static_cast<std::uint32_t>(v >> 32));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
};

struct CkptReader {
    std::ifstream in;
    std::size_t offset = 0;
    explicit CkptReader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw IoError("cannot open checkpoint for reading: " + path);
    }
    void raw(char* p, std::size_t n, const char* what) {
        in.read(p, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw FormatError(std::string("truncated checkpoint while reading ") + what, offset);
        }
        offset += n;
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        raw(reinterpret_cast<char*>(b), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64(const char* what) {
        const std::uint64_t lo = u32(what);
        const std::uint64_t hi = u32(what);
        return lo | (hi << 32);
    }
    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        std::string s(n, '\0');
        raw(s.data(), n, what);
        return s;
    }
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path, const nlohmann::json& extra,
                     const RngCursor& rng) {
    CkptWriter w(path);
    w.out.write(kMagic, 4);
    w.u32(kVersion);
    nlohmann::json header = {{"model", model.config().to_json()}, {"extra", extra}};
    w.str(header.dump());

    const auto params = model.named_params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.shape().size()));
        for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) w.f64(v);
    }

    const auto& channels = model.prompts().channels;
    w.u32(static_cast<std::uint32_t>(channels.size()));
    for (int c : channels) w.u32(static_cast<std::uint32_t>(c));

    const auto& q = model.queue();
    w.u32(static_cast<std::uint32_t>(q.size()));
    w.u32(static_cast<std::uint32_t>(q.dim()));
    for (double v : q.snapshot()) w.f64(v);

    w.u64(rng.seed);
    w.u64(rng.epoch);
    w.u64(rng.step);
    if (!w.out) throw IoError("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    CkptReader r(path);
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.str("header"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad checkpoint header: ") + e.what(), 8);
    }

    const ModelConfig cfg = ModelConfig::from_json(header.at("model"));
    Model model(cfg, 0);

    const std::uint32_t count = r.u32("param count");
    auto params = model.named_params();
    if (count != params.size()) throw FormatError("parameter count mismatch", r.offset);
    for (auto& [name, t] : params) {
        const std::size_t off = r.offset;
        const std::string got = r.str("param name");
        if (got != name) throw FormatError("unexpected parameter '" + got + "'", off);
        const std::uint32_t ndim = r.u32("ndim");
        Shape shape(ndim);
        for (auto& d : shape) d = static_cast<int>(r.u32("dim"));
        if (shape != t.shape()) throw FormatError("shape mismatch for '" + name + "'", off);
        auto dst = t.mutable_data();
        for (double& v : dst) v = r.f64("param data");
    }

    const std::uint32_t n_channels = r.u32("channel count");
    if (n_channels != static_cast<std::uint32_t>(cfg.prompt_dim)) {
        throw FormatError("prompt channel count mismatch", r.offset);
    }
    model.prompts().channels.resize(n_channels);
    for (auto& c : model.prompts().channels) c = static_cast<int>(r.u32("channel"));

    const std::uint32_t qn = r.u32("queue size");
    const std::uint32_t qd = r.u32("queue dim");
    if (qd != static_cast<std::uint32_t>(cfg.embed_dim) ||
        qn > static_cast<std::uint32_t>(cfg.queue_capacity)) {
        throw FormatError("queue header mismatch", r.offset);
    }
    std::vector<double> rows(static_cast<std::size_t>(qn) * qd);
    for (double& v : rows) v = r.f64("queue data");
    model.queue().assign(rows, static_cast<int>(qn));

    RngCursor rng;
    rng.seed = r.u64("rng seed");
    rng.epoch = r.u64("rng epoch");
    rng.step = r.u64("rng step");

    return LoadedCheckpoint{std::move(model), header.at("extra"), rng};
}

}  // namespace pcm3
