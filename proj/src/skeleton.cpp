#include "pcm3/skeleton.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

namespace pcm3 {

namespace {

constexpr char kMagic[4] = {'S', 'K', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

// Neutral standing pose for the 15-joint skeleton, meters.
constexpr std::array<std::array<double, 3>, 15> kRestPose15 = {{
    {0.00, 0.00, 1.00},   // pelvis
    {0.00, 0.00, 1.35},   // chest
    {0.00, 0.00, 1.65},   // head
    {-0.22, 0.00, 1.50},  // left shoulder
    {-0.45, 0.00, 1.30},  // left elbow
    {-0.55, 0.00, 1.05},  // left wrist
    {0.22, 0.00, 1.50},   // right shoulder
    {0.45, 0.00, 1.30},   // right elbow
    {0.55, 0.00, 1.05},   // right wrist
    {-0.12, 0.00, 0.95},  // left hip
    {-0.14, 0.00, 0.50},  // left knee
    {-0.15, 0.00, 0.08},  // left ankle
    {0.12, 0.00, 0.95},   // right hip
    {0.14, 0.00, 0.50},   // right knee
    {0.15, 0.00, 0.08},   // right ankle
}};

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct Writer {
    std::ofstream out;
    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("cannot open for writing: " + path);
    }
    void u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        out.write(reinterpret_cast<const char*>(b), 4);
    }
    void f32(float v) {
        static_assert(sizeof(float) == 4);
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void raw(const char* p, std::size_t n) { out.write(p, static_cast<std::streamsize>(n)); }
};

struct Reader {
    std::ifstream in;
    std::size_t offset = 0;
    explicit Reader(const std::string& path) : in(path, std::ios::binary) {
        if (!in) throw IoError("cannot open for reading: " + path);
    }
    void raw(char* p, std::size_t n, const char* what) {
        in.read(p, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw FormatError(std::string("truncated file while reading ") + what, offset);
        }
        offset += n;
    }
    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        raw(reinterpret_cast<char*>(b), 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    bool at_end() {
        in.peek();
        return in.eof();
    }
};

}  // namespace

BodyPartition default_partition(int joints) {
    if (joints != 15) {
        throw ConfigError("no body partition table for J=" + std::to_string(joints) +
                          " (only J=15 is built in)");
    }
    BodyPartition p;
    p.names = {"trunk", "left-hand", "right-hand", "left-leg", "right-leg"};
    p.parts = {{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {9, 10, 11}, {12, 13, 14}};
    return p;
}

std::array<double, 3> rest_pose_joint(int joint, int joints) {
    if (joints == 15) return kRestPose15[static_cast<std::size_t>(joint)];
    // Generic deterministic layout for nonstandard joint counts.
    const double a = 2.0 * std::numbers::pi * joint / joints;
    return {0.3 * std::cos(a), 0.3 * std::sin(a), 0.2 + 1.4 * joint / std::max(1, joints - 1)};
}

namespace {

// Joint frequencies and oscillation directions are shared across classes
// (the intra transforms would erase them anyway: crop-resize rescales
// frequency, shear remixes directions). A class is identified by its
// amplitude profile over the joints, which survives those transforms.
// Absolute amplitudes sit near the noise floor so that raw pairwise
// distances are noise-dominated: untrained features score near chance
// while distance MEANS stay class-ordered.
constexpr double kAmpLo = 0.015, kAmpHi = 0.06;
constexpr double kFreqLo = 0.7, kFreqHi = 2.2;
constexpr double kPhaseRange = std::numbers::pi;

}  // namespace

std::vector<JointMotion> class_motion_table(std::uint64_t seed, int class_id, int joints) {
    auto base_rng = CounterRng::keyed(seed, "table-base");
    auto class_rng = CounterRng::keyed(seed, "table-class", {static_cast<std::uint64_t>(class_id)});
    std::vector<JointMotion> table(static_cast<std::size_t>(joints));
    for (auto& jm : table) {
        jm.frequency = base_rng.uniform(kFreqLo, kFreqHi);
        double d[3], norm = 0.0;
        do {
            norm = 0.0;
            for (double& v : d) {
                v = base_rng.normal();
                norm += v * v;
            }
        } while (norm < 1e-12);
        norm = std::sqrt(norm);
        for (int a = 0; a < 3; ++a) jm.dir[a] = d[a] / norm;

        jm.amplitude = class_rng.uniform(kAmpLo, kAmpHi);
    }
    return table;
}

double instance_phase(std::uint64_t seed, int class_id, int instance_id) {
    auto rng = CounterRng::keyed(seed, "phase",
                                 {static_cast<std::uint64_t>(class_id),
                                  static_cast<std::uint64_t>(instance_id)});
    // Partial-cycle spread: same-class sequences stay correlated on average
    // (mean intra distance < mean inter) while alignment still varies.
    return rng.uniform(0.0, kPhaseRange);
}

namespace {

SkeletonSequence synth_instance(const SynthConfig& cfg, int class_id, int instance_id,
                                const std::vector<JointMotion>& table) {
    SkeletonSequence s(cfg.frames, cfg.joints);
    const double phi = instance_phase(cfg.seed, class_id, instance_id);
    auto noise = CounterRng::keyed(cfg.seed, "noise",
                                   {static_cast<std::uint64_t>(class_id),
                                    static_cast<std::uint64_t>(instance_id)});
    for (int t = 0; t < cfg.frames; ++t) {
        for (int j = 0; j < cfg.joints; ++j) {
            const auto base = rest_pose_joint(j, cfg.joints);
            const auto& jm = table[static_cast<std::size_t>(j)];
            const double osc =
                std::sin(2.0 * std::numbers::pi * jm.frequency * t / cfg.frames + phi);
            for (int a = 0; a < 3; ++a) {
                double v = base[a] + jm.amplitude * jm.dir[a] * osc;
                if (cfg.noise_sigma > 0.0) v += noise.normal(0.0, cfg.noise_sigma);
                s.at(t, j, a) = snap_f32(v);
            }
        }
    }
    return s;
}

LabeledDataset synth_split(const SynthConfig& cfg, bool train) {
    LabeledDataset ds;
    ds.split = train ? "train" : "test";
    ds.num_classes = cfg.classes;
    const int count = train ? cfg.train_per_class : cfg.test_per_class;
    // Test instances continue the per-class index range so streams never collide.
    const int offset = train ? 0 : cfg.train_per_class;
    for (int c = 0; c < cfg.classes; ++c) {
        const auto table = class_motion_table(cfg.seed, c, cfg.joints);
        for (int i = 0; i < count; ++i) {
            ds.sequences.push_back(synth_instance(cfg, c, offset + i, table));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SynthConfig& cfg) {
    if (cfg.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (cfg.train_per_class < 1 || cfg.test_per_class < 1) {
        throw ConfigError("per-class counts must be >= 1");
    }
    if (cfg.frames < 2) throw ConfigError("frames must be >= 2");
    return {synth_split(cfg, true), synth_split(cfg, false)};
}

SkeletonSequence center_normalize(const SkeletonSequence& s, int root_joint) {
    if (root_joint < 0 || root_joint >= s.joints) throw ConfigError("root joint out of range");
    SkeletonSequence out = s;
    for (int t = 0; t < s.frames; ++t) {
        const double rx = s.at(t, root_joint, 0);
        const double ry = s.at(t, root_joint, 1);
        const double rz = s.at(t, root_joint, 2);
        for (int j = 0; j < s.joints; ++j) {
            out.at(t, j, 0) -= rx;
            out.at(t, j, 1) -= ry;
            out.at(t, j, 2) -= rz;
        }
    }
    return out;
}

void save_dataset(const LabeledDataset& ds, const std::string& path, std::uint64_t seed) {
    int frames = 0, joints = 0;
    if (!ds.sequences.empty()) {
        frames = ds.sequences[0].frames;
        joints = ds.sequences[0].joints;
    }
    if (ds.sequences.size() != ds.labels.size()) {
        throw ContractError("dataset sequence/label counts disagree");
    }
    for (const auto& s : ds.sequences) {
        if (s.frames != frames || s.joints != joints) {
            throw ContractError("dataset sequences have inconsistent shapes");
        }
    }

    Writer w(path);
    w.raw(kMagic, 4);
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(ds.sequences.size()));
    w.u32(static_cast<std::uint32_t>(frames));
    w.u32(static_cast<std::uint32_t>(joints));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    for (int label : ds.labels) w.u32(static_cast<std::uint32_t>(label));
    for (const auto& s : ds.sequences) {
        for (double v : s.coords) w.f32(static_cast<float>(v));
    }
    if (!w.out) throw IoError("write failed: " + path);
    w.out.close();

    nlohmann::json manifest = {{"classes", ds.num_classes}, {"split", ds.split}, {"seed", seed}};
    std::ofstream mf(path + ".json");
    if (!mf) throw IoError("cannot write manifest: " + path + ".json");
    mf << manifest.dump(2) << "\n";
}

LabeledDataset load_dataset(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.raw(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw FormatError("unsupported version " + std::to_string(version), 4);
    }
    const std::uint32_t n = r.u32("count");
    const std::uint32_t frames = r.u32("frames");
    const std::uint32_t joints = r.u32("joints");
    const std::uint32_t classes = r.u32("classes");
    if (n > 0 && (frames < 2 || joints == 0)) {
        throw FormatError("inconsistent shape header", 8);
    }

    LabeledDataset ds;
    ds.num_classes = static_cast<int>(classes);
    ds.labels.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::size_t off = r.offset;
        const std::uint32_t label = r.u32("label");
        if (label >= classes) throw FormatError("label out of range", off);
        ds.labels.push_back(static_cast<int>(label));
    }
    ds.sequences.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        SkeletonSequence s(static_cast<int>(frames), static_cast<int>(joints));
        for (double& v : s.coords) v = static_cast<double>(r.f32("coords"));
        ds.sequences.push_back(std::move(s));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after payload", r.offset);

    std::ifstream mf(path + ".json");
    if (!mf) throw FormatError("missing manifest " + path + ".json", 0);
    nlohmann::json manifest;
    try {
        mf >> manifest;
        ds.split = manifest.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad manifest: ") + e.what(), 0);
    }
    return ds;
}

}  // namespace pcm3
