#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "pcm3/skeleton.hpp"

using namespace pcm3;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::current_path() / ("skds_test_tmp_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double seq_distance(const SkeletonSequence& a, const SkeletonSequence& b) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.coords.size(); ++i) {
        const double d = a.coords[i] - b.coords[i];
        d2 += d * d;
    }
    return std::sqrt(d2);
}

}  // namespace

TEST_CASE("default config sizes") {
    SynthConfig cfg;
    cfg.seed = 13;
    auto [train, test] = generate_synthetic(cfg);
    CHECK(train.size() == 800);
    CHECK(test.size() == 200);
    CHECK(train.split == "train");
    CHECK(test.split == "test");
    for (const auto& s : train.sequences) {
        CHECK(s.frames == 16);
        CHECK(s.joints == 15);
    }
}

TEST_CASE("identical config produces byte-identical files") {
    TempDir dir;
    SynthConfig cfg;
    cfg.seed = 77;
    cfg.train_per_class = 4;
    cfg.test_per_class = 2;
    auto [tr1, te1] = generate_synthetic(cfg);
    auto [tr2, te2] = generate_synthetic(cfg);
    CHECK(tr1 == tr2);
    save_dataset(tr1, (dir.path / "a.skds").string(), cfg.seed);
    save_dataset(tr2, (dir.path / "b.skds").string(), cfg.seed);
    CHECK(slurp(dir.path / "a.skds") == slurp(dir.path / "b.skds"));
    CHECK(slurp(dir.path / "a.skds.json") == slurp(dir.path / "b.skds.json"));
}

TEST_CASE("zero noise sequences follow the published sinusoid tables") {
    SynthConfig cfg;
    cfg.seed = 5;
    cfg.classes = 3;
    cfg.train_per_class = 2;
    cfg.test_per_class = 1;
    cfg.noise_sigma = 0.0;
    auto [train, test] = generate_synthetic(cfg);

    // Independent reconstruction: base pose + A*dir*sin(2*pi*f*t/T + phi).
    for (int c = 0; c < cfg.classes; ++c) {
        const auto table = class_motion_table(cfg.seed, c, cfg.joints);
        for (int i = 0; i < cfg.train_per_class; ++i) {
            const auto& s = train.sequences[static_cast<std::size_t>(c * cfg.train_per_class + i)];
            const double phi = instance_phase(cfg.seed, c, i);
            for (int t = 0; t < cfg.frames; ++t) {
                for (int j = 0; j < cfg.joints; ++j) {
                    const auto base = rest_pose_joint(j, cfg.joints);
                    const auto& jm = table[static_cast<std::size_t>(j)];
                    const double osc =
                        std::sin(2.0 * std::numbers::pi * jm.frequency * t / cfg.frames + phi);
                    for (int a = 0; a < 3; ++a) {
                        const double expected =
                            static_cast<double>(static_cast<float>(base[a] + jm.amplitude * jm.dir[a] * osc));
                        CHECK(s.at(t, j, a) == expected);
                    }
                }
            }
        }
        // Same class, same table: instances differ only through phi.
        CHECK(instance_phase(cfg.seed, c, 0) != instance_phase(cfg.seed, c, 1));
    }
}

TEST_CASE("center_normalize") {
    SynthConfig cfg;
    cfg.seed = 3;
    cfg.train_per_class = 1;
    cfg.test_per_class = 1;
    auto [train, _] = generate_synthetic(cfg);
    const auto& s = train.sequences[0];
    const auto centered = center_normalize(s, 0);

    SUBCASE("root joint at origin in every frame") {
        for (int t = 0; t < s.frames; ++t)
            for (int a = 0; a < 3; ++a) CHECK(centered.at(t, 0, a) == 0.0);
    }
    SUBCASE("idempotent") {
        CHECK(center_normalize(centered, 0) == centered);
    }
    SUBCASE("pairwise joint distances preserved per frame") {
        for (int t = 0; t < s.frames; t += 5) {
            for (int j = 1; j < s.joints; j += 4) {
                double before = 0.0, after = 0.0;
                for (int a = 0; a < 3; ++a) {
                    before += std::pow(s.at(t, j, a) - s.at(t, 0, a), 2);
                    after += std::pow(centered.at(t, j, a) - centered.at(t, 0, a), 2);
                }
                CHECK(std::sqrt(after) == doctest::Approx(std::sqrt(before)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("save/load round trip is exact") {
    TempDir dir;
    SynthConfig cfg;
    cfg.seed = 21;
    cfg.train_per_class = 3;
    cfg.test_per_class = 2;
    auto [train, test] = generate_synthetic(cfg);
    const auto path = (dir.path / "train.skds").string();
    save_dataset(train, path, cfg.seed);
    const auto loaded = load_dataset(path);
    CHECK(loaded == train);
}

TEST_CASE("wrong magic raises a format error") {
    TempDir dir;
    const auto path = (dir.path / "bad.skds").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE then some bytes";
    }
    {
        std::ofstream mf(path + ".json");
        mf << "{\"classes\":1,\"split\":\"x\",\"seed\":0}";
    }
    CHECK_THROWS_AS(load_dataset(path), FormatError);
}

TEST_CASE("truncated file reports a byte offset") {
    TempDir dir;
    SynthConfig cfg;
    cfg.seed = 9;
    cfg.train_per_class = 2;
    cfg.test_per_class = 1;
    auto [train, _] = generate_synthetic(cfg);
    const auto path = (dir.path / "trunc.skds").string();
    save_dataset(train, path, cfg.seed);
    const auto bytes = slurp(path);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    try {
        load_dataset(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(e.offset > 0);
    }
}

TEST_CASE("empty dataset round trips") {
    TempDir dir;
    LabeledDataset empty;
    empty.split = "test";
    empty.num_classes = 0;
    const auto path = (dir.path / "empty.skds").string();
    save_dataset(empty, path, 0);
    const auto loaded = load_dataset(path);
    CHECK(loaded.size() == 0);
    CHECK(loaded == empty);
}

TEST_CASE("default partition") {
    const auto p = default_partition(15);
    REQUIRE(p.num_parts() == 5);
    std::set<int> seen;
    for (const auto& part : p.parts) {
        CHECK(part.size() == 3);
        for (int j : part) {
            CHECK(seen.insert(j).second);  // disjoint
        }
    }
    CHECK(seen.size() == 15);
    CHECK(*seen.begin() == 0);
    CHECK(*seen.rbegin() == 14);
    CHECK(p.parts[0] == std::vector<int>{0, 1, 2});
    CHECK(p.parts[4] == std::vector<int>{12, 13, 14});

    CHECK_THROWS_AS(default_partition(16), ConfigError);
}

TEST_CASE("classes are statistically separable in raw coordinate space") {
    SynthConfig cfg;
    cfg.seed = 42;
    auto [_, test] = generate_synthetic(cfg);

    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        for (std::size_t j = i + 1; j < test.size(); j += 3) {
            const double d = seq_distance(test.sequences[i], test.sequences[j]);
            if (test.labels[i] == test.labels[j]) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    }
    REQUIRE(n_intra > 100);
    REQUIRE(n_inter > 100);
    CHECK(intra / n_intra < inter / n_inter);
}
