#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pcm3/errors.hpp"
#include "pcm3/rng.hpp"

namespace pcm3 {

// A motion sample: T frames x J joints x 3 coordinates (meters), row-major.
struct SkeletonSequence {
    int frames = 0;
    int joints = 0;
    std::vector<double> coords;  // frames * joints * 3

    SkeletonSequence() = default;
    SkeletonSequence(int t, int j) : frames(t), joints(j), coords(static_cast<std::size_t>(t) * j * 3, 0.0) {}

    double& at(int t, int j, int axis) {
        return coords[(static_cast<std::size_t>(t) * joints + j) * 3 + axis];
    }
    double at(int t, int j, int axis) const {
        return coords[(static_cast<std::size_t>(t) * joints + j) * 3 + axis];
    }
    bool operator==(const SkeletonSequence&) const = default;
};

struct BodyPartition {
    std::vector<std::string> names;
    std::vector<std::vector<int>> parts;  // disjoint joint index sets covering 0..J-1

    int num_parts() const { return static_cast<int>(parts.size()); }
};

// trunk {0,1,2}, left-hand {3,4,5}, right-hand {6,7,8}, left-leg {9,10,11}, right-leg {12,13,14}
BodyPartition default_partition(int joints = 15);

struct LabeledDataset {
    std::vector<SkeletonSequence> sequences;
    std::vector<int> labels;
    std::string split;  // "train" | "test"
    int num_classes = 0;

    std::size_t size() const { return sequences.size(); }
    bool operator==(const LabeledDataset&) const = default;
};

struct SynthConfig {
    int classes = 8;
    int train_per_class = 100;
    int test_per_class = 25;
    int frames = 16;
    int joints = 15;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;
};

// Per-(class, joint) sinusoid parameters, derived deterministically from the
// seed. Public so tests can recompute expected trajectories independently.
struct JointMotion {
    double amplitude;           // meters
    double frequency;           // cycles per sequence
    std::array<double, 3> dir;  // unit displacement direction
};

std::vector<JointMotion> class_motion_table(std::uint64_t seed, int class_id, int joints);
double instance_phase(std::uint64_t seed, int class_id, int instance_id);
std::array<double, 3> rest_pose_joint(int joint, int joints);

std::pair<LabeledDataset, LabeledDataset> generate_synthetic(const SynthConfig& cfg);

SkeletonSequence center_normalize(const SkeletonSequence& s, int root_joint);

// "SKDS" binary + sidecar JSON manifest (<path>.json). Coordinates are
// float32 on disk, widened to float64 in memory; the generator snaps to
// float32 so save/load round-trips bit-exactly.
void save_dataset(const LabeledDataset& ds, const std::string& path, std::uint64_t seed);
LabeledDataset load_dataset(const std::string& path);

}  // namespace pcm3
