#pragma once

#include <string>
#include <vector>

#include "pcm3/rng.hpp"
#include "pcm3/skeleton.hpp"

namespace pcm3 {

struct IntraParams {
    double crop_min = 0.5;   // fraction of T kept before resizing back
    double crop_max = 1.0;
    double shear_max = 0.5;  // off-diagonal entries ~ U(-shear_max, shear_max)
    double jitter_prob = 0.15;
    double jitter_amp = 0.05;  // meters, uniform noise
};

enum class MixKind { mixup, cutmix, resizemix };

struct MixResult {
    SkeletonSequence mixed;
    double lambda = 0.0;
    MixKind kind = MixKind::mixup;
};

enum class MaskStrategy { topology, random };

struct MaskSpec {
    int frames = 0;
    int joints = 0;
    std::vector<std::uint8_t> visible;  // T*J, 1 = visible, 0 = masked
    double ratio = 0.0;                 // realized fraction masked
    int clips = 1;
    MaskStrategy strategy = MaskStrategy::topology;

    std::uint8_t at(int t, int j) const {
        return visible[static_cast<std::size_t>(t) * joints + j];
    }
    int masked_count() const;
};

// Temporal crop-resize, then one shared 3x3 unit-diagonal shear, then joint jitter.
SkeletonSequence intra_transform(const SkeletonSequence& s, const IntraParams& params,
                                 CounterRng& rng);

// Deterministic pieces, exposed for direct testing.
SkeletonSequence crop_resize(const SkeletonSequence& s, int crop_start, int crop_len);
SkeletonSequence apply_shear(const SkeletonSequence& s, const std::array<double, 9>& m);

MixResult mixup(const SkeletonSequence& s1, const SkeletonSequence& s2, double lambda);
MixResult cutmix_at(const SkeletonSequence& s1, const SkeletonSequence& s2, int frame0,
                    int len_t, int joint0, int len_j);
MixResult cutmix(const SkeletonSequence& s1, const SkeletonSequence& s2, CounterRng& rng,
                 double target_ratio);
MixResult resizemix_at(const SkeletonSequence& s1, const SkeletonSequence& s2, int frame0,
                       int len_t);
MixResult resizemix(const SkeletonSequence& s1, const SkeletonSequence& s2, CounterRng& rng,
                    double target_ratio);

MaskSpec make_mask(int frames, int joints, const BodyPartition& partition, double ratio,
                   int clips, MaskStrategy strategy, CounterRng& rng);

SkeletonSequence apply_mask(const SkeletonSequence& s, const MaskSpec& spec);

}  // namespace pcm3
