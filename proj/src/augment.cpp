#include "pcm3/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace pcm3 {

namespace {

void require_same_shape(const SkeletonSequence& a, const SkeletonSequence& b) {
    if (a.frames != b.frames || a.joints != b.joints) {
        throw DimensionError("skeleton sequences have different shapes");
    }
}

double lerp(double a, double b, double w) { return a + w * (b - a); }

// Sample `count` distinct values from [0, n) via partial Fisher-Yates.
std::vector<int> sample_distinct(int n, int count, CounterRng& rng) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < count; ++i) {
        const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(count));
    return idx;
}

}  // namespace

int MaskSpec::masked_count() const {
    int n = 0;
    for (std::uint8_t v : visible) n += (v == 0);
    return n;
}

SkeletonSequence crop_resize(const SkeletonSequence& s, int crop_start, int crop_len) {
    if (crop_len < 1 || crop_start < 0 || crop_start + crop_len > s.frames) {
        throw ConfigError("crop window out of range");
    }
    const int T = s.frames;
    SkeletonSequence out(T, s.joints);
    for (int k = 0; k < T; ++k) {
        // Output frame k samples the cropped signal at k*(L-1)/(T-1).
        const double pos = crop_len == 1 ? 0.0
                                         : static_cast<double>(k) * (crop_len - 1) / (T - 1);
        const int i0 = std::min(static_cast<int>(pos), crop_len - 1);
        const int i1 = std::min(i0 + 1, crop_len - 1);
        const double w = pos - i0;
        for (int j = 0; j < s.joints; ++j) {
            for (int a = 0; a < 3; ++a) {
                out.at(k, j, a) = lerp(s.at(crop_start + i0, j, a), s.at(crop_start + i1, j, a), w);
            }
        }
    }
    return out;
}

SkeletonSequence apply_shear(const SkeletonSequence& s, const std::array<double, 9>& m) {
    SkeletonSequence out(s.frames, s.joints);
    for (int t = 0; t < s.frames; ++t) {
        for (int j = 0; j < s.joints; ++j) {
            const double x = s.at(t, j, 0), y = s.at(t, j, 1), z = s.at(t, j, 2);
            for (int a = 0; a < 3; ++a) {
                out.at(t, j, a) = x * m[static_cast<std::size_t>(a)] +
                                  y * m[static_cast<std::size_t>(3 + a)] +
                                  z * m[static_cast<std::size_t>(6 + a)];
            }
        }
    }
    return out;
}

SkeletonSequence intra_transform(const SkeletonSequence& s, const IntraParams& params,
                                 CounterRng& rng) {
    const int T = s.frames;
    const double keep = rng.uniform(params.crop_min, params.crop_max);
    const int len = std::clamp(static_cast<int>(std::lround(keep * T)), 2, T);
    const int start = len == T ? 0 : rng.uniform_int(0, T - len);
    SkeletonSequence out = crop_resize(s, start, len);

    std::array<double, 9> shear = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    const int off_diag[6] = {1, 2, 3, 5, 6, 7};
    for (int k : off_diag) {
        shear[static_cast<std::size_t>(k)] = rng.uniform(-params.shear_max, params.shear_max);
    }
    out = apply_shear(out, shear);

    for (int j = 0; j < s.joints; ++j) {
        if (!rng.bernoulli(params.jitter_prob)) continue;
        for (int t = 0; t < T; ++t) {
            for (int a = 0; a < 3; ++a) {
                out.at(t, j, a) += rng.uniform(-params.jitter_amp, params.jitter_amp);
            }
        }
    }
    return out;
}

MixResult mixup(const SkeletonSequence& s1, const SkeletonSequence& s2, double lambda) {
    require_same_shape(s1, s2);
    MixResult r;
    r.kind = MixKind::mixup;
    r.lambda = lambda;
    r.mixed = SkeletonSequence(s1.frames, s1.joints);
    for (std::size_t i = 0; i < s1.coords.size(); ++i) {
        r.mixed.coords[i] = (1.0 - lambda) * s1.coords[i] + lambda * s2.coords[i];
    }
    return r;
}

MixResult cutmix_at(const SkeletonSequence& s1, const SkeletonSequence& s2, int frame0,
                    int len_t, int joint0, int len_j) {
    require_same_shape(s1, s2);
    if (frame0 < 0 || frame0 + len_t > s1.frames || joint0 < 0 || joint0 + len_j > s1.joints ||
        len_t < 0 || len_j < 0) {
        throw ConfigError("cutmix region out of range");
    }
    MixResult r;
    r.kind = MixKind::cutmix;
    r.mixed = s1;
    for (int t = frame0; t < frame0 + len_t; ++t) {
        for (int j = joint0; j < joint0 + len_j; ++j) {
            for (int a = 0; a < 3; ++a) r.mixed.at(t, j, a) = s2.at(t, j, a);
        }
    }
    r.lambda = static_cast<double>(len_t) * len_j / (static_cast<double>(s1.frames) * s1.joints);
    return r;
}

MixResult cutmix(const SkeletonSequence& s1, const SkeletonSequence& s2, CounterRng& rng,
                 double target_ratio) {
    require_same_shape(s1, s2);
    if (target_ratio < 0.0 || target_ratio > 1.0) throw ConfigError("cutmix ratio out of [0,1]");
    if (target_ratio == 0.0) {
        MixResult r;
        r.kind = MixKind::cutmix;
        r.mixed = s1;
        r.lambda = 0.0;
        return r;
    }
    const int T = s1.frames, J = s1.joints;
    // len_t >= target*T keeps the implied joint count within [1, J].
    const int lo = std::max(1, static_cast<int>(std::ceil(target_ratio * T)));
    const int len_t = rng.uniform_int(lo, T);
    const int len_j =
        std::clamp(static_cast<int>(std::lround(target_ratio * T * J / len_t)), 1, J);
    const int frame0 = len_t == T ? 0 : rng.uniform_int(0, T - len_t);
    const int joint0 = len_j == J ? 0 : rng.uniform_int(0, J - len_j);
    return cutmix_at(s1, s2, frame0, len_t, joint0, len_j);
}

MixResult resizemix_at(const SkeletonSequence& s1, const SkeletonSequence& s2, int frame0,
                       int len_t) {
    require_same_shape(s1, s2);
    if (frame0 < 0 || len_t < 1 || frame0 + len_t > s1.frames) {
        throw ConfigError("resizemix interval out of range");
    }
    const int T = s1.frames;
    MixResult r;
    r.kind = MixKind::resizemix;
    r.mixed = s1;
    for (int k = 0; k < len_t; ++k) {
        // s2 downsampled from T frames to the interval length.
        const double pos = len_t == 1 ? 0.0 : static_cast<double>(k) * (T - 1) / (len_t - 1);
        const int i0 = std::min(static_cast<int>(pos), T - 1);
        const int i1 = std::min(i0 + 1, T - 1);
        const double w = pos - i0;
        for (int j = 0; j < s1.joints; ++j) {
            for (int a = 0; a < 3; ++a) {
                r.mixed.at(frame0 + k, j, a) = lerp(s2.at(i0, j, a), s2.at(i1, j, a), w);
            }
        }
    }
    r.lambda = static_cast<double>(len_t) / T;
    return r;
}

MixResult resizemix(const SkeletonSequence& s1, const SkeletonSequence& s2, CounterRng& rng,
                    double target_ratio) {
    require_same_shape(s1, s2);
    if (target_ratio < 0.0 || target_ratio > 1.0) {
        throw ConfigError("resizemix ratio out of [0,1]");
    }
    const int T = s1.frames;
    const int len_t = std::clamp(static_cast<int>(std::lround(target_ratio * T)), 1, T);
    const int frame0 = len_t == T ? 0 : rng.uniform_int(0, T - len_t);
    return resizemix_at(s1, s2, frame0, len_t);
}

MaskSpec make_mask(int frames, int joints, const BodyPartition& partition, double ratio,
                   int clips, MaskStrategy strategy, CounterRng& rng) {
    if (ratio < 0.0 || ratio > 1.0) throw ConfigError("mask ratio out of [0,1]");
    if (clips < 1 || clips > frames) throw ConfigError("clip count out of range");
    MaskSpec spec;
    spec.frames = frames;
    spec.joints = joints;
    spec.clips = clips;
    spec.strategy = strategy;
    spec.visible.assign(static_cast<std::size_t>(frames) * joints, 1);

    const int total_cells = frames * joints;
    if (strategy == MaskStrategy::topology) {
        const int num_parts = partition.num_parts();
        const std::size_t part_size = partition.parts.empty() ? 0 : partition.parts[0].size();
        for (const auto& part : partition.parts) {
            if (part.size() != part_size) {
                throw ConfigError("topology masking requires equal-size parts");
            }
        }
        const double k_exact = ratio * num_parts;
        const int k = static_cast<int>(std::lround(k_exact));
        if (std::abs(k_exact - k) > 1e-9) {
            throw ConfigError("topology mask ratio must be a multiple of 1/" +
                              std::to_string(num_parts));
        }
        const int base = frames / clips;
        for (int c = 0; c < clips; ++c) {
            const int t0 = c * base;
            const int t1 = (c == clips - 1) ? frames : (c + 1) * base;  // last clip absorbs remainder
            for (int pi : sample_distinct(num_parts, k, rng)) {
                for (int j : partition.parts[static_cast<std::size_t>(pi)]) {
                    for (int t = t0; t < t1; ++t) {
                        spec.visible[static_cast<std::size_t>(t) * joints + j] = 0;
                    }
                }
            }
        }
    } else {
        for (auto& v : spec.visible) v = rng.bernoulli(ratio) ? 0 : 1;
        // Exact-count adjustment toward round(ratio * T * J) masked cells.
        const int target = static_cast<int>(std::lround(ratio * total_cells));
        int masked = spec.masked_count();
        while (masked != target) {
            const bool need_more = masked < target;
            std::vector<int> candidates;
            for (int i = 0; i < total_cells; ++i) {
                if ((spec.visible[static_cast<std::size_t>(i)] != 0) == need_more) {
                    candidates.push_back(i);
                }
            }
            const int pick =
                candidates[static_cast<std::size_t>(rng.next_below(candidates.size()))];
            spec.visible[static_cast<std::size_t>(pick)] = need_more ? 0 : 1;
            masked += need_more ? 1 : -1;
        }
    }
    spec.ratio = static_cast<double>(spec.masked_count()) / total_cells;
    return spec;
}

SkeletonSequence apply_mask(const SkeletonSequence& s, const MaskSpec& spec) {
    if (s.frames != spec.frames || s.joints != spec.joints) {
        throw DimensionError("mask shape does not match sequence");
    }
    SkeletonSequence out = s;
    for (int t = 0; t < s.frames; ++t) {
        for (int j = 0; j < s.joints; ++j) {
            if (spec.at(t, j) == 0) {
                for (int a = 0; a < 3; ++a) out.at(t, j, a) = 0.0;
            }
        }
    }
    return out;
}

}  // namespace pcm3
