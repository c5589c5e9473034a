#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "pcm3/losses.hpp"
#include "pcm3/rng.hpp"

using namespace pcm3;

namespace {

std::vector<double> random_unit(int dim, CounterRng& rng) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    double ss = 0.0;
    for (double& x : v) {
        x = rng.normal();
        ss += x * x;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (double& x : v) x *= inv;
    return v;
}

MemoryQueue random_queue(int count, int dim, std::uint64_t seed) {
    MemoryQueue q(std::max(count, 1), dim);
    auto rng = CounterRng::keyed(seed, "queue");
    for (int i = 0; i < count; ++i) q.enqueue_row(random_unit(dim, rng));
    return q;
}

MemoryQueue constant_queue(int count, int dim, std::span<const double> row) {
    MemoryQueue q(count, dim);
    for (int i = 0; i < count; ++i) q.enqueue_row(row);
    return q;
}

MaskSpec manual_mask(int frames, int joints, const std::vector<std::pair<int, int>>& masked) {
    MaskSpec spec;
    spec.frames = frames;
    spec.joints = joints;
    spec.visible.assign(static_cast<std::size_t>(frames) * joints, 1);
    for (auto [t, j] : masked) spec.visible[static_cast<std::size_t>(t) * joints + j] = 0;
    spec.ratio = static_cast<double>(masked.size()) / (frames * joints);
    return spec;
}

}  // namespace

TEST_CASE("info_nce symmetric case equals ln(1+K)") {
    const int e = 4;
    std::vector<double> v(e, 0.0);
    v[0] = 1.0;
    auto q = constant_queue(3, e, v);
    auto z_q = Tensor::from_data({1, e}, {0.3, 0.7, 0.1, -0.2});
    auto z_k = Tensor::from_data({1, e}, v);  // z.z' == z.m_i for every anchor
    const auto loss = info_nce(z_q, z_k, q, 0.07);
    CHECK(loss.scalar_value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("info_nce asymptotic separation") {
    const int e = 8;
    auto rng = CounterRng::keyed(5, "sep");
    const auto zq = random_unit(e, rng);
    std::vector<double> anti(zq);
    for (double& x : anti) x = -x;
    auto q = constant_queue(512, e, anti);
    auto z_q = Tensor::from_data({1, e}, zq);
    auto z_k = Tensor::from_data({1, e}, zq);
    const auto loss = info_nce(z_q, z_k, q, 0.07);
    const double expected = std::log(1.0 + 512.0 * std::exp(-2.0 / 0.07));
    CHECK(loss.scalar_value() == doctest::Approx(expected).epsilon(1e-9));
    CHECK(loss.scalar_value() < 1e-9);
}

TEST_CASE("info_nce gradient matches finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto rng = CounterRng::keyed(seed, "nce-fd");
        const int e = 6;
        auto q = random_queue(12, e, seed);
        auto z_q = Tensor::from_data({2, e},
                                     [&] {
                                         auto a = random_unit(e, rng);
                                         auto b = random_unit(e, rng);
                                         a.insert(a.end(), b.begin(), b.end());
                                         return a;
                                     }(),
                                     true);
        auto z_k = Tensor::from_data({2, e}, [&] {
            auto a = random_unit(e, rng);
            auto b = random_unit(e, rng);
            a.insert(a.end(), b.begin(), b.end());
            return a;
        }());
        Tensor params[] = {z_q};
        const double err = grad_check([&] { return info_nce(z_q, z_k, q, 0.07); }, params, seed);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("info_nce requires a non-empty queue") {
    MemoryQueue q(4, 3);
    auto z = Tensor::from_data({1, 3}, {1.0, 0.0, 0.0});
    CHECK_THROWS_AS(info_nce(z, z, q, 0.07), ContractError);
}

TEST_CASE("mixed_key endpoints and midpoint") {
    auto a = Tensor::from_data({1, 3}, {1.0, 0.0, 0.0});
    auto b = Tensor::from_data({1, 3}, {0.0, 1.0, 0.0});

    const auto at0 = mixed_key(a, b, 0.0);
    const auto at1 = mixed_key(a, b, 1.0);
    for (int j = 0; j < 3; ++j) {
        CHECK(at0.data()[static_cast<std::size_t>(j)] == a.data()[static_cast<std::size_t>(j)]);
        CHECK(at1.data()[static_cast<std::size_t>(j)] == b.data()[static_cast<std::size_t>(j)]);
    }

    const auto mid = mixed_key(a, b, 0.5);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    CHECK(mid.at(0, 0) == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    CHECK(mid.at(0, 1) == doctest::Approx(inv_sqrt2).epsilon(1e-12));
    CHECK(mid.at(0, 2) == 0.0);

    auto anti = Tensor::from_data({1, 3}, {-1.0, 0.0, 0.0});
    CHECK_THROWS_AS(mixed_key(a, anti, 0.5), NumericError);
}

TEST_CASE("relational_kl uniform case equals ln K") {
    const int e = 4;
    std::vector<double> anchor(e, 0.0);
    anchor[1] = 1.0;
    auto q = constant_queue(512, e, anchor);
    auto rng = CounterRng::keyed(3, "klu");
    auto z = Tensor::from_data({1, e}, random_unit(e, rng));
    const auto loss = relational_kl(z, z, q, 0.1, 0.1);
    CHECK(loss.scalar_value() == doctest::Approx(std::log(512.0)).epsilon(1e-9));
}

TEST_CASE("relational_kl with a one-hot teacher") {
    const int e = 4;
    MemoryQueue q(8, e);
    std::vector<double> target = {1.0, 0.0, 0.0, 0.0};
    q.enqueue_row(target);
    for (int i = 0; i < 7; ++i) {
        std::vector<double> other(e, 0.0);
        other[static_cast<std::size_t>(1 + i % 3)] = 1.0;
        q.enqueue_row(other);
    }
    auto z_t = Tensor::from_data({1, e}, target);
    auto rng = CounterRng::keyed(9, "klo");
    auto z_s = Tensor::from_data({1, e}, random_unit(e, rng));
    // teacher temperature -> 0 drives the teacher distribution to one-hot
    const auto loss = relational_kl(z_s, z_t, q, 0.1, 1e-3);

    // oracle: -log p_student at the target anchor
    const auto anchors = q.as_tensor();
    std::vector<double> logits(8);
    double mx = -1e300;
    for (int i = 0; i < 8; ++i) {
        double dot = 0.0;
        for (int j = 0; j < e; ++j) dot += z_s.data()[static_cast<std::size_t>(j)] * anchors.at(i, j);
        logits[static_cast<std::size_t>(i)] = dot / 0.1;
        mx = std::max(mx, logits[static_cast<std::size_t>(i)]);
    }
    double s = 0.0;
    for (double l : logits) s += std::exp(l - mx);
    const double logp0 = logits[0] - mx - std::log(s);
    CHECK(loss.scalar_value() == doctest::Approx(-logp0).epsilon(1e-9));
}

TEST_CASE("relational_kl minus teacher entropy is a nonnegative KL divergence") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const int e = 6;
        auto q = random_queue(16, e, seed + 100);
        auto rng = CounterRng::keyed(seed, "klp");
        auto z_s = Tensor::from_data({1, e}, random_unit(e, rng));
        auto z_t = Tensor::from_data({1, e}, random_unit(e, rng));
        const double ce = relational_kl(z_s, z_t, q, 0.1, 0.05).scalar_value();

        // direct KL computed from scratch
        const auto anchors = q.as_tensor();
        auto probs = [&](const Tensor& z, double tau) {
            std::vector<double> lg(16);
            double mx = -1e300;
            for (int i = 0; i < 16; ++i) {
                double dot = 0.0;
                for (int j = 0; j < e; ++j) dot += z.data()[static_cast<std::size_t>(j)] * anchors.at(i, j);
                lg[static_cast<std::size_t>(i)] = dot / tau;
                mx = std::max(mx, lg[static_cast<std::size_t>(i)]);
            }
            double sum = 0.0;
            for (double& l : lg) {
                l = std::exp(l - mx);
                sum += l;
            }
            for (double& l : lg) l /= sum;
            return lg;
        };
        const auto pt = probs(z_t, 0.05);
        const auto ps = probs(z_s, 0.1);
        double entropy = 0.0, kl = 0.0;
        for (int i = 0; i < 16; ++i) {
            entropy -= pt[static_cast<std::size_t>(i)] * std::log(pt[static_cast<std::size_t>(i)]);
            kl += pt[static_cast<std::size_t>(i)] *
                  std::log(pt[static_cast<std::size_t>(i)] / ps[static_cast<std::size_t>(i)]);
        }
        CHECK(ce == doctest::Approx(entropy + kl).epsilon(1e-9));
        CHECK(ce >= entropy - 1e-12);
        CHECK(kl >= -1e-12);
    }
}

TEST_CASE("relational_kl gradient matches finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const int e = 5;
        auto q = random_queue(10, e, seed + 50);
        auto rng = CounterRng::keyed(seed, "klfd");
        auto z_s = Tensor::from_data({2, e},
                                     [&] {
                                         auto a = random_unit(e, rng);
                                         auto b = random_unit(e, rng);
                                         a.insert(a.end(), b.begin(), b.end());
                                         return a;
                                     }(),
                                     true);
        auto z_t = Tensor::from_data({2, e}, [&] {
            auto a = random_unit(e, rng);
            auto b = random_unit(e, rng);
            a.insert(a.end(), b.begin(), b.end());
            return a;
        }());
        Tensor params[] = {z_s};
        const double err =
            grad_check([&] { return relational_kl(z_s, z_t, q, 0.1, 0.05); }, params, seed);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("masked_mse closed forms") {
    const int T = 4, J = 3, W = T * J * 3;

    SUBCASE("perfect reconstruction is zero") {
        auto x = Tensor::from_data({1, W}, std::vector<double>(W, 0.25));
        auto pred = Tensor::from_data({1, W}, std::vector<double>(W, 0.25));
        const MaskSpec spec = manual_mask(T, J, {{0, 0}, {2, 1}});
        std::vector<MaskSpec> specs = {spec};
        CHECK(masked_mse(x, pred, specs).scalar_value() == 0.0);
    }
    SUBCASE("single masked cell with residual (3,4,0) gives exactly 5") {
        std::vector<double> xd(W, 0.0), pd(W, 0.0);
        // cell (t=1, j=2) occupies coords [ (1*3+2)*3 .. +3 )
        const std::size_t base = (1 * J + 2) * 3;
        xd[base] = 3.0;
        xd[base + 1] = 4.0;
        auto x = Tensor::from_data({1, W}, xd);
        auto pred = Tensor::from_data({1, W}, pd);
        std::vector<MaskSpec> specs = {manual_mask(T, J, {{1, 2}})};
        CHECK(masked_mse(x, pred, specs).scalar_value() == 5.0);
    }
    SUBCASE("two masked cells average their norms") {
        std::vector<double> xd(W, 0.0), pd(W, 0.0);
        xd[(0 * J + 0) * 3 + 0] = 1.0;  // residual (1,0,0)
        xd[(2 * J + 1) * 3 + 1] = 2.0;  // residual (0,2,0)
        auto x = Tensor::from_data({1, W}, xd);
        auto pred = Tensor::from_data({1, W}, pd);
        std::vector<MaskSpec> specs = {manual_mask(T, J, {{0, 0}, {2, 1}})};
        CHECK(masked_mse(x, pred, specs).scalar_value() == doctest::Approx(1.5).epsilon(1e-12));
    }
    SUBCASE("zero masked cells is a contract error") {
        auto x = Tensor::zeros({1, W});
        std::vector<MaskSpec> specs = {manual_mask(T, J, {})};
        CHECK_THROWS_AS(masked_mse(x, x, specs), ContractError);
    }
}

TEST_CASE("masked_mse ignores visible cells in value and gradient") {
    const int T = 4, J = 3, W = T * J * 3;
    auto rng = CounterRng::keyed(31, "mm");
    std::vector<double> xd(W), pd(W);
    for (double& v : xd) v = rng.uniform(-1, 1);
    for (double& v : pd) v = rng.uniform(-1, 1);
    auto x = Tensor::from_data({1, W}, xd);
    std::vector<MaskSpec> specs = {manual_mask(T, J, {{1, 1}, {3, 0}})};

    auto pred1 = Tensor::from_data({1, W}, pd, true);
    Tape tape;
    auto loss1 = masked_mse(x, pred1, specs);
    tape.backward(loss1);

    // visible-cell gradients are exactly zero
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < J; ++j) {
            const bool masked = (t == 1 && j == 1) || (t == 3 && j == 0);
            for (int a = 0; a < 3; ++a) {
                const double g = pred1.grad()[(static_cast<std::size_t>(t) * J + j) * 3 + a];
                if (masked) {
                    CHECK(g != 0.0);
                } else {
                    CHECK(g == 0.0);
                }
            }
        }
    }

    // perturbing visible predictions does not change the value
    auto pd2 = pd;
    for (int a = 0; a < 3; ++a) pd2[(0 * J + 2) * 3 + a] += 42.0;
    auto pred2 = Tensor::from_data({1, W}, pd2);
    CHECK(masked_mse(x, pred2, specs).scalar_value() ==
          doctest::Approx(loss1.scalar_value()).epsilon(1e-15));
}

TEST_CASE("masked_mse gradient matches finite differences") {
    const int T = 3, J = 2, W = T * J * 3;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto rng = CounterRng::keyed(seed, "mmfd");
        std::vector<double> xd(W), pd(W);
        for (double& v : xd) v = rng.uniform(-1, 1);
        for (double& v : pd) v = rng.uniform(-1, 1);
        auto x = Tensor::from_data({1, W}, xd);
        auto pred = Tensor::from_data({1, W}, pd, true);
        std::vector<MaskSpec> specs = {manual_mask(T, J, {{0, 1}, {1, 0}, {2, 1}})};
        Tensor params[] = {pred};
        const double err = grad_check([&] { return masked_mse(x, pred, specs); }, params, seed);
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("total loss weighting") {
    SUBCASE("given components combine to exactly 3.5") {
        LossOptions opts;  // lambda_mask 40.0, lambda_kl 1.0
        CHECK(weighted_total(1.0, 0.5, 0.05, opts) == 3.5);
    }
    SUBCASE("zero weights gate the extra terms") {
        LossOptions opts;
        opts.lambda_mask = 0.0;
        opts.lambda_kl = 0.0;
        CHECK(weighted_total(2.0, 123.0, 456.0, opts) == 2.0);
    }
}

TEST_CASE("total_loss over four pairs") {
    const int e = 6;
    auto q = random_queue(16, e, 7);
    auto rng = CounterRng::keyed(11, "tl");
    auto unit_rows = [&](int n) {
        std::vector<double> data;
        for (int i = 0; i < n; ++i) {
            const auto u = random_unit(e, rng);
            data.insert(data.end(), u.begin(), u.end());
        }
        return data;
    };
    const int B = 2;
    auto z = Tensor::from_data({B, e}, unit_rows(B), true);
    auto zk = Tensor::from_data({B, e}, unit_rows(B));

    const int T = 4, J = 3, W = T * J * 3;
    std::vector<double> xd(static_cast<std::size_t>(B) * W), pd(xd.size());
    for (double& v : xd) v = rng.uniform(-1, 1);
    for (double& v : pd) v = rng.uniform(-1, 1);
    auto x = Tensor::from_data({B, W}, xd);
    auto pred = Tensor::from_data({B, W}, pd, true);
    std::vector<MaskSpec> specs = {manual_mask(T, J, {{0, 0}, {1, 1}}),
                                   manual_mask(T, J, {{2, 2}, {3, 0}})};

    PositivePairSet pairs;
    pairs.z_intra = z;
    pairs.z_inter = z;
    pairs.z_mask = z;
    pairs.z_predict = z;
    pairs.zk_intra = zk;
    pairs.zk_inter = zk;

    LossOptions opts;
    Tape tape;
    auto [total, bd] = total_loss(pairs, x, pred, specs, q.empty() ? q : q, opts);

    SUBCASE("identical pairs produce identical info terms") {
        CHECK(bd.info_intra == bd.info_inter);
        CHECK(bd.info_intra == bd.info_mask);
        CHECK(bd.info_intra == bd.info_predict);
        CHECK(bd.kl_intra == bd.kl_predict);
    }
    SUBCASE("breakdown total matches the weighted sum") {
        CHECK(bd.total ==
              doctest::Approx(weighted_total(bd.info_sum(), bd.kl_sum(), bd.mask_mse, opts))
                  .epsilon(1e-12));
        CHECK(total.scalar_value() == bd.total);
    }
    SUBCASE("every InfoNCE term is nonnegative") {
        CHECK(bd.info_intra >= 0.0);
        CHECK(bd.info_mask >= 0.0);
    }
}

TEST_CASE("total_loss composite gradient matches finite differences") {
    const int e = 5;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        auto q = random_queue(8, e, seed + 900);
        auto rng = CounterRng::keyed(seed, "tlfd");
        auto unit_rows = [&](int n, bool grad) {
            std::vector<double> data;
            for (int i = 0; i < n; ++i) {
                const auto u = random_unit(e, rng);
                data.insert(data.end(), u.begin(), u.end());
            }
            return Tensor::from_data({n, e}, std::move(data), grad);
        };
        auto z1 = unit_rows(2, true);
        auto z2 = unit_rows(2, true);
        auto zk = unit_rows(2, false);
        const int T = 3, J = 2, W = T * J * 3;
        std::vector<double> xd(2 * W), pd(2 * W);
        for (double& v : xd) v = rng.uniform(-1, 1);
        for (double& v : pd) v = rng.uniform(-1, 1);
        auto x = Tensor::from_data({2, W}, xd);
        auto pred = Tensor::from_data({2, W}, pd, true);
        std::vector<MaskSpec> specs = {manual_mask(T, J, {{0, 0}}),
                                       manual_mask(T, J, {{1, 1}, {2, 0}})};
        auto build = [&] {
            PositivePairSet pairs;
            pairs.z_intra = z1;
            pairs.z_inter = z2;
            pairs.z_mask = z1;
            pairs.z_predict = z2;
            pairs.zk_intra = zk;
            pairs.zk_inter = zk;
            return total_loss(pairs, x, pred, specs, q, LossOptions{}).first;
        };
        Tensor params[] = {z1, z2, pred};
        const double err = grad_check(build, params, seed);
        CHECK(err <= 1e-4);
    }
}
