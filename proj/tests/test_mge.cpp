#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "chbc/mge.hpp"
#include "testutil.hpp"

using namespace chbc;
using testutil::fd_max_rel_err;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace

TEST_CASE("mod annihilates self projection") {
    std::mt19937_64 rng(1);
    Tensor g = testutil::random_tensor({2, 3, 4, 4}, rng, false);
    auto out = mge::mod(g, g);
    double out_norm = norm(out.values());
    CHECK(out_norm <= 1e-9 * norm(g.values()));
}

TEST_CASE("mod leaves orthogonal inputs unchanged") {
    // Disjoint supports make each channel's spatial inner product zero.
    Tensor f = Tensor::from({1, 1, 2, 2}, {1, 2, 0, 0});
    Tensor g = Tensor::from({1, 1, 2, 2}, {0, 0, 3, -1});
    auto out = mge::mod(f, g);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(out.values()[i] == Catch::Approx(f.values()[i]).margin(1e-12));
}

TEST_CASE("mod hand example") {
    // fine = [[1,1],[0,0]], coarse = [[1,0],[0,1]]: the projection
    // coefficient is <f,g>/<g,g> = 1/2, so m_orth = f - 0.5 * g.
    Tensor fine = Tensor::from({1, 1, 2, 2}, {1, 1, 0, 0});
    Tensor coarse = Tensor::from({1, 1, 2, 2}, {1, 0, 0, 1});
    auto out = mge::mod(fine, coarse);
    CHECK(out.values()[0] == Catch::Approx(0.5).margin(1e-7));
    CHECK(out.values()[1] == Catch::Approx(1.0).margin(1e-7));
    CHECK(out.values()[2] == Catch::Approx(0.0).margin(1e-7));
    CHECK(out.values()[3] == Catch::Approx(-0.5).margin(1e-7));
}

TEST_CASE("mod requires matching shapes and handles zero coarse") {
    Tensor f = Tensor::ones({1, 1, 2, 2});
    CHECK_THROWS_AS(mge::mod(f, Tensor::ones({1, 1, 3, 3})), DimensionError);

    // All-zero coarse matrix: projection coefficient collapses to ~0.
    Tensor z = Tensor::zeros({1, 1, 2, 2});
    auto out = mge::mod(f, z);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(out.values()[i] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("mod output is orthogonal to the coarse input per channel") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor f = testutil::random_tensor({1, 2, 5, 5}, rng, false, 2.0);
        Tensor g = testutil::random_tensor({1, 2, 5, 5}, rng, false, 2.0);
        auto out = mge::mod(f, g);
        for (std::size_t c = 0; c < 2; ++c) {
            std::vector<double> oc(out.values().begin() + c * 25,
                                   out.values().begin() + (c + 1) * 25);
            std::vector<double> gc(g.values().begin() + c * 25,
                                   g.values().begin() + (c + 1) * 25);
            std::vector<double> fc(f.values().begin() + c * 25,
                                   f.values().begin() + (c + 1) * 25);
            CHECK(std::abs(dot(oc, gc)) <= 1e-6 * (norm(fc) * norm(gc) + 1e-8));
        }
    }
}

TEST_CASE("mod projection coefficient equals the flattened-vector coefficient") {
    std::mt19937_64 rng(7);
    Tensor f = testutil::random_tensor({1, 3, 4, 4}, rng, false);
    Tensor g = testutil::random_tensor({1, 3, 4, 4}, rng, false);
    auto out = mge::mod(f, g);
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> fc(f.values().begin() + c * 16, f.values().begin() + (c + 1) * 16);
        std::vector<double> gc(g.values().begin() + c * 16, g.values().begin() + (c + 1) * 16);
        std::vector<double> oc(out.values().begin() + c * 16,
                               out.values().begin() + (c + 1) * 16);
        // Coefficient recovered from the output vs computed on flat vectors.
        const double recovered = dot(fc, gc) != 0.0
                                     ? (fc[0] - oc[0]) / gc[0]
                                     : 0.0;
        const double flat = dot(fc, gc) / (dot(gc, gc) + 1e-8);
        CHECK(recovered == Catch::Approx(flat).margin(1e-9));
    }
}

TEST_CASE("enhance") {
    std::mt19937_64 rng(5);
    Tensor m = testutil::random_tensor({1, 2, 3, 3}, rng, false);
    Tensor orth = testutil::random_tensor({1, 2, 3, 3}, rng, false);
    CHECK(mge::enhance(m, orth, 0.0).values() == m.values());
    CHECK(mge::enhance(m, Tensor::zeros({1, 2, 3, 3}), 0.7).values() == m.values());
    auto e = mge::enhance(Tensor::ones({2, 2}), Tensor::ones({2, 2}), 0.4);
    for (double v : e.values()) CHECK(v == Catch::Approx(1.4).margin(1e-12));
}

TEST_CASE("cam_attention single channel is a normalized copy") {
    Tensor fmap = Tensor::from({1, 1, 2, 2}, {0, 1, 2, 4});
    Tensor w = Tensor::ones({1, 1});  // one channel, one class
    auto mask = mge::cam_attention(fmap, w, {0});
    CHECK(mask.values() == std::vector<double>{0.0, 0.25, 0.5, 1.0});
}

TEST_CASE("cam_attention flat maps become one half") {
    Tensor fmap = Tensor::full({2, 3, 2, 2}, 1.0);
    Tensor w = Tensor::ones({3, 2});
    auto mask = mge::cam_attention(fmap, w, {0, 1});
    for (double v : mask.values()) CHECK(v == 0.5);
}

TEST_CASE("cam_attention weighted sum matches hand computation") {
    Tensor fmap = Tensor::from({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
    Tensor w = Tensor::from({2, 2}, {1.0, 0.0,   // channel 0: class0 -> 1
                                     0.5, 0.0}); // channel 1: class0 -> 0.5
    // class 0 weighted sum: [6, 12, 18, 24]; min-max -> [0, 1/3, 2/3, 1]
    auto mask = mge::cam_attention(fmap, w, {0});
    CHECK(mask.values()[0] == Catch::Approx(0.0));
    CHECK(mask.values()[1] == Catch::Approx(1.0 / 3.0));
    CHECK(mask.values()[2] == Catch::Approx(2.0 / 3.0));
    CHECK(mask.values()[3] == Catch::Approx(1.0));
    CHECK_THROWS_AS(mge::cam_attention(fmap, w, {9}), ParameterError);
}

TEST_CASE("enhance_level passes level one through bitwise") {
    std::mt19937_64 rng(9);
    mge::LevelTensors lt;
    lt.attention = {testutil::random_tensor({2, 3, 3}, rng, false),
                    testutil::random_tensor({2, 3, 3}, rng, false)};
    lt.features = {testutil::random_tensor({2, 4, 3, 3}, rng, false),
                   testutil::random_tensor({2, 4, 3, 3}, rng, false)};
    auto [a, f] = mge::enhance_level(lt, 1, {});
    CHECK(a.raw() == lt.attention[0].raw());
    CHECK(f.raw() == lt.features[0].raw());
    CHECK_THROWS_AS(mge::enhance_level(lt, 0, {}), ParameterError);
    CHECK_THROWS_AS(mge::enhance_level(lt, 3, {}), ParameterError);
}

TEST_CASE("enhance_level with orthogonal attention scales by one plus alpha") {
    mge::LevelTensors lt;
    lt.attention = {Tensor::from({1, 2, 2}, {1, 0, 0, 0}),
                    Tensor::from({1, 2, 2}, {0, 2, 0, 0})};
    lt.features = {Tensor::ones({1, 1, 2, 2}), Tensor::ones({1, 1, 2, 2})};
    mge::EnhancementConfig cfg;
    cfg.alpha = 0.4;
    auto [a, f] = mge::enhance_level(lt, 2, cfg);
    // A_2 orthogonal to A_1, so MOD(A_2, A_1) == A_2 and A'_2 == 1.4 * A_2.
    CHECK(a.values()[1] == Catch::Approx(1.4 * 2.0).margin(1e-7));
    CHECK(a.values()[0] == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("enhance_level strategies and sources") {
    mge::LevelTensors lt;
    lt.attention = {Tensor::from({1, 1, 2}, {1, 0}), Tensor::from({1, 1, 2}, {0, 1}),
                    Tensor::from({1, 1, 2}, {2, 2})};
    lt.features = {Tensor::full({1, 1, 1, 2}, 1.0), Tensor::full({1, 1, 1, 2}, 2.0),
                   Tensor::full({1, 1, 1, 2}, 3.0)};
    mge::EnhancementConfig cfg;
    cfg.alpha = 0.5;

    SECTION("AddPre adds the configured source scaled by alpha") {
        cfg.strategy = mge::ModStrategy::AddPre;
        cfg.attention_source = mge::LevelSource::Previous;
        cfg.feature_source = mge::LevelSource::First;
        auto [a, f] = mge::enhance_level(lt, 3, cfg);
        // A'_3 = A_3 + 0.5 * A_2 = [2, 2.5]
        CHECK(a.values() == std::vector<double>{2.0, 2.5});
        // F'_3 = F_3 + 0.5 * F_1 = 3.5 everywhere
        for (double v : f.values()) CHECK(v == 3.5);
    }
    SECTION("AddAll adds every preceding level") {
        cfg.strategy = mge::ModStrategy::AddAll;
        auto [a, f] = mge::enhance_level(lt, 3, cfg);
        // A'_3 = A_3 + 0.5 * (A_1 + A_2) = [2.5, 2.5]
        CHECK(a.values() == std::vector<double>{2.5, 2.5});
        for (double v : f.values()) CHECK(v == 3.0 + 0.5 * 3.0);
    }
    SECTION("source selection picks previous vs first") {
        cfg.strategy = mge::ModStrategy::AddPre;
        cfg.attention_source = mge::LevelSource::First;
        auto [a, f] = mge::enhance_level(lt, 3, cfg);
        // A'_3 = A_3 + 0.5 * A_1 = [2.5, 2]
        CHECK(a.values() == std::vector<double>{2.5, 2.0});
    }
}

TEST_CASE("fuse gates features spatially") {
    std::mt19937_64 rng(11);
    Tensor f = testutil::random_tensor({1, 3, 2, 2}, rng, false);
    CHECK(mge::fuse(f, Tensor::ones({1, 2, 2})).values() == f.values());
    for (double v : mge::fuse(f, Tensor::zeros({1, 2, 2})).values()) CHECK(v == 0.0);

    Tensor m = Tensor::from({1, 2, 2}, {1, 1, 1, 0.5});
    auto fused = mge::fuse(f, m);
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(fused.values()[c * 4 + 3] == Catch::Approx(0.5 * f.values()[c * 4 + 3]));
        CHECK(fused.values()[c * 4 + 0] == f.values()[c * 4 + 0]);
    }
    CHECK_THROWS_AS(mge::fuse(f, Tensor::ones({1, 3, 3})), DimensionError);
}

TEST_CASE("mge operations pass the finite-difference check") {
    std::mt19937_64 rng(33);
    SECTION("mod") {
        Tensor f = testutil::random_tensor({1, 2, 3, 3}, rng);
        Tensor g = testutil::random_tensor({1, 2, 3, 3}, rng);
        CHECK(fd_max_rel_err(
                  [&]() {
                      auto y = mge::mod(f, g);
                      return sum_all(mul(y, y));
                  },
                  {f, g}) < 1e-4);
    }
    SECTION("cam_attention") {
        Tensor f = testutil::random_tensor({2, 2, 3, 3}, rng);
        Tensor w = testutil::random_tensor({2, 3}, rng);
        std::vector<std::size_t> cls = {0, 2};
        CHECK(fd_max_rel_err(
                  [&]() {
                      auto y = mge::cam_attention(f, w, cls);
                      return sum_all(mul(y, y));
                  },
                  {f, w}) < 1e-4);
    }
    SECTION("enhance_level composite") {
        mge::LevelTensors lt;
        lt.attention = {testutil::random_tensor({1, 3, 3}, rng),
                        testutil::random_tensor({1, 3, 3}, rng)};
        lt.features = {testutil::random_tensor({1, 2, 3, 3}, rng),
                       testutil::random_tensor({1, 2, 3, 3}, rng)};
        mge::EnhancementConfig cfg;
        CHECK(fd_max_rel_err(
                  [&]() {
                      auto [a, f] = mge::enhance_level(lt, 2, cfg);
                      return sum_all(mul(mge::fuse(f, a), mge::fuse(f, a)));
                  },
                  {lt.attention[0], lt.attention[1], lt.features[0], lt.features[1]}) <
              1e-4);
    }
}
