#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "chbc/cbc.hpp"
#include "testutil.hpp"

using namespace chbc;
using testutil::fd_max_rel_err;

namespace {

std::shared_ptr<const TreeHierarchy> two_level() {
    // {a: [a1, a2], b: [b1]}
    return std::make_shared<const TreeHierarchy>(
        std::vector<std::size_t>{2, 3},
        std::vector<std::vector<std::uint32_t>>{{0, 0, 1}});
}

double scalar_js(const std::vector<double>& p, const std::vector<double>& q) {
    double js = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        const double lm = std::log(std::max(m, 1e-8));
        if (p[i] > 0) js += 0.5 * p[i] * (std::log(std::max(p[i], 1e-8)) - lm);
        if (q[i] > 0) js += 0.5 * q[i] * (std::log(std::max(q[i], 1e-8)) - lm);
    }
    return js;
}

}  // namespace

TEST_CASE("coarse_to_fine spreads mass over descendants") {
    auto th = two_level();
    auto d = th->adjacency(1, 2);
    auto out = cbc::coarse_to_fine(Tensor::from({2}, {0.6, 0.4}), *d);
    REQUIRE(out.shape() == Shape{3});
    CHECK(out.values()[0] == Catch::Approx(0.375).margin(1e-12));
    CHECK(out.values()[1] == Catch::Approx(0.375).margin(1e-12));
    CHECK(out.values()[2] == Catch::Approx(0.25).margin(1e-12));

    auto onehot = cbc::coarse_to_fine(Tensor::from({2}, {1.0, 0.0}), *d);
    CHECK(onehot.values()[0] == Catch::Approx(0.5));
    CHECK(onehot.values()[1] == Catch::Approx(0.5));
    CHECK(onehot.values()[2] == 0.0);

    CHECK_THROWS_AS(cbc::coarse_to_fine(Tensor::from({3}, {1, 0, 0}), *d),
                    DimensionError);
}

TEST_CASE("coarse_to_fine is identity on single-child trees") {
    TreeHierarchy chain({3, 3}, {{0, 1, 2}});
    auto d = chain.adjacency(1, 2);
    Tensor s = Tensor::from({3}, {0.2, 0.5, 0.3});
    auto out = cbc::coarse_to_fine(s, *d);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(out.values()[i] == Catch::Approx(s.values()[i]).margin(1e-12));
}

TEST_CASE("fine_to_coarse congregates and conserves mass") {
    auto th = two_level();
    auto d = th->adjacency(1, 2);
    auto out = cbc::fine_to_coarse(Tensor::from({3}, {0.2, 0.3, 0.5}), *d);
    REQUIRE(out.shape() == Shape{2});
    CHECK(out.values()[0] == Catch::Approx(0.5).margin(1e-12));
    CHECK(out.values()[1] == Catch::Approx(0.5).margin(1e-12));

    auto onehot = cbc::fine_to_coarse(Tensor::from({3}, {0, 0, 1.0}), *d);
    CHECK(onehot.values() == std::vector<double>{0.0, 1.0});

    CHECK_THROWS_AS(cbc::fine_to_coarse(Tensor::from({2}, {1, 0}), *d), DimensionError);
}

TEST_CASE("mass conservation over random hierarchies") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        auto th = testutil::random_hierarchy(rng, 3, 15);
        auto d = th->adjacency(1, 3);
        auto s = testutil::random_distribution(th->level_size(3), rng);
        auto out = cbc::fine_to_coarse(Tensor::from({s.size()}, s), *d);
        double sum = 0.0;
        for (double v : out.values()) sum += v;
        CHECK(std::abs(sum - 1.0) <= 1e-9);

        auto coarse = testutil::random_distribution(th->level_size(1), rng);
        auto fine = cbc::coarse_to_fine(Tensor::from({coarse.size()}, coarse), *d);
        double fsum = 0.0;
        for (double v : fine.values()) fsum += v;
        CHECK(std::abs(fsum - 1.0) <= 1e-9);
    }
}

TEST_CASE("round trip of a one-hot fine distribution is uniform over siblings") {
    auto th = two_level();
    auto d = th->adjacency(1, 2);
    auto back = cbc::coarse_to_fine(
        cbc::fine_to_coarse(Tensor::from({3}, {1.0, 0, 0}), *d), *d);
    CHECK(back.values()[0] == Catch::Approx(0.5));
    CHECK(back.values()[1] == Catch::Approx(0.5));
    CHECK(back.values()[2] == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("coarse_to_fine leaves zero mass outside the active superclass") {
    std::mt19937_64 rng(31);
    auto th = testutil::random_hierarchy(rng, 2, 12);
    auto d = th->adjacency(1, 2);
    std::vector<double> s(th->level_size(1), 0.0);
    s[0] = 0.7;
    if (s.size() > 1) s[1] = 0.3;
    auto out = cbc::coarse_to_fine(Tensor::from({s.size()}, s), *d);
    for (std::size_t e = 0; e < th->level_size(2); ++e) {
        const std::size_t parent = th->parent_of(2, e);
        if (parent > 1) CHECK(out.values()[e] <= 1e-12);
    }
}

TEST_CASE("js divergence closed forms") {
    Tensor p = Tensor::from({2}, {0.3, 0.7});
    CHECK(cbc::js_divergence(p, p).value() <= 1e-9);

    Tensor a = Tensor::from({2}, {1.0, 0.0});
    Tensor b = Tensor::from({2}, {0.0, 1.0});
    CHECK(cbc::js_divergence(a, b).value() == Catch::Approx(std::log(2.0)).margin(1e-9));

    Tensor u = Tensor::from({2}, {0.5, 0.5});
    CHECK(cbc::js_divergence(u, a).value() == Catch::Approx(0.2157615).margin(1e-6));

    CHECK_THROWS_AS(cbc::js_divergence(p, Tensor::from({3}, {0.2, 0.3, 0.5})),
                    DimensionError);
}

TEST_CASE("js properties over random pairs") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t c = 2 + trial % 9;
        auto pv = testutil::random_distribution(c, rng);
        auto qv = testutil::random_distribution(c, rng);
        Tensor p = Tensor::from({c}, pv);
        Tensor q = Tensor::from({c}, qv);
        const double pq = cbc::js_divergence(p, q).value();
        const double qp = cbc::js_divergence(q, p).value();
        CHECK(std::abs(pq - qp) <= 1e-12);
        CHECK(pq >= 0.0);
        CHECK(pq <= std::log(2.0) + 1e-9);
        CHECK(pq == Catch::Approx(scalar_js(pv, qv)).margin(1e-12));
    }
}

TEST_CASE("batched js averages over rows") {
    Tensor p = Tensor::from({2, 2}, {1.0, 0.0, 0.5, 0.5});
    Tensor q = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0});
    const double expected = 0.5 * (0.0 + scalar_js({0.5, 0.5}, {1.0, 0.0}));
    CHECK(cbc::js_divergence(p, q).value() == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("combined distribution single contributor cases") {
    auto th = two_level();
    cbc::LevelDistributions dists;
    dists.s = {Tensor::from({2}, {0.6, 0.4}), Tensor::from({3}, {0.1, 0.2, 0.7})};
    dists.s_all = Tensor::from({3}, {0.3, 0.3, 0.4});

    cbc::ConsistencyConfig cfg;
    auto hat2 = cbc::combined_distribution(dists, 2, *th, cfg);
    auto c2f = cbc::coarse_to_fine(dists.s[0], *th->adjacency(1, 2));
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(hat2.values()[i] == Catch::Approx(c2f.values()[i]).margin(1e-12));

    // All and Neighbor coincide at depth two.
    cfg.strategy = cbc::Strategy::Neighbor;
    auto neighbor = cbc::combined_distribution(dists, 2, *th, cfg);
    CHECK(neighbor.values() == hat2.values());

    CHECK_THROWS_AS(cbc::combined_distribution(dists, 5, *th, cfg), ParameterError);
}

TEST_CASE("combined distribution averages both directions at depth three") {
    std::mt19937_64 rng(77);
    auto th = testutil::random_hierarchy(rng, 3, 8);
    cbc::LevelDistributions dists;
    for (std::size_t l = 1; l <= 3; ++l) {
        auto v = testutil::random_distribution(th->level_size(l), rng);
        dists.s.push_back(Tensor::from({v.size()}, v));
    }
    dists.s_all = dists.s[2];

    cbc::ConsistencyConfig cfg;
    auto hat2 = cbc::combined_distribution(dists, 2, *th, cfg);
    auto from1 = cbc::coarse_to_fine(dists.s[0], *th->adjacency(1, 2));
    auto from3 = cbc::fine_to_coarse(dists.s[2], *th->adjacency(2, 3));
    for (std::size_t i = 0; i < th->level_size(2); ++i)
        CHECK(hat2.values()[i] ==
              Catch::Approx(0.5 * (from1.values()[i] + from3.values()[i])).margin(1e-12));
}

TEST_CASE("contributor sets per strategy at depth four") {
    std::mt19937_64 rng(78);
    auto th = testutil::random_hierarchy(rng, 4, 6);
    cbc::LevelDistributions dists;
    for (std::size_t l = 1; l <= 4; ++l) {
        auto v = testutil::random_distribution(th->level_size(l), rng);
        dists.s.push_back(Tensor::from({v.size()}, v));
    }
    dists.s_all = dists.s[3];

    // Neighbor at level 2 averages levels 1 and 3.
    cbc::ConsistencyConfig cfg;
    cfg.strategy = cbc::Strategy::Neighbor;
    auto got = cbc::combined_distribution(dists, 2, *th, cfg);
    auto a = cbc::coarse_to_fine(dists.s[0], *th->adjacency(1, 2));
    auto b = cbc::fine_to_coarse(dists.s[2], *th->adjacency(2, 3));
    for (std::size_t i = 0; i < th->level_size(2); ++i)
        CHECK(got.values()[i] ==
              Catch::Approx(0.5 * (a.values()[i] + b.values()[i])).margin(1e-12));

    // Finest at level 2 uses only level 4; at level 4 averages levels 1..3.
    cfg.strategy = cbc::Strategy::Finest;
    auto fin2 = cbc::combined_distribution(dists, 2, *th, cfg);
    auto only4 = cbc::fine_to_coarse(dists.s[3], *th->adjacency(2, 4));
    for (std::size_t i = 0; i < th->level_size(2); ++i)
        CHECK(fin2.values()[i] == Catch::Approx(only4.values()[i]).margin(1e-12));

    auto fin4 = cbc::combined_distribution(dists, 4, *th, cfg);
    Tensor acc;
    for (std::size_t k = 1; k <= 3; ++k) {
        auto part = cbc::coarse_to_fine(dists.s[k - 1], *th->adjacency(k, 4));
        acc = acc.defined() ? add(acc, part) : part;
    }
    for (std::size_t i = 0; i < th->level_size(4); ++i)
        CHECK(fin4.values()[i] == Catch::Approx(acc.values()[i] / 3.0).margin(1e-12));
}

TEST_CASE("consistency loss vanishes for aligned one-hots on a chain tree") {
    TreeHierarchy chain({2, 2}, {{0, 1}});
    cbc::LevelDistributions dists;
    dists.s = {Tensor::from({2}, {1.0, 0.0}), Tensor::from({2}, {1.0, 0.0})};
    dists.s_all = Tensor::from({2}, {1.0, 0.0});
    cbc::ConsistencyConfig cfg;
    CHECK(cbc::consistency_loss(dists, chain, cfg).value() <= 1e-9);
}

TEST_CASE("consistency loss matches term-by-term oracle at depth two") {
    auto th = two_level();
    std::vector<double> s1 = {0.6, 0.4};
    std::vector<double> s2 = {0.1, 0.2, 0.7};
    std::vector<double> sall = {0.3, 0.3, 0.4};
    cbc::LevelDistributions dists;
    dists.s = {Tensor::from({2}, s1), Tensor::from({3}, s2)};
    dists.s_all = Tensor::from({3}, sall);

    // hat s_1 = f2c(s_2); hat s_2 = c2f(s_1); hat s_all = hat s_2.
    std::vector<double> hat1 = {s2[0] + s2[1], s2[2]};
    const double denom = s1[0] + s1[0] + s1[1];
    std::vector<double> hat2 = {s1[0] / denom, s1[0] / denom, s1[1] / denom};
    const double expected =
        scalar_js(s1, hat1) + scalar_js(s2, hat2) + scalar_js(sall, hat2);

    cbc::ConsistencyConfig cfg;
    CHECK(cbc::consistency_loss(dists, *th, cfg).value() ==
          Catch::Approx(expected).margin(1e-12));

    // KL distance variant replaces each JS term with KL(s_l || hat s_l).
    auto scalar_kl = [](const std::vector<double>& p, const std::vector<double>& q) {
        double kl = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i)
            kl += p[i] * (std::log(std::max(p[i], 1e-8)) - std::log(std::max(q[i], 1e-8)));
        return kl;
    };
    cfg.distance = cbc::Distance::KL;
    const double expected_kl =
        scalar_kl(s1, hat1) + scalar_kl(s2, hat2) + scalar_kl(sall, hat2);
    CHECK(cbc::consistency_loss(dists, *th, cfg).value() ==
          Catch::Approx(expected_kl).margin(1e-12));
}

TEST_CASE("consistency loss is invariant to consistent sibling permutation") {
    // Swap the two children of superclass a everywhere.
    auto th = two_level();
    TreeHierarchy permuted({2, 3}, {{0, 0, 1}});
    cbc::ConsistencyConfig cfg;

    std::vector<double> s1 = {0.55, 0.45};
    std::vector<double> s2 = {0.2, 0.35, 0.45};
    std::vector<double> sall = {0.25, 0.4, 0.35};
    cbc::LevelDistributions d1;
    d1.s = {Tensor::from({2}, s1), Tensor::from({3}, s2)};
    d1.s_all = Tensor::from({3}, sall);

    cbc::LevelDistributions d2;
    d2.s = {Tensor::from({2}, s1),
            Tensor::from({3}, {s2[1], s2[0], s2[2]})};
    d2.s_all = Tensor::from({3}, {sall[1], sall[0], sall[2]});

    CHECK(cbc::consistency_loss(d1, *th, cfg).value() ==
          Catch::Approx(cbc::consistency_loss(d2, permuted, cfg).value()).margin(1e-12));
}

TEST_CASE("consistency loss gradients pass finite differences") {
    std::mt19937_64 rng(2025);
    auto th = testutil::random_hierarchy(rng, 3, 6);
    Tensor z1 = testutil::random_tensor({2, th->level_size(1)}, rng);
    Tensor z2 = testutil::random_tensor({2, th->level_size(2)}, rng);
    Tensor z3 = testutil::random_tensor({2, th->level_size(3)}, rng);
    Tensor zall = testutil::random_tensor({2, th->level_size(3)}, rng);

    for (auto distance : {cbc::Distance::JS, cbc::Distance::KL}) {
        cbc::ConsistencyConfig cfg;
        cfg.distance = distance;
        const double err = fd_max_rel_err(
            [&]() {
                cbc::LevelDistributions dists;
                dists.s = {softmax_t(z1, cfg.temperature), softmax_t(z2, cfg.temperature),
                           softmax_t(z3, cfg.temperature)};
                dists.s_all = softmax_t(zall, cfg.temperature);
                return cbc::consistency_loss(dists, *th, cfg);
            },
            {z1, z2, z3, zall});
        CHECK(err < 1e-4);
    }
}

TEST_CASE("a consistency step pulls fine mass toward the predicted superclass") {
    std::mt19937_64 rng(404);
    auto th = testutil::random_hierarchy(rng, 2, 12);
    const std::size_t c1 = th->level_size(1), c2 = th->level_size(2);
    const std::size_t target = rng() % c1;

    std::vector<double> z1v(c1, 0.0);
    z1v[target] = 25.0;  // softmax is numerically one-hot
    Tensor z1 = Tensor::from({1, c1}, z1v, true);
    Tensor z2 = Tensor::zeros({1, c2}, true);      // uniform fine
    Tensor zall = Tensor::zeros({1, c2}, true);

    cbc::ConsistencyConfig cfg;
    cfg.temperature = 1.0;
    auto build = [&]() {
        cbc::LevelDistributions dists;
        dists.s = {softmax_t(z1, 1.0), softmax_t(z2, 1.0)};
        dists.s_all = softmax_t(zall, 1.0);
        return cbc::consistency_loss(dists, *th, cfg);
    };
    z1.zero_grad();
    z2.zero_grad();
    zall.zero_grad();
    build().backward();

    const auto children = th->children_of(1, target);
    const double before = static_cast<double>(children.size()) / static_cast<double>(c2);

    auto& zv = z2.data();
    for (std::size_t j = 0; j < c2; ++j) zv[j] -= 0.1 * z2.grad()[j];
    auto after_dist = softmax_t(z2, 1.0);
    double after = 0.0;
    for (std::size_t child : children) after += after_dist.values()[child];
    CHECK(after > before);
}
