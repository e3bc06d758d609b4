#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "chbc/data.hpp"
#include "testutil.hpp"

using namespace chbc;

TEST_CASE("balanced tree builder") {
    auto th = data::build_balanced({2, 2});
    CHECK(th->level_sizes() == std::vector<std::size_t>{2, 4});
    CHECK(th->parent_of(2, 0) == 0);
    CHECK(th->parent_of(2, 3) == 1);
    CHECK_THROWS_AS(data::build_balanced({4}), ConfigError);
    CHECK_THROWS_AS(data::build_balanced({2, 0}), ConfigError);
}

TEST_CASE("generator covers every leaf path with the requested counts") {
    data::SynthSpec spec;
    spec.branching = {2, 2};
    spec.samples_per_leaf = 4;
    spec.vector_dim = 8;
    spec.seed = 3;
    auto result = data::generate_synthetic(spec);
    const std::size_t total = result.train.num_samples() + result.test.num_samples();
    CHECK(total == 16);
    // lround(0.2 * 4) = 1 test sample per leaf.
    CHECK(result.test.num_samples() == 4);

    std::set<std::pair<std::uint32_t, std::uint32_t>> paths;
    for (std::size_t i = 0; i < result.train.num_samples(); ++i)
        paths.insert({result.train.labels[i * 2], result.train.labels[i * 2 + 1]});
    CHECK(paths.size() == 4);

    data::validate_labels(result.train);
    data::validate_labels(result.test);
}

TEST_CASE("generator is deterministic under a fixed seed") {
    data::SynthSpec spec;
    spec.branching = {3, 2};
    spec.samples_per_leaf = 5;
    spec.vector_dim = 6;
    spec.seed = 99;
    auto a = data::generate_synthetic(spec);
    auto b = data::generate_synthetic(spec);
    CHECK(a.train.inputs == b.train.inputs);
    CHECK(a.test.inputs == b.test.inputs);
    CHECK(a.train.labels == b.train.labels);
}

TEST_CASE("tight clusters are solved by a nearest-centroid oracle") {
    data::SynthSpec spec;
    spec.branching = {2, 3};
    spec.samples_per_leaf = 12;
    spec.vector_dim = 10;
    spec.sigma_between = 10.0;
    spec.sigma_within = 1e-6;
    spec.seed = 5;
    auto result = data::generate_synthetic(spec);
    const auto& ds = result.train;
    const std::size_t leaves = ds.hierarchy->finest_size();
    const std::size_t dim = ds.sample_size();

    // Estimate centroids from the data itself.
    std::vector<std::vector<double>> centroid(leaves, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> count(leaves, 0);
    for (std::size_t i = 0; i < ds.num_samples(); ++i) {
        const std::uint32_t leaf = ds.labels[i * 2 + 1];
        ++count[leaf];
        for (std::size_t d = 0; d < dim; ++d)
            centroid[leaf][d] += ds.inputs[i * dim + d];
    }
    for (std::size_t l = 0; l < leaves; ++l)
        for (auto& v : centroid[l]) v /= static_cast<double>(count[l]);

    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.num_samples(); ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t l = 0; l < leaves; ++l) {
            double dist = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = ds.inputs[i * dim + d] - centroid[l][d];
                dist += diff * diff;
            }
            if (dist < best_d) {
                best_d = dist;
                best = l;
            }
        }
        if (best == ds.labels[i * 2 + 1]) ++hits;
    }
    CHECK(hits == ds.num_samples());
}

TEST_CASE("well separated coarse classes are linearly separable") {
    data::SynthSpec spec;
    spec.branching = {3, 2};
    spec.samples_per_leaf = 30;
    spec.vector_dim = 16;
    spec.sigma_between = 50.0;
    spec.sigma_within = 0.5;
    spec.seed = 11;
    auto result = data::generate_synthetic(spec);
    const auto& ds = result.train;
    const std::size_t c1 = ds.hierarchy->level_size(1);
    const std::size_t dim = ds.sample_size();

    // Multi-class perceptron run to convergence (bounded); it converges iff
    // the coarse classes are linearly separable.
    std::vector<std::vector<double>> w(c1, std::vector<double>(dim + 1, 0.0));
    auto predict = [&](std::size_t i) {
        std::size_t best = 0;
        double best_s = -1e300;
        for (std::size_t k = 0; k < c1; ++k) {
            double s = w[k][dim];
            for (std::size_t d = 0; d < dim; ++d) s += w[k][d] * ds.inputs[i * dim + d];
            if (s > best_s) {
                best_s = s;
                best = k;
            }
        }
        return best;
    };
    for (int pass = 0; pass < 50; ++pass) {
        std::size_t mistakes = 0;
        for (std::size_t i = 0; i < ds.num_samples(); ++i) {
            const std::size_t truth = ds.labels[i * 2];
            const std::size_t got = predict(i);
            if (got != truth) {
                ++mistakes;
                for (std::size_t d = 0; d < dim; ++d) {
                    w[truth][d] += ds.inputs[i * dim + d];
                    w[got][d] -= ds.inputs[i * dim + d];
                }
                w[truth][dim] += 1.0;
                w[got][dim] -= 1.0;
            }
        }
        if (mistakes == 0) break;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.num_samples(); ++i)
        if (predict(i) == ds.labels[i * 2]) ++hits;
    CHECK(static_cast<double>(hits) / static_cast<double>(ds.num_samples()) > 0.95);
}

TEST_CASE("image mode renders finite images of the declared shape") {
    data::SynthSpec spec;
    spec.branching = {2, 2};
    spec.samples_per_leaf = 3;
    spec.mode = data::InputMode::Image;
    spec.image_size = 8;
    spec.seed = 7;
    auto result = data::generate_synthetic(spec);
    CHECK(result.train.input_shape == std::vector<std::size_t>{3, 8, 8});
    CHECK(result.train.sample_size() == 3 * 8 * 8);
    for (float v : result.train.inputs) CHECK(std::isfinite(v));
}

TEST_CASE("dataset save and load round trip") {
    data::SynthSpec spec;
    spec.branching = {2, 2};
    spec.samples_per_leaf = 5;
    spec.vector_dim = 4;
    spec.seed = 13;
    auto result = data::generate_synthetic(spec);

    testutil::TempDir tmp("ds");
    data::save_dataset(result.train, tmp.path() + "/train");
    auto loaded = data::load_dataset(tmp.path() + "/train");
    CHECK(loaded.inputs == result.train.inputs);
    CHECK(loaded.labels == result.train.labels);
    CHECK(loaded.input_shape == result.train.input_shape);
    CHECK(loaded.hierarchy->level_sizes() == result.hierarchy->level_sizes());
}

TEST_CASE("truncated data file is rejected with byte counts") {
    data::SynthSpec spec;
    spec.branching = {2, 2};
    spec.samples_per_leaf = 5;
    spec.vector_dim = 4;
    auto result = data::generate_synthetic(spec);

    testutil::TempDir tmp("trunc");
    data::save_dataset(result.train, tmp.path());
    // Drop the last 4 bytes.
    const auto path = tmp.path() + "/data.f32";
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 4);
    try {
        data::load_dataset(tmp.path());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(std::to_string(size)) != std::string::npos);
        CHECK(msg.find(std::to_string(size - 4)) != std::string::npos);
    }
}

TEST_CASE("label validation names the sample and level") {
    auto th = std::make_shared<const TreeHierarchy>(
        std::vector<std::size_t>{2, 3},
        std::vector<std::vector<std::uint32_t>>{{0, 0, 1}});
    data::Dataset ds;
    ds.hierarchy = th;
    ds.input_shape = {2};
    ds.inputs = {0.f, 0.f};
    ds.labels = {0, 5};  // level-2 index 5 out of range (c_2 = 3)
    try {
        data::validate_labels(ds);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()) == "label out of range, sample 0, level 2");
    }

    ds.labels = {1, 0};  // leaf 0 belongs to superclass 0, not 1
    CHECK_THROWS_AS(data::validate_labels(ds), DataError);
}

TEST_CASE("degenerate specs are rejected") {
    data::SynthSpec spec;
    CHECK_THROWS_AS(data::generate_synthetic(spec), ConfigError);  // no hierarchy
    spec.branching = {2, 2};
    spec.sigma_within = 0.0;
    CHECK_THROWS_AS(data::generate_synthetic(spec), ConfigError);
    spec.sigma_within = 1.0;
    spec.samples_per_leaf = 0;
    CHECK_THROWS_AS(data::generate_synthetic(spec), ConfigError);
}

TEST_CASE("synth spec json parsing") {
    auto spec = data::synth_spec_from_json(nlohmann::json{
        {"hierarchy", {{"balanced", {4, 4}}}},
        {"samples_per_leaf", 50},
        {"mode", "vector"},
        {"sigma_between", 10.0},
        {"sigma_within", 1.0},
        {"seed", 21}});
    CHECK(spec.branching == std::vector<std::size_t>{4, 4});
    CHECK(spec.samples_per_leaf == 50);
    CHECK(spec.seed == 21);

    CHECK_THROWS_AS(data::synth_spec_from_json(nlohmann::json{
                        {"hierarchy", {{"balanced", {2, 2}}}}, {"typo_key", 1}}),
                    ConfigError);
    CHECK_THROWS_AS(data::synth_spec_from_json(nlohmann::json{{"samples_per_leaf", 5}}),
                    ConfigError);
}
