#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "chbc/error.hpp"
#include "chbc/hierarchy.hpp"
#include "chbc/io.hpp"

// Synthetic hierarchical datasets and the on-disk dataset directory format:
// meta.json + data.f32 + labels.u32 + hierarchy.json.

namespace chbc::data {

struct Dataset {
    std::vector<std::size_t> input_shape;  // [F] for vectors, [C,H,W] for images
    std::vector<float> inputs;             // N x prod(input_shape), row-major
    std::vector<std::uint32_t> labels;     // N x h, per-level class indices
    std::shared_ptr<const TreeHierarchy> hierarchy;

    std::size_t sample_size() const {
        std::size_t n = 1;
        for (std::size_t d : input_shape) n *= d;
        return n;
    }
    std::size_t num_samples() const {
        return sample_size() ? inputs.size() / sample_size() : 0;
    }
};

enum class InputMode { Vector, Image };

struct SynthSpec {
    // Tree shape: either balanced branching factors (level i multiplies the
    // node count by branching[i-1]) or an explicit level_sizes + parents pair.
    std::vector<std::size_t> branching;
    std::vector<std::size_t> level_sizes;
    std::vector<std::vector<std::uint32_t>> parents;

    std::size_t samples_per_leaf = 50;
    InputMode mode = InputMode::Vector;
    double sigma_between = 10.0;  // level-1 center spread; shrinks 4x per level
    double sigma_within = 1.0;    // sample spread around leaf centers
    double noise = 0.1;           // extra pixel noise, image mode only
    std::uint64_t seed = 1;
    std::size_t vector_dim = 64;
    std::size_t image_size = 32;
};

struct SynthResult {
    Dataset train;
    Dataset test;
    std::shared_ptr<const TreeHierarchy> hierarchy;
};

inline std::shared_ptr<const TreeHierarchy> build_balanced(
    const std::vector<std::size_t>& branching) {
    if (branching.size() < 2)
        throw ConfigError("balanced hierarchy needs >= 2 branching factors");
    std::vector<std::size_t> sizes;
    std::vector<std::vector<std::uint32_t>> parents;
    std::size_t count = 1;
    for (std::size_t l = 0; l < branching.size(); ++l) {
        if (branching[l] == 0) throw ConfigError("branching factor must be >= 1");
        count *= branching[l];
        sizes.push_back(count);
        if (l > 0) {
            std::vector<std::uint32_t> pm(count);
            for (std::size_t e = 0; e < count; ++e)
                pm[e] = static_cast<std::uint32_t>(e / branching[l]);
            parents.push_back(std::move(pm));
        }
    }
    return std::make_shared<const TreeHierarchy>(std::move(sizes), std::move(parents));
}

// Every row's label path must be a valid root-to-leaf path; throws a
// DataError naming the first offending sample.
inline void validate_labels(const Dataset& ds) {
    const std::size_t h = ds.hierarchy->depth();
    const std::size_t n = ds.num_samples();
    if (ds.labels.size() != n * h)
        throw DataError("dataset: " + std::to_string(ds.labels.size()) +
                        " label entries for " + std::to_string(n) + " samples of depth " +
                        std::to_string(h));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::uint32_t> path(ds.labels.begin() + i * h,
                                        ds.labels.begin() + (i + 1) * h);
        for (std::size_t l = 1; l <= h; ++l)
            if (path[l - 1] >= ds.hierarchy->level_size(l))
                throw DataError("label out of range, sample " + std::to_string(i) +
                                ", level " + std::to_string(l));
        if (!ds.hierarchy->is_valid_path(path))
            throw DataError("label path violates hierarchy at sample " + std::to_string(i));
    }
}

namespace detail {

// Low-frequency cosine basis for rendering center vectors as images.
inline double render_basis(std::size_t k, std::size_t x, std::size_t y, std::size_t s) {
    static constexpr std::size_t fx[4] = {0, 1, 1, 2};
    static constexpr std::size_t fy[4] = {1, 0, 1, 1};
    const double pi = 3.14159265358979323846;
    return std::cos(pi * static_cast<double>(fx[k]) * (static_cast<double>(x) + 0.5) /
                    static_cast<double>(s)) *
           std::cos(pi * static_cast<double>(fy[k]) * (static_cast<double>(y) + 0.5) /
                    static_cast<double>(s));
}

constexpr std::size_t kImageChannels = 3;
constexpr std::size_t kBasisCount = 4;

}  // namespace detail

// Hierarchical Gaussian mixture: level-1 centers are drawn first, child
// centers around their parent with the spread halved per level, samples
// around leaf centers. Image mode renders each sample's coefficient vector
// as a low-frequency pattern plus pixel noise. Labels are the generating
// path, so they are tree-consistent by construction. The train/test split
// is a seeded per-leaf 80/20.
inline SynthResult generate_synthetic(const SynthSpec& spec) {
    if (spec.sigma_between <= 0.0 || spec.sigma_within <= 0.0)
        throw ConfigError("synth: separation parameters must be > 0");
    if (spec.samples_per_leaf == 0) throw ConfigError("synth: samples_per_leaf must be >= 1");

    std::shared_ptr<const TreeHierarchy> th;
    if (!spec.branching.empty()) {
        th = build_balanced(spec.branching);
    } else {
        if (spec.level_sizes.empty()) throw ConfigError("synth: no hierarchy given");
        th = std::make_shared<const TreeHierarchy>(spec.level_sizes, spec.parents);
    }
    const std::size_t h = th->depth();
    const std::size_t leaves = th->finest_size();

    const bool image = spec.mode == InputMode::Image;
    const std::size_t coeff_dim =
        image ? detail::kImageChannels * detail::kBasisCount : spec.vector_dim;
    if (coeff_dim == 0) throw ConfigError("synth: vector_dim must be >= 1");
    if (image && spec.image_size < 2) throw ConfigError("synth: image_size must be >= 2");

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> unit(0.0, 1.0);

    // Centers, level by level. The per-level shrink keeps child clusters
    // well inside their parent's basin, so coarse classes stay linearly
    // separable while sibling distinctions grow subtle with depth.
    std::vector<std::vector<std::vector<double>>> centers(h);
    for (std::size_t l = 1; l <= h; ++l) {
        const double sigma = spec.sigma_between / std::pow(4.0, static_cast<double>(l - 1));
        centers[l - 1].resize(th->level_size(l));
        for (std::size_t e = 0; e < th->level_size(l); ++e) {
            std::vector<double> c(coeff_dim);
            for (auto& v : c) v = sigma * unit(rng);
            if (l > 1) {
                const auto& parent = centers[l - 2][th->parent_of(l, e)];
                for (std::size_t d = 0; d < coeff_dim; ++d) c[d] += parent[d];
            }
            centers[l - 1][e] = std::move(c);
        }
    }

    std::vector<std::size_t> input_shape =
        image ? std::vector<std::size_t>{detail::kImageChannels, spec.image_size,
                                         spec.image_size}
              : std::vector<std::size_t>{spec.vector_dim};
    const std::size_t sample_size = image
        ? detail::kImageChannels * spec.image_size * spec.image_size
        : spec.vector_dim;

    Dataset train, test;
    train.input_shape = test.input_shape = input_shape;
    train.hierarchy = test.hierarchy = th;

    const std::size_t per_leaf = spec.samples_per_leaf;
    const std::size_t test_per_leaf =
        static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(per_leaf)));
    std::vector<double> coeffs(coeff_dim);
    std::vector<float> rendered(sample_size);
    for (std::size_t leaf = 0; leaf < leaves; ++leaf) {
        // Seeded subset of sample slots that goes to the test split.
        std::vector<std::size_t> order(per_leaf);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<bool> to_test(per_leaf, false);
        for (std::size_t t = 0; t < test_per_leaf; ++t) to_test[order[t]] = true;

        std::vector<std::uint32_t> path(h);
        path[h - 1] = static_cast<std::uint32_t>(leaf);
        for (std::size_t l = h - 1; l >= 1; --l)
            path[l - 1] = static_cast<std::uint32_t>(th->ancestor(h, leaf, l));

        for (std::size_t sidx = 0; sidx < per_leaf; ++sidx) {
            for (std::size_t d = 0; d < coeff_dim; ++d)
                coeffs[d] = centers[h - 1][leaf][d] + spec.sigma_within * unit(rng);
            if (image) {
                const std::size_t s = spec.image_size;
                for (std::size_t c = 0; c < detail::kImageChannels; ++c)
                    for (std::size_t y = 0; y < s; ++y)
                        for (std::size_t x = 0; x < s; ++x) {
                            double v = 0.0;
                            for (std::size_t k = 0; k < detail::kBasisCount; ++k)
                                v += coeffs[c * detail::kBasisCount + k] *
                                     detail::render_basis(k, x, y, s);
                            v += spec.noise * unit(rng);
                            rendered[(c * s + y) * s + x] = static_cast<float>(v);
                        }
            } else {
                for (std::size_t d = 0; d < coeff_dim; ++d)
                    rendered[d] = static_cast<float>(coeffs[d]);
            }
            Dataset& dst = to_test[sidx] ? test : train;
            dst.inputs.insert(dst.inputs.end(), rendered.begin(), rendered.end());
            dst.labels.insert(dst.labels.end(), path.begin(), path.end());
        }
    }
    return {std::move(train), std::move(test), th};
}

// --- Dataset directory format ----------------------------------------------
// meta.json   {"num_samples":N,"input_shape":[...],"level_sizes":[...],
//              "format_version":1}
// data.f32    N x prod(input_shape) float32, row-major little-endian
// labels.u32  N x h uint32, row-major little-endian
// hierarchy.json  hierarchy module schema

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json meta{{"num_samples", ds.num_samples()},
                        {"input_shape", ds.input_shape},
                        {"level_sizes", ds.hierarchy->level_sizes()},
                        {"format_version", 1}};
    std::ofstream mf(dir + "/meta.json");
    if (!mf) throw DataError("cannot write " + dir + "/meta.json");
    mf << meta.dump(2) << "\n";
    io::write_f32(dir + "/data.f32", ds.inputs);
    io::write_u32(dir + "/labels.u32", ds.labels);
    ds.hierarchy->save(dir + "/hierarchy.json");
}

inline Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/meta.json");
    if (!mf) throw DataError("cannot open " + dir + "/meta.json");
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir + "/meta.json: invalid JSON: " + std::string(e.what()));
    }
    for (const auto& [key, _] : meta.items())
        if (key != "num_samples" && key != "input_shape" && key != "level_sizes" &&
            key != "format_version")
            throw DataError(dir + "/meta.json: unknown key \"" + key + "\"");
    if (meta.value("format_version", 0) != 1)
        throw DataError(dir + "/meta.json: unsupported format_version");

    Dataset ds;
    std::size_t n = 0;
    std::vector<std::size_t> level_sizes;
    try {
        n = meta.at("num_samples").get<std::size_t>();
        ds.input_shape = meta.at("input_shape").get<std::vector<std::size_t>>();
        level_sizes = meta.at("level_sizes").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir + "/meta.json: malformed field: " + std::string(e.what()));
    }
    ds.hierarchy = TreeHierarchy::load(dir + "/hierarchy.json");
    if (ds.hierarchy->level_sizes() != level_sizes)
        throw DataError(dir + ": meta level_sizes disagree with hierarchy.json");

    ds.inputs = io::read_f32(dir + "/data.f32", n * ds.sample_size());
    ds.labels = io::read_u32(dir + "/labels.u32", n * ds.hierarchy->depth());
    for (std::size_t i = 0; i < ds.inputs.size(); ++i)
        if (!std::isfinite(ds.inputs[i]))
            throw DataError(dir + "/data.f32: non-finite value at index " +
                            std::to_string(i));
    validate_labels(ds);
    return ds;
}

inline InputMode input_mode_from(const std::string& s) {
    if (s == "vector") return InputMode::Vector;
    if (s == "image") return InputMode::Image;
    throw ConfigError("unknown input mode \"" + s + "\" (vector|image)");
}

// Synth spec JSON:
// {"hierarchy": {"balanced":[...]} | {"level_sizes":[...],"parents":[[...]]},
//  "samples_per_leaf":..,"mode":"vector"|"image","sigma_between":..,
//  "sigma_within":..,"noise":..,"seed":..,"vector_dim":..,"image_size":..}
inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("synth spec: expected a JSON object");
    SynthSpec spec;
    for (const auto& [key, _] : j.items()) {
        if (key != "hierarchy" && key != "samples_per_leaf" && key != "mode" &&
            key != "sigma_between" && key != "sigma_within" && key != "noise" &&
            key != "seed" && key != "vector_dim" && key != "image_size")
            throw ConfigError("synth spec: unknown key \"" + key + "\"");
    }
    if (!j.contains("hierarchy")) throw ConfigError("synth spec: missing \"hierarchy\"");
    const auto& hj = j.at("hierarchy");
    for (const auto& [key, _] : hj.items())
        if (key != "balanced" && key != "level_sizes" && key != "parents")
            throw ConfigError("synth spec: unknown hierarchy key \"" + key + "\"");
    try {
        if (hj.contains("balanced")) {
            spec.branching = hj.at("balanced").get<std::vector<std::size_t>>();
        } else {
            spec.level_sizes = hj.at("level_sizes").get<std::vector<std::size_t>>();
            spec.parents = hj.at("parents").get<std::vector<std::vector<std::uint32_t>>>();
        }
        spec.samples_per_leaf = j.value("samples_per_leaf", spec.samples_per_leaf);
        if (j.contains("mode")) spec.mode = input_mode_from(j.at("mode").get<std::string>());
        spec.sigma_between = j.value("sigma_between", spec.sigma_between);
        spec.sigma_within = j.value("sigma_within", spec.sigma_within);
        spec.noise = j.value("noise", spec.noise);
        spec.seed = j.value("seed", spec.seed);
        spec.vector_dim = j.value("vector_dim", spec.vector_dim);
        spec.image_size = j.value("image_size", spec.image_size);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("synth spec: malformed field: " + std::string(e.what()));
    }
    return spec;
}

}  // namespace chbc::data
