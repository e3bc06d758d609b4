#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chbc/cbc.hpp"
#include "chbc/data.hpp"
#include "chbc/error.hpp"
#include "chbc/hierarchy.hpp"
#include "chbc/io.hpp"
#include "chbc/metrics.hpp"
#include "chbc/mge.hpp"
#include "chbc/tensor.hpp"

// The full network: a shared conv trunk, one attention + predict submodule
// pair per hierarchy level, per-level classifier heads, and a concatenated
// head over all pooled level features. Losses combine per-head cross-entropy
// with the bidirectional consistency term.

namespace chbc {

struct ModelConfig {
    std::vector<std::size_t> input_shape;     // {C_in, H, W}
    std::vector<std::size_t> trunk_channels;  // conv widths; last is the shared C
    std::vector<std::size_t> trunk_strides;   // per conv; all kernels 3x3, pad 1
    std::size_t submodule_layers = 2;         // stride-1 convs per submodule
    std::uint64_t seed = 0;
};

// Mean cross-entropy with natural log over a batch of logits rows.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::uint32_t>& y) {
    if (logits.rank() != 2)
        throw DimensionError("cross_entropy: expected 2-d logits, got " +
                             shape_str(logits.shape()));
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (y.size() != B)
        throw DimensionError("cross_entropy: " + std::to_string(y.size()) +
                             " labels for batch " + std::to_string(B));
    std::vector<double> mask(B * C, 0.0);
    for (std::size_t i = 0; i < B; ++i) {
        if (y[i] >= C)
            throw ParameterError("cross_entropy: label index " + std::to_string(y[i]) +
                                 " >= " + std::to_string(C));
        mask[i * C + y[i]] = -1.0 / static_cast<double>(B);
    }
    const Tensor logp = log(softmax_t(logits, 1.0), 1e-8);
    return sum_all(mul(logp, Tensor::from({B, C}, std::move(mask))));
}

inline std::vector<std::size_t> argmax_rows(const Tensor& t) {
    const std::size_t B = t.dim(0), C = t.dim(1);
    std::vector<std::size_t> out(B, 0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 1; j < C; ++j)
            if (t.values()[i * C + j] > t.values()[i * C + out[i]]) out[i] = j;
    return out;
}

class ChbcModel {
  public:
    struct ConvLayer {
        Tensor w;  // out x in x 3 x 3
        Tensor b;  // out
        std::size_t stride = 1;
    };
    struct LinearLayer {
        Tensor w;  // in x out
        Tensor b;  // out
    };

    ChbcModel(std::shared_ptr<const TreeHierarchy> hierarchy, ModelConfig cfg,
              mge::EnhancementConfig ecfg = {}, cbc::ConsistencyConfig ccfg = {},
              bool mge_enabled = true, bool cbc_enabled = true)
        : th_(std::move(hierarchy)),
          cfg_(std::move(cfg)),
          ecfg_(ecfg),
          ccfg_(ccfg),
          mge_enabled_(mge_enabled),
          cbc_enabled_(cbc_enabled) {
        validate_config();
        std::mt19937_64 rng(cfg_.seed);
        const std::size_t h = th_->depth();

        std::size_t in_c = cfg_.input_shape[0];
        for (std::size_t l = 0; l < cfg_.trunk_channels.size(); ++l) {
            trunk_.push_back(make_conv(in_c, cfg_.trunk_channels[l], cfg_.trunk_strides[l],
                                       "trunk." + std::to_string(l), rng));
            in_c = cfg_.trunk_channels[l];
        }
        const std::size_t C = feat_channels();
        levels_.resize(h);
        for (std::size_t i = 0; i < h; ++i) {
            const std::string base = "level" + std::to_string(i + 1);
            for (std::size_t l = 0; l < cfg_.submodule_layers; ++l)
                levels_[i].attn.push_back(
                    make_conv(C, C, 1, base + ".attn." + std::to_string(l), rng));
            levels_[i].attn_head =
                make_linear(C, th_->level_size(i + 1), base + ".attn_head", rng);
            for (std::size_t l = 0; l < cfg_.submodule_layers; ++l)
                levels_[i].pred.push_back(
                    make_conv(C, C, 1, base + ".pred." + std::to_string(l), rng));
        }
        for (std::size_t i = 0; i < h; ++i)
            heads_.push_back(
                make_linear(C, th_->level_size(i + 1), "head." + std::to_string(i + 1), rng));
        head_all_ = make_linear(C * h, th_->finest_size(), "head.all", rng);
    }

    const TreeHierarchy& hierarchy() const { return *th_; }
    std::shared_ptr<const TreeHierarchy> hierarchy_ptr() const { return th_; }
    const ModelConfig& config() const { return cfg_; }
    const mge::EnhancementConfig& enhancement_config() const { return ecfg_; }
    const cbc::ConsistencyConfig& consistency_config() const { return ccfg_; }
    bool mge_enabled() const { return mge_enabled_; }
    bool cbc_enabled() const { return cbc_enabled_; }
    std::size_t feat_channels() const { return cfg_.trunk_channels.back(); }

    // Spatial grid of the shared features.
    std::pair<std::size_t, std::size_t> feat_grid() const {
        std::size_t H = cfg_.input_shape[1], W = cfg_.input_shape[2];
        for (std::size_t s : cfg_.trunk_strides) {
            H = (H - 1) / s + 1;
            W = (W - 1) / s + 1;
        }
        return {H, W};
    }

    // Stable, ordered parameter manifest.
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    struct Forward {
        std::vector<Tensor> logits;       // per level, B x c_i
        Tensor logits_all;                // B x c_h
        std::vector<Tensor> attn_logits;  // per level; empty when MGE disabled
        mge::LevelTensors raw;            // A_i (B x H x W), F_i (B x C x H x W)
        std::vector<Tensor> enhanced_attention;  // A'_i
        std::vector<Tensor> enhanced_features;   // F'_i
        std::vector<Tensor> fused;               // gated features per level
        std::vector<Tensor> pooled;              // F^p_i, B x C
        Tensor pooled_all;                       // B x C*h
        cbc::LevelDistributions dists;
    };

    // labels: B x h row-major, required in training mode (ground-truth CAM
    // class selection); evaluation selects the attention head's argmax.
    Forward forward(const Tensor& x, const std::vector<std::uint32_t>* labels,
                    bool training) const {
        if (x.rank() != 4 || x.dim(1) != cfg_.input_shape[0] ||
            x.dim(2) != cfg_.input_shape[1] || x.dim(3) != cfg_.input_shape[2])
            throw DimensionError("forward: input " + shape_str(x.shape()) +
                                 " does not match configured shape");
        const std::size_t B = x.dim(0);
        const std::size_t h = th_->depth();
        if (training && !labels)
            throw ContractError("forward: training mode requires labels");
        if (labels && labels->size() != B * h)
            throw DimensionError("forward: " + std::to_string(labels->size()) +
                                 " labels for batch " + std::to_string(B) + " x depth " +
                                 std::to_string(h));

        Forward out;
        const Tensor shared = run_stack(x, trunk_);

        for (std::size_t i = 0; i < h; ++i) {
            out.raw.features.push_back(run_stack(shared, levels_[i].pred));
            if (!mge_enabled_) continue;
            const Tensor attn_feat = run_stack(shared, levels_[i].attn);
            const Tensor attn_logits = linear(avg_pool_spatial(attn_feat),
                                              levels_[i].attn_head);
            out.attn_logits.push_back(attn_logits);
            std::vector<std::size_t> classes;
            if (training) {
                classes.resize(B);
                for (std::size_t b = 0; b < B; ++b) classes[b] = (*labels)[b * h + i];
            } else {
                classes = argmax_rows(attn_logits);
            }
            out.raw.attention.push_back(
                mge::cam_attention(attn_feat, levels_[i].attn_head.w, classes));
        }

        for (std::size_t i = 1; i <= h; ++i) {
            if (mge_enabled_) {
                auto [a_enh, f_enh] = mge::enhance_level(out.raw, i, ecfg_);
                out.enhanced_attention.push_back(a_enh);
                out.enhanced_features.push_back(f_enh);
                out.fused.push_back(mge::fuse(f_enh, a_enh));
            } else {
                out.fused.push_back(out.raw.features[i - 1]);
            }
            out.pooled.push_back(avg_pool_spatial(out.fused.back()));
            out.logits.push_back(linear(out.pooled.back(), heads_[i - 1]));
        }
        out.pooled_all = concat_channels(out.pooled);
        out.logits_all = linear(out.pooled_all, head_all_);

        out.dists.temperature = ccfg_.temperature;
        for (std::size_t i = 0; i < h; ++i)
            out.dists.s.push_back(softmax_t(out.logits[i], ccfg_.temperature));
        out.dists.s_all = softmax_t(out.logits_all, ccfg_.temperature);
        return out;
    }

    // Sum of per-level head cross-entropies, the concatenated head's
    // cross-entropy against the finest labels, and (with MGE active) the
    // attention heads' auxiliary cross-entropy that supervises the CAM
    // weights.
    Tensor classification_loss(const Forward& fwd, const std::vector<std::uint32_t>& labels) const {
        const std::size_t h = th_->depth();
        const std::size_t B = fwd.logits[0].dim(0);
        Tensor total;
        std::vector<std::uint32_t> y(B);
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t b = 0; b < B; ++b) y[b] = labels[b * h + i];
            Tensor t = cross_entropy_mean(fwd.logits[i], y);
            if (mge_enabled_) t = add(t, cross_entropy_mean(fwd.attn_logits[i], y));
            total = total.defined() ? add(total, t) : t;
        }
        for (std::size_t b = 0; b < B; ++b) y[b] = labels[b * h + (h - 1)];
        return add(total, cross_entropy_mean(fwd.logits_all, y));
    }

    Tensor consistency_term(const Forward& fwd) const {
        return cbc::consistency_loss(fwd.dists, *th_, ccfg_);
    }

    struct Losses {
        Tensor cls;
        Tensor con;    // constant zero when CBC is disabled
        Tensor total;  // cls + con, unweighted
    };

    Losses losses(const Forward& fwd, const std::vector<std::uint32_t>& labels) const {
        Losses out;
        out.cls = classification_loss(fwd, labels);
        if (cbc_enabled_) {
            out.con = consistency_term(fwd);
            out.total = add(out.cls, out.con);
        } else {
            out.con = Tensor::scalar(0.0);
            out.total = out.cls;
        }
        return out;
    }

    Losses total_loss(const Tensor& x, const std::vector<std::uint32_t>& labels) const {
        return losses(forward(x, &labels, true), labels);
    }

    // --- Checkpoint format --------------------------------------------------
    // Directory with manifest.json (format version, ordered parameter names
    // and shapes, configs) and params.f32 (float32, manifest order).

    void save_checkpoint(const std::string& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        nlohmann::json manifest;
        manifest["format_version"] = 1;
        nlohmann::json plist = nlohmann::json::array();
        std::vector<float> packed;
        for (const auto& [name, p] : params_) {
            plist.push_back({{"name", name}, {"shape", p.shape()}});
            for (double v : p.values()) packed.push_back(static_cast<float>(v));
        }
        manifest["params"] = plist;
        manifest["level_sizes"] = th_->level_sizes();
        manifest["model"] = model_config_json();
        manifest["mge"] = mge_config_json();
        manifest["cbc"] = cbc_config_json();
        std::ofstream mf(dir + "/manifest.json");
        if (!mf) throw DataError("cannot write " + dir + "/manifest.json");
        mf << manifest.dump(2) << "\n";
        io::write_f32(dir + "/params.f32", packed);
    }

    static ChbcModel load_checkpoint(const std::string& dir,
                                     std::shared_ptr<const TreeHierarchy> th) {
        std::ifstream mf(dir + "/manifest.json");
        if (!mf) throw DataError("cannot open " + dir + "/manifest.json");
        nlohmann::json manifest;
        try {
            mf >> manifest;
        } catch (const nlohmann::json::exception& e) {
            throw DataError(dir + "/manifest.json: invalid JSON: " + std::string(e.what()));
        }
        if (manifest.value("format_version", 0) != 1)
            throw DataError(dir + ": unsupported checkpoint format_version");
        if (manifest.at("level_sizes").get<std::vector<std::size_t>>() != th->level_sizes())
            throw DataError(dir + ": checkpoint level sizes disagree with hierarchy");

        ModelConfig cfg = model_config_from_json(manifest.at("model"));
        auto [ecfg, mge_on] = mge_config_from_json(manifest.at("mge"));
        auto [ccfg, cbc_on] = cbc_config_from_json(manifest.at("cbc"));
        ChbcModel model(std::move(th), std::move(cfg), ecfg, ccfg, mge_on, cbc_on);

        const auto& plist = manifest.at("params");
        if (plist.size() != model.params_.size())
            throw DataError(dir + ": checkpoint has " + std::to_string(plist.size()) +
                            " parameters, model expects " +
                            std::to_string(model.params_.size()));
        std::size_t total = 0;
        for (std::size_t i = 0; i < plist.size(); ++i) {
            const auto name = plist[i].at("name").get<std::string>();
            const auto shape = plist[i].at("shape").get<std::vector<std::size_t>>();
            if (name != model.params_[i].first || shape != model.params_[i].second.shape())
                throw DataError(dir + ": parameter " + std::to_string(i) + " (" + name +
                                ") does not match model manifest");
            total += numel_of(shape);
        }
        const std::vector<float> packed = io::read_f32(dir + "/params.f32", total);
        std::size_t off = 0;
        for (auto& [name, p] : model.params_) {
            auto& vals = p.data();
            for (std::size_t k = 0; k < vals.size(); ++k)
                vals[k] = static_cast<double>(packed[off + k]);
            off += vals.size();
        }
        return model;
    }

    nlohmann::json model_config_json() const {
        return nlohmann::json{{"input_shape", cfg_.input_shape},
                              {"trunk_channels", cfg_.trunk_channels},
                              {"trunk_strides", cfg_.trunk_strides},
                              {"submodule_layers", cfg_.submodule_layers},
                              {"seed", cfg_.seed}};
    }
    nlohmann::json mge_config_json() const {
        return nlohmann::json{{"enabled", mge_enabled_},
                              {"alpha", ecfg_.alpha},
                              {"strategy", mge::to_string(ecfg_.strategy)},
                              {"attention_source", mge::to_string(ecfg_.attention_source)},
                              {"feature_source", mge::to_string(ecfg_.feature_source)}};
    }
    nlohmann::json cbc_config_json() const {
        return nlohmann::json{{"enabled", cbc_enabled_},
                              {"strategy", cbc::to_string(ccfg_.strategy)},
                              {"distance", cbc::to_string(ccfg_.distance)},
                              {"temperature", ccfg_.temperature}};
    }

    static ModelConfig model_config_from_json(const nlohmann::json& j) {
        for (const auto& [key, _] : j.items())
            if (key != "input_shape" && key != "trunk_channels" && key != "trunk_strides" &&
                key != "submodule_layers" && key != "seed")
                throw ConfigError("model config: unknown key \"" + key + "\"");
        ModelConfig cfg;
        try {
            if (j.contains("input_shape"))
                cfg.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
            if (j.contains("trunk_channels"))
                cfg.trunk_channels = j.at("trunk_channels").get<std::vector<std::size_t>>();
            if (j.contains("trunk_strides"))
                cfg.trunk_strides = j.at("trunk_strides").get<std::vector<std::size_t>>();
            cfg.submodule_layers = j.value("submodule_layers", cfg.submodule_layers);
            cfg.seed = j.value("seed", cfg.seed);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("model config: malformed field: " + std::string(e.what()));
        }
        return cfg;
    }

    static std::pair<mge::EnhancementConfig, bool> mge_config_from_json(
        const nlohmann::json& j) {
        for (const auto& [key, _] : j.items())
            if (key != "enabled" && key != "alpha" && key != "strategy" &&
                key != "attention_source" && key != "feature_source")
                throw ConfigError("mge config: unknown key \"" + key + "\"");
        mge::EnhancementConfig cfg;
        bool enabled = true;
        try {
            enabled = j.value("enabled", true);
            cfg.alpha = j.value("alpha", cfg.alpha);
            if (!std::isfinite(cfg.alpha) || cfg.alpha < 0.0)
                throw ConfigError("mge config: alpha must be finite and >= 0");
            if (j.contains("strategy"))
                cfg.strategy = mge::mod_strategy_from(j.at("strategy").get<std::string>());
            if (j.contains("attention_source"))
                cfg.attention_source =
                    mge::level_source_from(j.at("attention_source").get<std::string>());
            if (j.contains("feature_source"))
                cfg.feature_source =
                    mge::level_source_from(j.at("feature_source").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("mge config: malformed field: " + std::string(e.what()));
        }
        return {cfg, enabled};
    }

    static std::pair<cbc::ConsistencyConfig, bool> cbc_config_from_json(
        const nlohmann::json& j) {
        for (const auto& [key, _] : j.items())
            if (key != "enabled" && key != "strategy" && key != "distance" &&
                key != "temperature")
                throw ConfigError("cbc config: unknown key \"" + key + "\"");
        cbc::ConsistencyConfig cfg;
        bool enabled = true;
        try {
            enabled = j.value("enabled", true);
            if (j.contains("strategy"))
                cfg.strategy = cbc::strategy_from(j.at("strategy").get<std::string>());
            if (j.contains("distance"))
                cfg.distance = cbc::distance_from(j.at("distance").get<std::string>());
            cfg.temperature = j.value("temperature", cfg.temperature);
            if (cfg.temperature <= 0.0)
                throw ConfigError("cbc config: temperature must be > 0");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("cbc config: malformed field: " + std::string(e.what()));
        }
        return {cfg, enabled};
    }

  private:
    struct LevelModules {
        std::vector<ConvLayer> attn;
        LinearLayer attn_head;
        std::vector<ConvLayer> pred;
    };

    void validate_config() const {
        if (th_->depth() < 2) throw ConfigError("model: hierarchy depth must be >= 2");
        if (cfg_.input_shape.size() != 3)
            throw ConfigError("model: input_shape must be {channels, height, width}");
        for (std::size_t d : cfg_.input_shape)
            if (d == 0) throw ConfigError("model: input dimensions must be >= 1");
        if (cfg_.trunk_channels.empty())
            throw ConfigError("model: trunk needs at least one conv layer");
        if (cfg_.trunk_strides.size() != cfg_.trunk_channels.size())
            throw ConfigError("model: trunk_strides and trunk_channels length mismatch");
        for (std::size_t c : cfg_.trunk_channels)
            if (c == 0) throw ConfigError("model: trunk widths must be >= 1");
        for (std::size_t s : cfg_.trunk_strides)
            if (s == 0) throw ConfigError("model: strides must be >= 1");
        const auto [H, W] = feat_grid();
        if (H < 2 || W < 2)
            throw ConfigError("model: shared feature grid " + std::to_string(H) + "x" +
                              std::to_string(W) + " is too small; CAM needs >= 2x2");
    }

    ConvLayer make_conv(std::size_t in_c, std::size_t out_c, std::size_t stride,
                        const std::string& name, std::mt19937_64& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in_c * 9));
        ConvLayer layer;
        layer.w = rand_uniform({out_c, in_c, 3, 3}, -bound, bound, rng, true);
        layer.b = Tensor::zeros({out_c}, true);
        layer.stride = stride;
        params_.emplace_back(name + ".w", layer.w);
        params_.emplace_back(name + ".b", layer.b);
        return layer;
    }

    LinearLayer make_linear(std::size_t in_c, std::size_t out_c, const std::string& name,
                            std::mt19937_64& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(in_c));
        LinearLayer layer;
        layer.w = rand_uniform({in_c, out_c}, -bound, bound, rng, true);
        layer.b = Tensor::zeros({out_c}, true);
        params_.emplace_back(name + ".w", layer.w);
        params_.emplace_back(name + ".b", layer.b);
        return layer;
    }

    static Tensor run_stack(const Tensor& x, const std::vector<ConvLayer>& stack) {
        Tensor cur = x;
        for (const auto& layer : stack)
            cur = relu(add_channel_bias(conv2d(cur, layer.w, layer.stride, 1), layer.b));
        return cur;
    }

    static Tensor linear(const Tensor& x, const LinearLayer& l) {
        return add_row_bias(matmul(x, l.w), l.b);
    }

    std::shared_ptr<const TreeHierarchy> th_;
    ModelConfig cfg_;
    mge::EnhancementConfig ecfg_;
    cbc::ConsistencyConfig ccfg_;
    bool mge_enabled_;
    bool cbc_enabled_;

    std::vector<ConvLayer> trunk_;
    std::vector<LevelModules> levels_;
    std::vector<LinearLayer> heads_;
    LinearLayer head_all_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// Snap parameter values to float32-representable doubles, matching the
// checkpoint storage format so that save/load round-trips are bitwise.
inline void snap_params_to_f32(std::vector<std::pair<std::string, Tensor>>& params) {
    for (auto& [name, p] : params)
        for (auto& v : p.data()) v = static_cast<double>(static_cast<float>(v));
}

// Batch rows of a dataset as a 4-d input tensor, reshaping flat feature
// vectors onto the model's input grid.
inline Tensor make_batch(const data::Dataset& ds, const std::vector<std::size_t>& indices,
                         const std::vector<std::size_t>& input_shape) {
    const std::size_t sample = ds.sample_size();
    if (numel_of({input_shape[0], input_shape[1], input_shape[2]}) != sample)
        throw ConfigError("dataset sample size " + std::to_string(sample) +
                          " does not match model input shape");
    std::vector<double> vals(indices.size() * sample);
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t k = 0; k < sample; ++k)
            vals[i * sample + k] = static_cast<double>(ds.inputs[indices[i] * sample + k]);
    return Tensor::from({indices.size(), input_shape[0], input_shape[1], input_shape[2]},
                        std::move(vals));
}

inline std::vector<std::uint32_t> gather_labels(const data::Dataset& ds,
                                                const std::vector<std::size_t>& indices) {
    const std::size_t h = ds.hierarchy->depth();
    std::vector<std::uint32_t> out(indices.size() * h);
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t l = 0; l < h; ++l) out[i * h + l] = ds.labels[indices[i] * h + l];
    return out;
}

// Batched evaluation over a dataset; per-level head logits are the scores.
inline metrics::EvalReport evaluate(const ChbcModel& model, const data::Dataset& ds,
                                    std::size_t batch_size = 64) {
    const std::size_t h = model.hierarchy().depth();
    const std::size_t n = ds.num_samples();
    std::vector<std::vector<double>> scores(h);
    for (std::size_t l = 0; l < h; ++l)
        scores[l].reserve(n * model.hierarchy().level_size(l + 1));
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i)
            idx.push_back(i);
        const Tensor x = make_batch(ds, idx, model.config().input_shape);
        const auto fwd = model.forward(x, nullptr, false);
        for (std::size_t l = 0; l < h; ++l)
            scores[l].insert(scores[l].end(), fwd.logits[l].values().begin(),
                             fwd.logits[l].values().end());
    }
    return metrics::build_report(scores, ds.labels, model.hierarchy());
}

}  // namespace chbc
