#pragma once

#include <string>
#include <utility>
#include <vector>

#include "chbc/error.hpp"
#include "chbc/tensor.hpp"

// Multi-granularity enhancement: orthogonal decomposition of attention masks
// and feature maps across hierarchy levels, CAM attention generation, and
// mask-feature fusion.

namespace chbc::mge {

enum class ModStrategy { MatOrth, AddAll, AddPre };
enum class LevelSource { Previous, First };

struct EnhancementConfig {
    double alpha = 0.4;
    ModStrategy strategy = ModStrategy::MatOrth;
    LevelSource attention_source = LevelSource::Previous;
    LevelSource feature_source = LevelSource::First;
};

constexpr double kModEps = 1e-8;

namespace detail {

inline Tensor as_4d(const Tensor& t) {
    if (t.rank() == 4) return t;
    if (t.rank() == 3) return reshape(t, {t.dim(0), 1, t.dim(1), t.dim(2)});
    throw DimensionError("mge: expected B x H x W or B x C x H x W, got " +
                         shape_str(t.shape()));
}

}  // namespace detail

// Removes from the fine matrix its projection onto the coarse matrix:
//   m_orth = m_fine - <m_fine, m_coarse> / (<m_coarse, m_coarse> + eps) * m_coarse
// with inner products over spatial positions, applied independently per
// (sample, channel) slice. Differentiable through both inputs. The eps in
// the denominator makes an all-zero coarse matrix a no-op up to O(eps).
inline Tensor mod(const Tensor& fine, const Tensor& coarse) {
    if (fine.shape() != coarse.shape())
        throw DimensionError("mod: shape mismatch " + shape_str(fine.shape()) + " vs " +
                             shape_str(coarse.shape()));
    const Tensor f = detail::as_4d(fine);
    const Tensor g = detail::as_4d(coarse);
    const Tensor num = sum_spatial(mul(f, g));                        // B x C
    const Tensor den = add_const(sum_spatial(mul(g, g)), kModEps);    // B x C
    const Tensor coeff = div(num, den);
    const Tensor out = sub(f, scale_channels(g, coeff));
    return fine.rank() == 3 ? reshape(out, fine.shape()) : out;
}

// m + alpha * m_orth.
inline Tensor enhance(const Tensor& m, const Tensor& orth, double alpha) {
    if (m.shape() != orth.shape())
        throw DimensionError("enhance: shape mismatch " + shape_str(m.shape()) + " vs " +
                             shape_str(orth.shape()));
    return add(m, scalar_mul(orth, alpha));
}

// CAM spatial attention: weight the feature channels by the chosen class's
// column of the attention head (weights stored C x K, input-major), then
// min-max normalize each sample's map to [0,1]; flat maps become 0.5.
inline Tensor cam_attention(const Tensor& feature_map, const Tensor& head_weights,
                            const std::vector<std::size_t>& class_per_sample) {
    return minmax_normalize(cam_project(feature_map, head_weights, class_per_sample));
}

// Raw per-level outputs, prior to enhancement.
struct LevelTensors {
    std::vector<Tensor> attention;  // A_1..A_h, each B x H x W
    std::vector<Tensor> features;   // F_1..F_h, each B x C x H x W
};

namespace detail {

inline Tensor source_for(const std::vector<Tensor>& ms, std::size_t level,
                         LevelSource src) {
    return src == LevelSource::Previous ? ms[level - 2] : ms[0];
}

inline Tensor enhanced(const std::vector<Tensor>& ms, std::size_t level,
                       LevelSource src, ModStrategy strategy, double alpha) {
    const Tensor& cur = ms[level - 1];
    switch (strategy) {
        case ModStrategy::MatOrth:
            return enhance(cur, mod(cur, source_for(ms, level, src)), alpha);
        case ModStrategy::AddPre:
            return enhance(cur, source_for(ms, level, src), alpha);
        case ModStrategy::AddAll: {
            Tensor acc = ms[0];
            for (std::size_t k = 1; k + 1 < level; ++k) acc = add(acc, ms[k]);
            return enhance(cur, acc, alpha);
        }
    }
    throw ContractError("enhance_level: unhandled strategy");
}

}  // namespace detail

// Enhanced (A'_i, F'_i) for one level. Level 1 passes through unchanged
// since there is nothing coarser to decompose against; deeper levels are
// enhanced against the configured source levels using the raw (unenhanced)
// per-level tensors.
inline std::pair<Tensor, Tensor> enhance_level(const LevelTensors& levels,
                                               std::size_t level,
                                               const EnhancementConfig& cfg) {
    const std::size_t h = levels.attention.size();
    if (level < 1 || level > h)
        throw ParameterError("enhance_level: level " + std::to_string(level) +
                             " out of range [1, " + std::to_string(h) + "]");
    if (level == 1) return {levels.attention[0], levels.features[0]};
    return {detail::enhanced(levels.attention, level, cfg.attention_source,
                             cfg.strategy, cfg.alpha),
            detail::enhanced(levels.features, level, cfg.feature_source,
                             cfg.strategy, cfg.alpha)};
}

// Channel-broadcast Hadamard gate of enhanced features by the enhanced mask.
inline Tensor fuse(const Tensor& features, const Tensor& mask) {
    return broadcast_mul(features, mask);
}

inline ModStrategy mod_strategy_from(const std::string& s) {
    if (s == "MatOrth") return ModStrategy::MatOrth;
    if (s == "AddAll") return ModStrategy::AddAll;
    if (s == "AddPre") return ModStrategy::AddPre;
    throw ConfigError("unknown MGE strategy \"" + s + "\" (MatOrth|AddAll|AddPre)");
}

inline LevelSource level_source_from(const std::string& s) {
    if (s == "previous") return LevelSource::Previous;
    if (s == "first") return LevelSource::First;
    throw ConfigError("unknown level source \"" + s + "\" (previous|first)");
}

inline const char* to_string(ModStrategy s) {
    switch (s) {
        case ModStrategy::MatOrth: return "MatOrth";
        case ModStrategy::AddAll: return "AddAll";
        case ModStrategy::AddPre: return "AddPre";
    }
    return "?";
}

inline const char* to_string(LevelSource s) {
    return s == LevelSource::Previous ? "previous" : "first";
}

}  // namespace chbc::mge
