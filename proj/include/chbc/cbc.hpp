#pragma once

#include <string>
#include <vector>

#include "chbc/error.hpp"
#include "chbc/hierarchy.hpp"
#include "chbc/tensor.hpp"

// Cross-hierarchical bidirectional consistency: project per-level predicted
// distributions through the tree's adjacency matrices in both directions,
// combine them, and measure the divergence from each level's own prediction.

namespace chbc::cbc {

enum class Strategy { All, Neighbor, Finest };
enum class Distance { JS, KL };

struct ConsistencyConfig {
    Strategy strategy = Strategy::All;
    Distance distance = Distance::JS;
    double temperature = 2.0;
};

// Per-level probability vectors after temperature softmax: s[i] over c_{i+1}
// classes, plus the auxiliary finest-dimension distribution from the
// concatenated head.
struct LevelDistributions {
    std::vector<Tensor> s;  // s_1..s_h, each [c_i] or [B x c_i]
    Tensor s_all;           // over c_h
    double temperature = 2.0;
};

constexpr double kLogEps = 1e-8;

namespace detail {

inline Tensor adjacency_tensor(const AdjacencyMatrix& d, bool transposed) {
    std::vector<double> vals;
    vals.reserve(d.m.size());
    if (!transposed) {
        for (std::int64_t v : d.m) vals.push_back(static_cast<double>(v));
        return Tensor::from({d.rows, d.cols}, std::move(vals));
    }
    vals.resize(d.m.size());
    for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t c = 0; c < d.cols; ++c)
            vals[c * d.rows + r] = static_cast<double>(d.at(r, c));
    return Tensor::from({d.cols, d.rows}, std::move(vals));
}

inline Tensor as_rows(const Tensor& s) {
    if (s.rank() == 1) return reshape(s, {1, s.dim(0)});
    if (s.rank() == 2) return s;
    throw DimensionError("cbc: expected a distribution vector or batch, got " +
                         shape_str(s.shape()));
}

inline Tensor match_rank(const Tensor& out, const Tensor& like) {
    return like.rank() == 1 ? reshape(out, {out.dim(1)}) : out;
}

// Batch-mean KL(p || q) with eps-floored logs.
inline Tensor kl_rows(const Tensor& p, const Tensor& q) {
    const Tensor t = mul(p, sub(log(p, kLogEps), log(q, kLogEps)));
    return scalar_mul(sum_all(t), 1.0 / static_cast<double>(p.dim(0)));
}

}  // namespace detail

// Expand a coarse distribution to the fine dimension: s x D_{i,j}, then
// renormalize rows to sum to 1. Differentiable w.r.t. s.
inline Tensor coarse_to_fine(const Tensor& s, const AdjacencyMatrix& d) {
    const Tensor rows = detail::as_rows(s);
    if (rows.dim(1) != d.rows)
        throw DimensionError("coarse_to_fine: distribution width " +
                             std::to_string(rows.dim(1)) + " vs D rows " +
                             std::to_string(d.rows));
    const Tensor out = normalize_rows(matmul(rows, detail::adjacency_tensor(d, false)));
    return detail::match_rank(out, s);
}

// Congregate a fine distribution onto ancestors: s x D_{i,j}^T. Every fine
// class has exactly one ancestor, so mass is conserved with no
// renormalization.
inline Tensor fine_to_coarse(const Tensor& s, const AdjacencyMatrix& d) {
    const Tensor rows = detail::as_rows(s);
    if (rows.dim(1) != d.cols)
        throw DimensionError("fine_to_coarse: distribution width " +
                             std::to_string(rows.dim(1)) + " vs D cols " +
                             std::to_string(d.cols));
    const Tensor out = matmul(rows, detail::adjacency_tensor(d, true));
    return detail::match_rank(out, s);
}

// Jensen-Shannon divergence, 0 <= JS <= ln 2, symmetric, zero iff p == q.
// Batched inputs return the mean over rows.
inline Tensor js_divergence(const Tensor& p, const Tensor& q) {
    if (p.shape() != q.shape())
        throw DimensionError("js_divergence: shape mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(q.shape()));
    const Tensor pr = detail::as_rows(p);
    const Tensor qr = detail::as_rows(q);
    const Tensor m = scalar_mul(add(pr, qr), 0.5);
    return scalar_mul(add(detail::kl_rows(pr, m), detail::kl_rows(qr, m)), 0.5);
}

inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
    if (p.shape() != q.shape())
        throw DimensionError("kl_divergence: shape mismatch " + shape_str(p.shape()) +
                             " vs " + shape_str(q.shape()));
    return detail::kl_rows(detail::as_rows(p), detail::as_rows(q));
}

namespace detail {

inline std::vector<std::size_t> contributor_set(std::size_t level, std::size_t h,
                                                Strategy strategy) {
    std::vector<std::size_t> ks;
    switch (strategy) {
        case Strategy::All:
            for (std::size_t k = 1; k <= h; ++k)
                if (k != level) ks.push_back(k);
            break;
        case Strategy::Neighbor:
            if (level > 1) ks.push_back(level - 1);
            if (level < h) ks.push_back(level + 1);
            break;
        case Strategy::Finest:
            if (level < h) {
                ks.push_back(h);
            } else {
                for (std::size_t k = 1; k < h; ++k) ks.push_back(k);
            }
            break;
    }
    return ks;
}

}  // namespace detail

// Combined distribution for one level: the mean of all contributing levels'
// projections into this level's dimension (each summand is itself a
// distribution, so dividing by the contributor count normalizes the sum).
inline Tensor combined_distribution(const LevelDistributions& dists, std::size_t level,
                                    const TreeHierarchy& th, const ConsistencyConfig& cfg) {
    const std::size_t h = th.depth();
    if (level < 1 || level > h)
        throw ParameterError("combined_distribution: level " + std::to_string(level) +
                             " out of range [1, " + std::to_string(h) + "]");
    const auto ks = detail::contributor_set(level, h, cfg.strategy);
    Tensor acc;
    for (std::size_t k : ks) {
        Tensor part = k < level ? coarse_to_fine(dists.s[k - 1], *th.adjacency(k, level))
                                : fine_to_coarse(dists.s[k - 1], *th.adjacency(level, k));
        acc = acc.defined() ? add(acc, part) : part;
    }
    return scalar_mul(acc, 1.0 / static_cast<double>(ks.size()));
}

// Total consistency loss: one divergence term per level between its own
// distribution and the combined one, plus a term for the concatenated head,
// which lives in the finest dimension and shares the finest level's
// combined distribution.
inline Tensor consistency_loss(const LevelDistributions& dists, const TreeHierarchy& th,
                               const ConsistencyConfig& cfg) {
    const std::size_t h = th.depth();
    if (dists.s.size() != h)
        throw DimensionError("consistency_loss: " + std::to_string(dists.s.size()) +
                             " level distributions for depth " + std::to_string(h));
    auto term = [&](const Tensor& a, const Tensor& b) {
        return cfg.distance == Distance::JS ? js_divergence(a, b) : kl_divergence(a, b);
    };
    Tensor total;
    Tensor combined_finest;
    for (std::size_t l = 1; l <= h; ++l) {
        const Tensor combined = combined_distribution(dists, l, th, cfg);
        if (l == h) combined_finest = combined;
        const Tensor t = term(dists.s[l - 1], combined);
        total = total.defined() ? add(total, t) : t;
    }
    total = add(total, term(dists.s_all, combined_finest));
    return total;
}

inline Strategy strategy_from(const std::string& s) {
    if (s == "All" || s == "all") return Strategy::All;
    if (s == "Neighbor" || s == "neighbor") return Strategy::Neighbor;
    if (s == "Finest" || s == "finest") return Strategy::Finest;
    throw ConfigError("unknown CBC strategy \"" + s + "\" (all|neighbor|finest)");
}

inline Distance distance_from(const std::string& s) {
    if (s == "JS" || s == "js") return Distance::JS;
    if (s == "KL" || s == "kl") return Distance::KL;
    throw ConfigError("unknown CBC distance \"" + s + "\" (js|kl)");
}

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::All: return "all";
        case Strategy::Neighbor: return "neighbor";
        case Strategy::Finest: return "finest";
    }
    return "?";
}

inline const char* to_string(Distance d) { return d == Distance::JS ? "js" : "kl"; }

}  // namespace chbc::cbc
