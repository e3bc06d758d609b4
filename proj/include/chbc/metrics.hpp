#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chbc/error.hpp"
#include "chbc/hierarchy.hpp"

// Evaluation metrics: per-level accuracy, weighted average accuracy, Top-k,
// tree-based consistency rate, and the same/different-superclass
// misclassification histogram at the finest level.

namespace chbc::metrics {

struct EvalReport {
    std::vector<double> level_acc;  // fractions in [0,1]
    double wa_acc = 0.0;
    double top3_wa_acc = 0.0;
    double top5_wa_acc = 0.0;
    double tcr = 0.0;
    std::size_t same_superclass_errors = 0;
    std::size_t different_superclass_errors = 0;
    std::size_t num_samples = 0;
};

// Per-level accuracies averaged with class counts as weights. Linear in the
// accuracies, so fractions and percentages both work.
inline double wa_acc(const std::vector<double>& accs, const std::vector<std::size_t>& sizes) {
    if (accs.size() != sizes.size())
        throw ParameterError("wa_acc: " + std::to_string(accs.size()) + " accuracies vs " +
                             std::to_string(sizes.size()) + " level sizes");
    double total = 0.0;
    for (std::size_t c : sizes) {
        if (c == 0) throw ParameterError("wa_acc: level sizes must be positive");
        total += static_cast<double>(c);
    }
    double acc = 0.0;
    for (std::size_t m = 0; m < accs.size(); ++m)
        acc += static_cast<double>(sizes[m]) / total * accs[m];
    return acc;
}

// Fraction of samples whose whole predicted path is a valid tree path and
// whose finest prediction matches ground truth.
inline double tcr(const std::vector<std::vector<std::uint32_t>>& predictions,
                  const std::vector<std::uint32_t>& finest_truth, const TreeHierarchy& th) {
    if (predictions.size() != finest_truth.size())
        throw ParameterError("tcr: " + std::to_string(predictions.size()) +
                             " prediction rows vs " + std::to_string(finest_truth.size()) +
                             " truths");
    if (predictions.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t n = 0; n < predictions.size(); ++n) {
        const auto& path = predictions[n];
        if (path.size() != th.depth())
            throw ParameterError("tcr: prediction row " + std::to_string(n) + " has " +
                                 std::to_string(path.size()) + " levels, expected " +
                                 std::to_string(th.depth()));
        for (std::size_t l = 1; l <= th.depth(); ++l)
            if (path[l - 1] >= th.level_size(l))
                throw ParameterError("tcr: prediction index " + std::to_string(path[l - 1]) +
                                     " out of range at level " + std::to_string(l));
        if (finest_truth[n] >= th.finest_size())
            throw ParameterError("tcr: truth index out of range at sample " +
                                 std::to_string(n));
        if (th.is_valid_path(path) && path.back() == finest_truth[n]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Truth is a Top-k hit iff fewer than k classes outrank it; an equal score
// at a lower index outranks.
inline bool topk_hit(const double* scores, std::size_t c, std::size_t truth, std::size_t k) {
    if (c <= k) return true;
    std::size_t rank = 0;
    const double st = scores[truth];
    for (std::size_t j = 0; j < c; ++j) {
        if (j == truth) continue;
        if (scores[j] > st || (scores[j] == st && j < truth)) ++rank;
    }
    return rank < k;
}

// Per-level Top-k accuracies combined via wa_acc. level_scores[l] holds N
// rows of c_{l+1} scores; labels is N x h row-major. Levels with c <= k
// score 1.0.
inline double topk_wa_acc(const std::vector<std::vector<double>>& level_scores,
                          const std::vector<std::uint32_t>& labels,
                          const std::vector<std::size_t>& level_sizes, std::size_t k) {
    const std::size_t h = level_sizes.size();
    if (level_scores.size() != h)
        throw ParameterError("topk_wa_acc: score matrices for " +
                             std::to_string(level_scores.size()) + " levels, expected " +
                             std::to_string(h));
    if (labels.size() % h != 0)
        throw ParameterError("topk_wa_acc: labels length not a multiple of depth");
    const std::size_t n = labels.size() / h;
    std::vector<double> accs(h, 0.0);
    for (std::size_t l = 0; l < h; ++l) {
        const std::size_t c = level_sizes[l];
        if (level_scores[l].size() != n * c)
            throw ParameterError("topk_wa_acc: score matrix for level " +
                                 std::to_string(l + 1) + " has wrong size");
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (topk_hit(level_scores[l].data() + i * c, c, labels[i * h + l], k)) ++hits;
        accs[l] = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
    }
    return wa_acc(accs, level_sizes);
}

// Among misclassified finest predictions, counts pairs sharing the
// immediate-parent (level h-1) ancestor vs not.
inline std::pair<std::size_t, std::size_t> superclass_histogram(
    const std::vector<std::uint32_t>& finest_preds,
    const std::vector<std::uint32_t>& finest_truths, const TreeHierarchy& th) {
    if (finest_preds.size() != finest_truths.size())
        throw ParameterError("superclass_histogram: size mismatch");
    const std::size_t h = th.depth();
    std::size_t same = 0, diff = 0;
    for (std::size_t n = 0; n < finest_preds.size(); ++n) {
        if (finest_preds[n] == finest_truths[n]) continue;
        const std::size_t pa = th.ancestor(h, finest_preds[n], h - 1);
        const std::size_t ta = th.ancestor(h, finest_truths[n], h - 1);
        (pa == ta ? same : diff) += 1;
    }
    return {same, diff};
}

// Full report from per-level score matrices (level_scores[l]: N x c_{l+1},
// row-major) and N x h ground-truth labels.
inline EvalReport build_report(const std::vector<std::vector<double>>& level_scores,
                               const std::vector<std::uint32_t>& labels,
                               const TreeHierarchy& th) {
    const std::size_t h = th.depth();
    if (level_scores.size() != h)
        throw ParameterError("build_report: expected " + std::to_string(h) +
                             " score matrices");
    if (labels.size() % h != 0)
        throw ParameterError("build_report: labels length not a multiple of depth");
    const std::size_t n = labels.size() / h;

    EvalReport r;
    r.num_samples = n;
    r.level_acc.assign(h, 0.0);
    std::vector<std::vector<std::uint32_t>> preds(n, std::vector<std::uint32_t>(h, 0));
    std::vector<std::uint32_t> finest_truth(n, 0);
    for (std::size_t l = 0; l < h; ++l) {
        const std::size_t c = th.level_size(l + 1);
        if (level_scores[l].size() != n * c)
            throw ParameterError("build_report: score matrix for level " +
                                 std::to_string(l + 1) + " has wrong size");
        std::size_t hits = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = level_scores[l].data() + i * c;
            std::size_t arg = 0;
            for (std::size_t j = 1; j < c; ++j)
                if (row[j] > row[arg]) arg = j;
            preds[i][l] = static_cast<std::uint32_t>(arg);
            if (labels[i * h + l] >= c)
                throw ParameterError("build_report: label out of range, sample " +
                                     std::to_string(i) + ", level " + std::to_string(l + 1));
            if (arg == labels[i * h + l]) ++hits;
        }
        r.level_acc[l] = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) finest_truth[i] = labels[i * h + (h - 1)];

    r.wa_acc = wa_acc(r.level_acc, th.level_sizes());
    r.top3_wa_acc = topk_wa_acc(level_scores, labels, th.level_sizes(), 3);
    r.top5_wa_acc = topk_wa_acc(level_scores, labels, th.level_sizes(), 5);
    r.tcr = n ? tcr(preds, finest_truth, th) : 0.0;

    std::vector<std::uint32_t> finest_preds(n);
    for (std::size_t i = 0; i < n; ++i) finest_preds[i] = preds[i][h - 1];
    auto [same, diff] = superclass_histogram(finest_preds, finest_truth, th);
    r.same_superclass_errors = same;
    r.different_superclass_errors = diff;
    return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
    return nlohmann::json{{"level_acc", r.level_acc},
                          {"wa_acc", r.wa_acc},
                          {"top3_wa_acc", r.top3_wa_acc},
                          {"top5_wa_acc", r.top5_wa_acc},
                          {"tcr", r.tcr},
                          {"same_superclass_errors", r.same_superclass_errors},
                          {"different_superclass_errors", r.different_superclass_errors},
                          {"num_samples", r.num_samples}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.level_acc = j.at("level_acc").get<std::vector<double>>();
    r.wa_acc = j.at("wa_acc").get<double>();
    r.top3_wa_acc = j.at("top3_wa_acc").get<double>();
    r.top5_wa_acc = j.at("top5_wa_acc").get<double>();
    r.tcr = j.at("tcr").get<double>();
    r.same_superclass_errors = j.at("same_superclass_errors").get<std::size_t>();
    r.different_superclass_errors = j.at("different_superclass_errors").get<std::size_t>();
    r.num_samples = j.at("num_samples").get<std::size_t>();
    return r;
}

// Fixed-width table with one decimal, percentages.
inline void print_table(const EvalReport& r, std::ostream& os) {
    char buf[64];
    os << "level     ";
    for (std::size_t l = 1; l <= r.level_acc.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%8zu", l);
        os << buf;
    }
    os << "\nacc %     ";
    for (double a : r.level_acc) {
        std::snprintf(buf, sizeof(buf), "%8.1f", 100.0 * a);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * r.wa_acc);
    os << "\nwa_acc %       " << buf;
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * r.top3_wa_acc);
    os << "\ntop3 wa_acc %  " << buf;
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * r.top5_wa_acc);
    os << "\ntop5 wa_acc %  " << buf;
    std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * r.tcr);
    os << "\nTCR %          " << buf;
    os << "\nfinest errors  same-superclass " << r.same_superclass_errors
       << ", different-superclass " << r.different_superclass_errors << " (N="
       << r.num_samples << ")\n";
}

}  // namespace chbc::metrics
