#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chbc/error.hpp"

// Label tree hierarchy: per-level class counts, parent maps, and the derived
// inter-level adjacency matrices. Levels are numbered 1..h from coarse to
// fine; node indices are 0-based. The root is implicit and never stored.

namespace chbc {

struct AdjacencyMatrix {
    std::size_t from_level = 0;  // i, 1-based
    std::size_t to_level = 0;    // j > i
    std::size_t rows = 0;        // c_i
    std::size_t cols = 0;        // c_j
    std::vector<std::int64_t> m;  // row-major; binary for j == i+1

    std::int64_t at(std::size_t r, std::size_t c) const { return m[r * cols + c]; }
};

class TreeHierarchy {
  public:
    // parents[k][e] is the parent of node e at level k+2, an index into
    // level k+1. Construction validates the tree property and fails rather
    // than returning a malformed hierarchy.
    TreeHierarchy(std::vector<std::size_t> level_sizes,
                  std::vector<std::vector<std::uint32_t>> parents,
                  std::optional<std::vector<std::vector<std::string>>> names = std::nullopt)
        : level_sizes_(std::move(level_sizes)),
          parents_(std::move(parents)),
          names_(std::move(names)) {
        validate();
    }

    TreeHierarchy(const TreeHierarchy&) = delete;
    TreeHierarchy& operator=(const TreeHierarchy&) = delete;

    std::size_t depth() const { return level_sizes_.size(); }
    const std::vector<std::size_t>& level_sizes() const { return level_sizes_; }
    std::size_t level_size(std::size_t level) const {
        check_level(level);
        return level_sizes_[level - 1];
    }
    std::size_t finest_size() const { return level_sizes_.back(); }
    const std::optional<std::vector<std::vector<std::string>>>& names() const { return names_; }

    std::uint32_t parent_of(std::size_t level, std::size_t index) const {
        if (level < 2 || level > depth())
            throw ParameterError("parent_of: level " + std::to_string(level) +
                                 " out of range [2, " + std::to_string(depth()) + "]");
        check_index(level, index);
        return parents_[level - 2][index];
    }

    // Unique ancestor of a level-j node at coarser level i, by repeated
    // parent lookup.
    std::size_t ancestor(std::size_t node_level, std::size_t index,
                         std::size_t target_level) const {
        check_level(node_level);
        check_index(node_level, index);
        if (target_level < 1 || target_level >= node_level)
            throw ParameterError("ancestor: target level " + std::to_string(target_level) +
                                 " not in [1, " + std::to_string(node_level) + ")");
        std::size_t cur = index;
        for (std::size_t l = node_level; l > target_level; --l) cur = parents_[l - 2][cur];
        return cur;
    }

    // D_{i,j} for 1 <= i < j <= h. D_{i,i+1} is built from the parent map;
    // longer spans are the ordered product of the chain. Results are cached;
    // the cache is safe under concurrent first access.
    std::shared_ptr<const AdjacencyMatrix> adjacency(std::size_t i, std::size_t j) const {
        check_level(i);
        check_level(j);
        if (i >= j)
            throw ParameterError("adjacency: need from < to, got (" + std::to_string(i) +
                                 ", " + std::to_string(j) + ")");
        std::lock_guard<std::mutex> lock(cache_mutex_);
        auto key = std::make_pair(i, j);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;

        auto d = std::make_shared<AdjacencyMatrix>();
        d->from_level = i;
        d->to_level = j;
        d->rows = level_sizes_[i - 1];
        d->cols = level_sizes_[j - 1];
        d->m = step_matrix(i);
        for (std::size_t k = i + 1; k < j; ++k) {
            const std::vector<std::int64_t> next = step_matrix(k);
            const std::size_t rows = d->rows;
            const std::size_t mid = level_sizes_[k - 1];
            const std::size_t cols = level_sizes_[k];
            std::vector<std::int64_t> prod(rows * cols, 0);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t q = 0; q < mid; ++q) {
                    const std::int64_t v = d->m[r * mid + q];
                    if (v == 0) continue;
                    for (std::size_t c = 0; c < cols; ++c)
                        prod[r * cols + c] += v * next[q * cols + c];
                }
            d->m = std::move(prod);
        }
        cache_.emplace(key, d);
        return d;
    }

    // Number of children of each node at a given non-leaf level.
    std::vector<std::size_t> child_counts(std::size_t level) const {
        check_level(level);
        if (level == depth())
            throw ParameterError("child_counts: leaf level has no children");
        std::vector<std::size_t> counts(level_sizes_[level - 1], 0);
        for (std::uint32_t p : parents_[level - 1]) ++counts[p];
        return counts;
    }

    std::vector<std::size_t> children_of(std::size_t level, std::size_t index) const {
        check_level(level);
        check_index(level, index);
        if (level == depth()) return {};
        std::vector<std::size_t> out;
        const auto& pm = parents_[level - 1];
        for (std::size_t e = 0; e < pm.size(); ++e)
            if (pm[e] == index) out.push_back(e);
        return out;
    }

    // True iff consecutive entries form parent-child edges; path[l-1] is the
    // node at level l. Used as the TCR membership predicate.
    bool is_valid_path(const std::vector<std::uint32_t>& path) const {
        if (path.size() != depth()) return false;
        for (std::size_t l = 1; l <= depth(); ++l)
            if (path[l - 1] >= level_sizes_[l - 1]) return false;
        for (std::size_t l = 2; l <= depth(); ++l)
            if (parents_[l - 2][path[l - 1]] != path[l - 2]) return false;
        return true;
    }

    // --- JSON file format -------------------------------------------------
    // {"level_sizes":[c1,...,ch], "parents":[[...c2 ints...],...],
    //  "names": optional [[...],...]}. Unknown keys are rejected.

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["level_sizes"] = level_sizes_;
        j["parents"] = parents_;
        if (names_) j["names"] = *names_;
        return j;
    }

    static std::shared_ptr<const TreeHierarchy> from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw DataError("hierarchy: expected a JSON object");
        for (const auto& [key, _] : j.items())
            if (key != "level_sizes" && key != "parents" && key != "names")
                throw DataError("hierarchy: unknown key \"" + key + "\"");
        if (!j.contains("level_sizes") || !j.contains("parents"))
            throw DataError("hierarchy: missing \"level_sizes\" or \"parents\"");
        std::vector<std::size_t> sizes;
        std::vector<std::vector<std::uint32_t>> parents;
        std::optional<std::vector<std::vector<std::string>>> names;
        try {
            sizes = j.at("level_sizes").get<std::vector<std::size_t>>();
            parents = j.at("parents").get<std::vector<std::vector<std::uint32_t>>>();
            if (j.contains("names"))
                names = j.at("names").get<std::vector<std::vector<std::string>>>();
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("hierarchy: malformed field: ") + e.what());
        }
        return std::make_shared<const TreeHierarchy>(std::move(sizes), std::move(parents),
                                                     std::move(names));
    }

    static std::shared_ptr<const TreeHierarchy> load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("hierarchy: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("hierarchy: invalid JSON in " + path + ": " + e.what());
        }
        return from_json(j);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("hierarchy: cannot write " + path);
        out << to_json().dump(2) << "\n";
    }

  private:
    void check_level(std::size_t level) const {
        if (level < 1 || level > depth())
            throw ParameterError("level " + std::to_string(level) + " out of range [1, " +
                                 std::to_string(depth()) + "]");
    }
    void check_index(std::size_t level, std::size_t index) const {
        if (index >= level_sizes_[level - 1])
            throw ParameterError("node index " + std::to_string(index) +
                                 " out of range at level " + std::to_string(level));
    }

    void validate() const {
        const std::size_t h = level_sizes_.size();
        if (h < 2)
            throw DataError("hierarchy: depth must be >= 2, got " + std::to_string(h));
        for (std::size_t l = 0; l < h; ++l)
            if (level_sizes_[l] == 0)
                throw DataError("hierarchy: level " + std::to_string(l + 1) + " is empty");
        if (parents_.size() != h - 1)
            throw DataError("hierarchy: expected " + std::to_string(h - 1) +
                            " parent maps, got " + std::to_string(parents_.size()));
        for (std::size_t k = 0; k < h - 1; ++k) {
            const std::size_t child_level = k + 2;
            if (parents_[k].size() != level_sizes_[child_level - 1])
                throw DataError("hierarchy: parent map for level " +
                                std::to_string(child_level) + " has " +
                                std::to_string(parents_[k].size()) + " entries, expected " +
                                std::to_string(level_sizes_[child_level - 1]));
            std::vector<bool> has_child(level_sizes_[k], false);
            for (std::size_t e = 0; e < parents_[k].size(); ++e) {
                if (parents_[k][e] >= level_sizes_[k])
                    throw DataError("hierarchy: parent index " +
                                    std::to_string(parents_[k][e]) + " out of range [0, " +
                                    std::to_string(level_sizes_[k]) + ") at level " +
                                    std::to_string(child_level) + ", node " +
                                    std::to_string(e));
                has_child[parents_[k][e]] = true;
            }
            for (std::size_t p = 0; p < has_child.size(); ++p)
                if (!has_child[p])
                    throw DataError("hierarchy: node " + std::to_string(p) + " at level " +
                                    std::to_string(k + 1) + " has no children");
        }
        if (names_) {
            if (names_->size() != h)
                throw DataError("hierarchy: names must cover all levels");
            for (std::size_t l = 0; l < h; ++l)
                if ((*names_)[l].size() != level_sizes_[l])
                    throw DataError("hierarchy: " + std::to_string((*names_)[l].size()) +
                                    " names for level " + std::to_string(l + 1) +
                                    " with " + std::to_string(level_sizes_[l]) + " nodes");
        }
    }

    // Binary single-step matrix D_{i,i+1}: entry (p, e) = 1 iff p is e's parent.
    std::vector<std::int64_t> step_matrix(std::size_t i) const {
        const std::size_t rows = level_sizes_[i - 1];
        const std::size_t cols = level_sizes_[i];
        std::vector<std::int64_t> m(rows * cols, 0);
        for (std::size_t e = 0; e < cols; ++e) m[parents_[i - 1][e] * cols + e] = 1;
        return m;
    }

    std::vector<std::size_t> level_sizes_;
    std::vector<std::vector<std::uint32_t>> parents_;
    std::optional<std::vector<std::vector<std::string>>> names_;

    mutable std::mutex cache_mutex_;
    mutable std::map<std::pair<std::size_t, std::size_t>,
                     std::shared_ptr<const AdjacencyMatrix>> cache_;
};

}  // namespace chbc
