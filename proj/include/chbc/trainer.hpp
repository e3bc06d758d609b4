#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "chbc/data.hpp"
#include "chbc/error.hpp"
#include "chbc/metrics.hpp"
#include "chbc/model.hpp"

// SGD-with-momentum training loop with exponential-decay and cosine-annealing
// schedules, checkpointing and per-step logging.

namespace chbc {

enum class LrSchedule { Exponential, Cosine };

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    double lr0 = 1e-2;
    double momentum = 0.9;
    LrSchedule schedule = LrSchedule::Exponential;
    double gamma = 0.9;     // exponential decay factor per epoch
    std::size_t t_max = 0;  // cosine annealing period; 0 means epochs
    std::uint64_t seed = 1;
    std::size_t checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
    std::size_t eval_every = 0;        // epochs; 0 disables in-training eval
    std::string out_dir;               // empty: keep everything in memory
};

struct StepRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double l_cls = 0.0;
    double l_con = 0.0;
    double l = 0.0;
};

struct EvalRow {
    std::size_t epoch = 0;
    metrics::EvalReport report;
};

struct TrainLog {
    std::vector<StepRow> steps;
    std::vector<EvalRow> evals;

    void write_jsonl(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path);
        for (const auto& s : steps) {
            nlohmann::json j{{"kind", "step"}, {"epoch", s.epoch}, {"step", s.step},
                             {"lr", s.lr},     {"l_cls", s.l_cls}, {"l_con", s.l_con},
                             {"l", s.l}};
            out << j.dump() << "\n";
        }
        for (const auto& e : evals) {
            nlohmann::json j{{"kind", "eval"},
                             {"epoch", e.epoch},
                             {"report", metrics::to_json(e.report)}};
            out << j.dump() << "\n";
        }
    }
};

inline void validate_train_config(const TrainConfig& cfg) {
    if (cfg.lr0 <= 0.0) throw ConfigError("train: lr0 must be > 0");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw ConfigError("train: momentum must be in [0, 1)");
    if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (cfg.schedule == LrSchedule::Exponential &&
        (cfg.gamma <= 0.0 || cfg.gamma > 1.0))
        throw ConfigError("train: gamma must be in (0, 1]");
    if (cfg.schedule == LrSchedule::Cosine && cfg.t_max == 0 && cfg.epochs < 1)
        throw ConfigError("train: cosine schedule needs t_max >= 1");
}

inline double lr_at(const TrainConfig& cfg, std::size_t epoch) {
    if (cfg.schedule == LrSchedule::Exponential) {
        if (cfg.gamma <= 0.0 || cfg.gamma > 1.0)
            throw ConfigError("lr_at: gamma must be in (0, 1]");
        return cfg.lr0 * std::pow(cfg.gamma, static_cast<double>(epoch));
    }
    const std::size_t t_max = cfg.t_max ? cfg.t_max : cfg.epochs;
    if (t_max < 1) throw ConfigError("lr_at: t_max must be >= 1");
    const double pi = 3.14159265358979323846;
    return cfg.lr0 * (1.0 + std::cos(pi * static_cast<double>(epoch) /
                                     static_cast<double>(t_max))) / 2.0;
}

// Standard momentum form: v <- momentum * v + g; p <- p - lr * v. Parameters
// are snapped to float32-representable values after each update so that
// checkpoints (stored as float32) reload bit-identically. Aborts on
// non-finite gradients, naming the parameter.
inline void sgd_step(std::vector<std::pair<std::string, Tensor>>& params,
                     std::vector<std::vector<double>>& velocity, double lr,
                     double momentum) {
    if (velocity.size() != params.size())
        throw ContractError("sgd_step: velocity buffers do not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        auto& vals = p.data();
        const auto& grad = p.grad();
        auto& v = velocity[i];
        if (v.size() != vals.size())
            throw ContractError("sgd_step: velocity shape mismatch for " + name);
        for (std::size_t k = 0; k < vals.size(); ++k) {
            if (!std::isfinite(grad[k]))
                throw NumericError("non-finite gradient in parameter " + name);
            v[k] = momentum * v[k] + grad[k];
            vals[k] = static_cast<double>(static_cast<float>(vals[k] - lr * v[k]));
        }
    }
}

// Deterministic given config + seed: seeded per-epoch shuffles, single
// training thread. Emits checkpoints and the step/eval log when out_dir is
// set.
inline TrainLog train(ChbcModel& model, const data::Dataset& train_ds,
                      const data::Dataset* eval_ds, const TrainConfig& cfg) {
    validate_train_config(cfg);
    data::validate_labels(train_ds);
    if (eval_ds) data::validate_labels(*eval_ds);

    namespace fs = std::filesystem;
    if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);

    auto params = model.parameters();
    snap_params_to_f32(params);
    std::vector<std::vector<double>> velocity;
    for (const auto& [name, p] : params) velocity.emplace_back(p.numel(), 0.0);

    std::mt19937_64 rng(cfg.seed);
    const std::size_t n = train_ds.num_samples();
    if (n == 0) throw DataError("train: empty dataset");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    TrainLog log;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);
        std::shuffle(order.begin(), order.end(), rng);
        std::size_t step = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            const Tensor x = make_batch(train_ds, idx, model.config().input_shape);
            const auto labels = gather_labels(train_ds, idx);
            const auto fwd = model.forward(x, &labels, true);
            const auto losses = model.losses(fwd, labels);
            StepRow row{epoch, step, lr, losses.cls.value(), losses.con.value(),
                        losses.total.value()};
            if (!std::isfinite(row.l))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(step));
            model.zero_grad();
            losses.total.backward();
            sgd_step(params, velocity, lr, cfg.momentum);
            log.steps.push_back(row);
        }
        if (eval_ds && cfg.eval_every && (epoch + 1) % cfg.eval_every == 0)
            log.evals.push_back({epoch, evaluate(model, *eval_ds)});
        if (!cfg.out_dir.empty() && cfg.checkpoint_every &&
            (epoch + 1) % cfg.checkpoint_every == 0)
            model.save_checkpoint(cfg.out_dir + "/checkpoints/epoch_" +
                                  std::to_string(epoch + 1));
    }
    if (!cfg.out_dir.empty()) {
        model.save_checkpoint(cfg.out_dir + "/checkpoint_final");
        log.write_jsonl(cfg.out_dir + "/train_log.jsonl");
    }
    return log;
}

inline LrSchedule schedule_from(const std::string& s) {
    if (s == "exponential") return LrSchedule::Exponential;
    if (s == "cosine") return LrSchedule::Cosine;
    throw ConfigError("unknown schedule \"" + s + "\" (exponential|cosine)");
}

inline const char* to_string(LrSchedule s) {
    return s == LrSchedule::Exponential ? "exponential" : "cosine";
}

}  // namespace chbc
