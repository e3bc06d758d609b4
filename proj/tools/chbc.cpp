// chbc: hierarchical multi-level classification toolkit.
//
// Subcommands: gen-synth, train, eval, project, validate-hierarchy, report.
// Exit codes: 0 ok, 2 config/usage error, 3 data error, 4 numerical abort.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chbc/chbc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("CHBC_SEED");
    if (!v || !*v) return std::nullopt;
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw chbc::ConfigError("CHBC_SEED is not an unsigned integer");
    }
}

json load_json(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw chbc::ConfigError(std::string(what) + " not found: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw chbc::ConfigError(path + ": invalid JSON: " + e.what());
    }
    return j;
}

// Sidecar path for a binary blob: foo.f32 -> foo.json.
std::string sidecar_path(const std::string& blob) {
    if (blob.size() > 4 && blob.substr(blob.size() - 4) == ".f32")
        return blob.substr(0, blob.size() - 4) + ".json";
    return blob + ".json";
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string train_dataset;
    std::string test_dataset;
    std::string out_dir = "chbc_run";
    chbc::ModelConfig model;  // input_shape/trunk may stay empty: derived
    chbc::TrainConfig train;
    chbc::mge::EnhancementConfig mge;
    bool mge_enabled = true;
    chbc::cbc::ConsistencyConfig cbc;
    bool cbc_enabled = true;
};

chbc::TrainConfig train_config_from_json(const json& j) {
    chbc::TrainConfig cfg;
    for (const auto& [key, _] : j.items())
        if (key != "epochs" && key != "batch_size" && key != "lr0" && key != "momentum" &&
            key != "schedule" && key != "gamma" && key != "t_max" && key != "seed" &&
            key != "checkpoint_every" && key != "eval_every")
            throw chbc::ConfigError("train config: unknown key \"" + key + "\"");
    try {
        cfg.epochs = j.value("epochs", cfg.epochs);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.lr0 = j.value("lr0", cfg.lr0);
        cfg.momentum = j.value("momentum", cfg.momentum);
        if (j.contains("schedule"))
            cfg.schedule = chbc::schedule_from(j.at("schedule").get<std::string>());
        cfg.gamma = j.value("gamma", cfg.gamma);
        cfg.t_max = j.value("t_max", cfg.t_max);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.checkpoint_every = j.value("checkpoint_every", cfg.checkpoint_every);
        cfg.eval_every = j.value("eval_every", cfg.eval_every);
    } catch (const json::exception& e) {
        throw chbc::ConfigError(std::string("train config: malformed field: ") + e.what());
    }
    return cfg;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    for (const auto& [key, _] : j.items())
        if (key != "train_dataset" && key != "test_dataset" && key != "out_dir" &&
            key != "model" && key != "train" && key != "mge" && key != "cbc")
            throw chbc::ConfigError("run config: unknown key \"" + key + "\"");
    try {
        cfg.train_dataset = j.value("train_dataset", cfg.train_dataset);
        cfg.test_dataset = j.value("test_dataset", cfg.test_dataset);
        cfg.out_dir = j.value("out_dir", cfg.out_dir);
    } catch (const json::exception& e) {
        throw chbc::ConfigError(std::string("run config: malformed field: ") + e.what());
    }
    if (j.contains("model")) cfg.model = chbc::ChbcModel::model_config_from_json(j.at("model"));
    if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    if (j.contains("mge")) {
        auto [m, on] = chbc::ChbcModel::mge_config_from_json(j.at("mge"));
        cfg.mge = m;
        cfg.mge_enabled = on;
    }
    if (j.contains("cbc")) {
        auto [c, on] = chbc::ChbcModel::cbc_config_from_json(j.at("cbc"));
        cfg.cbc = c;
        cfg.cbc_enabled = on;
    }
    if (cfg.train_dataset.empty())
        throw chbc::ConfigError("run config: \"train_dataset\" is required");
    return cfg;
}

// Fill in the model pieces the config left out, from the dataset shape.
void derive_model_config(chbc::ModelConfig& cfg, const chbc::data::Dataset& ds) {
    if (cfg.input_shape.empty()) {
        if (ds.input_shape.size() == 3) {
            cfg.input_shape = ds.input_shape;
        } else if (ds.input_shape.size() == 1) {
            const std::size_t f = ds.input_shape[0];
            const auto side = static_cast<std::size_t>(std::lround(std::sqrt(
                static_cast<double>(f))));
            if (side * side != f)
                throw chbc::ConfigError(
                    "vector inputs of width " + std::to_string(f) +
                    " are not a perfect square; set model.input_shape explicitly");
            cfg.input_shape = {1, side, side};
        } else {
            throw chbc::ConfigError("unsupported dataset input shape");
        }
    }
    if (cfg.trunk_channels.empty()) {
        if (cfg.input_shape[1] >= 32) {
            cfg.trunk_channels = {16, 24, 32};
            cfg.trunk_strides = {2, 2, 2};
            cfg.submodule_layers = 2;
        } else {
            cfg.trunk_channels = {16, 16};
            cfg.trunk_strides = {1, 2};
            cfg.submodule_layers = 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_synth(const std::string& spec_path, const std::string& out_dir) {
    auto spec = chbc::data::synth_spec_from_json(load_json(spec_path, "synth spec"));
    if (auto seed = env_seed()) spec.seed = *seed;
    auto result = chbc::data::generate_synthetic(spec);
    chbc::data::save_dataset(result.train, out_dir + "/train");
    chbc::data::save_dataset(result.test, out_dir + "/test");
    std::cout << "hierarchy depth " << result.hierarchy->depth() << ", level sizes [";
    for (std::size_t l = 0; l < result.hierarchy->depth(); ++l)
        std::cout << (l ? ", " : "") << result.hierarchy->level_sizes()[l];
    std::cout << "]\ntrain: " << result.train.num_samples() << " samples -> " << out_dir
              << "/train\ntest:  " << result.test.num_samples() << " samples -> "
              << out_dir << "/test\n";
    return 0;
}

struct TrainOverrides {
    std::optional<std::size_t> epochs, batch_size, checkpoint_every, eval_every;
    std::optional<double> lr0, alpha, temperature, gamma;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir, strategy, mge_strategy, distance, schedule;
    bool no_mge = false;
    bool no_cbc = false;
};

int cmd_train(const std::string& config_path, const TrainOverrides& ov) {
    RunConfig cfg = run_config_from_json(load_json(config_path, "run config"));
    if (ov.epochs) cfg.train.epochs = *ov.epochs;
    if (ov.batch_size) cfg.train.batch_size = *ov.batch_size;
    if (ov.checkpoint_every) cfg.train.checkpoint_every = *ov.checkpoint_every;
    if (ov.eval_every) cfg.train.eval_every = *ov.eval_every;
    if (ov.lr0) cfg.train.lr0 = *ov.lr0;
    if (ov.gamma) cfg.train.gamma = *ov.gamma;
    if (ov.schedule) cfg.train.schedule = chbc::schedule_from(*ov.schedule);
    if (ov.alpha) cfg.mge.alpha = *ov.alpha;
    if (ov.temperature) cfg.cbc.temperature = *ov.temperature;
    if (ov.strategy) cfg.cbc.strategy = chbc::cbc::strategy_from(*ov.strategy);
    if (ov.mge_strategy) cfg.mge.strategy = chbc::mge::mod_strategy_from(*ov.mge_strategy);
    if (ov.distance) cfg.cbc.distance = chbc::cbc::distance_from(*ov.distance);
    if (ov.out_dir) cfg.out_dir = *ov.out_dir;
    if (ov.seed) {
        cfg.train.seed = *ov.seed;
        cfg.model.seed = *ov.seed;
    }
    if (ov.no_mge) cfg.mge_enabled = false;
    if (ov.no_cbc) cfg.cbc_enabled = false;
    if (auto seed = env_seed()) {
        cfg.train.seed = *seed;
        cfg.model.seed = *seed;
    }

    auto train_ds = chbc::data::load_dataset(cfg.train_dataset);
    std::optional<chbc::data::Dataset> test_ds;
    if (!cfg.test_dataset.empty()) test_ds = chbc::data::load_dataset(cfg.test_dataset);

    derive_model_config(cfg.model, train_ds);
    chbc::ChbcModel model(train_ds.hierarchy, cfg.model, cfg.mge, cfg.cbc,
                          cfg.mge_enabled, cfg.cbc_enabled);
    cfg.train.out_dir = cfg.out_dir;

    auto log = chbc::train(model, train_ds, test_ds ? &*test_ds : nullptr, cfg.train);
    const auto& report_ds = test_ds ? *test_ds : train_ds;
    const auto report = chbc::evaluate(model, report_ds);
    {
        std::ofstream out(cfg.out_dir + "/eval_report.json");
        out << chbc::metrics::to_json(report).dump(2) << "\n";
    }
    std::cout << "trained " << cfg.train.epochs << " epochs, " << log.steps.size()
              << " steps; final loss " << (log.steps.empty() ? 0.0 : log.steps.back().l)
              << "\n"
              << (test_ds ? "test" : "train") << " evaluation:\n";
    chbc::metrics::print_table(report, std::cout);
    std::cout << "artifacts in " << cfg.out_dir << "\n";
    return 0;
}

void export_masks(const chbc::ChbcModel& model, const chbc::data::Dataset& ds,
                  const std::string& path) {
    const std::size_t h = model.hierarchy().depth();
    const auto [gh, gw] = model.feat_grid();
    const std::size_t n = ds.num_samples();
    std::vector<float> blob;
    blob.reserve(n * h * gh * gw);
    const std::size_t batch = 64;
    for (std::size_t start = 0; start < n; start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
        const auto x = chbc::make_batch(ds, idx, model.config().input_shape);
        const auto fwd = model.forward(x, nullptr, false);
        for (std::size_t b = 0; b < idx.size(); ++b)
            for (std::size_t l = 0; l < h; ++l) {
                if (model.mge_enabled()) {
                    const auto& m = fwd.enhanced_attention[l].values();
                    for (std::size_t s = 0; s < gh * gw; ++s)
                        blob.push_back(static_cast<float>(m[b * gh * gw + s]));
                } else {
                    for (std::size_t s = 0; s < gh * gw; ++s) blob.push_back(1.0f);
                }
            }
    }
    chbc::io::write_f32(path, blob);
    std::ofstream side(sidecar_path(path));
    side << json{{"shape", {n, h, gh, gw}}}.dump(2) << "\n";
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset_dir,
             const std::string& out_path, const std::string& masks_path) {
    if (!fs::exists(checkpoint + "/manifest.json"))
        throw chbc::ConfigError("checkpoint not found: " + checkpoint);
    auto ds = chbc::data::load_dataset(dataset_dir);
    auto model = chbc::ChbcModel::load_checkpoint(checkpoint, ds.hierarchy);
    const auto report = chbc::evaluate(model, ds);
    chbc::metrics::print_table(report, std::cout);
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw chbc::DataError("cannot write " + out_path);
        out << chbc::metrics::to_json(report).dump(2) << "\n";
    }
    if (!masks_path.empty()) export_masks(model, ds, masks_path);
    return 0;
}

int cmd_project(const std::string& logits_path, const std::string& hierarchy_path,
                const std::string& direction, std::size_t from, std::size_t to,
                double temperature, const std::string& out_path) {
    auto th = chbc::TreeHierarchy::load(hierarchy_path);
    const json side = load_json(sidecar_path(logits_path), "logits sidecar");
    for (const auto& [key, _] : side.items())
        if (key != "levels" && key != "num_samples")
            throw chbc::DataError("logits sidecar: unknown key \"" + key + "\"");
    std::vector<std::size_t> levels;
    std::size_t n = 0;
    try {
        levels = side.at("levels").get<std::vector<std::size_t>>();
        n = side.at("num_samples").get<std::size_t>();
    } catch (const json::exception& e) {
        throw chbc::DataError(std::string("logits sidecar: malformed field: ") + e.what());
    }
    if (levels != th->level_sizes())
        throw chbc::DataError("logits sidecar levels disagree with the hierarchy");
    if (from < 1 || from > th->depth() || to < 1 || to > th->depth() || from == to)
        throw chbc::ConfigError("project: levels must be distinct and within [1, depth]");
    if (direction == "c2f" && from >= to)
        throw chbc::ConfigError("project: c2f needs --from coarser than --to");
    if (direction == "f2c" && from <= to)
        throw chbc::ConfigError("project: f2c needs --from finer than --to");

    std::size_t total = 0;
    for (std::size_t c : levels) total += c;
    const auto blob = chbc::io::read_f32(logits_path, n * total);
    std::size_t offset = 0;
    for (std::size_t l = 1; l < from; ++l) offset += levels[l - 1];
    const std::size_t c_from = levels[from - 1];
    std::vector<double> rows(n * c_from);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c_from; ++k)
            rows[i * c_from + k] = static_cast<double>(blob[i * total + offset + k]);

    const auto probs = chbc::softmax_t(chbc::Tensor::from({n, c_from}, rows), temperature);
    chbc::Tensor projected;
    if (direction == "c2f")
        projected = chbc::cbc::coarse_to_fine(probs, *th->adjacency(from, to));
    else
        projected = chbc::cbc::fine_to_coarse(probs, *th->adjacency(to, from));

    std::vector<float> out(projected.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(projected.values()[i]);
    chbc::io::write_f32(out_path, out);
    std::ofstream oside(sidecar_path(out_path));
    oside << json{{"levels", {levels[to - 1]}}, {"num_samples", n}}.dump(2) << "\n";
    std::cout << "projected level " << from << " -> " << to << " (" << direction << ") for "
              << n << " samples -> " << out_path << "\n";
    return 0;
}

int cmd_validate_hierarchy(const std::string& path) {
    auto th = chbc::TreeHierarchy::load(path);
    std::cout << "valid hierarchy, depth " << th->depth() << "\nlevel sizes: [";
    for (std::size_t l = 0; l < th->depth(); ++l)
        std::cout << (l ? ", " : "") << th->level_sizes()[l];
    std::cout << "]\n";
    for (std::size_t l = 1; l < th->depth(); ++l) {
        const auto counts = th->child_counts(l);
        std::size_t mn = counts[0], mx = counts[0], sum = 0;
        for (std::size_t c : counts) {
            mn = std::min(mn, c);
            mx = std::max(mx, c);
            sum += c;
        }
        std::cout << "level " << l << ": children per node min " << mn << ", mean "
                  << static_cast<double>(sum) / static_cast<double>(counts.size())
                  << ", max " << mx << "\n";
    }
    return 0;
}

int cmd_report(const std::string& log_path, const std::string& out_dir) {
    std::ifstream in(log_path);
    if (!in) throw chbc::DataError("cannot open " + log_path);
    fs::create_directories(out_dir);
    std::ofstream steps(out_dir + "/steps.csv");
    std::ofstream evals(out_dir + "/evals.csv");
    steps << "epoch,step,lr,l_cls,l_con,l\n";
    bool eval_header = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw chbc::DataError(log_path + ":" + std::to_string(lineno) +
                                  ": invalid JSON row: " + e.what());
        }
        const std::string kind = j.value("kind", "");
        if (kind == "step") {
            steps << j.at("epoch") << "," << j.at("step") << "," << j.at("lr") << ","
                  << j.at("l_cls") << "," << j.at("l_con") << "," << j.at("l") << "\n";
        } else if (kind == "eval") {
            const auto& r = j.at("report");
            const auto accs = r.at("level_acc").get<std::vector<double>>();
            if (!eval_header) {
                evals << "epoch";
                for (std::size_t l = 1; l <= accs.size(); ++l) evals << ",acc_" << l;
                evals << ",wa_acc,top3_wa_acc,top5_wa_acc,tcr,same_superclass_errors,"
                         "different_superclass_errors,num_samples\n";
                eval_header = true;
            }
            evals << j.at("epoch");
            for (double a : accs) evals << "," << a;
            evals << "," << r.at("wa_acc") << "," << r.at("top3_wa_acc") << ","
                  << r.at("top5_wa_acc") << "," << r.at("tcr") << ","
                  << r.at("same_superclass_errors") << ","
                  << r.at("different_superclass_errors") << "," << r.at("num_samples")
                  << "\n";
        } else {
            throw chbc::DataError(log_path + ":" + std::to_string(lineno) +
                                  ": unknown row kind");
        }
    }
    std::cout << "wrote " << out_dir << "/steps.csv and " << out_dir << "/evals.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CHBC hierarchical classification toolkit"};
    app.require_subcommand(1);

    // gen-synth
    std::string spec_path, gen_out;
    auto* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
    gen->add_option("spec", spec_path, "synth spec JSON")->required();
    gen->add_option("out", gen_out, "output directory")->required();

    // train
    std::string train_config;
    TrainOverrides ov;
    auto* tr = app.add_subcommand("train", "train a model from a run config");
    tr->add_option("config", train_config, "run config JSON")->required();
    auto opt = [&](auto& slot, const char* name, const char* help) {
        return tr->add_option(name, slot, help);
    };
    opt(ov.epochs, "--epochs", "override epochs");
    opt(ov.batch_size, "--batch-size", "override batch size");
    opt(ov.lr0, "--lr0", "override initial learning rate");
    opt(ov.gamma, "--gamma", "override exponential decay factor");
    opt(ov.schedule, "--schedule", "exponential|cosine");
    opt(ov.seed, "--seed", "override model and shuffle seed");
    opt(ov.alpha, "--alpha", "override MGE enhancement factor");
    opt(ov.temperature, "--temperature", "override CBC temperature");
    opt(ov.strategy, "--strategy", "CBC interaction strategy: all|neighbor|finest");
    opt(ov.mge_strategy, "--mge-strategy", "MatOrth|AddAll|AddPre");
    opt(ov.distance, "--distance", "CBC distance: js|kl");
    opt(ov.out_dir, "--out", "override output directory");
    opt(ov.checkpoint_every, "--checkpoint-every", "checkpoint period in epochs");
    opt(ov.eval_every, "--eval-every", "evaluation period in epochs");
    tr->add_flag("--no-mge", ov.no_mge, "disable the enhancement branch");
    tr->add_flag("--no-cbc", ov.no_cbc, "disable the consistency loss");

    // eval
    std::string ckpt, eval_ds, eval_out, masks_out;
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("checkpoint", ckpt, "checkpoint directory")->required();
    ev->add_option("dataset", eval_ds, "dataset directory")->required();
    ev->add_option("--out", eval_out, "write the report JSON here");
    ev->add_option("--export-masks", masks_out, "write attention masks (.f32 + sidecar)");

    // project
    std::string logits_path, hier_path, direction, proj_out = "projected.f32";
    std::size_t from_level = 0, to_level = 0;
    double proj_temp = 1.0;
    auto* pr = app.add_subcommand("project", "project logits across hierarchy levels");
    pr->add_option("logits", logits_path, "logits .f32 (with .json sidecar)")->required();
    pr->add_option("hierarchy", hier_path, "hierarchy JSON")->required();
    pr->add_option("--direction", direction, "c2f|f2c")
        ->required()
        ->check(CLI::IsMember({"c2f", "f2c"}));
    pr->add_option("--from", from_level, "source level (1-based)")->required();
    pr->add_option("--to", to_level, "target level (1-based)")->required();
    pr->add_option("--temperature", proj_temp, "softmax temperature applied to logits");
    pr->add_option("--out", proj_out, "output .f32 path");

    // validate-hierarchy
    std::string vh_path;
    auto* vh = app.add_subcommand("validate-hierarchy", "validate a hierarchy file");
    vh->add_option("file", vh_path, "hierarchy JSON")->required();

    // report
    std::string report_log, report_out = ".";
    auto* rp = app.add_subcommand("report", "render train_log.jsonl into CSV series");
    rp->add_option("log", report_log, "train_log.jsonl path")->required();
    rp->add_option("--out", report_out, "output directory for CSV files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_synth(spec_path, gen_out);
        if (tr->parsed()) return cmd_train(train_config, ov);
        if (ev->parsed()) return cmd_eval(ckpt, eval_ds, eval_out, masks_out);
        if (pr->parsed())
            return cmd_project(logits_path, hier_path, direction, from_level, to_level,
                               proj_temp, proj_out);
        if (vh->parsed()) return cmd_validate_hierarchy(vh_path);
        if (rp->parsed()) return cmd_report(report_log, report_out);
    } catch (const chbc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const chbc::ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const chbc::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const chbc::NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
