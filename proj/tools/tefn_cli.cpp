// Command-line front end: wires datasets, the model, training and the
// experiment suites into reproducible, config-driven runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tefn/config.hpp"
#include "tefn/data.hpp"
#include "tefn/experiments.hpp"
#include "tefn/model.hpp"
#include "tefn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tefn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_dir = "out";
    std::uint64_t seed = 1;
    bool seed_given = false;
    bool overwrite = false;
    std::size_t threads = 1;
};

config::KeyValue load_kv(const CommonOpts& opts) {
    config::KeyValue kv = opts.config_path.empty()
                              ? config::KeyValue{}
                              : config::KeyValue::from_file(opts.config_path);
    for (const auto& s : opts.sets) kv.apply_set(s);
    return kv;
}

std::uint64_t resolve_seed(const CommonOpts& opts, const config::KeyValue& kv) {
    return opts.seed_given ? opts.seed : kv.get_u64("run.seed", opts.seed);
}

std::string resolve_out(const CommonOpts& opts, const config::KeyValue& kv) {
    return kv.has("run.out") && opts.out_dir == "out"
               ? kv.get_string("run.out", opts.out_dir)
               : opts.out_dir;
}

// Refuse to clobber existing outputs unless --overwrite was given.
void claim_outputs(const std::vector<fs::path>& paths, bool overwrite) {
    if (!overwrite)
        for (const auto& p : paths)
            if (fs::exists(p))
                throw config::ConfigError("output " + p.string() +
                                          " exists; pass --overwrite to replace it");
    if (!paths.empty()) fs::create_directories(paths.front().parent_path());
}

// Dataset spec paths are resolved relative to the spec file's directory.
data::DatasetSpec load_spec_resolved(const std::string& spec_path) {
    data::DatasetSpec spec = data::load_dataset_spec(spec_path);
    fs::path csv(spec.path);
    if (csv.is_relative())
        spec.path = (fs::path(spec_path).parent_path() / csv).string();
    return spec;
}

experiments::Task build_task(const config::KeyValue& kv, std::uint64_t seed) {
    model::TefnConfig mc = config::model_config_from(kv);
    training::TrainConfig tc = config::train_config_from(kv);
    if (kv.get_bool("data.synthetic", false)) {
        data::SynthSpec ss;
        ss.channels = kv.get_u64("data.channels", 3);
        ss.rows = kv.get_u64("data.rows", 2000);
        ss.seed = derive_seed(seed, "synth");
        ss.period = kv.get_double("data.period", 24.0);
        ss.trend = kv.get_double("data.trend", 0.001);
        ss.noise_amp = kv.get_double("data.noise_amp", 0.1);
        data::RawSeries series = data::synth_generate(ss);
        data::SplitSpec split;
        split.train_rows = kv.get_u64("data.train_rows", ss.rows * 7 / 10);
        split.val_rows = kv.get_u64("data.val_rows", ss.rows * 15 / 100);
        split.test_rows = kv.get_u64(
            "data.test_rows", ss.rows - split.train_rows - split.val_rows);
        split.overlap = kv.get_u64("data.overlap", mc.l_in);
        return experiments::make_task(series, split, "synthetic", mc, tc, seed);
    }
    data::DatasetSpec spec = load_spec_resolved(kv.require_string("data.spec"));
    if (!fs::exists(spec.path))
        throw data::DataError("dataset file not found: " + spec.path);
    return experiments::make_task(spec, mc, tc, seed);
}

std::string task_tag(const std::string& suite, const experiments::Task& task) {
    return suite + "_" + task.dataset + "_" + std::to_string(task.model.l_pred) +
           "_" + std::to_string(task.seed);
}

json config_json(const model::TefnConfig& c) {
    return json{{"l_in", c.l_in},
                {"l_pred", c.l_pred},
                {"channels", c.channels},
                {"space_size", c.space_size},
                {"use_norm", c.use_norm},
                {"use_time_branch", c.use_time_branch},
                {"use_channel_branch", c.use_channel_branch},
                {"bpa_mode", c.bpa_mode == model::BpaMode::bpa ? "bpa" : "prob"},
                {"fusion_mode",
                 c.fusion_mode == model::FusionMode::sum ? "sum" : "concat"},
                {"activation", c.activation == model::Activation::none   ? "none"
                               : c.activation == model::Activation::relu ? "relu"
                                                                         : "tanh"},
                {"eps", c.eps}};
}

void write_json(const json& j, const fs::path& path) {
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

int cmd_train(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path ckpt = out_dir / "model.bin";
    fs::path history = out_dir / "history.csv";
    fs::path metrics = out_dir / "metrics.json";
    claim_outputs({ckpt, history, metrics}, opts.overwrite);

    experiments::Task task = build_task(kv, seed);
    auto result = training::train(task.train_windows, task.val_windows,
                                  task.model, task.train);
    auto test = experiments::evaluate(result.best_params, task.model,
                                      task.test_windows);

    training::save_checkpoint(result.best_params, task.model, ckpt.string());
    training::write_history_csv(result.history, history.string());
    write_json(json{{"dataset", task.dataset},
                    {"seed", seed},
                    {"test_mse", test.mse},
                    {"test_mae", test.mae},
                    {"best_val_mse", result.best_val_mse},
                    {"best_epoch", result.best_epoch},
                    {"param_count", model::param_count(task.model)},
                    {"config", config_json(task.model)}},
               metrics);
    std::printf("test MSE %.6f  MAE %.6f\n", test.mse, test.mae);
    return kExitOk;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt_path,
             const std::string& spec_path) {
    auto [params, cfg] = training::load_checkpoint(ckpt_path);
    data::DatasetSpec spec = load_spec_resolved(spec_path);
    if (!fs::exists(spec.path))
        throw data::DataError("dataset file not found: " + spec.path);
    data::RawSeries series = data::load_csv(spec.path);
    if (series.values.cols() != cfg.channels)
        throw data::DataError("checkpoint expects " + std::to_string(cfg.channels) +
                              " channels but dataset has " +
                              std::to_string(series.values.cols()));
    data::SplitSpec split = spec.split;
    if (split.overlap == 0) split.overlap = cfg.l_in;
    auto parts = data::chronological_split(series, split);
    data::Scaler scaler = data::fit_scaler(parts.train);
    auto test_seg = data::apply_scaler(scaler, parts.test);
    auto windows = data::make_windows(test_seg, cfg.l_in, cfg.l_pred);
    auto m = experiments::evaluate(params, cfg, windows);

    fs::path out_dir(opts.out_dir);
    fs::path metrics = out_dir / "eval_metrics.json";
    claim_outputs({metrics}, opts.overwrite);
    write_json(json{{"dataset", spec.name},
                    {"test_mse", m.mse},
                    {"test_mae", m.mae},
                    {"config", config_json(cfg)}},
               metrics);
    std::printf("test MSE %.6f  MAE %.6f\n", m.mse, m.mae);
    return kExitOk;
}

int cmd_ablate(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    experiments::Task task = build_task(kv, seed);
    std::string tag = task_tag("ablation", task);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path csv = out_dir / (tag + ".csv");
    fs::path summary = out_dir / (tag + ".json");
    claim_outputs({csv, summary}, opts.overwrite);

    auto report = experiments::ablation_suite(task, opts.threads);
    std::ofstream out(csv);
    out << "variant,mse,mae,gamma_mse_pct,gamma_mae_pct\n";
    char buf[160];
    json rows = json::array();
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g\n",
                      r.variant.c_str(), r.metrics.mse, r.metrics.mae,
                      r.gamma_mse, r.gamma_mae);
        out << buf;
        rows.push_back({{"variant", r.variant},
                        {"mse", r.metrics.mse},
                        {"mae", r.metrics.mae},
                        {"gamma_mse_pct", r.gamma_mse},
                        {"gamma_mae_pct", r.gamma_mae}});
        std::printf("%-10s MSE %.6f  MAE %.6f  gamma_mse %+.2f%%\n",
                    r.variant.c_str(), r.metrics.mse, r.metrics.mae, r.gamma_mse);
    }
    write_json(json{{"dataset", task.dataset}, {"seed", seed}, {"rows", rows}},
               summary);
    return kExitOk;
}

int cmd_sweep(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    experiments::Task task = build_task(kv, seed);
    auto lr_grid = kv.get_double_list("sweep.lr_grid", {0.01, 0.05, 0.1});
    auto s_grid = kv.get_size_list("sweep.s_grid", {0, 1, 2, 3, 4, 5, 6});
    std::string tag = task_tag("sweep", task);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path csv = out_dir / (tag + ".csv");
    fs::path summary = out_dir / (tag + ".json");
    claim_outputs({csv, summary}, opts.overwrite);

    auto report = experiments::hyperparam_sweep(task, lr_grid, s_grid, opts.threads);
    std::ofstream out(csv);
    out << "lr,space_size,mse,mae\n";
    char buf[160];
    json rows = json::array();
    for (const auto& p : report.grid) {
        std::snprintf(buf, sizeof buf, "%.17g,%zu,%.17g,%.17g\n", p.lr,
                      p.space_size, p.metrics.mse, p.metrics.mae);
        out << buf;
        rows.push_back({{"lr", p.lr},
                        {"space_size", p.space_size},
                        {"mse", p.metrics.mse},
                        {"mae", p.metrics.mae}});
    }
    std::snprintf(buf, sizeof buf, "# mse_variance,%.17g\n# mae_variance,%.17g\n",
                  report.mse_variance, report.mae_variance);
    out << buf;
    write_json(json{{"dataset", task.dataset},
                    {"seed", seed},
                    {"mse_variance", report.mse_variance},
                    {"mae_variance", report.mae_variance},
                    {"rows", rows}},
               summary);
    std::printf("%zu grid points, MSE variance %.3g, MAE variance %.3g\n",
                report.grid.size(), report.mse_variance, report.mae_variance);
    return kExitOk;
}

int cmd_robustness(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    experiments::Task task = build_task(kv, seed);
    bool retrain = kv.get_bool("robustness.retrain", true);
    std::string tag = task_tag("robustness", task);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path summary = out_dir / (tag + ".json");
    claim_outputs({summary}, opts.overwrite);

    auto report = experiments::robustness_run(task, retrain);
    write_json(json{{"dataset", task.dataset},
                    {"seed", seed},
                    {"retrain_on_noisy", retrain},
                    {"clean_mse", report.clean.mse},
                    {"clean_mae", report.clean.mae},
                    {"noisy_mse", report.noisy.mse},
                    {"noisy_mae", report.noisy.mae},
                    {"delta_mse", report.delta_mse},
                    {"delta_mae", report.delta_mae}},
               summary);
    std::printf("clean MSE %.6f -> noisy MSE %.6f (delta %+.6f)\n",
                report.clean.mse, report.noisy.mse, report.delta_mse);
    return kExitOk;
}

int cmd_probe(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    auto horizons = kv.get_size_list("probe.horizons", {96, 192, 336, 720});
    experiments::Task base = build_task(kv, seed);
    std::string tag = task_tag("probe", base);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path csv = out_dir / (tag + ".csv");
    claim_outputs({csv}, opts.overwrite);

    auto make_for = [&](std::size_t h) {
        config::KeyValue kv2 = kv;
        kv2.apply_set("model.l_pred=" + std::to_string(h));
        return build_task(kv2, seed);
    };
    auto report = experiments::nonlinearity_probe(make_for, horizons);
    std::ofstream out(csv);
    out << "l_pred,mse,mae\n";
    char buf[120];
    for (const auto& r : report.rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.l_pred,
                      r.metrics.mse, r.metrics.mae);
        out << buf;
        std::printf("L_pred %4zu  MSE %.6f  MAE %.6f\n", r.l_pred, r.metrics.mse,
                    r.metrics.mae);
    }
    return kExitOk;
}

int cmd_efficiency(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    experiments::Task task = build_task(kv, seed);
    std::string tag = task_tag("efficiency", task);
    fs::path out_dir = resolve_out(opts, kv);
    fs::path summary = out_dir / (tag + ".json");
    claim_outputs({summary}, opts.overwrite);

    auto report = experiments::efficiency_report(task);
    json curve = json::array();
    for (const auto& p : report.forward_curve)
        curve.push_back({{"l_pred", p.l_pred},
                         {"l_total", p.l_total},
                         {"median_forward_seconds", p.median_forward_seconds}});
    write_json(json{{"dataset", task.dataset},
                    {"seed", seed},
                    {"median_iteration_seconds", report.median_iteration_seconds},
                    {"param_count", report.param_count},
                    {"checkpoint_bytes", report.checkpoint_bytes},
                    {"forward_curve", curve}},
               summary);
    std::printf("median iteration %.3g s, %zu params, checkpoint %zu bytes\n",
                report.median_iteration_seconds, report.param_count,
                report.checkpoint_bytes);
    return kExitOk;
}

int cmd_gradcheck(const CommonOpts& opts) {
    config::KeyValue kv = load_kv(opts);
    std::uint64_t seed = resolve_seed(opts, kv);
    model::TefnConfig cfg;
    cfg.l_in = kv.get_u64("model.l_in", 8);
    cfg.l_pred = kv.get_u64("model.l_pred", 4);
    cfg.channels = kv.get_u64("model.channels", 3);
    cfg.space_size = kv.get_u64("model.space_size", 1);
    if (kv.has("model.activation") || kv.has("model.fusion_mode") ||
        kv.has("model.bpa_mode") || kv.has("model.use_norm")) {
        config::KeyValue full = kv;
        full.apply_set("model.l_in=" + std::to_string(cfg.l_in));
        cfg = config::model_config_from(full);
        cfg.l_in = kv.get_u64("model.l_in", 8);
        cfg.l_pred = kv.get_u64("model.l_pred", 4);
        cfg.channels = kv.get_u64("model.channels", 3);
    }
    double tol = kv.get_double("gradcheck.tolerance", 1e-4);

    Rng rng(derive_seed(seed, "gradcheck-data"));
    data::WindowSample sample;
    sample.input = Matrix(cfg.l_in, cfg.channels);
    sample.target = Matrix(cfg.l_pred, cfg.channels);
    sample.origin_index = 0;
    for (double& v : sample.input.raw()) v = rng.normal();
    for (double& v : sample.target.raw()) v = rng.normal();

    model::TefnParams params = model::init_params(cfg, derive_seed(seed, "params"));
    auto report = training::finite_diff_check(params, sample, cfg, 1e-5, 200, seed);
    for (const auto& e : report.per_tensor)
        std::printf("%-8s max rel err %.3e over %zu coords\n", e.tensor.c_str(),
                    e.max_rel_error, e.coords_checked);
    if (report.worst() >= tol) {
        std::fprintf(stderr, "gradient check failed: worst %.3e >= %.1e\n",
                     report.worst(), tol);
        return kExitNumeric;
    }
    std::printf("all gradients within %.1e\n", tol);
    return kExitOk;
}

int cmd_export_bpa(const CommonOpts& opts, const std::string& ckpt_path) {
    auto [params, cfg] = training::load_checkpoint(ckpt_path);
    fs::path out_dir(opts.out_dir);
    fs::path csv = out_dir / "bpa_curves.csv";
    claim_outputs({csv}, opts.overwrite);
    experiments::export_bpa_curves(params, cfg, csv.string());
    std::printf("wrote %s\n", csv.string().c_str());
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"TEFN time-series forecasting engine"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string ckpt_path, spec_path;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", opts.config_path, "run config file");
        if (needs_config) c->required();
        sub->add_option("--set", opts.sets, "override: section.key=value");
        sub->add_option("--seed", opts.seed, "master seed")
            ->each([&](const std::string&) { opts.seed_given = true; });
        sub->add_option("--out", opts.out_dir, "output directory");
        sub->add_flag("--overwrite", opts.overwrite, "replace existing outputs");
        sub->add_option("--threads", opts.threads, "worker threads for suites");
    };

    auto* train = app.add_subcommand("train", "train a model and report test metrics");
    add_common(train, true);
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval, false);
    eval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    eval->add_option("--spec", spec_path, "dataset spec file")->required();
    auto* ablate = app.add_subcommand("ablate", "run the eight-variant ablation suite");
    add_common(ablate, true);
    auto* sweep = app.add_subcommand("sweep", "lr x |S| hyperparameter sweep");
    add_common(sweep, true);
    auto* robust = app.add_subcommand("robustness", "clean vs noisy-input comparison");
    add_common(robust, true);
    auto* probe = app.add_subcommand("probe", "linear nonlinearity probe per horizon");
    add_common(probe, true);
    auto* eff = app.add_subcommand("efficiency", "timing, size and scaling report");
    add_common(eff, true);
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gradcheck, false);
    auto* export_bpa = app.add_subcommand("export-bpa", "export membership curves CSV");
    add_common(export_bpa, false);
    export_bpa->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(opts);
        if (eval->parsed()) return cmd_eval(opts, ckpt_path, spec_path);
        if (ablate->parsed()) return cmd_ablate(opts);
        if (sweep->parsed()) return cmd_sweep(opts);
        if (robust->parsed()) return cmd_robustness(opts);
        if (probe->parsed()) return cmd_probe(opts);
        if (eff->parsed()) return cmd_efficiency(opts);
        if (gradcheck->parsed()) return cmd_gradcheck(opts);
        if (export_bpa->parsed()) return cmd_export_bpa(opts, ckpt_path);
    } catch (const config::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const data::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const training::BadMagic& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const training::VersionMismatch& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const training::Truncated& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kExitData;
    } catch (const training::NonFiniteLoss& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return kExitConfig;
}
