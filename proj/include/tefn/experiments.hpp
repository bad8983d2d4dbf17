#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <stdexcept>
#include <string>
#include <vector>

#include "tefn/data.hpp"
#include "tefn/model.hpp"
#include "tefn/training.hpp"

namespace tefn::experiments {

using data::WindowSample;
using model::TefnConfig;
using model::TefnParams;
using training::TrainConfig;

// One forecasting task: a dataset cut into standardized window sets plus the
// model/train configuration to run on it.
struct Task {
    std::string dataset;
    TefnConfig model;
    TrainConfig train;
    std::uint64_t seed = 0;
    std::vector<WindowSample> train_windows, val_windows, test_windows;
};

inline Task make_task(const data::RawSeries& series, const data::SplitSpec& split,
                      const std::string& name, TefnConfig model_cfg,
                      TrainConfig train_cfg, std::uint64_t seed) {
    model_cfg.channels = series.values.cols();
    model_cfg.validate();
    auto parts = data::chronological_split(series, split);
    data::Scaler scaler = data::fit_scaler(parts.train);
    auto train_seg = data::apply_scaler(scaler, parts.train);
    auto val_seg = data::apply_scaler(scaler, parts.val);
    auto test_seg = data::apply_scaler(scaler, parts.test);

    Task task;
    task.dataset = name;
    task.model = model_cfg;
    task.train = train_cfg;
    task.seed = seed;
    task.train.seed = derive_seed(seed, "train");
    task.train_windows = data::make_windows(train_seg, model_cfg.l_in, model_cfg.l_pred);
    task.val_windows = data::make_windows(val_seg, model_cfg.l_in, model_cfg.l_pred);
    task.test_windows = data::make_windows(test_seg, model_cfg.l_in, model_cfg.l_pred);
    return task;
}

inline Task make_task(const data::DatasetSpec& spec, TefnConfig model_cfg,
                      TrainConfig train_cfg, std::uint64_t seed) {
    data::RawSeries series = data::load_csv(spec.path);
    data::SplitSpec split = spec.split;
    if (split.overlap == 0) split.overlap = model_cfg.l_in;
    return make_task(series, split, spec.name.empty() ? spec.path : spec.name,
                     model_cfg, train_cfg, seed);
}

struct Metrics {
    double mse = 0.0;
    double mae = 0.0;
};

// Test metrics over all forecast cells, in the standardized scale the
// windows were built in.
inline Metrics evaluate(const TefnParams& params, const TefnConfig& cfg,
                        const std::vector<WindowSample>& windows) {
    if (windows.empty())
        throw training::EmptyInput("evaluate: empty window set");
    double se = 0.0, ae = 0.0;
    std::size_t cells = 0;
    for (const auto& w : windows) {
        auto [fc, stats] = model::forward(w.input, params, cfg);
        (void)stats;
        for (std::size_t i = 0; i < fc.size(); ++i) {
            double d = fc.data()[i] - w.target.data()[i];
            se += d * d;
            ae += std::abs(d);
        }
        cells += fc.size();
    }
    return {se / static_cast<double>(cells), ae / static_cast<double>(cells)};
}

inline Metrics train_and_evaluate(const Task& task, const TefnConfig& cfg,
                                  const TrainConfig& tc) {
    auto result = training::train(task.train_windows, task.val_windows, cfg, tc);
    return evaluate(result.best_params, cfg, task.test_windows);
}

// Error change ratio of the full model against a variant, in percent.
inline double gamma_ratio(double metric_tefn, double metric_variant) {
    return (metric_tefn - metric_variant) / metric_variant * 100.0;
}

// ---- ablation ----

struct AblationRow {
    std::string variant;
    Metrics metrics;
    double gamma_mse = 0.0; // vs full TEFN
    double gamma_mae = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows; // rows[0] is the full model
};

inline std::vector<std::pair<std::string, TefnConfig>>
ablation_variants(const TefnConfig& base) {
    auto v = base;
    std::vector<std::pair<std::string, TefnConfig>> out;
    out.emplace_back("TEFN", v);
    v = base; v.use_norm = false;
    out.emplace_back("wo_norm", v);
    v = base; v.use_time_branch = false;
    out.emplace_back("wo_T", v);
    v = base; v.use_channel_branch = false;
    out.emplace_back("wo_C", v);
    v = base; v.bpa_mode = model::BpaMode::prob;
    out.emplace_back("prob", v);
    v = base; v.fusion_mode = model::FusionMode::concat;
    out.emplace_back("concat", v);
    v = base; v.activation = model::Activation::relu;
    out.emplace_back("relu", v);
    v = base; v.activation = model::Activation::tanh;
    out.emplace_back("tanh", v);
    return out;
}

namespace detail {

// Bounded parallel map over independent jobs; results land by index, so the
// thread count never changes the output.
template <typename Job>
void parallel_for(std::size_t count, std::size_t threads, Job&& job) {
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::vector<std::future<void>> inflight;
    for (std::size_t i = 0; i < count; ++i) {
        if (inflight.size() >= threads) {
            inflight.front().get();
            inflight.erase(inflight.begin());
        }
        inflight.push_back(std::async(std::launch::async, [&job, i] { job(i); }));
    }
    for (auto& f : inflight) f.get();
}

} // namespace detail

inline AblationReport ablation_suite(const Task& task, std::size_t threads = 1) {
    auto variants = ablation_variants(task.model);
    AblationReport report;
    report.rows.resize(variants.size());
    detail::parallel_for(variants.size(), threads, [&](std::size_t i) {
        const auto& [name, cfg] = variants[i];
        TrainConfig tc = task.train;
        tc.seed = derive_seed(task.seed, "train"); // shared seed across variants
        try {
            report.rows[i] = {name, train_and_evaluate(task, cfg, tc), 0.0, 0.0};
        } catch (const std::exception& e) {
            throw std::runtime_error("variant '" + name + "': " + e.what());
        }
    });
    const Metrics& full = report.rows[0].metrics;
    for (std::size_t i = 1; i < report.rows.size(); ++i) {
        report.rows[i].gamma_mse = gamma_ratio(full.mse, report.rows[i].metrics.mse);
        report.rows[i].gamma_mae = gamma_ratio(full.mae, report.rows[i].metrics.mae);
    }
    return report;
}

// ---- hyperparameter sweep ----

struct SweepPoint {
    double lr;
    std::size_t space_size;
    Metrics metrics;
};

struct SweepReport {
    std::vector<SweepPoint> grid;
    double mse_variance = 0.0; // population variance across the grid
    double mae_variance = 0.0;
};

inline double population_variance(const std::vector<double>& xs) {
    double mu = 0.0;
    for (double x : xs) mu += x;
    mu /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mu) * (x - mu);
    return var / static_cast<double>(xs.size());
}

inline SweepReport hyperparam_sweep(const Task& task,
                                    const std::vector<double>& lr_grid,
                                    const std::vector<std::size_t>& s_grid,
                                    std::size_t threads = 1) {
    if (lr_grid.empty() || s_grid.empty())
        throw std::invalid_argument("sweep grids must be nonempty");
    SweepReport report;
    report.grid.resize(lr_grid.size() * s_grid.size());
    detail::parallel_for(report.grid.size(), threads, [&](std::size_t i) {
        double lr = lr_grid[i / s_grid.size()];
        std::size_t s = s_grid[i % s_grid.size()];
        TefnConfig cfg = task.model;
        cfg.space_size = s;
        TrainConfig tc = task.train;
        tc.lr = lr;
        tc.seed = derive_seed(task.seed, "sweep", i);
        try {
            report.grid[i] = {lr, s, train_and_evaluate(task, cfg, tc)};
        } catch (const std::exception& e) {
            throw std::runtime_error("grid point (lr=" + std::to_string(lr) +
                                     ", S=" + std::to_string(s) + "): " + e.what());
        }
    });
    std::vector<double> mses, maes;
    for (auto& p : report.grid) {
        mses.push_back(p.metrics.mse);
        maes.push_back(p.metrics.mae);
    }
    report.mse_variance = population_variance(mses);
    report.mae_variance = population_variance(maes);
    return report;
}

// ---- robustness ----

struct RobustnessReport {
    Metrics clean;
    Metrics noisy;
    double delta_mse = 0.0;
    double delta_mae = 0.0;
};

using NoiseInjector = std::function<Matrix(const Matrix&, std::uint64_t)>;

inline std::vector<WindowSample> noisy_inputs(const std::vector<WindowSample>& windows,
                                              std::uint64_t seed,
                                              const NoiseInjector& inject) {
    std::vector<WindowSample> out = windows;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i].input = inject(out[i].input, derive_seed(seed, "noise", i));
    return out;
}

// Noise goes into model inputs at both train and test time; targets stay
// clean. `retrain` = false evaluates the clean-trained model on noisy
// inputs instead (the protocol the paper leaves unstated). The injector is
// swappable so tests can mock a zero draw.
inline RobustnessReport robustness_run(
    const Task& task, bool retrain = true,
    const NoiseInjector& inject = [](const Matrix& x, std::uint64_t s) {
        return data::inject_noise(x, s);
    }) {
    RobustnessReport report;
    auto clean_result =
        training::train(task.train_windows, task.val_windows, task.model, task.train);
    report.clean = evaluate(clean_result.best_params, task.model, task.test_windows);

    auto noisy_test =
        noisy_inputs(task.test_windows, derive_seed(task.seed, "test"), inject);
    if (retrain) {
        auto noisy_train =
            noisy_inputs(task.train_windows, derive_seed(task.seed, "tr"), inject);
        auto noisy_val =
            noisy_inputs(task.val_windows, derive_seed(task.seed, "val"), inject);
        TrainConfig tc = task.train;
        tc.seed = derive_seed(task.seed, "noisy-train");
        auto noisy_result = training::train(noisy_train, noisy_val, task.model, tc);
        report.noisy = evaluate(noisy_result.best_params, task.model, noisy_test);
    } else {
        report.noisy = evaluate(clean_result.best_params, task.model, noisy_test);
    }
    report.delta_mse = report.noisy.mse - report.clean.mse;
    report.delta_mae = report.noisy.mae - report.clean.mae;
    return report;
}

// ---- nonlinearity probe ----

struct ProbeRow {
    std::size_t l_pred;
    Metrics metrics;
};

struct ProbeReport {
    std::vector<ProbeRow> rows;
};

// A dataset's nonlinearity score: error of a bare shared affine time
// projection (no BPA event expansion, no instance normalization).
inline TefnConfig probe_config(std::size_t l_in, std::size_t l_pred,
                               std::size_t channels) {
    TefnConfig cfg;
    cfg.l_in = l_in;
    cfg.l_pred = l_pred;
    cfg.channels = channels;
    cfg.space_size = 0;
    cfg.use_norm = false;
    cfg.use_time_branch = true;
    cfg.use_channel_branch = false;
    cfg.bpa_mode = model::BpaMode::prob;
    cfg.fusion_mode = model::FusionMode::sum;
    cfg.activation = model::Activation::none;
    return cfg;
}

inline ProbeReport nonlinearity_probe(const std::function<Task(std::size_t)>& make_task_for,
                                      const std::vector<std::size_t>& horizons) {
    ProbeReport report;
    for (std::size_t h : horizons) {
        Task task = make_task_for(h);
        TefnConfig cfg = probe_config(task.model.l_in, h, task.model.channels);
        report.rows.push_back({h, train_and_evaluate(task, cfg, task.train)});
    }
    return report;
}

// ---- efficiency ----

struct CurvePoint {
    std::size_t l_pred;
    std::size_t l_total;
    double median_forward_seconds;
};

struct EfficiencyReport {
    double median_iteration_seconds = 0.0; // one training step (batch fwd+bwd+Adam)
    std::size_t param_count = 0;
    std::size_t checkpoint_bytes = 0;
    std::vector<CurvePoint> forward_curve;
};

inline double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    std::size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Forward-time curve: L_in stays fixed and the horizon grows, so the total
// length L = L_in + L_pred scales while cost stays linear in L.
inline std::vector<CurvePoint> forward_time_curve(
    std::size_t l_in, const std::vector<std::size_t>& horizons,
    std::size_t channels, std::size_t space_size, std::size_t reps = 30,
    std::uint64_t seed = 7) {
    std::vector<CurvePoint> curve;
    for (std::size_t h : horizons) {
        TefnConfig cfg;
        cfg.l_in = l_in;
        cfg.l_pred = h;
        cfg.channels = channels;
        cfg.space_size = space_size;
        TefnParams params = model::init_params(cfg, seed);
        Rng rng(derive_seed(seed, "input", h));
        Matrix x(cfg.l_in, channels);
        for (double& v : x.raw()) v = rng.normal();

        // warmup
        for (int i = 0; i < 3; ++i) (void)model::forward(x, params, cfg);
        std::vector<double> times;
        double sink = 0.0;
        for (std::size_t i = 0; i < reps; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            auto [fc, stats] = model::forward(x, params, cfg);
            auto t1 = std::chrono::steady_clock::now();
            sink += fc(0, 0);
            (void)stats;
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        if (!std::isfinite(sink))
            throw training::NonFiniteLoss("forward produced non-finite output");
        curve.push_back({h, cfg.l_in + h, median(times)});
    }
    return curve;
}

inline EfficiencyReport efficiency_report(const Task& task,
                                          std::size_t timed_iterations = 100) {
    EfficiencyReport report;
    report.param_count = model::param_count(task.model);

    TefnParams params = model::init_params(task.model, task.train.seed);
    training::AdamState adam = training::AdamState::create(task.model);
    std::size_t batch_size = std::min(task.train.batch_size, task.train_windows.size());
    std::vector<WindowSample> batch(task.train_windows.begin(),
                                    task.train_windows.begin() + batch_size);

    std::vector<double> times;
    for (std::size_t i = 0; i < timed_iterations; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        auto [loss, grads] = training::backward(batch, params, task.model);
        training::adam_step(params, grads, adam, task.train.lr);
        auto t1 = std::chrono::steady_clock::now();
        (void)loss;
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    report.median_iteration_seconds = median(times);

    namespace fs = std::filesystem;
    fs::path tmp = fs::temp_directory_path() /
                   ("tefn_size_probe_" + std::to_string(task.seed) + ".bin");
    training::save_checkpoint(params, task.model, tmp.string());
    report.checkpoint_bytes = static_cast<std::size_t>(fs::file_size(tmp));
    fs::remove(tmp);

    report.forward_curve = forward_time_curve(task.model.l_in, {96, 192, 384, 768},
                                              task.model.channels,
                                              task.model.space_size);
    return report;
}

// ---- interpretability export ----

// CSV of every membership line mu(x) = w*x + b in both BPA tables, sampled
// over x in [-3, 3] step 0.25.
inline void export_bpa_curves(TefnParams& params, const TefnConfig& cfg,
                              const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write " + path);
    out << "branch,index,event,w,b";
    std::vector<double> xs;
    for (double x = -3.0; x <= 3.0 + 1e-12; x += 0.25) xs.push_back(x);
    char buf[64];
    for (double x : xs) {
        std::snprintf(buf, sizeof buf, ",mu(%.2f)", x);
        out << buf;
    }
    out << '\n';
    auto emit = [&](const char* branch, const Matrix& w, const Matrix& b) {
        for (std::size_t j = 0; j < w.rows(); ++j)
            for (std::size_t k = 0; k < w.cols(); ++k) {
                out << branch << ',' << j << ',' << k;
                std::snprintf(buf, sizeof buf, ",%.17g,%.17g", w(j, k), b(j, k));
                out << buf;
                for (double x : xs) {
                    std::snprintf(buf, sizeof buf, ",%.17g", w(j, k) * x + b(j, k));
                    out << buf;
                }
                out << '\n';
            }
    };
    emit("time", params.w_time, params.b_time);
    emit("channel", params.w_chan, params.b_chan);
    (void)cfg;
}

} // namespace tefn::experiments
