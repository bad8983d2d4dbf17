#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "tefn/data.hpp"
#include "tefn/model.hpp"
#include "tefn/rng.hpp"

namespace tefn::training {

using data::WindowSample;
using model::TefnConfig;
using model::TefnParams;

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BadMagic : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VersionMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct Truncated : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double mse(const Matrix& y, const Matrix& y_hat) {
    if (!y.same_shape(y_hat))
        throw ShapeMismatch("mse: shape mismatch");
    if (y.size() == 0)
        throw EmptyInput("mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        double d = y.data()[i] - y_hat.data()[i];
        acc += d * d;
    }
    return acc / static_cast<double>(y.size());
}

inline double mae(const Matrix& y, const Matrix& y_hat) {
    if (!y.same_shape(y_hat))
        throw ShapeMismatch("mae: shape mismatch");
    if (y.size() == 0)
        throw EmptyInput("mae: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        acc += std::abs(y.data()[i] - y_hat.data()[i]);
    return acc / static_cast<double>(y.size());
}

// Gradients are shape-congruent with the parameters, so the same container
// serves both.
using Gradients = TefnParams;

inline Gradients zero_gradients(const TefnConfig& cfg) {
    Gradients g;
    g.w_proj = Matrix(cfg.l_in, cfg.l_total());
    g.b_proj.assign(cfg.l_total(), 0.0);
    g.w_time = Matrix(cfg.l_total(), cfg.event_dim());
    g.b_time = Matrix(cfg.l_total(), cfg.event_dim());
    g.w_chan = Matrix(cfg.channels, cfg.event_dim());
    g.b_chan = Matrix(cfg.channels, cfg.event_dim());
    if (cfg.fusion_mode == model::FusionMode::concat)
        g.w_fuse.assign(cfg.branch_count() * cfg.event_dim(), 0.0);
    g.b_fuse = 0.0;
    return g;
}

inline double activation_derivative(double pre, model::Activation mode) {
    switch (mode) {
        case model::Activation::none: return 1.0;
        case model::Activation::relu: return pre > 0.0 ? 2.0 : 1.0;
        case model::Activation::tanh: {
            double t = std::tanh(pre);
            return 2.0 - t * t; // d/dv of v + tanh(v)
        }
    }
    return 1.0;
}

// Analytic gradient of mean MSE over the batch w.r.t. every parameter
// tensor. Normalization stats depend only on the input, so no gradient
// flows through them.
inline std::pair<double, Gradients> backward(const std::vector<WindowSample>& batch,
                                             const TefnParams& params,
                                             const TefnConfig& cfg) {
    if (batch.empty())
        throw EmptyInput("backward: empty batch");
    const std::size_t l_tot = cfg.l_total(), cols = cfg.channels;
    const std::size_t events = cfg.event_dim();
    const double inv_cells =
        1.0 / static_cast<double>(batch.size() * cfg.l_pred * cols);

    Gradients g = zero_gradients(cfg);
    double loss = 0.0;

    for (const WindowSample& sample : batch) {
        model::ForwardTrace tr = model::forward_traced(sample.input, params, cfg);

        // loss and gradient at the forecast
        Matrix dfused(l_tot, cols); // zero outside the horizon rows
        for (std::size_t r = 0; r < cfg.l_pred; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                double diff = tr.forecast(r, c) - sample.target(r, c);
                loss += diff * diff * inv_cells;
                double d = 2.0 * diff * inv_cells;
                if (cfg.use_norm) d *= tr.stats.sigma[c];
                dfused(cfg.l_in + r, c) = d;
            }

        // through fusion into the mass tensors
        Tensor3 da_time, da_chan;
        if (cfg.fusion_mode == model::FusionMode::sum) {
            if (cfg.use_time_branch) {
                da_time = Tensor3(l_tot, cols, events);
                for (std::size_t t = 0; t < l_tot; ++t)
                    for (std::size_t c = 0; c < cols; ++c)
                        for (std::size_t k = 0; k < events; ++k)
                            da_time(t, c, k) = dfused(t, c);
            }
            if (cfg.use_channel_branch) {
                da_chan = Tensor3(l_tot, cols, events);
                for (std::size_t t = 0; t < l_tot; ++t)
                    for (std::size_t c = 0; c < cols; ++c)
                        for (std::size_t k = 0; k < events; ++k)
                            da_chan(t, c, k) = dfused(t, c);
            }
        } else {
            if (cfg.use_time_branch) da_time = Tensor3(l_tot, cols, events);
            if (cfg.use_channel_branch) da_chan = Tensor3(l_tot, cols, events);
            for (std::size_t t = 0; t < l_tot; ++t)
                for (std::size_t c = 0; c < cols; ++c) {
                    double d = dfused(t, c);
                    if (d == 0.0) continue;
                    std::size_t q = 0;
                    if (cfg.use_time_branch)
                        for (std::size_t k = 0; k < events; ++k, ++q) {
                            da_time(t, c, k) = d * params.w_fuse[q];
                            g.w_fuse[q] += d * tr.a_time(t, c, k);
                        }
                    if (cfg.use_channel_branch)
                        for (std::size_t k = 0; k < events; ++k, ++q) {
                            da_chan(t, c, k) = d * params.w_fuse[q];
                            g.w_fuse[q] += d * tr.a_chan(t, c, k);
                        }
                    g.b_fuse += d;
                }
        }

        // through activation and the BPA tables into the projection
        Matrix dproj(l_tot, cols);
        if (cfg.use_time_branch) {
            for (std::size_t t = 0; t < l_tot; ++t)
                for (std::size_t c = 0; c < cols; ++c) {
                    double dz = 0.0;
                    for (std::size_t k = 0; k < events; ++k) {
                        double dm = da_time(t, c, k) *
                                    activation_derivative(tr.m_time(t, c, k),
                                                          cfg.activation);
                        g.w_time(t, k) += dm * tr.projected(t, c);
                        g.b_time(t, k) += dm;
                        dz += dm * params.w_time(t, k);
                    }
                    dproj(t, c) += dz;
                }
        }
        if (cfg.use_channel_branch) {
            for (std::size_t t = 0; t < l_tot; ++t)
                for (std::size_t c = 0; c < cols; ++c) {
                    double dz = 0.0;
                    for (std::size_t k = 0; k < events; ++k) {
                        double dm = da_chan(t, c, k) *
                                    activation_derivative(tr.m_chan(t, c, k),
                                                          cfg.activation);
                        g.w_chan(c, k) += dm * tr.projected(t, c);
                        g.b_chan(c, k) += dm;
                        dz += dm * params.w_chan(c, k);
                    }
                    dproj(t, c) += dz;
                }
        }

        // through the shared time projection
        for (std::size_t l = 0; l < l_tot; ++l)
            for (std::size_t c = 0; c < cols; ++c) {
                double d = dproj(l, c);
                if (d == 0.0) continue;
                g.b_proj[l] += d;
                for (std::size_t t = 0; t < cfg.l_in; ++t)
                    g.w_proj(t, l) += d * tr.x_norm(t, c);
            }
    }

    if (!std::isfinite(loss) || !g.all_finite())
        throw NonFiniteLoss("non-finite loss or gradient");
    return {loss, std::move(g)};
}

struct FiniteDiffEntry {
    std::string tensor;
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
};

struct FiniteDiffReport {
    std::vector<FiniteDiffEntry> per_tensor;
    double worst() const {
        double w = 0.0;
        for (auto& e : per_tensor) w = std::max(w, e.max_rel_error);
        return w;
    }
};

// Central differences against a supplied gradient. All coordinates are
// checked when the model is small (< 5000 parameters), otherwise a seeded
// subsample per tensor.
inline FiniteDiffReport finite_diff_check_against(TefnParams params,
                                                  const WindowSample& sample,
                                                  const TefnConfig& cfg,
                                                  Gradients analytic,
                                                  double step = 1e-5,
                                                  std::size_t subsample = 200,
                                                  std::uint64_t seed = 0) {
    if (step <= 0.0)
        throw std::invalid_argument("finite difference step must be positive");

    auto loss_at = [&](const TefnParams& p) {
        auto [fc, stats] = model::forward(sample.input, p, cfg);
        (void)stats;
        return mse(sample.target, fc);
    };

    std::size_t total = 0;
    for (auto& t : params.tensors()) total += t.size;
    const bool exhaustive = total < 5000;

    FiniteDiffReport report;
    Rng rng(derive_seed(seed, "fdcheck"));
    auto a_tensors = analytic.tensors();
    auto p_tensors = params.tensors();
    for (std::size_t ti = 0; ti < p_tensors.size(); ++ti) {
        auto& pt = p_tensors[ti];
        auto& at = a_tensors[ti];
        FiniteDiffEntry entry;
        entry.tensor = pt.name;
        std::vector<std::size_t> coords;
        if (exhaustive || pt.size <= subsample) {
            coords.resize(pt.size);
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            for (std::size_t i = 0; i < subsample; ++i)
                coords.push_back(rng.index(pt.size));
        }
        for (std::size_t i : coords) {
            double saved = pt.data[i];
            pt.data[i] = saved + step;
            double up = loss_at(params);
            pt.data[i] = saved - step;
            double down = loss_at(params);
            pt.data[i] = saved;
            double numeric = (up - down) / (2.0 * step);
            double ga = at.data[i];
            double rel = std::abs(ga - numeric) /
                         std::max({std::abs(ga), std::abs(numeric), 1e-8});
            entry.max_rel_error = std::max(entry.max_rel_error, rel);
            ++entry.coords_checked;
        }
        report.per_tensor.push_back(std::move(entry));
    }
    return report;
}

inline FiniteDiffReport finite_diff_check(const TefnParams& params,
                                          const WindowSample& sample,
                                          const TefnConfig& cfg,
                                          double step = 1e-5,
                                          std::size_t subsample = 200,
                                          std::uint64_t seed = 0) {
    std::vector<WindowSample> batch{sample};
    auto [loss, analytic] = backward(batch, params, cfg);
    (void)loss;
    return finite_diff_check_against(params, sample, cfg, std::move(analytic),
                                     step, subsample, seed);
}

struct AdamState {
    Gradients m, v;
    std::uint64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState create(const TefnConfig& cfg) {
        AdamState s;
        s.m = zero_gradients(cfg);
        s.v = zero_gradients(cfg);
        return s;
    }
};

inline void adam_step(TefnParams& params, Gradients& grads, AdamState& state,
                      double lr) {
    ++state.t;
    auto pt = params.tensors();
    auto gt = grads.tensors();
    auto mt = state.m.tensors();
    auto vt = state.v.tensors();
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (std::size_t ti = 0; ti < pt.size(); ++ti) {
        for (std::size_t i = 0; i < pt[ti].size; ++i) {
            double g = gt[ti].data[i];
            double& m = mt[ti].data[i];
            double& v = vt[ti].data[i];
            m = state.beta1 * m + (1.0 - state.beta1) * g;
            v = state.beta2 * v + (1.0 - state.beta2) * g * g;
            double m_hat = m / bc1;
            double v_hat = v / bc2;
            pt[ti].data[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

enum class LrSchedule { halve_per_epoch, constant };

struct TrainConfig {
    double lr = 0.01;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 10;
    std::size_t patience = 3;
    LrSchedule lr_schedule = LrSchedule::halve_per_epoch;
    std::uint64_t seed = 0;

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("lr must be positive");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch;
    double train_mse;
    double val_mse;
    double lr;
    double seconds;
};

struct TrainResult {
    TefnParams best_params;
    double best_val_mse = 0.0;
    std::size_t best_epoch = 0;
    std::vector<EpochRecord> history;
};

inline double dataset_mse(const std::vector<WindowSample>& windows,
                          const TefnParams& params, const TefnConfig& cfg) {
    double acc = 0.0;
    for (const auto& w : windows) {
        auto [fc, stats] = model::forward(w.input, params, cfg);
        (void)stats;
        acc += mse(w.target, fc);
    }
    return acc / static_cast<double>(windows.size());
}

// Deterministic epoch loop: seeded shuffles, validation after each epoch,
// best-so-far kept, early stop after `patience` epochs without improvement.
inline TrainResult train(const std::vector<WindowSample>& train_windows,
                         const std::vector<WindowSample>& val_windows,
                         const TefnConfig& cfg, const TrainConfig& tc) {
    cfg.validate();
    tc.validate();
    if (train_windows.empty() || val_windows.empty())
        throw EmptyInput("train: window sets must be nonempty");

    TefnParams params = model::init_params(cfg, derive_seed(tc.seed, "params"));
    AdamState adam = AdamState::create(cfg);

    TrainResult result;
    result.best_params = params;
    result.best_val_mse = dataset_mse(val_windows, params, cfg);
    std::size_t epochs_without_improvement = 0;

    std::vector<std::size_t> order(train_windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double lr = tc.lr;
    for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(tc.seed, "epoch", epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.index(i)]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += tc.batch_size) {
            std::size_t end = std::min(begin + tc.batch_size, order.size());
            std::vector<WindowSample> batch;
            batch.reserve(end - begin);
            for (std::size_t i = begin; i < end; ++i)
                batch.push_back(train_windows[order[i]]);
            double loss;
            Gradients grads;
            try {
                std::tie(loss, grads) = backward(batch, params, cfg);
            } catch (const NonFiniteLoss&) {
                throw NonFiniteLoss("non-finite loss at epoch " +
                                    std::to_string(epoch) + ", batch " +
                                    std::to_string(batches));
            }
            adam_step(params, grads, adam, lr);
            epoch_loss += loss;
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);

        double val = dataset_mse(val_windows, params, cfg);
        auto t1 = std::chrono::steady_clock::now();
        result.history.push_back(
            {epoch, epoch_loss, val, lr,
             std::chrono::duration<double>(t1 - t0).count()});

        if (val < result.best_val_mse) {
            result.best_val_mse = val;
            result.best_params = params;
            result.best_epoch = epoch;
            epochs_without_improvement = 0;
        } else {
            ++epochs_without_improvement;
            if (epochs_without_improvement >= tc.patience) break;
        }
        if (tc.lr_schedule == LrSchedule::halve_per_epoch) lr *= 0.5;
    }
    return result;
}

inline void write_history_csv(const std::vector<EpochRecord>& history,
                              const std::string& path) {
    std::ofstream out(path);
    out << "epoch,train_mse,val_mse,lr,seconds\n";
    out.precision(17);
    for (const auto& r : history)
        out << r.epoch << ',' << r.train_mse << ',' << r.val_mse << ',' << r.lr
            << ',' << r.seconds << '\n';
}

// ---- checkpoint format ----
// magic "TEFN", version u32, config block, tensor count u32, then per
// tensor: name length u32, name bytes, ndims u32, dims u64 each,
// little-endian f64 payload.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v;
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw Truncated("checkpoint ends mid-field");
    return v;
}

} // namespace detail

inline void save_checkpoint(TefnParams& params, const TefnConfig& cfg,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw std::runtime_error("cannot write " + path);
    out.write("TEFN", 4);
    detail::write_pod(out, kCheckpointVersion);
    detail::write_pod<std::uint64_t>(out, cfg.l_in);
    detail::write_pod<std::uint64_t>(out, cfg.l_pred);
    detail::write_pod<std::uint64_t>(out, cfg.channels);
    detail::write_pod<std::uint64_t>(out, cfg.space_size);
    detail::write_pod<std::uint8_t>(out, cfg.use_norm);
    detail::write_pod<std::uint8_t>(out, cfg.use_time_branch);
    detail::write_pod<std::uint8_t>(out, cfg.use_channel_branch);
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(cfg.bpa_mode));
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(cfg.fusion_mode));
    detail::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(cfg.activation));
    detail::write_pod(out, cfg.eps);

    auto tensors = params.tensors();
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (auto& t : tensors) {
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
        for (std::size_t d : t.dims)
            detail::write_pod<std::uint64_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.size * sizeof(double)));
    }
}

inline std::pair<TefnParams, TefnConfig> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot read " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "TEFN", 4) != 0)
        throw BadMagic("not a TEFN checkpoint: " + path);
    auto version = detail::read_pod<std::uint32_t>(in);
    if (version != kCheckpointVersion)
        throw VersionMismatch("unsupported checkpoint version " +
                              std::to_string(version));
    TefnConfig cfg;
    cfg.l_in = detail::read_pod<std::uint64_t>(in);
    cfg.l_pred = detail::read_pod<std::uint64_t>(in);
    cfg.channels = detail::read_pod<std::uint64_t>(in);
    cfg.space_size = detail::read_pod<std::uint64_t>(in);
    cfg.use_norm = detail::read_pod<std::uint8_t>(in);
    cfg.use_time_branch = detail::read_pod<std::uint8_t>(in);
    cfg.use_channel_branch = detail::read_pod<std::uint8_t>(in);
    cfg.bpa_mode = static_cast<model::BpaMode>(detail::read_pod<std::uint8_t>(in));
    cfg.fusion_mode = static_cast<model::FusionMode>(detail::read_pod<std::uint8_t>(in));
    cfg.activation = static_cast<model::Activation>(detail::read_pod<std::uint8_t>(in));
    cfg.eps = detail::read_pod<double>(in);
    cfg.validate();

    TefnParams params = zero_gradients(cfg);
    auto tensors = params.tensors();
    auto count = detail::read_pod<std::uint32_t>(in);
    if (count != tensors.size())
        throw Truncated("checkpoint tensor count mismatch");
    for (auto& t : tensors) {
        auto name_len = detail::read_pod<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in || name != t.name)
            throw Truncated("unexpected tensor '" + name + "'");
        auto ndims = detail::read_pod<std::uint32_t>(in);
        if (ndims != t.dims.size())
            throw Truncated("tensor rank mismatch for " + t.name);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndims; ++d) {
            auto dim = detail::read_pod<std::uint64_t>(in);
            if (dim != t.dims[d])
                throw Truncated("tensor shape mismatch for " + t.name);
            total *= dim;
        }
        in.read(reinterpret_cast<char*>(t.data),
                static_cast<std::streamsize>(total * sizeof(double)));
        if (!in)
            throw Truncated("checkpoint payload ends inside " + t.name);
    }
    return {std::move(params), cfg};
}

} // namespace tefn::training
