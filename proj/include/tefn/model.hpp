#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "tefn/rng.hpp"
#include "tefn/tensor.hpp"

namespace tefn::model {

enum class BpaMode { bpa, prob };
enum class FusionMode { sum, concat };
enum class Activation { none, relu, tanh };

struct TefnConfig {
    std::size_t l_in = 96;
    std::size_t l_pred = 96;
    std::size_t channels = 7;
    std::size_t space_size = 1; // |S|; event dim = 2^|S|
    bool use_norm = true;
    bool use_time_branch = true;
    bool use_channel_branch = true;
    BpaMode bpa_mode = BpaMode::bpa;
    FusionMode fusion_mode = FusionMode::sum;
    Activation activation = Activation::none;
    double eps = 1e-5;

    std::size_t l_total() const { return l_in + l_pred; }

    // Event dimension: 2^|S| in bpa mode, degenerate 1 in prob mode.
    std::size_t event_dim() const {
        return bpa_mode == BpaMode::prob ? 1 : (std::size_t{1} << space_size);
    }

    std::size_t branch_count() const {
        return (use_time_branch ? 1u : 0u) + (use_channel_branch ? 1u : 0u);
    }

    void validate() const {
        if (l_in < 1 || l_pred < 1 || channels < 1)
            throw std::invalid_argument("L_in, L_pred and C must be >= 1");
        if (space_size > 16)
            throw std::invalid_argument("|S| must be <= 16");
        if (branch_count() == 0)
            throw std::invalid_argument("at least one branch must be enabled");
        if (eps <= 0.0)
            throw std::invalid_argument("eps must be positive");
    }
};

struct TefnParams {
    Matrix w_proj;  // L_in x L_total
    std::vector<double> b_proj; // L_total
    Matrix w_time, b_time;      // L_total x event_dim
    Matrix w_chan, b_chan;      // C x event_dim
    std::vector<double> w_fuse; // branch_count * event_dim (concat fusion only)
    double b_fuse = 0.0;

    struct TensorRef {
        std::string name;
        double* data;
        std::size_t size;
        std::vector<std::size_t> dims;
    };

    // Stable enumeration of every parameter tensor; checkpointing,
    // gradients and the optimizer all walk this list.
    std::vector<TensorRef> tensors() {
        std::vector<TensorRef> out;
        out.push_back({"w_proj", w_proj.data(), w_proj.size(), {w_proj.rows(), w_proj.cols()}});
        out.push_back({"b_proj", b_proj.data(), b_proj.size(), {b_proj.size()}});
        out.push_back({"w_time", w_time.data(), w_time.size(), {w_time.rows(), w_time.cols()}});
        out.push_back({"b_time", b_time.data(), b_time.size(), {b_time.rows(), b_time.cols()}});
        out.push_back({"w_chan", w_chan.data(), w_chan.size(), {w_chan.rows(), w_chan.cols()}});
        out.push_back({"b_chan", b_chan.data(), b_chan.size(), {b_chan.rows(), b_chan.cols()}});
        if (!w_fuse.empty()) {
            out.push_back({"w_fuse", w_fuse.data(), w_fuse.size(), {w_fuse.size()}});
            out.push_back({"b_fuse", &b_fuse, 1, {1}});
        }
        return out;
    }

    bool all_finite() const {
        auto ok = [](const double* p, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i)
                if (!std::isfinite(p[i])) return false;
            return true;
        };
        return ok(w_proj.data(), w_proj.size()) && ok(b_proj.data(), b_proj.size()) &&
               ok(w_time.data(), w_time.size()) && ok(b_time.data(), b_time.size()) &&
               ok(w_chan.data(), w_chan.size()) && ok(b_chan.data(), b_chan.size()) &&
               ok(w_fuse.data(), w_fuse.size()) && std::isfinite(b_fuse);
    }
};

struct NormStats {
    std::vector<double> mu;    // per channel
    std::vector<double> sigma; // per channel, sqrt(var + eps)
};

// Per-sample per-channel standardization of the lookback window,
// sigma = sqrt(population variance + eps).
inline std::pair<Matrix, NormStats> instance_normalize(const Matrix& x, double eps) {
    const std::size_t rows = x.rows(), cols = x.cols();
    NormStats stats;
    stats.mu.resize(cols);
    stats.sigma.resize(cols);
    Matrix out(rows, cols);
    for (std::size_t c = 0; c < cols; ++c) {
        double mu = 0.0;
        for (std::size_t r = 0; r < rows; ++r) mu += x(r, c);
        mu /= static_cast<double>(rows);
        double var = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double d = x(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(rows);
        double sigma = std::sqrt(var + eps);
        stats.mu[c] = mu;
        stats.sigma[c] = sigma;
        for (std::size_t r = 0; r < rows; ++r)
            out(r, c) = (x(r, c) - mu) / sigma;
    }
    return {std::move(out), std::move(stats)};
}

inline Matrix denormalize(const Matrix& y_norm, const NormStats& stats) {
    if (y_norm.cols() != stats.mu.size())
        throw ShapeMismatch("denormalize: channel count mismatch");
    Matrix out(y_norm.rows(), y_norm.cols());
    for (std::size_t r = 0; r < y_norm.rows(); ++r)
        for (std::size_t c = 0; c < y_norm.cols(); ++c)
            out(r, c) = stats.sigma[c] * y_norm(r, c) + stats.mu[c];
    return out;
}

// Shared affine map per channel from the L_in time vector to length
// L_in + L_pred: out[:, c] = W^T x[:, c] + b.
inline Matrix time_project(const Matrix& x_norm, const Matrix& w,
                           const std::vector<double>& b) {
    const std::size_t l_in = x_norm.rows(), cols = x_norm.cols();
    const std::size_t l_tot = w.cols();
    if (w.rows() != l_in || b.size() != l_tot)
        throw ShapeMismatch("time_project: weight shape mismatch");
    Matrix out(l_tot, cols);
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t l = 0; l < l_tot; ++l) {
            double acc = b[l];
            for (std::size_t t = 0; t < l_in; ++t)
                acc += w(t, l) * x_norm(t, c);
            out(l, c) = acc;
        }
    return out;
}

enum class BpaAxis { time, channel };

// Per-element affine fan-out into the event dimension (not a matrix
// product): time axis shares parameters across channels, channel axis
// shares them across time steps.
inline Tensor3 bpa_expand(const Matrix& x, BpaAxis axis, const Matrix& w,
                          const Matrix& b) {
    const std::size_t l_tot = x.rows(), cols = x.cols();
    const std::size_t events = w.cols();
    if (!w.same_shape(b))
        throw ShapeMismatch("bpa_expand: w and b shapes differ");
    if (axis == BpaAxis::time && w.rows() != l_tot)
        throw ShapeMismatch("bpa_expand: time-axis tables must have L_total rows");
    if (axis == BpaAxis::channel && w.rows() != cols)
        throw ShapeMismatch("bpa_expand: channel-axis tables must have C rows");
    Tensor3 m(l_tot, cols, events);
    for (std::size_t t = 0; t < l_tot; ++t)
        for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t j = axis == BpaAxis::time ? t : c;
            for (std::size_t k = 0; k < events; ++k)
                m(t, c, k) = w(j, k) * x(t, c) + b(j, k);
        }
    return m;
}

inline double activate_residual(double v, Activation mode) {
    switch (mode) {
        case Activation::none: return v;
        case Activation::relu: return v + (v > 0.0 ? v : 0.0);
        case Activation::tanh: return v + std::tanh(v);
    }
    return v;
}

inline Tensor3 apply_activation(const Tensor3& m, Activation mode) {
    if (mode == Activation::none) return m;
    Tensor3 out = m;
    for (double& v : out.raw()) v = activate_residual(v, mode);
    return out;
}

// Reduction over the event dimension only; the (time, channel) grid
// survives.
inline Matrix expectation_fuse(const Tensor3& m) {
    Matrix out(m.dim0(), m.dim1());
    for (std::size_t t = 0; t < m.dim0(); ++t)
        for (std::size_t c = 0; c < m.dim1(); ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < m.dim2(); ++k) acc += m(t, c, k);
            out(t, c) = acc;
        }
    return out;
}

// Forward activations kept around for the backward pass.
struct ForwardTrace {
    Matrix x_norm;     // L_in x C (input if use_norm off)
    NormStats stats;
    Matrix projected;  // L_total x C
    Tensor3 m_time, m_chan;     // pre-activation mass tensors
    Tensor3 a_time, a_chan;     // post-activation
    Matrix fused_norm; // L_total x C
    Matrix forecast;   // L_pred x C
};

inline ForwardTrace forward_traced(const Matrix& x, const TefnParams& p,
                                   const TefnConfig& cfg) {
    if (x.rows() != cfg.l_in || x.cols() != cfg.channels)
        throw ShapeMismatch("forward: input must be L_in x C");
    ForwardTrace tr;
    if (cfg.use_norm) {
        auto [xn, stats] = instance_normalize(x, cfg.eps);
        tr.x_norm = std::move(xn);
        tr.stats = std::move(stats);
    } else {
        tr.x_norm = x;
    }
    tr.projected = time_project(tr.x_norm, p.w_proj, p.b_proj);

    const std::size_t l_tot = cfg.l_total(), cols = cfg.channels;
    const std::size_t events = cfg.event_dim();
    if (cfg.use_time_branch) {
        tr.m_time = bpa_expand(tr.projected, BpaAxis::time, p.w_time, p.b_time);
        tr.a_time = apply_activation(tr.m_time, cfg.activation);
    }
    if (cfg.use_channel_branch) {
        tr.m_chan = bpa_expand(tr.projected, BpaAxis::channel, p.w_chan, p.b_chan);
        tr.a_chan = apply_activation(tr.m_chan, cfg.activation);
    }

    tr.fused_norm = Matrix(l_tot, cols);
    if (cfg.fusion_mode == FusionMode::sum) {
        if (cfg.use_time_branch) {
            Matrix f = expectation_fuse(tr.a_time);
            for (std::size_t i = 0; i < f.size(); ++i)
                tr.fused_norm.data()[i] += f.data()[i];
        }
        if (cfg.use_channel_branch) {
            Matrix f = expectation_fuse(tr.a_chan);
            for (std::size_t i = 0; i < f.size(); ++i)
                tr.fused_norm.data()[i] += f.data()[i];
        }
    } else {
        // concat: stack the branch event axes and apply one shared affine
        // output map per (t, c) cell
        const std::size_t width = cfg.branch_count() * events;
        if (p.w_fuse.size() != width)
            throw ShapeMismatch("forward: concat fusion weights have wrong width");
        for (std::size_t t = 0; t < l_tot; ++t)
            for (std::size_t c = 0; c < cols; ++c) {
                double acc = p.b_fuse;
                std::size_t q = 0;
                if (cfg.use_time_branch)
                    for (std::size_t k = 0; k < events; ++k, ++q)
                        acc += p.w_fuse[q] * tr.a_time(t, c, k);
                if (cfg.use_channel_branch)
                    for (std::size_t k = 0; k < events; ++k, ++q)
                        acc += p.w_fuse[q] * tr.a_chan(t, c, k);
                tr.fused_norm(t, c) = acc;
            }
    }

    // forecast = last L_pred rows, de-normalized back to the input scale
    tr.forecast = Matrix(cfg.l_pred, cols);
    for (std::size_t r = 0; r < cfg.l_pred; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            double v = tr.fused_norm(cfg.l_in + r, c);
            if (cfg.use_norm) v = tr.stats.sigma[c] * v + tr.stats.mu[c];
            tr.forecast(r, c) = v;
        }
    return tr;
}

inline std::pair<Matrix, NormStats> forward(const Matrix& x, const TefnParams& p,
                                            const TefnConfig& cfg) {
    ForwardTrace tr = forward_traced(x, p, cfg);
    return {std::move(tr.forecast), std::move(tr.stats)};
}

inline TefnParams init_params(const TefnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init"));
    const std::size_t l_tot = cfg.l_total();
    const std::size_t events = cfg.event_dim();
    const double proj_bound = 1.0 / std::sqrt(static_cast<double>(cfg.l_in));
    const double bpa_bound =
        0.01 / std::sqrt(static_cast<double>(std::size_t{1} << cfg.space_size));

    TefnParams p;
    p.w_proj = Matrix(cfg.l_in, l_tot);
    for (double& v : p.w_proj.raw()) v = rng.uniform(-proj_bound, proj_bound);
    p.b_proj.resize(l_tot);
    for (double& v : p.b_proj) v = rng.uniform(-proj_bound, proj_bound);

    p.w_time = Matrix(l_tot, events);
    p.b_time = Matrix(l_tot, events);
    for (double& v : p.w_time.raw()) v = rng.uniform(-bpa_bound, bpa_bound);
    p.w_chan = Matrix(cfg.channels, events);
    p.b_chan = Matrix(cfg.channels, events);
    for (double& v : p.w_chan.raw()) v = rng.uniform(-bpa_bound, bpa_bound);

    if (cfg.fusion_mode == FusionMode::concat) {
        const std::size_t width = cfg.branch_count() * events;
        const double fuse_bound = 1.0 / std::sqrt(static_cast<double>(width));
        p.w_fuse.resize(width);
        for (double& v : p.w_fuse) v = rng.uniform(-fuse_bound, fuse_bound);
        p.b_fuse = 0.0;
    }
    return p;
}

inline std::size_t param_count(const TefnConfig& cfg) {
    cfg.validate();
    const std::size_t l_tot = cfg.l_total();
    const std::size_t events = cfg.event_dim();
    std::size_t n = cfg.l_in * l_tot + l_tot;       // projection
    n += 2 * (l_tot * events);                      // time BPA tables
    n += 2 * (cfg.channels * events);               // channel BPA tables
    if (cfg.fusion_mode == FusionMode::concat)
        n += cfg.branch_count() * events + 1;
    return n;
}

} // namespace tefn::model
