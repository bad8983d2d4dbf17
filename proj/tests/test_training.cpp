#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tefn/data.hpp"
#include "tefn/model.hpp"
#include "tefn/rng.hpp"
#include "tefn/training.hpp"

using namespace tefn;
using namespace tefn::model;
using namespace tefn::training;
using data::WindowSample;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                     double lo = -1.0, double hi = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.raw()) v = rng.uniform(lo, hi);
    return m;
}

WindowSample random_sample(const TefnConfig& cfg, Rng& rng) {
    WindowSample s;
    s.input = random_matrix(cfg.l_in, cfg.channels, rng);
    s.target = random_matrix(cfg.l_pred, cfg.channels, rng);
    return s;
}

TefnParams random_params(const TefnConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    TefnParams p = zero_gradients(cfg);
    for (auto& t : p.tensors())
        for (std::size_t i = 0; i < t.size; ++i)
            t.data[i] = rng.uniform(-0.5, 0.5);
    return p;
}

// Solve the dense symmetric system A x = b by Gaussian elimination with
// partial pivoting; used by the least-squares oracle.
std::vector<double> solve_linear(Matrix a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(col, c), a(pivot, c));
            std::swap(b[col], b[pivot]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a(r, col) / a(col, col);
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
        double acc = b[ri];
        for (std::size_t c = ri + 1; c < n; ++c) acc -= a(ri, c) * x[c];
        x[ri] = acc / a(ri, ri);
    }
    return x;
}

} // namespace

TEST_CASE("mse and mae basics plus loop oracle") {
    Matrix y(1, 2), yh(1, 2);
    y(0, 0) = 0.0;
    y(0, 1) = 0.0;
    yh(0, 0) = 1.0;
    yh(0, 1) = -1.0;
    CHECK(mse(y, yh) == doctest::Approx(1.0));
    CHECK(mae(y, yh) == doctest::Approx(1.0));
    CHECK(mse(y, y) == doctest::Approx(0.0));
    CHECK(mae(y, y) == doctest::Approx(0.0));

    Rng rng(3);
    Matrix a = random_matrix(5, 4, rng), b = random_matrix(5, 4, rng);
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a.data()[i] - b.data()[i];
        se += d * d;
        ae += std::abs(d);
    }
    CHECK(mse(a, b) == doctest::Approx(se / 20.0).epsilon(1e-12));
    CHECK(mae(a, b) == doctest::Approx(ae / 20.0).epsilon(1e-12));

    Matrix wrong(4, 4);
    CHECK_THROWS_AS(mse(a, wrong), ShapeMismatch);
    Matrix empty;
    CHECK_THROWS_AS(mse(empty, empty), EmptyInput);
}

TEST_CASE("backward on an all-zero fixture yields zero loss and gradients") {
    TefnConfig cfg;
    cfg.l_in = 4;
    cfg.l_pred = 2;
    cfg.channels = 2;
    cfg.space_size = 1;
    cfg.use_norm = false;
    TefnParams zero = zero_gradients(cfg);
    WindowSample s;
    s.input = Matrix(cfg.l_in, cfg.channels, 0.0);
    s.target = Matrix(cfg.l_pred, cfg.channels, 0.0);
    auto [loss, g] = backward({s}, zero, cfg);
    CHECK(loss == 0.0);
    for (auto& t : g.tensors())
        for (std::size_t i = 0; i < t.size; ++i)
            CHECK(t.data[i] == 0.0);
}

TEST_CASE("backward matches a hand-expanded closed form on the tiny fixture") {
    // L_in = 2, L_pred = 1, C = 1, prob mode, sum fusion, no norm, no
    // activation. With z_l = sum_t W_p(t,l) x_t + b_l the forecast is
    //   yn_2 = (wT_2 + wC_0) z_2 + bT_2 + bC_0
    // and e = yn_2 - y gives
    //   d wT_2 = 2 e z_2, d bT_2 = 2 e, d wC_0 = 2 e z_2, d bC_0 = 2 e,
    //   d z_2 = 2 e (wT_2 + wC_0), d W_p(t,2) = d z_2 * x_t, d b_p(2) = d z_2
    // with every other slot exactly zero.
    TefnConfig cfg;
    cfg.l_in = 2;
    cfg.l_pred = 1;
    cfg.channels = 1;
    cfg.space_size = 0;
    cfg.bpa_mode = BpaMode::prob;
    cfg.use_norm = false;

    TefnParams p = zero_gradients(cfg);
    p.w_proj(0, 0) = 0.3; p.w_proj(1, 0) = -0.1;
    p.w_proj(0, 1) = 0.2; p.w_proj(1, 1) = 0.4;
    p.w_proj(0, 2) = -0.5; p.w_proj(1, 2) = 0.7;
    p.b_proj = {0.05, -0.02, 0.11};
    p.w_time(0, 0) = 0.9; p.w_time(1, 0) = -0.6; p.w_time(2, 0) = 1.3;
    p.b_time(0, 0) = 0.2; p.b_time(1, 0) = 0.1; p.b_time(2, 0) = -0.3;
    p.w_chan(0, 0) = 0.45;
    p.b_chan(0, 0) = -0.15;

    WindowSample s;
    s.input = Matrix(2, 1);
    s.input(0, 0) = 1.7;
    s.input(1, 0) = -0.8;
    s.target = Matrix(1, 1);
    s.target(0, 0) = 0.25;

    const double x0 = 1.7, x1 = -0.8, y = 0.25;
    const double z2 = p.w_proj(0, 2) * x0 + p.w_proj(1, 2) * x1 + p.b_proj[2];
    const double yn2 = (p.w_time(2, 0) + p.w_chan(0, 0)) * z2 +
                       p.b_time(2, 0) + p.b_chan(0, 0);
    const double e = yn2 - y;

    auto [loss, g] = backward({s}, p, cfg);
    CHECK(loss == doctest::Approx(e * e).epsilon(1e-12));
    CHECK(g.w_time(2, 0) == doctest::Approx(2 * e * z2).epsilon(1e-12));
    CHECK(g.b_time(2, 0) == doctest::Approx(2 * e).epsilon(1e-12));
    CHECK(g.w_chan(0, 0) == doctest::Approx(2 * e * z2).epsilon(1e-12));
    CHECK(g.b_chan(0, 0) == doctest::Approx(2 * e).epsilon(1e-12));
    const double dz2 = 2 * e * (p.w_time(2, 0) + p.w_chan(0, 0));
    CHECK(g.w_proj(0, 2) == doctest::Approx(dz2 * x0).epsilon(1e-12));
    CHECK(g.w_proj(1, 2) == doctest::Approx(dz2 * x1).epsilon(1e-12));
    CHECK(g.b_proj[2] == doctest::Approx(dz2).epsilon(1e-12));
    // lookback rows carry no loss, so their slots stay zero
    CHECK(g.w_time(0, 0) == 0.0);
    CHECK(g.w_time(1, 0) == 0.0);
    CHECK(g.w_proj(0, 0) == 0.0);
    CHECK(g.b_proj[0] == 0.0);

    CHECK_THROWS_AS(backward({}, p, cfg), EmptyInput);
}

TEST_CASE("finite differences are exact for the linear variant") {
    TefnConfig cfg;
    cfg.l_in = 6;
    cfg.l_pred = 3;
    cfg.channels = 2;
    cfg.space_size = 1;
    cfg.use_norm = false;
    cfg.activation = Activation::none;
    TefnParams p = random_params(cfg, 21);
    Rng rng(22);
    WindowSample s = random_sample(cfg, rng);
    FiniteDiffReport report = finite_diff_check(p, s, cfg);
    CHECK(report.worst() < 1e-7);
}

TEST_CASE("finite differences pass for nonlinear variants") {
    Rng rng(23);
    for (Activation act : {Activation::relu, Activation::tanh}) {
        for (FusionMode fm : {FusionMode::sum, FusionMode::concat}) {
            TefnConfig cfg;
            cfg.l_in = 5;
            cfg.l_pred = 3;
            cfg.channels = 2;
            cfg.space_size = 2;
            cfg.use_norm = true;
            cfg.activation = act;
            cfg.fusion_mode = fm;
            TefnParams p = random_params(cfg, rng.next_u64());
            WindowSample s = random_sample(cfg, rng);
            FiniteDiffReport report = finite_diff_check(p, s, cfg);
            CHECK(report.worst() < 1e-4);
        }
    }
}

TEST_CASE("finite diff check flags a deliberately corrupted gradient") {
    TefnConfig cfg;
    cfg.l_in = 5;
    cfg.l_pred = 2;
    cfg.channels = 2;
    cfg.space_size = 1;
    TefnParams p = random_params(cfg, 31);
    Rng rng(32);
    WindowSample s = random_sample(cfg, rng);

    auto [loss, g] = backward({s}, p, cfg);
    (void)loss;
    for (std::size_t i = 0; i < g.w_time.size(); ++i)
        g.w_time.data()[i] *= 1.10; // +10% on one tensor
    FiniteDiffReport report = finite_diff_check_against(p, s, cfg, g);
    std::string worst_tensor;
    double worst = -1.0;
    for (auto& e : report.per_tensor)
        if (e.max_rel_error > worst) {
            worst = e.max_rel_error;
            worst_tensor = e.tensor;
        }
    CHECK(worst > 1e-4);
    CHECK(worst_tensor == "w_time");

    CHECK_THROWS_AS(finite_diff_check(p, s, cfg, 0.0), std::invalid_argument);
}

TEST_CASE("adam step properties") {
    TefnConfig cfg;
    cfg.l_in = 3;
    cfg.l_pred = 2;
    cfg.channels = 2;
    cfg.space_size = 0;
    TefnParams p = random_params(cfg, 41);
    TefnParams before = p;
    AdamState state = AdamState::create(cfg);

    // zero gradients leave parameters untouched
    Gradients zero = zero_gradients(cfg);
    adam_step(p, zero, state, 0.1);
    auto pt = p.tensors();
    auto bt = before.tensors();
    for (std::size_t ti = 0; ti < pt.size(); ++ti)
        for (std::size_t i = 0; i < pt[ti].size; ++i)
            CHECK(pt[ti].data[i] == bt[ti].data[i]);

    // first real step moves each coordinate by about -lr * sign(g)
    p = before;
    AdamState fresh = AdamState::create(cfg);
    Gradients g = zero_gradients(cfg);
    Rng rng(42);
    for (auto& t : g.tensors())
        for (std::size_t i = 0; i < t.size; ++i) {
            double mag = rng.uniform(1e-3, 10.0);
            t.data[i] = rng.uniform01() < 0.5 ? mag : -mag;
        }
    const double lr = 0.01;
    adam_step(p, g, fresh, lr);
    auto gt = g.tensors();
    pt = p.tensors();
    for (std::size_t ti = 0; ti < pt.size(); ++ti)
        for (std::size_t i = 0; i < pt[ti].size; ++i) {
            double update = pt[ti].data[i] - bt[ti].data[i];
            double want = -lr * (gt[ti].data[i] > 0 ? 1.0 : -1.0);
            CHECK(std::abs(update - want) < 1e-6);
        }
}

TEST_CASE("adam converges on a one-dimensional quadratic") {
    // minimize (w - 3)^2 on the first projection coordinate; all other
    // gradient slots stay zero.
    TefnConfig cfg;
    cfg.l_in = 1;
    cfg.l_pred = 1;
    cfg.channels = 1;
    cfg.space_size = 0;
    TefnParams p = zero_gradients(cfg);
    AdamState state = AdamState::create(cfg);
    for (int step = 0; step < 300; ++step) {
        Gradients g = zero_gradients(cfg);
        g.w_proj(0, 0) = 2.0 * (p.w_proj(0, 0) - 3.0);
        adam_step(p, g, state, 0.1);
    }
    CHECK(std::abs(p.w_proj(0, 0) - 3.0) < 1e-3);
}

TEST_CASE("training fits the noiseless sinusoid fixture") {
    data::SynthSpec spec;
    spec.channels = 2;
    spec.rows = 600;
    spec.seed = 11;
    spec.trend = 0.0;
    spec.noise_amp = 0.0;
    data::RawSeries series = data::synth_generate(spec);
    data::Split split = data::chronological_split(series, {400, 100, 100, 24});
    TefnConfig cfg;
    cfg.l_in = 24;
    cfg.l_pred = 8;
    cfg.channels = 2;
    cfg.space_size = 1;
    auto train_w = data::make_windows(split.train, cfg.l_in, cfg.l_pred);
    auto val_w = data::make_windows(split.val, cfg.l_in, cfg.l_pred);

    TrainConfig tc;
    tc.seed = 5;
    TrainResult result = train(train_w, val_w, cfg, tc);
    CHECK(result.best_val_mse < 0.05);
    CHECK(result.history.size() <= 10);
}

TEST_CASE("training is deterministic and early stopping fires") {
    data::RawSeries series = data::synth_generate(1, 200, 9);
    data::Split split = data::chronological_split(series, {140, 30, 30, 12});
    TefnConfig cfg;
    cfg.l_in = 12;
    cfg.l_pred = 4;
    cfg.channels = 1;
    auto train_w = data::make_windows(split.train, cfg.l_in, cfg.l_pred);
    auto val_w = data::make_windows(split.val, cfg.l_in, cfg.l_pred);

    TrainConfig tc;
    tc.seed = 77;
    tc.max_epochs = 6;
    TrainResult a = train(train_w, val_w, cfg, tc);
    TrainResult b = train(train_w, val_w, cfg, tc);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].train_mse == b.history[i].train_mse);
        CHECK(a.history[i].val_mse == b.history[i].val_mse);
        CHECK(a.history[i].lr == b.history[i].lr);
    }
    auto at = a.best_params.tensors(), bt2 = b.best_params.tensors();
    for (std::size_t ti = 0; ti < at.size(); ++ti)
        for (std::size_t i = 0; i < at[ti].size; ++i)
            CHECK(at[ti].data[i] == bt2[ti].data[i]);

    // constant targets cannot improve once converged: patience 1 stops early
    for (auto& w : train_w) w.target.fill(0.0);
    for (auto& w : val_w) w.target.fill(0.0);
    for (auto& w : train_w) w.input.fill(0.0);
    for (auto& w : val_w) w.input.fill(0.0);
    TrainConfig stop_tc = tc;
    stop_tc.patience = 1;
    stop_tc.max_epochs = 10;
    TrainResult stopped = train(train_w, val_w, cfg, stop_tc);
    CHECK(stopped.history.size() < 10);
}

TEST_CASE("training reaches the least-squares optimum on a linear task") {
    // targets are an exact shared affine map of the inputs plus noise; the
    // norm-free linear variant spans that class, so its training MSE must
    // approach the normal-equations optimum.
    const std::size_t l_in = 8, l_pred = 2, n_train = 400, n_val = 100;
    TefnConfig cfg;
    cfg.l_in = l_in;
    cfg.l_pred = l_pred;
    cfg.channels = 1;
    cfg.space_size = 0;
    cfg.bpa_mode = BpaMode::prob;
    cfg.use_norm = false;

    Rng rng(1234);
    Matrix a_true(l_pred, l_in);
    for (double& v : a_true.raw()) v = rng.uniform(-0.6, 0.6);
    std::vector<double> c_true{0.3, -0.2};

    auto make_set = [&](std::size_t n) {
        std::vector<WindowSample> out;
        for (std::size_t i = 0; i < n; ++i) {
            WindowSample s;
            s.input = Matrix(l_in, 1);
            for (double& v : s.input.raw()) v = rng.normal();
            s.target = Matrix(l_pred, 1);
            for (std::size_t r = 0; r < l_pred; ++r) {
                double y = c_true[r];
                for (std::size_t t = 0; t < l_in; ++t)
                    y += a_true(r, t) * s.input(t, 0);
                s.target(r, 0) = y + 0.5 * rng.normal();
            }
            out.push_back(std::move(s));
        }
        return out;
    };
    auto train_w = make_set(n_train);
    auto val_w = make_set(n_val);

    // least-squares optimum per horizon row over features (x, 1)
    double ls_mse = 0.0;
    for (std::size_t r = 0; r < l_pred; ++r) {
        const std::size_t dim = l_in + 1;
        Matrix gram(dim, dim, 0.0);
        std::vector<double> rhs(dim, 0.0);
        for (const auto& s : train_w) {
            std::vector<double> f(dim, 1.0);
            for (std::size_t t = 0; t < l_in; ++t) f[t] = s.input(t, 0);
            for (std::size_t i = 0; i < dim; ++i) {
                rhs[i] += f[i] * s.target(r, 0);
                for (std::size_t j = 0; j < dim; ++j) gram(i, j) += f[i] * f[j];
            }
        }
        std::vector<double> beta = solve_linear(gram, rhs);
        double se = 0.0;
        for (const auto& s : train_w) {
            double pred = beta[l_in];
            for (std::size_t t = 0; t < l_in; ++t) pred += beta[t] * s.input(t, 0);
            double d = pred - s.target(r, 0);
            se += d * d;
        }
        ls_mse += se / static_cast<double>(n_train);
    }
    ls_mse /= static_cast<double>(l_pred);

    TrainConfig tc;
    tc.lr = 0.05;
    tc.lr_schedule = LrSchedule::constant;
    tc.max_epochs = 60;
    tc.patience = 60;
    tc.seed = 99;
    TrainResult result = train(train_w, val_w, cfg, tc);
    double train_mse = dataset_mse(train_w, result.best_params, cfg);
    CHECK(train_mse <= 1.05 * ls_mse);
}

TEST_CASE("checkpoint round trip is bit exact and sized as predicted") {
    TefnConfig cfg;
    cfg.l_in = 9;
    cfg.l_pred = 5;
    cfg.channels = 3;
    cfg.space_size = 2;
    cfg.fusion_mode = FusionMode::concat;
    cfg.activation = Activation::tanh;
    cfg.use_norm = false;
    TefnParams p = random_params(cfg, 55);
    const std::string path = "/tmp/tefn_test_ckpt.bin";
    save_checkpoint(p, cfg, path);

    auto [loaded, loaded_cfg] = load_checkpoint(path);
    CHECK(loaded_cfg.l_in == cfg.l_in);
    CHECK(loaded_cfg.l_pred == cfg.l_pred);
    CHECK(loaded_cfg.channels == cfg.channels);
    CHECK(loaded_cfg.space_size == cfg.space_size);
    CHECK(loaded_cfg.use_norm == cfg.use_norm);
    CHECK(loaded_cfg.fusion_mode == cfg.fusion_mode);
    CHECK(loaded_cfg.activation == cfg.activation);
    auto pt = p.tensors(), lt = loaded.tensors();
    for (std::size_t ti = 0; ti < pt.size(); ++ti)
        for (std::size_t i = 0; i < pt[ti].size; ++i)
            CHECK(pt[ti].data[i] == lt[ti].data[i]);

    // file size = fixed header + per-tensor (4 + name + 4 + 8*rank + 8*size)
    std::size_t want = 4 + 4 + 4 * 8 + 6 * 1 + 8 + 4;
    for (auto& t : pt)
        want += 4 + t.name.size() + 4 + 8 * t.dims.size() + 8 * t.size;
    CHECK(std::filesystem::file_size(path) == want);
    CHECK(want == 58 + 8 * model::param_count(cfg) +
                      /* per-tensor metadata */ (4 + 6 + 4 + 16) + (4 + 6 + 4 + 8) +
                      (4 + 6 + 4 + 16) + (4 + 6 + 4 + 16) + (4 + 6 + 4 + 16) +
                      (4 + 6 + 4 + 16) + (4 + 6 + 4 + 8) + (4 + 6 + 4 + 8));

    std::remove(path.c_str());
}

TEST_CASE("checkpoint error paths") {
    const std::string good = "/tmp/tefn_test_ckpt2.bin";
    TefnConfig cfg;
    cfg.l_in = 4;
    cfg.l_pred = 2;
    cfg.channels = 2;
    TefnParams p = random_params(cfg, 66);
    save_checkpoint(p, cfg, good);

    // bad magic
    const std::string bad = "/tmp/tefn_test_badmagic.bin";
    {
        std::ofstream out(bad, std::ios::binary);
        out << "NOPE" << std::string(64, '\0');
    }
    CHECK_THROWS_AS(load_checkpoint(bad), BadMagic);

    // unsupported version
    const std::string vers = "/tmp/tefn_test_badversion.bin";
    {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        bytes[4] = 99;
        std::ofstream out(vers, std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(vers), VersionMismatch);

    // truncated payload
    const std::string trunc = "/tmp/tefn_test_trunc.bin";
    {
        std::ifstream in(good, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() / 2);
        std::ofstream out(trunc, std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(trunc), Truncated);

    CHECK_THROWS_AS(load_checkpoint("/tmp/tefn_test_missing.bin"),
                    std::runtime_error);
    for (const auto& f : {good, bad, vers, trunc}) std::remove(f.c_str());
}

TEST_CASE("history CSV has the expected layout") {
    std::vector<EpochRecord> history{{0, 0.5, 0.4, 0.01, 1.0},
                                     {1, 0.3, 0.25, 0.005, 1.1}};
    const std::string path = "/tmp/tefn_test_history.csv";
    write_history_csv(history, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,train_mse,val_mse,lr,seconds");
    std::size_t rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
    std::remove(path.c_str());
}
