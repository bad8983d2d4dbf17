#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tefn/rng.hpp"
#include "tefn/tensor.hpp"

namespace tefn::data {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingDateColumn : DataError {
    using DataError::DataError;
};
struct NonNumericCell : DataError {
    using DataError::DataError;
};
struct EmptyFile : DataError {
    using DataError::DataError;
};
struct SpecExceedsLength : DataError {
    using DataError::DataError;
};
struct EmptySegment : DataError {
    using DataError::DataError;
};
struct SegmentTooShort : DataError {
    using DataError::DataError;
};

struct RawSeries {
    std::string name;
    std::vector<std::string> timestamps; // carried, not parsed
    Matrix values;                       // rows = time, cols = channels
};

// Row counts of the chronological split. `overlap` rows from the tail of the
// preceding segment are prefixed to val/test so their first window has a full
// lookback.
struct SplitSpec {
    std::size_t train_rows = 0;
    std::size_t val_rows = 0;
    std::size_t test_rows = 0;
    std::size_t overlap = 0;
};

struct Segment {
    Matrix values;
    std::size_t source_offset = 0; // row offset of values(0, :) in the source
};

struct Split {
    Segment train, val, test;
};

// Per-channel standardizer fit on the train segment only. Population
// variance (divide by n), matching the model's normalizer convention.
struct Scaler {
    std::vector<double> mean;
    std::vector<double> std;
    std::vector<bool> zero_variance; // channels whose train std was 0 (std forced to 1)
};

struct WindowSample {
    Matrix input;             // L_in x C
    Matrix target;            // L_pred x C, starts exactly where input ends
    std::size_t origin_index; // row offset of input(0, :) in the segment
};

inline RawSeries load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open " + path);
    std::string header;
    if (!std::getline(in, header))
        throw EmptyFile("empty file: " + path);
    if (!header.empty() && header.back() == '\r') header.pop_back();

    std::vector<std::string> cols;
    {
        std::stringstream ss(header);
        std::string cell;
        while (std::getline(ss, cell, ',')) cols.push_back(cell);
    }
    if (cols.empty() || cols[0] != "date")
        throw MissingDateColumn("first column must be 'date' in " + path);
    const std::size_t channels = cols.size() - 1;
    if (channels == 0)
        throw DataError("no numeric channels in " + path);

    std::vector<std::string> timestamps;
    std::vector<double> flat;
    std::string line;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ','))
            throw NonNumericCell("row " + std::to_string(row) + ": missing date");
        timestamps.push_back(cell);
        for (std::size_t c = 0; c < channels; ++c) {
            if (!std::getline(ss, cell, ',') || cell.empty())
                throw NonNumericCell("row " + std::to_string(row) + ", col " +
                                     std::to_string(c + 1) + ": empty cell");
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                throw NonNumericCell("row " + std::to_string(row) + ", col " +
                                     std::to_string(c + 1) + ": '" + cell + "'");
            }
            if (used != cell.size() || !std::isfinite(v))
                throw NonNumericCell("row " + std::to_string(row) + ", col " +
                                     std::to_string(c + 1) + ": '" + cell + "'");
            flat.push_back(v);
        }
        ++row;
    }
    if (row == 0)
        throw EmptyFile("no data rows in " + path);

    RawSeries s;
    s.name = path;
    s.timestamps = std::move(timestamps);
    s.values = Matrix(row, channels);
    std::copy(flat.begin(), flat.end(), s.values.data());
    return s;
}

inline Split chronological_split(const RawSeries& series, const SplitSpec& spec) {
    const std::size_t total = series.values.rows();
    if (spec.train_rows == 0 || spec.val_rows == 0 || spec.test_rows == 0)
        throw SpecExceedsLength("split row counts must be positive");
    if (spec.train_rows + spec.val_rows + spec.test_rows > total)
        throw SpecExceedsLength("split spec exceeds series length");
    if (spec.overlap > spec.train_rows || spec.overlap > spec.val_rows)
        throw SpecExceedsLength("overlap longer than preceding segment");

    auto slice = [&](std::size_t begin, std::size_t rows) {
        Segment seg;
        seg.source_offset = begin;
        seg.values = Matrix(rows, series.values.cols());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < series.values.cols(); ++c)
                seg.values(r, c) = series.values(begin + r, c);
        return seg;
    };

    Split out;
    out.train = slice(0, spec.train_rows);
    out.val = slice(spec.train_rows - spec.overlap, spec.val_rows + spec.overlap);
    out.test = slice(spec.train_rows + spec.val_rows - spec.overlap,
                     spec.test_rows + spec.overlap);
    return out;
}

inline Scaler fit_scaler(const Segment& train) {
    const std::size_t rows = train.values.rows(), cols = train.values.cols();
    if (rows == 0)
        throw EmptySegment("cannot fit a scaler on an empty segment");
    Scaler s;
    s.mean.resize(cols);
    s.std.resize(cols);
    s.zero_variance.assign(cols, false);
    for (std::size_t c = 0; c < cols; ++c) {
        double mu = 0.0;
        for (std::size_t r = 0; r < rows; ++r) mu += train.values(r, c);
        mu /= static_cast<double>(rows);
        double var = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double d = train.values(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(rows);
        s.mean[c] = mu;
        if (var > 0.0) {
            s.std[c] = std::sqrt(var);
        } else {
            s.std[c] = 1.0;
            s.zero_variance[c] = true;
        }
    }
    return s;
}

inline Segment apply_scaler(const Scaler& s, const Segment& seg) {
    if (seg.values.rows() == 0)
        throw EmptySegment("cannot scale an empty segment");
    if (seg.values.cols() != s.mean.size())
        throw ShapeMismatch("scaler channel count mismatch");
    Segment out = seg;
    for (std::size_t r = 0; r < out.values.rows(); ++r)
        for (std::size_t c = 0; c < out.values.cols(); ++c)
            out.values(r, c) = (seg.values(r, c) - s.mean[c]) / s.std[c];
    return out;
}

inline Segment invert_scaler(const Scaler& s, const Segment& seg) {
    if (seg.values.cols() != s.mean.size())
        throw ShapeMismatch("scaler channel count mismatch");
    Segment out = seg;
    for (std::size_t r = 0; r < out.values.rows(); ++r)
        for (std::size_t c = 0; c < out.values.cols(); ++c)
            out.values(r, c) = seg.values(r, c) * s.std[c] + s.mean[c];
    return out;
}

inline std::vector<WindowSample> make_windows(const Segment& segment,
                                              std::size_t l_in, std::size_t l_pred) {
    const std::size_t rows = segment.values.rows(), cols = segment.values.cols();
    if (rows < l_in + l_pred)
        throw SegmentTooShort("segment shorter than L_in + L_pred");
    const std::size_t count = rows - l_in - l_pred + 1;
    std::vector<WindowSample> out;
    out.reserve(count);
    for (std::size_t w = 0; w < count; ++w) {
        WindowSample ws;
        ws.origin_index = w;
        ws.input = Matrix(l_in, cols);
        ws.target = Matrix(l_pred, cols);
        for (std::size_t r = 0; r < l_in; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                ws.input(r, c) = segment.values(w + r, c);
        for (std::size_t r = 0; r < l_pred; ++r)
            for (std::size_t c = 0; c < cols; ++c)
                ws.target(r, c) = segment.values(w + l_in + r, c);
        out.push_back(std::move(ws));
    }
    return out;
}

// Noise transform: x'_{tc} = x_{tc} + std_c(x) * eps, eps ~ N(0,1) per cell,
// std over the time axis of this sample (population convention). The
// generator is injectable so tests can force eps = 0.
inline Matrix inject_noise_with(const Matrix& x, const std::function<double()>& eps) {
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> std_c(cols, 0.0);
    for (std::size_t c = 0; c < cols; ++c) {
        double mu = 0.0;
        for (std::size_t r = 0; r < rows; ++r) mu += x(r, c);
        mu /= static_cast<double>(rows);
        double var = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            double d = x(r, c) - mu;
            var += d * d;
        }
        std_c[c] = std::sqrt(var / static_cast<double>(rows));
    }
    Matrix out = x;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out(r, c) += std_c[c] * eps();
    return out;
}

inline Matrix inject_noise(const Matrix& x, std::uint64_t seed) {
    Rng rng(seed);
    return inject_noise_with(x, [&rng] { return rng.normal(); });
}

// Synthetic series for dataset-free tests. Closed form per channel c:
//   value(t, c) = sin(2*pi*t / period + 0.5*c) + trend*t*(c + 1)
//                 + noise_amp * N(0,1)
// with all noise draws taken channel-major from Rng(seed).
struct SynthSpec {
    std::size_t channels = 1;
    std::size_t rows = 1;
    std::uint64_t seed = 0;
    double period = 24.0;
    double trend = 0.001;
    double noise_amp = 0.1;
};

inline RawSeries synth_generate(const SynthSpec& spec) {
    if (spec.channels < 1 || spec.rows < 1)
        throw std::invalid_argument("synth series needs at least 1 row and 1 channel");
    RawSeries s;
    s.name = "synthetic";
    s.values = Matrix(spec.rows, spec.channels);
    s.timestamps.reserve(spec.rows);
    Rng rng(spec.seed);
    constexpr double two_pi = 6.283185307179586476925286766559;
    for (std::size_t c = 0; c < spec.channels; ++c) {
        for (std::size_t t = 0; t < spec.rows; ++t) {
            double base = std::sin(two_pi * static_cast<double>(t) / spec.period +
                                   0.5 * static_cast<double>(c)) +
                          spec.trend * static_cast<double>(t) *
                              static_cast<double>(c + 1);
            s.values(t, c) = base + spec.noise_amp * rng.normal();
        }
    }
    for (std::size_t t = 0; t < spec.rows; ++t)
        s.timestamps.push_back("t" + std::to_string(t));
    return s;
}

inline RawSeries synth_generate(std::size_t channels, std::size_t rows,
                                std::uint64_t seed) {
    SynthSpec spec;
    spec.channels = channels;
    spec.rows = rows;
    spec.seed = seed;
    return synth_generate(spec);
}

// Dataset spec file: flat "key = value" lines naming the CSV path, split
// boundaries, overlap and channel count.
struct DatasetSpec {
    std::string name;
    std::string path;
    SplitSpec split;
    std::size_t channels = 0;
};

inline DatasetSpec load_dataset_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("cannot open dataset spec " + path);
    DatasetSpec spec;
    std::string line;
    while (std::getline(in, line)) {
        auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            auto b = s.find_first_not_of(" \t\r");
            auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key == "name") spec.name = val;
        else if (key == "path") spec.path = val;
        else if (key == "train_rows") spec.split.train_rows = std::stoul(val);
        else if (key == "val_rows") spec.split.val_rows = std::stoul(val);
        else if (key == "test_rows") spec.split.test_rows = std::stoul(val);
        else if (key == "overlap") spec.split.overlap = std::stoul(val);
        else if (key == "channels") spec.channels = std::stoul(val);
        else throw DataError("unknown key '" + key + "' in " + path);
    }
    if (spec.path.empty())
        throw DataError("dataset spec " + path + " names no CSV path");
    return spec;
}

} // namespace tefn::data
