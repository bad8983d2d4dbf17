#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tefn/model.hpp"
#include "tefn/training.hpp"

namespace tefn::config {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat "[section]" / "key = value" run configuration; every key can be
// overridden from the command line with --set section.key=value.
class KeyValue {
public:
    static KeyValue from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in)
            throw ConfigError("cannot open config " + path);
        KeyValue kv;
        std::string line, section;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            if (trimmed.front() == '[' && trimmed.back() == ']') {
                section = trim(trimmed.substr(1, trimmed.size() - 2));
                continue;
            }
            auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": expected key = value");
            std::string key = trim(trimmed.substr(0, eq));
            std::string val = trim(trimmed.substr(eq + 1));
            if (section.empty())
                throw ConfigError(path + ":" + std::to_string(lineno) +
                                  ": key outside any [section]");
            kv.values_[section + "." + key] = val;
        }
        return kv;
    }

    // "section.key=value"
    void apply_set(const std::string& assignment) {
        auto eq = assignment.find('=');
        if (eq == std::string::npos || assignment.find('.') >= eq)
            throw ConfigError("--set expects section.key=value, got '" +
                              assignment + "'");
        values_[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end())
            throw ConfigError("missing required config key '" + key + "'");
        return it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': '" + it->second +
                              "' is not a number");
        }
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoull(it->second);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "': '" + it->second +
                              "' is not an integer");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1" || it->second == "on")
            return true;
        if (it->second == "false" || it->second == "0" || it->second == "off")
            return false;
        throw ConfigError("key '" + key + "': '" + it->second + "' is not a bool");
    }

    std::vector<double> get_double_list(const std::string& key,
                                        const std::vector<double>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<double> out;
        std::stringstream ss(it->second);
        std::string cell;
        while (std::getline(ss, cell, ','))
            out.push_back(std::stod(trim(cell)));
        return out;
    }

    std::vector<std::size_t> get_size_list(const std::string& key,
                                           const std::vector<std::size_t>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<std::size_t> out;
        std::stringstream ss(it->second);
        std::string cell;
        while (std::getline(ss, cell, ','))
            out.push_back(std::stoul(trim(cell)));
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

inline model::TefnConfig model_config_from(const KeyValue& kv) {
    model::TefnConfig cfg;
    cfg.l_in = kv.get_u64("model.l_in", 96);
    cfg.l_pred = kv.get_u64("model.l_pred", 96);
    cfg.channels = kv.get_u64("model.channels", 7); // overwritten by the dataset
    cfg.space_size = kv.get_u64("model.space_size", 1);
    cfg.use_norm = kv.get_bool("model.use_norm", true);
    cfg.use_time_branch = kv.get_bool("model.use_time_branch", true);
    cfg.use_channel_branch = kv.get_bool("model.use_channel_branch", true);
    cfg.eps = kv.get_double("model.eps", 1e-5);

    std::string bpa = kv.get_string("model.bpa_mode", "bpa");
    if (bpa == "bpa") cfg.bpa_mode = model::BpaMode::bpa;
    else if (bpa == "prob") cfg.bpa_mode = model::BpaMode::prob;
    else throw ConfigError("model.bpa_mode must be bpa or prob");

    std::string fusion = kv.get_string("model.fusion_mode", "sum");
    if (fusion == "sum") cfg.fusion_mode = model::FusionMode::sum;
    else if (fusion == "concat") cfg.fusion_mode = model::FusionMode::concat;
    else throw ConfigError("model.fusion_mode must be sum or concat");

    std::string act = kv.get_string("model.activation", "none");
    if (act == "none") cfg.activation = model::Activation::none;
    else if (act == "relu") cfg.activation = model::Activation::relu;
    else if (act == "tanh") cfg.activation = model::Activation::tanh;
    else throw ConfigError("model.activation must be none, relu or tanh");

    cfg.validate();
    return cfg;
}

inline training::TrainConfig train_config_from(const KeyValue& kv) {
    training::TrainConfig tc;
    tc.lr = kv.get_double("train.lr", 0.01);
    tc.batch_size = kv.get_u64("train.batch_size", 32);
    tc.max_epochs = kv.get_u64("train.max_epochs", 10);
    tc.patience = kv.get_u64("train.patience", 3);
    std::string sched = kv.get_string("train.lr_schedule", "halve_per_epoch");
    if (sched == "halve_per_epoch")
        tc.lr_schedule = training::LrSchedule::halve_per_epoch;
    else if (sched == "constant")
        tc.lr_schedule = training::LrSchedule::constant;
    else
        throw ConfigError("train.lr_schedule must be halve_per_epoch or constant");
    tc.validate();
    return tc;
}

} // namespace tefn::config
