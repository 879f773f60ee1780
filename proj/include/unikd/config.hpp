#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "unikd/common.hpp"
#include "unikd/data.hpp"

namespace unikd {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class TrainMode { unikd, kd_only, mse_only, hybrid_kd_mse, ce_only };

inline TrainMode mode_from_string(const std::string& s) {
    if (s == "unikd") return TrainMode::unikd;
    if (s == "kd_only") return TrainMode::kd_only;
    if (s == "mse_only") return TrainMode::mse_only;
    if (s == "hybrid_kd_mse") return TrainMode::hybrid_kd_mse;
    if (s == "ce_only") return TrainMode::ce_only;
    throw ConfigError("unknown mode: " + s);
}

inline std::string mode_to_string(TrainMode m) {
    switch (m) {
        case TrainMode::unikd: return "unikd";
        case TrainMode::kd_only: return "kd_only";
        case TrainMode::mse_only: return "mse_only";
        case TrainMode::hybrid_kd_mse: return "hybrid_kd_mse";
        case TrainMode::ce_only: return "ce_only";
    }
    return "?";
}

struct ExperimentConfig {
    DatasetSpec dataset;
    std::string cifar_path;

    std::string teacher_arch = "resnet_micro_x2";
    std::string teacher_checkpoint;
    std::string student_arch = "resnet_micro";

    double alpha = 0.1;
    double beta = 0.1;
    // The objective carries no temperature-squared gradient compensation;
    // raising tau therefore also scales down the KD gradient.
    double tau = 4.0;

    std::string optimizer = "sgd-momentum";
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 64;
    int epochs = 1;
    std::uint64_t seed = 0;
    std::string device = "cpu";
    TrainMode mode = TrainMode::unikd;
    bool detach_teacher_distribution = false;
    std::string out_dir = "runs/default";

    void validate() const {
        dataset.validate();
        if (!(alpha >= 0.0 && std::isfinite(alpha))) throw ConfigError("alpha must be >= 0");
        if (!(beta >= 0.0 && std::isfinite(beta))) throw ConfigError("beta must be >= 0");
        if (!(tau > 0.0 && std::isfinite(tau))) throw ConfigError("tau must be > 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (optimizer != "sgd-momentum") throw ConfigError("unknown optimizer: " + optimizer);
    }

    std::string canonical_string() const;
    std::string hash() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad boolean value: " + v);
}

inline std::array<double, 3> parse_triple(const std::string& v) {
    std::array<double, 3> out{};
    std::stringstream ss(v);
    std::string item;
    for (int i = 0; i < 3; ++i) {
        if (!std::getline(ss, item, ',')) throw ConfigError("expected 3 comma-separated values: " + v);
        out[static_cast<size_t>(i)] = std::stod(trim(item));
    }
    return out;
}

}  // namespace detail

// Flat key-value config with [section] headers; '#' starts a comment.
inline ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(detail::concat("line ", lineno, ": bad section header"));
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(detail::concat("line ", lineno, ": expected key = value"));
        }
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));
        try {
            if (section == "dataset") {
                if (key == "kind") {
                    if (val == "synthetic") cfg.dataset.kind = DatasetKind::synthetic;
                    else if (val == "cifar-binary") cfg.dataset.kind = DatasetKind::cifar_binary;
                    else throw ConfigError("unknown dataset kind: " + val);
                } else if (key == "class_count") cfg.dataset.class_count = std::stoi(val);
                else if (key == "input_hw") cfg.dataset.input_hw = std::stoi(val);
                else if (key == "train_size") cfg.dataset.train_size = std::stoi(val);
                else if (key == "val_size") cfg.dataset.val_size = std::stoi(val);
                else if (key == "seed") cfg.dataset.seed = std::stoull(val);
                else if (key == "noise_scale") cfg.dataset.noise_scale = std::stod(val);
                else if (key == "cifar10_layout") cfg.dataset.cifar10_layout = detail::parse_bool(val);
                else if (key == "norm_mean") cfg.dataset.norm_mean = detail::parse_triple(val);
                else if (key == "norm_std") cfg.dataset.norm_std = detail::parse_triple(val);
                else if (key == "cifar_path") cfg.cifar_path = val;
                else throw ConfigError("unknown dataset key: " + key);
            } else if (section == "model") {
                if (key == "teacher_arch") cfg.teacher_arch = val;
                else if (key == "teacher_checkpoint") cfg.teacher_checkpoint = val;
                else if (key == "student_arch") cfg.student_arch = val;
                else throw ConfigError("unknown model key: " + key);
            } else if (section == "train") {
                if (key == "mode") cfg.mode = mode_from_string(val);
                else if (key == "alpha") cfg.alpha = std::stod(val);
                else if (key == "beta") cfg.beta = std::stod(val);
                else if (key == "tau") cfg.tau = std::stod(val);
                else if (key == "optimizer") cfg.optimizer = val;
                else if (key == "lr") cfg.lr = std::stod(val);
                else if (key == "momentum") cfg.momentum = std::stod(val);
                else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
                else if (key == "batch_size") cfg.batch_size = std::stoi(val);
                else if (key == "epochs") cfg.epochs = std::stoi(val);
                else if (key == "seed") cfg.seed = std::stoull(val);
                else if (key == "device") cfg.device = val;
                else if (key == "detach_teacher_distribution")
                    cfg.detach_teacher_distribution = detail::parse_bool(val);
                else if (key == "out_dir") cfg.out_dir = val;
                else throw ConfigError("unknown train key: " + key);
            } else {
                throw ConfigError("unknown section: [" + section + "]");
            }
        } catch (const std::invalid_argument&) {
            throw ConfigError(detail::concat("line ", lineno, ": bad value for ", key, ": ", val));
        }
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

inline std::string ExperimentConfig::canonical_string() const {
    std::ostringstream os;
    os.precision(17);
    os << "kind=" << (dataset.kind == DatasetKind::synthetic ? "synthetic" : "cifar-binary")
       << ";C=" << dataset.class_count << ";hw=" << dataset.input_hw
       << ";train=" << dataset.train_size << ";val=" << dataset.val_size
       << ";dseed=" << dataset.seed << ";noise=" << dataset.noise_scale
       << ";teacher=" << teacher_arch << ";student=" << student_arch
       << ";alpha=" << alpha << ";beta=" << beta << ";tau=" << tau << ";opt=" << optimizer
       << ";lr=" << lr << ";mom=" << momentum << ";wd=" << weight_decay
       << ";bs=" << batch_size << ";epochs=" << epochs << ";seed=" << seed
       << ";mode=" << mode_to_string(mode) << ";detach=" << detach_teacher_distribution;
    return os.str();
}

inline std::string ExperimentConfig::hash() const {
    const std::string s = canonical_string();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

}  // namespace unikd
