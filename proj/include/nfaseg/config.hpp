#pragma once

// Flat key = value run configuration with one [section] per module. Every
// tunable has a default here; a parsed file may override any subset, and any
// key outside the known set is rejected with the full offending list.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nfaseg/data.hpp"
#include "nfaseg/error.hpp"
#include "nfaseg/network.hpp"
#include "nfaseg/train.hpp"

namespace nfaseg {

struct EvalSettings {
    double threshold = 0.1;
    double iou_min = 0.05;
    long tolerance_px = 2;
    long bins = 10;
};

struct CurveSettings {
    double x_min = 0.0;
    double x_max = 500.0;
    long steps = 200;
    long k = 4;
    double n_test = 1.0;
};

struct RunSettings {
    NetworkSpec network;
    SyntheticConfig data;
    TrainConfig train;
    EvalSettings eval;
    CurveSettings curve;
};

/// Canonical key order and defaults; doubles as the known-key set.
inline const std::vector<std::pair<std::string, std::string>>& config_defaults() {
    static const std::vector<std::pair<std::string, std::string>> defaults = {
        {"network.levels", "3"},
        {"network.channels", "8,16,32"},
        {"network.in_channels", "1"},
        {"network.head", "nfa"},
        {"network.sigma_form", "elliptical"},
        {"network.multiscale", "on"},
        {"network.eca", "on"},
        {"network.spatial", "off"},
        {"network.reduce", "max"},
        {"network.alpha", "0.0005"},
        {"network.reg_weight", "0.05"},
        {"network.nfa_width", "2"},
        {"network.window", "7"},
        {"data.kind", "targets"},
        {"data.size", "96"},
        {"data.count", "30"},
        {"data.divisor", "4"},
        {"data.targets_min", "1"},
        {"data.targets_max", "2"},
        {"data.amplitude_min", "0.25"},
        {"data.amplitude_max", "0.9"},
        {"data.sigma_min", "0.5"},
        {"data.sigma_max", "1.5"},
        {"data.background_scale", "3.0"},
        {"data.background_noise", "0.08"},
        {"data.gradient_amplitude", "0.08"},
        {"data.clutter_amplitude", "0.0"},
        {"data.crack_count_min", "1"},
        {"data.crack_count_max", "2"},
        {"data.crack_width_min", "1"},
        {"data.crack_width_max", "3"},
        {"data.crack_contrast_min", "0.15"},
        {"data.crack_contrast_max", "0.4"},
        {"train.epochs", "40"},
        {"train.batch_size", "4"},
        {"train.lr", "0.01"},
        {"train.lr_min", "0.0"},
        {"train.threshold", "0.1"},
        {"train.augment", "on"},
        {"eval.threshold", "0.1"},
        {"eval.iou_min", "0.05"},
        {"eval.tolerance_px", "2"},
        {"eval.bins", "10"},
        {"curve.x_min", "0.0"},
        {"curve.x_max", "500.0"},
        {"curve.steps", "200"},
        {"curve.k", "4"},
        {"curve.n_test", "1.0"},
    };
    return defaults;
}

class Config {
  public:
    Config() {
        for (const auto& [key, value] : config_defaults()) values_[key] = value;
    }

    bool known(const std::string& key) const { return values_.count(key) > 0; }

    void set(const std::string& key, const std::string& value) {
        if (!known(key)) throw_config("unknown config key: " + key);
        values_[key] = value;
    }

    const std::string& get_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw_config("unknown config key: " + key);
        return it->second;
    }

    long get_long(const std::string& key) const {
        const std::string& raw = get_string(key);
        try {
            size_t used = 0;
            const long v = std::stol(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
            return v;
        } catch (const std::exception&) {
            throw_config(key + ": expected an integer, got '" + raw + "'");
        }
    }

    double get_double(const std::string& key) const {
        const std::string& raw = get_string(key);
        try {
            size_t used = 0;
            const double v = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument(raw);
            return v;
        } catch (const std::exception&) {
            throw_config(key + ": expected a number, got '" + raw + "'");
        }
    }

    bool get_switch(const std::string& key) const {
        const std::string& raw = get_string(key);
        if (raw == "on" || raw == "true" || raw == "1") return true;
        if (raw == "off" || raw == "false" || raw == "0") return false;
        throw_config(key + ": expected on|off, got '" + raw + "'");
    }

    std::vector<long> get_longs(const std::string& key) const {
        const std::string& raw = get_string(key);
        std::vector<long> out;
        std::stringstream ss(raw);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                size_t used = 0;
                out.push_back(std::stol(item, &used));
                if (used != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw_config(key + ": expected comma-separated integers, got '" +
                             raw + "'");
            }
        }
        if (out.empty()) throw_config(key + ": empty list");
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses `key = value` lines grouped under [section] headers; '#' starts a
/// comment. Later assignments win. All unknown keys are reported in one error.
inline Config parse_config_text(const std::string& text, const std::string& origin) {
    Config cfg;
    std::string section;
    std::vector<std::string> unknown;
    std::istringstream in(text);
    std::string raw;
    long line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        const std::string line = detail::trim(raw);
        if (line.empty()) continue;
        const std::string at = origin + " line " + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw_config(at + ": malformed section header '" + line + "'");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw_config(at + ": expected key = value, got '" + line + "'");
        const std::string name = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (name.empty()) throw_config(at + ": empty key");
        if (section.empty())
            throw_config(at + ": key '" + name + "' appears before any [section]");
        const std::string key = section + "." + name;
        if (!cfg.known(key)) {
            unknown.push_back(key);
            continue;
        }
        cfg.set(key, value);
    }
    if (!unknown.empty()) {
        std::string list;
        for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
        throw_config(origin + ": unknown config keys: " + list);
    }
    return cfg;
}

inline Config load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_io("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

/// The full default configuration, rendered with every key listed.
inline std::string example_config_text() {
    std::string out = "# every tunable with its default value\n";
    std::string section;
    for (const auto& [key, value] : config_defaults()) {
        const size_t dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            out += "\n[" + sec + "]\n";
            section = sec;
        }
        out += key.substr(dot + 1) + " = " + value + "\n";
    }
    return out;
}

namespace detail {

inline CovarianceForm parse_sigma_form(const std::string& v) {
    if (v == "spherical") return CovarianceForm::Spherical;
    if (v == "elliptical") return CovarianceForm::IndependentElliptical;
    if (v == "dense") return CovarianceForm::DenseElliptical;
    throw_config("sigma_form: expected spherical|elliptical|dense, got '" + v + "'");
}

inline std::string sigma_form_name(CovarianceForm f) {
    switch (f) {
        case CovarianceForm::Spherical: return "spherical";
        case CovarianceForm::IndependentElliptical: return "elliptical";
        case CovarianceForm::DenseElliptical: return "dense";
    }
    return "elliptical";
}

}  // namespace detail

inline RunSettings settings_from_config(const Config& cfg) {
    RunSettings s;

    s.network.levels = cfg.get_long("network.levels");
    s.network.channels = cfg.get_longs("network.channels");
    s.network.in_channels = cfg.get_long("network.in_channels");
    const std::string head = cfg.get_string("network.head");
    if (head == "nfa")
        s.network.head = HeadKind::Nfa;
    else if (head == "plain")
        s.network.head = HeadKind::Plain;
    else
        throw_config("network.head: expected nfa|plain, got '" + head + "'");
    s.network.form = detail::parse_sigma_form(cfg.get_string("network.sigma_form"));
    s.network.multiscale = cfg.get_switch("network.multiscale");
    s.network.use_eca = cfg.get_switch("network.eca");
    s.network.use_spatial = cfg.get_switch("network.spatial");
    const std::string reduce = cfg.get_string("network.reduce");
    if (reduce == "max")
        s.network.reduce = ReduceMode::Max;
    else if (reduce == "min")
        s.network.reduce = ReduceMode::Min;
    else
        throw_config("network.reduce: expected min|max, got '" + reduce + "'");
    s.network.alpha = cfg.get_double("network.alpha");
    s.network.reg_weight = cfg.get_double("network.reg_weight");
    s.network.nfa_width = cfg.get_long("network.nfa_width");
    s.network.window = cfg.get_long("network.window");
    s.network.validate();

    const std::string kind = cfg.get_string("data.kind");
    if (kind == "targets")
        s.data.kind = SyntheticKind::Targets;
    else if (kind == "cracks")
        s.data.kind = SyntheticKind::Cracks;
    else
        throw_config("data.kind: expected targets|cracks, got '" + kind + "'");
    s.data.size = cfg.get_long("data.size");
    s.data.count = cfg.get_long("data.count");
    s.data.divisor = cfg.get_long("data.divisor");
    s.data.targets_min = cfg.get_long("data.targets_min");
    s.data.targets_max = cfg.get_long("data.targets_max");
    s.data.amplitude_min = cfg.get_double("data.amplitude_min");
    s.data.amplitude_max = cfg.get_double("data.amplitude_max");
    s.data.sigma_min = cfg.get_double("data.sigma_min");
    s.data.sigma_max = cfg.get_double("data.sigma_max");
    s.data.background_scale = cfg.get_double("data.background_scale");
    s.data.background_noise = cfg.get_double("data.background_noise");
    s.data.gradient_amplitude = cfg.get_double("data.gradient_amplitude");
    s.data.clutter_amplitude = cfg.get_double("data.clutter_amplitude");
    s.data.crack_count_min = cfg.get_long("data.crack_count_min");
    s.data.crack_count_max = cfg.get_long("data.crack_count_max");
    s.data.crack_width_min = cfg.get_long("data.crack_width_min");
    s.data.crack_width_max = cfg.get_long("data.crack_width_max");
    s.data.crack_contrast_min = cfg.get_double("data.crack_contrast_min");
    s.data.crack_contrast_max = cfg.get_double("data.crack_contrast_max");
    s.data.validate();

    s.train.epochs = cfg.get_long("train.epochs");
    s.train.batch_size = cfg.get_long("train.batch_size");
    s.train.lr_max = cfg.get_double("train.lr");
    s.train.lr_min = cfg.get_double("train.lr_min");
    s.train.threshold = cfg.get_double("train.threshold");
    s.train.augment = cfg.get_switch("train.augment");
    s.train.validate();

    s.eval.threshold = cfg.get_double("eval.threshold");
    s.eval.iou_min = cfg.get_double("eval.iou_min");
    s.eval.tolerance_px = cfg.get_long("eval.tolerance_px");
    s.eval.bins = cfg.get_long("eval.bins");
    if (s.eval.iou_min <= 0.0 || s.eval.iou_min > 1.0)
        throw_config("eval.iou_min must be in (0, 1]");
    if (s.eval.tolerance_px < 0) throw_config("eval.tolerance_px must be >= 0");

    s.curve.x_min = cfg.get_double("curve.x_min");
    s.curve.x_max = cfg.get_double("curve.x_max");
    s.curve.steps = cfg.get_long("curve.steps");
    s.curve.k = cfg.get_long("curve.k");
    s.curve.n_test = cfg.get_double("curve.n_test");
    if (s.curve.steps < 2) throw_config("curve.steps must be >= 2");

    return s;
}

}  // namespace nfaseg
