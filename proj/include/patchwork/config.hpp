#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "patchwork/latency.hpp"

namespace patchwork {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Plain-text `key = value` run configuration. Unknown keys are rejected so a
// typo cannot silently fall back to a default; the resolved form (defaults
// filled in) is written next to every run's outputs.
class RunConfig {
  public:
    RunConfig() { install_defaults(); }

    static RunConfig parse(const std::string& text) {
        RunConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                if (b == std::string::npos) return std::string();
                const auto e = s.find_last_not_of(" \t\r");
                return s.substr(b, e - b + 1);
            };
            const std::string stripped = trim(line);
            if (stripped.empty()) continue;
            const auto eq = stripped.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(stripped.substr(0, eq));
            const std::string value = trim(stripped.substr(eq + 1));
            if (key == "variant") {
                cfg.variants_.push_back(value);
            } else if (cfg.values_.count(key)) {
                cfg.values_[key] = value;
            } else {
                throw ConfigError("unknown config key '" + key + "'");
            }
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw ConfigError("unknown config key '" + key + "'");
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    int get_int(const std::string& key) const {
        try {
            return std::stoi(get(key));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer");
        }
    }

    std::uint64_t get_u64(const std::string& key) const {
        try {
            return std::stoull(get(key));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an unsigned integer");
        }
    }

    double get_double(const std::string& key) const {
        try {
            return std::stod(get(key));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number");
        }
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "1" || v == "true" || v == "yes") return true;
        if (v == "0" || v == "false" || v == "no") return false;
        throw ConfigError("config key '" + key + "' is not a boolean");
    }

    const std::vector<std::string>& variants() const { return variants_; }

    // Canonical text form: sorted keys, then variant lines in input order.
    std::string resolved() const {
        std::ostringstream out;
        for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
        for (const std::string& v : variants_) out << "variant = " << v << "\n";
        return out.str();
    }

  private:
    void install_defaults() {
        values_ = {
            {"seed", "1"},
            {"out_dir", "out"},
            {"jobs", "1"},
            {"checkpoint", ""},
            {"frame_rows", "64"},
            {"frame_cols", "64"},
            {"action_m", "2"},
            {"action_n", "1"},
            {"history_alpha", "0.7"},
            {"tap_layer", "-1"},
            {"gamma", "0.9"},
            {"epsilon_start", "1.0"},
            {"epsilon_end", "0.05"},
            {"epsilon_decay_steps", "0"},
            {"lr_stage1", "0.01"},
            {"lr_stage2", "0.05"},
            {"lr_stage3", "0.0005"},
            {"momentum", "0.9"},
            {"grad_clip", "5"},
            {"stage1_iters", "2200"},
            {"stage1_batch", "4"},
            {"calib_frames", "32"},
            {"stage2_episodes", "1200"},
            {"stage3_episodes", "120"},
            {"replay_capacity", "10000"},
            {"batch_size", "32"},
            {"target_sync", "200"},
            {"train_every", "4"},
            {"warmup", "500"},
            {"episode_frames", "24"},
            {"eval_episodes", "200"},
            {"eval_seed", "9001"},
            {"oracle_eval_episodes", "60"},
            {"oracle_scans", "0"},
            {"gen_episodes", "8"},
            {"gen_scenario", "multi"},
            {"gen_objects", "2"},
            {"gen_frames", "24"},
            {"speed_sigma", "0.5"},
            {"pan_scan_fraction", "0.0"},
            {"gt_window_overlap_min", "0.3"},
            {"sf_interval", "4"},
            {"sf_delay", "3"},
        };
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> variants_;
};

// Variant line grammar: space-separated key=value tokens, e.g.
//   id=sf_k4d3 method=single-frame base=2047 interval=4 delay=3
inline VariantSpec parse_variant(const std::string& line) {
    VariantSpec v;
    std::istringstream in(line);
    std::string token;
    while (in >> token) {
        const auto eq = token.find('=');
        if (eq == std::string::npos)
            throw ConfigError("variant token '" + token + "' is not key=value");
        const std::string key = token.substr(0, eq);
        const std::string value = token.substr(eq + 1);
        try {
            if (key == "id") {
                v.id = value;
            } else if (key == "method") {
                v.method = value;
            } else if (key == "depth") {
                v.depth_multiplier = std::stod(value);
            } else if (key == "flip") {
                v.flip = value == "1" || value == "true";
            } else if (key == "resolution") {
                v.resolution_scale = std::stod(value);
            } else if (key == "interval") {
                v.interval = std::stoi(value);
            } else if (key == "delay") {
                v.delay = std::stoi(value);
            } else if (key == "base") {
                v.base_mflops = std::stod(value);
            } else if (key == "metric") {
                v.metric = std::stod(value);
            } else if (key == "attention") {
                const auto comma = value.find(',');
                if (comma == std::string::npos)
                    throw ConfigError("variant attention wants M,N");
                v.attention = ActionSpace(std::stoi(value.substr(0, comma)),
                                          std::stoi(value.substr(comma + 1)));
            } else {
                throw ConfigError("unknown variant key '" + key + "'");
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("variant token '" + token + "' has a malformed value");
        }
    }
    try {
        v.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return v;
}

}  // namespace patchwork
