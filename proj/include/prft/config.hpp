#pragma once

// INI-style configuration files.
//
//   # comment            ; comment
//   [section]
//   key = value
//
// Keys are addressed as "section.key". Blank lines and comments are
// ignored; whitespace around keys and values is trimmed. A key may appear
// once per file. Lists are comma-separated. Errors name the offending line.

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "prft/errors.hpp"
#include "prft/pipeline.hpp"

namespace prft {

struct IniEntry {
    std::string value;
    int line = 0;
};

using IniDocument = std::map<std::string, IniEntry>;

namespace ini_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace ini_detail

inline IniDocument parse_ini(std::istream& in) {
    using ini_detail::trim;
    IniDocument doc;
    std::string section;
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const std::string text = trim(raw);
        if (text.empty() || text[0] == '#' || text[0] == ';') continue;
        if (text.front() == '[') {
            if (text.back() != ']' || text.size() < 3) throw ConfigError("malformed section header '" + text + "'", line);
            section = trim(text.substr(1, text.size() - 2));
            continue;
        }
        const auto eq = text.find('=');
        if (eq == std::string::npos) throw ConfigError("expected 'key = value', got '" + text + "'", line);
        const std::string key = trim(text.substr(0, eq));
        if (key.empty()) throw ConfigError("empty key", line);
        if (section.empty()) throw ConfigError("key '" + key + "' appears before any [section]", line);
        const std::string full = section + "." + key;
        if (doc.count(full)) throw ConfigError("duplicate key '" + full + "'", line);
        doc[full] = {trim(text.substr(eq + 1)), line};
    }
    return doc;
}

inline IniDocument parse_ini_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    return parse_ini(in);
}

inline IniDocument parse_ini_string(const std::string& text) {
    std::istringstream in(text);
    return parse_ini(in);
}

namespace ini_detail {

inline long long to_int(const IniEntry& e, const std::string& key) {
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(e.value.c_str(), &end, 10);
    if (e.value.empty() || *end != '\0' || errno != 0) throw ConfigError(key + ": expected an integer, got '" + e.value + "'", e.line);
    return v;
}

inline std::uint64_t to_u64(const IniEntry& e, const std::string& key) {
    char* end = nullptr;
    errno = 0;
    if (!e.value.empty() && e.value[0] == '-') throw ConfigError(key + ": expected a non-negative integer", e.line);
    const unsigned long long v = std::strtoull(e.value.c_str(), &end, 10);
    if (e.value.empty() || *end != '\0' || errno != 0) throw ConfigError(key + ": expected an integer, got '" + e.value + "'", e.line);
    return v;
}

inline double to_double(const std::string& text, int line, const std::string& key) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || *end != '\0' || errno != 0) throw ConfigError(key + ": expected a number, got '" + text + "'", line);
    return v;
}

inline bool to_bool(const IniEntry& e, const std::string& key) {
    if (e.value == "true" || e.value == "1" || e.value == "yes") return true;
    if (e.value == "false" || e.value == "0" || e.value == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + e.value + "'", e.line);
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    if (!text.empty() && text.back() == ',') out.emplace_back();
    return out;
}

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        if constexpr (std::is_floating_point_v<T>)
            out += format_double(xs[i]);
        else
            out += std::to_string(xs[i]);
    }
    return out;
}

inline ActMode to_act_mode(const IniEntry& e, const std::string& key) {
    if (e.value == "sample") return ActMode::sample;
    if (e.value == "greedy") return ActMode::greedy;
    throw ConfigError(key + ": expected sample or greedy, got '" + e.value + "'", e.line);
}

inline const char* act_mode_name(ActMode m) { return m == ActMode::sample ? "sample" : "greedy"; }

}  // namespace ini_detail

/// Reader that tracks which keys were consumed so leftovers can be reported.
class ConfigReader {
public:
    explicit ConfigReader(const IniDocument& doc) : doc_(doc) {}

    const IniEntry* find(const std::string& key) {
        const auto it = doc_.find(key);
        if (it == doc_.end()) return nullptr;
        used_.insert(key);
        return &it->second;
    }

    void read(const std::string& key, int& out) {
        if (auto* e = find(key)) out = static_cast<int>(ini_detail::to_int(*e, key));
    }
    template <typename T>
        requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
    void read(const std::string& key, T& out) {
        if (auto* e = find(key)) out = static_cast<T>(ini_detail::to_u64(*e, key));
    }
    void read(const std::string& key, double& out) {
        if (auto* e = find(key)) out = ini_detail::to_double(e->value, e->line, key);
    }
    void read(const std::string& key, bool& out) {
        if (auto* e = find(key)) out = ini_detail::to_bool(*e, key);
    }
    void read(const std::string& key, std::string& out) {
        if (auto* e = find(key)) out = e->value;
    }
    void read(const std::string& key, std::vector<int>& out) {
        if (auto* e = find(key)) {
            out.clear();
            if (e->value.empty()) return;
            for (const auto& item : ini_detail::split_list(e->value))
                out.push_back(static_cast<int>(ini_detail::to_int({item, e->line}, key)));
        }
    }
    void read(const std::string& key, std::vector<double>& out) {
        if (auto* e = find(key)) {
            out.clear();
            for (const auto& item : ini_detail::split_list(e->value)) out.push_back(ini_detail::to_double(item, e->line, key));
        }
    }
    void read(const std::string& key, std::vector<std::uint64_t>& out) {
        if (auto* e = find(key)) {
            out.clear();
            for (const auto& item : ini_detail::split_list(e->value)) out.push_back(ini_detail::to_u64({item, e->line}, key));
        }
    }
    void read(const std::string& key, ActMode& out) {
        if (auto* e = find(key)) out = ini_detail::to_act_mode(*e, key);
    }

    /// Throws on the first key nobody asked for.
    void reject_unknown(const std::set<std::string>& ignored_sections = {}) const {
        for (const auto& [key, entry] : doc_) {
            if (used_.count(key)) continue;
            const std::string section = key.substr(0, key.find('.'));
            if (ignored_sections.count(section)) continue;
            throw ConfigError("unknown key '" + key + "'", entry.line);
        }
    }

private:
    const IniDocument& doc_;
    std::set<std::string> used_;
};

/// Run identity and bookkeeping that live next to the RunConfig in a file.
struct RunSettings {
    std::string run_id;
    int checkpoint_every = 5000;
};

/// Applies every recognized key of `doc` on top of `config`.
inline void apply_run_config(ConfigReader& r, RunConfig& c, RunSettings& settings) {
    r.read("env.horizon", c.env.horizon);
    r.read("env.action_step", c.env.action_step);
    r.read("env.action_count", c.env.action_count);
    r.read("env.image_height", c.env.image_height);
    r.read("env.image_width", c.env.image_width);

    r.read("run.id", settings.run_id);
    r.read("run.seed", c.master_seed);
    r.read("run.train_steps", c.train_steps);
    r.read("run.finetune_steps", c.finetune_steps);
    r.read("run.eval_episodes", c.eval_episodes);
    r.read("run.target_kappa", c.target_intensity);
    r.read("run.snapshot_every", c.snapshot_every);
    r.read("run.checkpoint_every", settings.checkpoint_every);
    if (auto* e = r.find("run.fixed_goal")) {
        if (e->value == "none" || e->value.empty()) {
            c.fixed_goal.reset();
        } else {
            const auto parts = ini_detail::split_list(e->value);
            if (parts.size() != 2) throw ConfigError("run.fixed_goal: expected 'x,y' or none", e->line);
            c.fixed_goal = Vec2{ini_detail::to_double(parts[0], e->line, "run.fixed_goal"),
                                ini_detail::to_double(parts[1], e->line, "run.fixed_goal")};
        }
    }

    r.read("network.q_hidden", c.q_hidden);
    r.read("network.reward_hidden", c.reward_hidden);
    r.read("network.idm_hidden", c.idm_hidden);
    if (auto* e = r.find("network.activation")) {
        if (e->value == "relu") c.activation = Activation::relu;
        else if (e->value == "tanh") c.activation = Activation::tanh;
        else throw ConfigError("network.activation: expected relu or tanh, got '" + e->value + "'", e->line);
    }

    r.read("rl.alpha", c.q.alpha);
    r.read("rl.gamma", c.q.gamma);
    r.read("rl.tau", c.q.tau);
    r.read("rl.sync_every", c.q.sync_every);
    r.read("rl.batch_size", c.batch_size);
    r.read("rl.buffer_capacity", c.buffer_capacity);
    r.read("rl.q_lr", c.q_learning_rate);
    r.read("rl.reward_lr", c.reward_learning_rate);
    r.read("rl.idm_lr", c.idm_learning_rate);
    r.read("rl.finetune_lr", c.finetune_learning_rate);
    r.read("rl.updates_per_step", c.updates_per_step);
    r.read("rl.random_steps", c.random_steps);
    r.read("rl.bootstrap_on_timeout", c.bootstrap_on_timeout);
    r.read("rl.train_exploration", c.train_exploration);
    r.read("rl.finetune_exploration", c.finetune_exploration);
    r.read("rl.eval_mode", c.eval_mode);

    if (auto* e = r.find("pipeline.augmentation")) {
        if (e->value == "none") c.augmentation = Augmentation::none;
        else if (e->value == "overlay") c.augmentation = Augmentation::overlay;
        else throw ConfigError("pipeline.augmentation: expected none or overlay, got '" + e->value + "'", e->line);
    }
    r.read("pipeline.overlay_max", c.overlay_max);
    r.read("pipeline.overlay_bank_size", c.overlay_bank_size);
    r.read("pipeline.reward_sees_augmented", c.reward_sees_augmented);
    if (auto* e = r.find("pipeline.baseline")) {
        if (e->value == "none") c.baseline = Baseline::none;
        else if (e->value == "idm") c.baseline = Baseline::idm;
        else throw ConfigError("pipeline.baseline: expected none or idm, got '" + e->value + "'", e->line);
    }
    r.read("pipeline.finetune_reset_optimizer", c.finetune_reset_optimizer);
    r.read("pipeline.finetune_encoder_only", c.finetune_encoder_only);
}

struct LoadedRunConfig {
    RunConfig config;
    RunSettings settings;
};

inline LoadedRunConfig load_run_config(const IniDocument& doc, LoadedRunConfig base = {}) {
    ConfigReader r(doc);
    apply_run_config(r, base.config, base.settings);
    r.reject_unknown({"sweep", "manifest"});
    base.config.validate();
    if (base.settings.checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be non-negative");
    return base;
}

inline LoadedRunConfig load_run_config_file(const std::filesystem::path& path, LoadedRunConfig base = {}) {
    return load_run_config(parse_ini_file(path), std::move(base));
}

/// Canonical text form; parsing it back yields the same configuration.
inline std::string serialize_run_config(const RunConfig& c, const RunSettings& s) {
    using namespace ini_detail;
    std::ostringstream o;
    o << "[env]\n"
      << "horizon = " << c.env.horizon << "\n"
      << "action_step = " << format_double(c.env.action_step) << "\n"
      << "action_count = " << c.env.action_count << "\n"
      << "image_height = " << c.env.image_height << "\n"
      << "image_width = " << c.env.image_width << "\n\n";
    o << "[run]\n";
    if (!s.run_id.empty()) o << "id = " << s.run_id << "\n";
    o << "seed = " << c.master_seed << "\n"
      << "train_steps = " << c.train_steps << "\n"
      << "finetune_steps = " << c.finetune_steps << "\n"
      << "eval_episodes = " << c.eval_episodes << "\n"
      << "target_kappa = " << format_double(c.target_intensity) << "\n"
      << "snapshot_every = " << c.snapshot_every << "\n"
      << "checkpoint_every = " << s.checkpoint_every << "\n"
      << "fixed_goal = "
      << (c.fixed_goal ? format_double(c.fixed_goal->x) + "," + format_double(c.fixed_goal->y) : std::string("none"))
      << "\n\n";
    o << "[network]\n"
      << "q_hidden = " << join(c.q_hidden) << "\n"
      << "reward_hidden = " << join(c.reward_hidden) << "\n"
      << "idm_hidden = " << join(c.idm_hidden) << "\n"
      << "activation = " << (c.activation == Activation::relu ? "relu" : "tanh") << "\n\n";
    o << "[rl]\n"
      << "alpha = " << format_double(c.q.alpha) << "\n"
      << "gamma = " << format_double(c.q.gamma) << "\n"
      << "tau = " << format_double(c.q.tau) << "\n"
      << "sync_every = " << c.q.sync_every << "\n"
      << "batch_size = " << c.batch_size << "\n"
      << "buffer_capacity = " << c.buffer_capacity << "\n"
      << "q_lr = " << format_double(c.q_learning_rate) << "\n"
      << "reward_lr = " << format_double(c.reward_learning_rate) << "\n"
      << "idm_lr = " << format_double(c.idm_learning_rate) << "\n"
      << "finetune_lr = " << format_double(c.finetune_learning_rate) << "\n"
      << "updates_per_step = " << c.updates_per_step << "\n"
      << "random_steps = " << c.random_steps << "\n"
      << "bootstrap_on_timeout = " << (c.bootstrap_on_timeout ? "true" : "false") << "\n"
      << "train_exploration = " << act_mode_name(c.train_exploration) << "\n"
      << "finetune_exploration = " << act_mode_name(c.finetune_exploration) << "\n"
      << "eval_mode = " << act_mode_name(c.eval_mode) << "\n\n";
    o << "[pipeline]\n"
      << "augmentation = " << (c.augmentation == Augmentation::overlay ? "overlay" : "none") << "\n"
      << "overlay_max = " << format_double(c.overlay_max) << "\n"
      << "overlay_bank_size = " << c.overlay_bank_size << "\n"
      << "reward_sees_augmented = " << (c.reward_sees_augmented ? "true" : "false") << "\n"
      << "baseline = " << (c.baseline == Baseline::idm ? "idm" : "none") << "\n"
      << "finetune_reset_optimizer = " << (c.finetune_reset_optimizer ? "true" : "false") << "\n"
      << "finetune_encoder_only = " << (c.finetune_encoder_only ? "true" : "false") << "\n";
    return o.str();
}

enum class SweepPhase { zero_shot, prft, idm, control };

inline const char* to_string(SweepPhase p) {
    switch (p) {
        case SweepPhase::zero_shot: return "zero_shot";
        case SweepPhase::prft: return "prft";
        case SweepPhase::idm: return "idm";
        case SweepPhase::control: return "control";
    }
    return "unknown";
}

struct SweepSpec {
    std::string sweep_id = "sweep";
    std::vector<double> intensities{0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3};
    std::vector<SweepPhase> phases{SweepPhase::zero_shot, SweepPhase::prft, SweepPhase::idm, SweepPhase::control};
    LoadedRunConfig base;

    bool has(SweepPhase p) const { return std::find(phases.begin(), phases.end(), p) != phases.end(); }

    void validate() const {
        if (intensities.empty()) throw ConfigError("sweep.intensities must not be empty");
        if (seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
        if (phases.empty()) throw ConfigError("sweep.phases must not be empty");
        for (double k : intensities)
            if (!(k >= 0.0 && k <= 1.0)) throw ConfigError("sweep intensities must lie in [0, 1]");
    }
};

/// A sweep file is a run config plus a [sweep] section.
inline SweepSpec load_sweep_spec(const IniDocument& doc) {
    SweepSpec spec;
    ConfigReader r(doc);
    r.read("sweep.id", spec.sweep_id);
    r.read("sweep.intensities", spec.intensities);
    r.read("sweep.seeds", spec.seeds);
    if (auto* e = r.find("sweep.phases")) {
        spec.phases.clear();
        for (const auto& p : ini_detail::split_list(e->value)) {
            if (p == "zero_shot") spec.phases.push_back(SweepPhase::zero_shot);
            else if (p == "prft") spec.phases.push_back(SweepPhase::prft);
            else if (p == "idm") spec.phases.push_back(SweepPhase::idm);
            else if (p == "control") spec.phases.push_back(SweepPhase::control);
            else throw ConfigError("sweep.phases: unknown phase '" + p + "'", e->line);
        }
    }
    apply_run_config(r, spec.base.config, spec.base.settings);
    r.reject_unknown({"manifest"});
    if (spec.has(SweepPhase::idm)) spec.base.config.baseline = Baseline::idm;
    spec.base.config.validate();
    spec.validate();
    return spec;
}

}  // namespace prft
