#pragma once

// Experiment orchestration: run directories, manifests, checkpoints, CSV
// reports, and the five top-level commands. Every command returns a process
// exit status and reports problems on the given log stream.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad invocation or config,
// 3 training diverged, 4 sweep finished with failed jobs.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "prft/analysis.hpp"
#include "prft/config.hpp"
#include "prft/pipeline.hpp"

#ifndef PRFT_VERSION
#define PRFT_VERSION "0.1.0-unknown"
#endif

namespace prft {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;
inline constexpr int kExitPartial = 4;

// ---------------------------------------------------------------------------
// CSV

/// %.9g, or an empty field for NaN.
inline std::string csv_number(double v) {
    if (std::isnan(v)) return {};
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

/// Strips characters that would break the one-line comma-separated layout.
inline std::string csv_text(std::string s) {
    for (char& c : s)
        if (c == ',' || c == '\n' || c == '\r') c = ';';
    return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            out.push_back(field);
            field.clear();
        } else {
            field += c;
        }
    }
    out.push_back(field);
    return out;
}

inline std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

inline void write_metrics_csv(const fs::path& path, const std::vector<MetricRow>& rows) {
    auto out = open_output(path);
    out << "phase,step,episode,td_loss,reward_loss,idm_loss,return_true,return_predicted,kappa,seed\n";
    for (const auto& r : rows)
        out << r.phase << ',' << r.step << ',' << r.episode << ',' << csv_number(r.td_loss) << ','
            << csv_number(r.reward_loss) << ',' << csv_number(r.idm_loss) << ',' << csv_number(r.return_true) << ','
            << csv_number(r.return_predicted) << ',' << csv_number(r.kappa) << ',' << r.seed << '\n';
}

// ---------------------------------------------------------------------------
// Output roots and manifests

/// --out beats PRFT_OUT_ROOT beats "runs".
inline fs::path resolve_out_root(const std::optional<std::string>& flag) {
    if (flag && !flag->empty()) return *flag;
    if (const char* env = std::getenv("PRFT_OUT_ROOT"); env && *env) return env;
    return "runs";
}

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string format_kappa(double k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", k);
    return buf;
}

/// A manifest is itself a valid config file: a [manifest] section followed
/// by the full configuration, so `--config manifest.txt` re-runs it.
struct Manifest {
    std::vector<std::pair<std::string, std::string>> fields;
    std::string config_text;

    void set(const std::string& key, const std::string& value) {
        for (auto& [k, v] : fields)
            if (k == key) {
                v = value;
                return;
            }
        fields.emplace_back(key, value);
    }

    void write(const fs::path& path) const {
        auto out = open_output(path);
        out << "[manifest]\n";
        for (const auto& [k, v] : fields) out << k << " = " << v << "\n";
        out << "\n" << config_text;
    }
};

inline Manifest start_manifest(const std::string& command, const std::string& run_id, const std::string& config_text) {
    Manifest m;
    m.set("command", command);
    m.set("run_id", run_id);
    m.set("version", PRFT_VERSION);
    m.set("started_at", utc_timestamp());
    m.set("layout", "manifest.txt,config.ini,metrics.csv,checkpoints/,reports/");
    m.config_text = config_text;
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

/// Everything needed to resume from a trained source run.
struct Checkpoint {
    LoadedRunConfig config;
    SourceResult source;
    int step = 0;
};

inline void save_checkpoint(const fs::path& dir, const SourceResult& s, const LoadedRunConfig& cfg, int step) {
    fs::create_directories(dir);
    save_params(dir / "q.bin", s.policy.network);
    save_params(dir / "q_target.bin", s.policy.target_network);
    save_params(dir / "reward.bin", s.reward_model.network());
    save_adam(dir / "q_adam.bin", s.q_optimizer);
    save_adam(dir / "reward_adam.bin", s.reward_optimizer);
    if (s.idm) save_params(dir / "idm.bin", s.idm->head);
    else fs::remove(dir / "idm.bin");
    {
        auto out = open_output(dir / "config.ini");
        out << serialize_run_config(cfg.config, cfg.settings);
    }
    auto out = open_output(dir / "state.txt");
    out << "step = " << step << "\nq_updates = " << s.policy.updates << "\nreward_reads = " << s.reward_reads
        << "\nreward_frozen = " << (s.reward_model.frozen() ? "true" : "false") << "\n";
}

/// Accepts a checkpoint directory or a run directory (uses checkpoints/final).
inline fs::path resolve_checkpoint_dir(const fs::path& dir) {
    if (fs::exists(dir / "q.bin")) return dir;
    if (fs::exists(dir / "checkpoints" / "final" / "q.bin")) return dir / "checkpoints" / "final";
    throw std::runtime_error("no checkpoint found in '" + dir.string() + "'");
}

inline Checkpoint load_checkpoint(const fs::path& requested) {
    const fs::path dir = resolve_checkpoint_dir(requested);
    Checkpoint c;
    c.config = load_run_config_file(dir / "config.ini");
    std::ifstream state_in(dir / "state.txt");
    if (!state_in) throw std::runtime_error("checkpoint is missing state.txt");
    const IniDocument state = parse_ini_string("[state]\n" + std::string(std::istreambuf_iterator<char>(state_in), {}));
    ConfigReader sr(state);
    std::uint64_t updates = 0;
    bool frozen = false;
    sr.read("state.step", c.step);
    sr.read("state.q_updates", updates);
    sr.read("state.reward_reads", c.source.reward_reads);
    sr.read("state.reward_frozen", frozen);

    c.source.policy.network = load_params(dir / "q.bin");
    c.source.policy.target_network = load_params(dir / "q_target.bin");
    c.source.policy.config = c.config.config.q;
    c.source.policy.updates = static_cast<std::int64_t>(updates);
    c.source.policy.validate();
    if (!(c.source.policy.network.spec == c.config.config.q_spec()))
        throw std::runtime_error("checkpoint network shape does not match its config");
    c.source.reward_model = RewardPredictor(load_params(dir / "reward.bin"), frozen);
    c.source.q_optimizer = load_adam(dir / "q_adam.bin");
    c.source.reward_optimizer = load_adam(dir / "reward_adam.bin");
    if (fs::exists(dir / "idm.bin")) c.source.idm = InverseDynamicsModel{load_params(dir / "idm.bin")};
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation reports

struct EvalRecord {
    std::string phase;
    int step = 0;
    EvalReport report;
};

inline void write_eval_reports(const fs::path& reports_dir, const std::vector<EvalRecord>& records) {
    auto summary = open_output(reports_dir / "eval.csv");
    summary << "phase,step,kappa,mean_return,std_return,episodes,reward_reads\n";
    auto episodes = open_output(reports_dir / "episodes.csv");
    episodes << "phase,step,kappa,episode,return\n";
    for (const auto& r : records) {
        summary << r.phase << ',' << r.step << ',' << csv_number(r.report.domain_intensity) << ','
                << csv_number(r.report.mean_return) << ',' << csv_number(r.report.std_return) << ','
                << r.report.per_episode_returns.size() << ',' << r.report.reward_reads << '\n';
        for (std::size_t i = 0; i < r.report.per_episode_returns.size(); ++i)
            episodes << r.phase << ',' << r.step << ',' << csv_number(r.report.domain_intensity) << ',' << i << ','
                     << csv_number(r.report.per_episode_returns[i]) << '\n';
    }
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
    SourceResult source;
    EvalReport source_eval;
};

/// Trains into `run_dir`. The manifest is on disk before the first step.
/// On divergence the metrics so far and a checkpoint under
/// checkpoints/diverged are written, then DivergenceError propagates.
inline TrainOutcome run_training(const LoadedRunConfig& cfg, const fs::path& run_dir) {
    const std::string config_text = serialize_run_config(cfg.config, cfg.settings);
    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "reports");
    Manifest manifest = start_manifest("train", cfg.settings.run_id, config_text);
    manifest.set("status", "running");
    manifest.write(run_dir / "manifest.txt");
    {
        auto out = open_output(run_dir / "config.ini");
        out << config_text;
    }

    TrainHooks hooks;
    hooks.checkpoint_every = cfg.settings.checkpoint_every;
    hooks.on_checkpoint = [&](int step, const SourceResult& s) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%07d", step);
        save_checkpoint(run_dir / "checkpoints" / name, s, cfg, step);
    };
    hooks.on_divergence = [&](int step, const SourceResult& s) {
        save_checkpoint(run_dir / "checkpoints" / "diverged", s, cfg, step);
        write_metrics_csv(run_dir / "metrics.csv", s.metrics);
        manifest.set("status", "diverged at step " + std::to_string(step));
        manifest.set("finished_at", utc_timestamp());
        manifest.write(run_dir / "manifest.txt");
    };

    TrainOutcome outcome{train_source(cfg.config, hooks), {}};
    write_metrics_csv(run_dir / "metrics.csv", outcome.source.metrics);
    save_checkpoint(run_dir / "checkpoints" / "final", outcome.source, cfg, cfg.config.train_steps);
    outcome.source_eval = evaluate(outcome.source.policy, DomainSpec::source(), cfg.config, EvalPhase::source);
    write_eval_reports(run_dir / "reports", {{"source", cfg.config.train_steps, outcome.source_eval}});

    manifest.set("status", "completed");
    manifest.set("train_reward_reads", std::to_string(outcome.source.reward_reads));
    manifest.set("eval_reward_reads", std::to_string(outcome.source_eval.reward_reads));
    manifest.set("finished_at", utc_timestamp());
    manifest.write(run_dir / "manifest.txt");
    return outcome;
}

struct TrainOptions {
    std::string config_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> snapshot_every;
};

inline int cmd_train(const TrainOptions& opt, std::ostream& log = std::cerr) {
    if (opt.config_path.empty()) {
        log << "train: --config is required\n";
        return kExitUsage;
    }
    if (!fs::exists(opt.config_path)) {
        log << "train: config file not found: " << opt.config_path << "\n";
        return kExitUsage;
    }
    LoadedRunConfig cfg;
    try {
        cfg = load_run_config_file(opt.config_path);
        if (opt.seed) cfg.config.master_seed = *opt.seed;
        if (opt.snapshot_every) cfg.config.snapshot_every = *opt.snapshot_every;
        cfg.config.validate();
    } catch (const ConfigError& e) {
        log << opt.config_path << ": " << e.what() << "\n";
        return kExitUsage;
    }
    if (cfg.settings.run_id.empty()) cfg.settings.run_id = "train-s" + std::to_string(cfg.config.master_seed);
    const fs::path run_dir = resolve_out_root(opt.out) / cfg.settings.run_id;
    try {
        const TrainOutcome o = run_training(cfg, run_dir);
        log << "train: " << run_dir.string() << " source return " << csv_number(o.source_eval.mean_return) << "\n";
        return kExitOk;
    } catch (const DivergenceError& e) {
        log << "train: diverged: " << e.what() << "; diagnostic checkpoint in "
            << (run_dir / "checkpoints" / "diverged").string() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        log << "train: " << e.what() << "\n";
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneOptions {
    std::string checkpoint;               // run or checkpoint directory
    std::optional<double> kappa;
    std::optional<std::string> config_path;  // overrides applied on top of the checkpoint config
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<int> snapshot_every;
};

struct FinetuneOutcome {
    std::vector<EvalRecord> evaluations;  // zero-shot first, then one per snapshot
    FinetuneResult result;
};

inline FinetuneOutcome run_finetune(const Checkpoint& ckpt, const LoadedRunConfig& cfg, double kappa,
                                    const fs::path& run_dir, const std::string& checkpoint_path) {
    const RunConfig& c = cfg.config;
    std::ostringstream config_text;
    config_text << serialize_run_config(c, cfg.settings);
    Manifest manifest = start_manifest("finetune", cfg.settings.run_id, config_text.str());
    manifest.set("checkpoint", fs::absolute(checkpoint_path).lexically_normal().string());
    manifest.set("kappa", ini_detail::format_double(kappa));
    manifest.set("status", "running");
    fs::create_directories(run_dir / "reports");
    manifest.write(run_dir / "manifest.txt");
    {
        auto out = open_output(run_dir / "config.ini");
        out << config_text.str();
    }

    const DomainSpec target = make_domain(kappa, c.master_seed);
    FinetuneOutcome outcome;
    outcome.evaluations.push_back({"zero_shot", 0, evaluate(ckpt.source.policy, target, c, EvalPhase::zero_shot)});
    FinetuneHooks hooks;
    hooks.on_snapshot = [&](int step, const QFunction& q) {
        outcome.evaluations.push_back({"finetuned", step, evaluate(q, target, c, EvalPhase::finetuned)});
    };
    RewardPredictor model = ckpt.source.reward_model;
    outcome.result = finetune_target(ckpt.source.policy, model, target, c, hooks, &ckpt.source.q_optimizer);

    write_metrics_csv(run_dir / "metrics.csv", outcome.result.metrics);
    write_eval_reports(run_dir / "reports", outcome.evaluations);
    SourceResult adapted = ckpt.source;
    adapted.policy = outcome.result.policy;
    adapted.reward_model = model;
    adapted.metrics.clear();
    save_checkpoint(run_dir / "checkpoints" / "final", adapted, cfg, c.finetune_steps);

    std::uint64_t eval_reads = 0;
    for (const auto& e : outcome.evaluations) eval_reads += e.report.reward_reads;
    manifest.set("status", "completed");
    manifest.set("finetune_reward_reads", std::to_string(outcome.result.reward_reads));
    manifest.set("eval_reward_reads", std::to_string(eval_reads));
    manifest.set("snapshots", std::to_string(outcome.evaluations.size()));
    manifest.set("finished_at", utc_timestamp());
    manifest.write(run_dir / "manifest.txt");
    return outcome;
}

inline int cmd_finetune(FinetuneOptions opt, std::ostream& log = std::cerr) {
    // A fine-tune manifest names its checkpoint and target, so it can be replayed as a config.
    std::optional<IniDocument> overrides;
    if (opt.config_path) {
        if (!fs::exists(*opt.config_path)) {
            log << "finetune: config file not found: " << *opt.config_path << "\n";
            return kExitUsage;
        }
        try {
            overrides = parse_ini_file(*opt.config_path);
        } catch (const ConfigError& e) {
            log << *opt.config_path << ": " << e.what() << "\n";
            return kExitUsage;
        }
        if (opt.checkpoint.empty())
            if (auto it = overrides->find("manifest.checkpoint"); it != overrides->end()) opt.checkpoint = it->second.value;
        if (!opt.kappa)
            if (auto it = overrides->find("manifest.kappa"); it != overrides->end()) {
                try {
                    opt.kappa = ini_detail::to_double(it->second.value, it->second.line, "manifest.kappa");
                } catch (const ConfigError& e) {
                    log << *opt.config_path << ": " << e.what() << "\n";
                    return kExitUsage;
                }
            }
    }
    if (opt.checkpoint.empty()) {
        log << "finetune: a checkpoint directory is required\n";
        return kExitUsage;
    }
    if (!opt.kappa || !(*opt.kappa >= 0.0 && *opt.kappa <= 1.0)) {
        log << "finetune: --kappa in [0, 1] is required\n";
        return kExitUsage;
    }
    Checkpoint ckpt;
    try {
        ckpt = load_checkpoint(opt.checkpoint);
    } catch (const std::exception& e) {
        log << "finetune: cannot load checkpoint '" << opt.checkpoint << "': " << e.what() << "\n";
        return kExitFailure;
    }
    LoadedRunConfig cfg = ckpt.config;
    const std::string source_id = cfg.settings.run_id.empty() ? "run" : cfg.settings.run_id;
    cfg.settings.run_id.clear();
    try {
        if (overrides) cfg = load_run_config(*overrides, cfg);
        if (opt.seed) cfg.config.master_seed = *opt.seed;
        if (opt.snapshot_every) cfg.config.snapshot_every = *opt.snapshot_every;
        cfg.config.target_intensity = *opt.kappa;
        cfg.config.validate();
        if (!(cfg.config.q_spec() == ckpt.source.policy.network.spec))
            throw ConfigError("overrides change the network shape of the checkpoint");
    } catch (const ConfigError& e) {
        log << (opt.config_path ? *opt.config_path + ": " : std::string()) << e.what() << "\n";
        return kExitUsage;
    }
    if (cfg.settings.run_id.empty() || cfg.settings.run_id == source_id)
        cfg.settings.run_id = source_id + "-ft-k" + format_kappa(*opt.kappa);
    const fs::path run_dir = resolve_out_root(opt.out) / cfg.settings.run_id;
    try {
        const FinetuneOutcome o = run_finetune(ckpt, cfg, *opt.kappa, run_dir, opt.checkpoint);
        log << "finetune: " << run_dir.string() << " zero-shot " << csv_number(o.evaluations.front().report.mean_return)
            << " final " << csv_number(o.evaluations.back().report.mean_return) << "\n";
        return kExitOk;
    } catch (const DivergenceError& e) {
        log << "finetune: diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        log << "finetune: " << e.what() << "\n";
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// sweep

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
    const std::size_t count = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
    std::atomic<std::size_t> next{0};
    auto loop = [&] {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
    };
    if (count <= 1) {
        loop();
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < count; ++t) pool.emplace_back(loop);
}

struct SweepJob {
    std::uint64_t seed = 0;
    double kappa = 0.0;
    SweepPhase phase = SweepPhase::zero_shot;

    bool ok = false;
    std::string message;
    double return_mean = kMissing;
    double return_std = kMissing;
    double zero_shot_mean = kMissing;
    double rel_improvement = kMissing;
    double source_return = kMissing;
    std::uint64_t finetune_reward_reads = 0;
    std::uint64_t eval_reward_reads = 0;
};

struct SweepCell {
    double kappa = 0.0;
    SweepPhase phase = SweepPhase::zero_shot;
    int completed = 0;
    int failed = 0;
    double return_mean = kMissing;
    double return_std = kMissing;
    double rel_mean = kMissing;
    double rel_std = kMissing;
};

struct SweepOutcome {
    std::vector<SweepJob> jobs;
    std::vector<SweepCell> cells;
};

/// (f - z) / z.
inline double relative_improvement(double finetuned, double zero_shot) { return (finetuned - zero_shot) / zero_shot; }

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
    if (xs.empty()) return {kMissing, kMissing};
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

inline std::vector<SweepCell> aggregate_jobs(const SweepSpec& spec, const std::vector<SweepJob>& jobs) {
    std::vector<SweepCell> cells;
    for (double k : spec.intensities)
        for (SweepPhase p : spec.phases) {
            SweepCell cell{k, p};
            std::vector<double> returns, rels;
            for (const auto& j : jobs) {
                if (j.kappa != k || j.phase != p) continue;
                if (!j.ok) {
                    ++cell.failed;
                    continue;
                }
                ++cell.completed;
                returns.push_back(j.return_mean);
                if (!std::isnan(j.rel_improvement)) rels.push_back(j.rel_improvement);
            }
            std::tie(cell.return_mean, cell.return_std) = mean_std(returns);
            std::tie(cell.rel_mean, cell.rel_std) = mean_std(rels);
            cells.push_back(cell);
        }
    return cells;
}

inline void write_summary_csv(const fs::path& path, const std::vector<SweepCell>& cells) {
    auto out = open_output(path);
    out << "kappa,phase,completed,failed,return_mean,return_std,rel_improvement_mean,rel_improvement_std\n";
    for (const auto& c : cells)
        out << csv_number(c.kappa) << ',' << to_string(c.phase) << ',' << c.completed << ',' << c.failed << ','
            << csv_number(c.return_mean) << ',' << csv_number(c.return_std) << ',' << csv_number(c.rel_mean) << ','
            << csv_number(c.rel_std) << '\n';
}

inline void write_jobs_csv(const fs::path& path, const std::vector<SweepJob>& jobs) {
    auto out = open_output(path);
    out << "seed,kappa,phase,status,return_mean,return_std,zero_shot_mean,rel_improvement,source_return,"
           "finetune_reward_reads,eval_reward_reads,negative_transfer,message\n";
    for (const auto& j : jobs) {
        const bool negative = j.ok && !std::isnan(j.rel_improvement) && j.rel_improvement < 0.0;
        out << j.seed << ',' << csv_number(j.kappa) << ',' << to_string(j.phase) << ',' << (j.ok ? "ok" : "failed") << ','
            << csv_number(j.return_mean) << ',' << csv_number(j.return_std) << ',' << csv_number(j.zero_shot_mean) << ','
            << csv_number(j.rel_improvement) << ',' << csv_number(j.source_return) << ',' << j.finetune_reward_reads
            << ',' << j.eval_reward_reads << ',' << (negative ? 1 : 0) << ',' << csv_text(j.message) << '\n';
    }
}

inline std::string job_name(const SweepJob& j) {
    return std::string(to_string(j.phase)) + "-k" + format_kappa(j.kappa) + "-s" + std::to_string(j.seed);
}

inline void run_sweep_job(SweepJob& job, const TrainOutcome& trained, const LoadedRunConfig& cfg, const fs::path& dir) {
    const RunConfig& c = cfg.config;
    const DomainSpec target = make_domain(job.kappa, c.master_seed);
    job.source_return = trained.source_eval.mean_return;
    auto record = [&](const EvalReport& r) {
        job.return_mean = r.mean_return;
        job.return_std = r.std_return;
        job.eval_reward_reads += r.reward_reads;
    };
    switch (job.phase) {
        case SweepPhase::zero_shot:
            record(evaluate(trained.source.policy, target, c, EvalPhase::zero_shot));
            job.zero_shot_mean = job.return_mean;
            break;
        case SweepPhase::control:
            record(evaluate(trained.source.policy, DomainSpec::source(), c, EvalPhase::source));
            break;
        case SweepPhase::prft:
        case SweepPhase::idm: {
            const EvalReport z = evaluate(trained.source.policy, target, c, EvalPhase::zero_shot);
            job.zero_shot_mean = z.mean_return;
            job.eval_reward_reads += z.reward_reads;
            FinetuneResult ft;
            if (job.phase == SweepPhase::prft) {
                RewardPredictor model = trained.source.reward_model;
                ft = finetune_target(trained.source.policy, model, target, c, {}, &trained.source.q_optimizer);
            } else {
                ft = finetune_idm_baseline(trained.source.policy, trained.source.idm, target, c);
            }
            job.finetune_reward_reads = ft.reward_reads;
            write_metrics_csv(dir / "metrics.csv", ft.metrics);
            record(evaluate(ft.policy, target, c, EvalPhase::finetuned));
            job.rel_improvement = relative_improvement(job.return_mean, job.zero_shot_mean);
            break;
        }
    }
    job.ok = true;
}

/// Stage one trains one source run per seed; stage two runs every
/// (seed, kappa, phase) job against those runs. Jobs share nothing and the
/// aggregate is built after all of them finish.
inline SweepOutcome run_sweep(const SweepSpec& spec, const fs::path& sweep_dir, int workers, std::ostream& log) {
    std::mutex log_mutex;
    auto say = [&](const std::string& s) {
        std::lock_guard lock(log_mutex);
        log << s << std::endl;
    };

    std::vector<LoadedRunConfig> configs;
    for (std::uint64_t seed : spec.seeds) {
        LoadedRunConfig c = spec.base;
        c.config.master_seed = seed;
        c.settings.run_id = "s" + std::to_string(seed);
        configs.push_back(c);
    }

    std::vector<std::optional<TrainOutcome>> trained(configs.size());
    std::vector<std::string> train_errors(configs.size());
    parallel_for(configs.size(), workers, [&](std::size_t i) {
        try {
            trained[i] = run_training(configs[i], sweep_dir / "train" / configs[i].settings.run_id);
            say("sweep: trained seed " + std::to_string(configs[i].config.master_seed));
        } catch (const std::exception& e) {
            train_errors[i] = std::string("source training failed: ") + e.what();
            say("sweep: seed " + std::to_string(configs[i].config.master_seed) + " " + train_errors[i]);
        }
    });

    SweepOutcome outcome;
    std::vector<std::size_t> owner;
    for (double k : spec.intensities)
        for (std::size_t i = 0; i < spec.seeds.size(); ++i)
            for (SweepPhase p : spec.phases) {
                SweepJob j;
                j.seed = spec.seeds[i];
                j.kappa = k;
                j.phase = p;
                outcome.jobs.push_back(j);
                owner.push_back(i);
            }

    parallel_for(outcome.jobs.size(), workers, [&](std::size_t n) {
        SweepJob& job = outcome.jobs[n];
        const std::size_t i = owner[n];
        if (!trained[i]) {
            job.message = train_errors[i];
            return;
        }
        try {
            run_sweep_job(job, *trained[i], configs[i], sweep_dir / "jobs" / job_name(job));
            say("sweep: " + job_name(job) + " return " + csv_number(job.return_mean));
        } catch (const std::exception& e) {
            job.ok = false;
            job.message = e.what();
            say("sweep: " + job_name(job) + " failed: " + job.message);
        }
    });

    outcome.cells = aggregate_jobs(spec, outcome.jobs);
    write_jobs_csv(sweep_dir / "jobs.csv", outcome.jobs);
    write_summary_csv(sweep_dir / "summary.csv", outcome.cells);
    for (const auto& j : outcome.jobs)
        if (j.ok && j.phase == SweepPhase::prft && j.rel_improvement < 0.0)
            say("sweep: negative transfer at kappa " + format_kappa(j.kappa) + " seed " + std::to_string(j.seed));
    return outcome;
}

inline std::string serialize_sweep_section(const SweepSpec& spec) {
    std::string phases;
    for (std::size_t i = 0; i < spec.phases.size(); ++i) phases += (i ? "," : "") + std::string(to_string(spec.phases[i]));
    std::ostringstream o;
    o << "[sweep]\nid = " << spec.sweep_id << "\nintensities = " << ini_detail::join(spec.intensities)
      << "\nseeds = " << ini_detail::join(spec.seeds) << "\nphases = " << phases << "\n\n";
    return o.str();
}

struct SweepOptions {
    std::string config_path;
    std::optional<std::string> out;
    int workers = 1;
    std::optional<int> snapshot_every;
};

inline int cmd_sweep(const SweepOptions& opt, std::ostream& log = std::cerr) {
    if (opt.config_path.empty() || !fs::exists(opt.config_path)) {
        log << "sweep: config file not found: " << opt.config_path << "\n";
        return kExitUsage;
    }
    if (opt.workers < 1) {
        log << "sweep: --workers must be >= 1\n";
        return kExitUsage;
    }
    SweepSpec spec;
    try {
        spec = load_sweep_spec(parse_ini_file(opt.config_path));
        if (opt.snapshot_every) spec.base.config.snapshot_every = *opt.snapshot_every;
    } catch (const ConfigError& e) {
        log << opt.config_path << ": " << e.what() << "\n";
        return kExitUsage;
    }
    const fs::path sweep_dir = resolve_out_root(opt.out) / spec.sweep_id;
    try {
        fs::create_directories(sweep_dir);
        RunSettings settings = spec.base.settings;
        settings.run_id.clear();
        Manifest manifest = start_manifest("sweep", spec.sweep_id,
                                           serialize_sweep_section(spec) + serialize_run_config(spec.base.config, settings));
        manifest.set("workers", std::to_string(opt.workers));
        manifest.set("status", "running");
        manifest.write(sweep_dir / "manifest.txt");

        const SweepOutcome o = run_sweep(spec, sweep_dir, opt.workers, log);
        std::uint64_t ft_reads = 0;
        int failed = 0;
        for (const auto& j : o.jobs) {
            ft_reads += j.finetune_reward_reads;
            failed += j.ok ? 0 : 1;
        }
        manifest.set("status", failed ? std::to_string(failed) + " jobs failed" : "completed");
        manifest.set("finetune_reward_reads", std::to_string(ft_reads));
        manifest.set("finished_at", utc_timestamp());
        manifest.write(sweep_dir / "manifest.txt");
        log << "sweep: " << (sweep_dir / "summary.csv").string() << "\n";
        return failed ? kExitPartial : kExitOk;
    } catch (const std::exception& e) {
        log << "sweep: " << e.what() << "\n";
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// diagnose

struct FitRow {
    double kappa = 0.0;
    std::uint64_t seed = 0;
    FitDiagnostic fit;
};

struct MarginRow {
    double kappa = 0.0;
    std::uint64_t seed = 0;
    RobustSetReport learned;
    RobustSetReport exact;  // r_tilde = R, the reference value horizon * ln|A|
};

struct DiagnoseOutcome {
    std::vector<FitRow> fits;
    std::vector<MarginRow> margins;
};

inline constexpr int kDiagnoseEpisodes = 20;
inline constexpr int kMarginGrid = 21;
inline constexpr int kMarginRollouts = 1000;

/// Source-policy trajectories in the source domain: states before each
/// action, the action, and the true reward of the step.
struct StateTrajectories {
    std::vector<EnvState> states;
    std::vector<int> actions;
    std::vector<double> rewards;
};

inline StateTrajectories collect_source_states(const QFunction& policy, const RunConfig& c, int episodes) {
    StateTrajectories t;
    Environment env(c.env, DomainSpec::source());
    Rng rng(derive_seed(c.master_seed, "diagnose-act"));
    for (int e = 0; e < episodes; ++e) {
        Observation obs = env.reset(derive_seed(c.master_seed, "diagnose-episode", static_cast<std::uint64_t>(e)), c.fixed_goal);
        while (!env.done()) {
            const int a = act(policy, obs, ActMode::sample, rng);
            t.states.push_back(env.state());
            t.actions.push_back(a);
            env.step(a);
            t.rewards.push_back(env.true_reward());
            obs = env.observation();
        }
    }
    return t;
}

inline FitDiagnostic same_state_fit(const RewardPredictor& model, const StateTrajectories& t, const DomainSpec& domain,
                                    const EnvConfig& env) {
    std::vector<RewardPair> pairs;
    pairs.reserve(t.states.size());
    for (std::size_t i = 0; i < t.states.size(); ++i)
        pairs.push_back({predict(model, render(t.states[i], domain, env), t.actions[i]), t.rewards[i]});
    return linear_fit_diagnostic(pairs);
}

/// Margin of the learned predictor on the discretized reacher, rendered
/// under `domain`, for the Boltzmann policy of the soft-optimal Q at alpha 1.
inline MarginRow discretized_margin(const RewardPredictor& model, const RunConfig& c, const DomainSpec& domain) {
    const Vec2 goal = c.fixed_goal.value_or(Vec2{0.75, 0.75});
    const DiscretizedEnv d = discretize_env(c.env, goal, kMarginGrid, c.q.gamma);
    std::vector<double> r_tilde(d.mdp.rewards.size());
    for (int s = 0; s < d.mdp.n_states; ++s) {
        const Observation obs = render(EnvState{d.center(s), goal, 0}, domain, c.env);
        for (int a = 0; a < d.mdp.n_actions; ++a)
            r_tilde[static_cast<std::size_t>(s) * d.mdp.n_actions + a] = predict(model, obs, a);
    }
    const QTable q = soft_value_iteration(d.mdp, 1.0, 1e-10);
    std::vector<std::vector<double>> policy;
    for (int s = 0; s < d.mdp.n_states; ++s) policy.push_back(boltzmann_policy(q.row(s), 1.0));

    RobustRolloutSpec spec;
    spec.n_rollouts = kMarginRollouts;
    spec.horizon = c.env.horizon;
    MarginRow row;
    row.kappa = domain.intensity;
    row.seed = c.master_seed;
    Rng rng(derive_seed(c.master_seed, "diagnose-margin", std::bit_cast<std::uint64_t>(domain.intensity)));
    row.learned = robust_set_margin(d.mdp, r_tilde, policy, spec, rng);
    Rng rng_exact(derive_seed(c.master_seed, "diagnose-margin-exact"));
    row.exact = robust_set_margin(d.mdp, d.mdp.rewards, policy, spec, rng_exact);
    return row;
}

inline DiagnoseOutcome run_diagnose(const std::vector<Checkpoint>& checkpoints, const std::vector<double>& kappas) {
    DiagnoseOutcome out;
    for (double k : kappas)
        for (const auto& ck : checkpoints) {
            const RunConfig& c = ck.config.config;
            const StateTrajectories t = collect_source_states(ck.source.policy, c, kDiagnoseEpisodes);
            const DomainSpec domain = make_domain(k, c.master_seed);
            out.fits.push_back({k, c.master_seed, same_state_fit(ck.source.reward_model, t, domain, c.env)});
            out.margins.push_back(discretized_margin(ck.source.reward_model, c, domain));
        }
    return out;
}

inline void write_diagnose_csvs(const fs::path& dir, const DiagnoseOutcome& o) {
    auto fit = open_output(dir / "fit.csv");
    fit << "kappa,seed,k,b,r_squared,mse,n\n";
    for (const auto& r : o.fits)
        fit << csv_number(r.kappa) << ',' << r.seed << ',' << csv_number(r.fit.slope) << ',' << csv_number(r.fit.intercept)
            << ',' << csv_number(r.fit.r_squared) << ',' << csv_number(r.fit.mse) << ',' << r.fit.sample_count << '\n';
    auto margin = open_output(dir / "margin.csv");
    margin << "kappa,seed,margin,standard_error,epsilon,member,margin_true_reward\n";
    for (const auto& r : o.margins)
        margin << csv_number(r.kappa) << ',' << r.seed << ',' << csv_number(r.learned.margin) << ','
               << csv_number(r.learned.standard_error) << ',' << csv_number(r.learned.epsilon) << ','
               << (r.learned.member ? 1 : 0) << ',' << csv_number(r.exact.margin) << '\n';
}

struct DiagnoseOptions {
    std::vector<std::string> checkpoints;
    std::vector<double> kappas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
    std::optional<std::string> out;  // output directory; default <root>/diagnose
};

inline int cmd_diagnose(const DiagnoseOptions& opt, std::ostream& log = std::cerr) {
    if (opt.checkpoints.empty() || opt.kappas.empty()) {
        log << "diagnose: need at least one checkpoint and one kappa\n";
        return kExitUsage;
    }
    for (double k : opt.kappas)
        if (!(k >= 0.0 && k <= 1.0)) {
            log << "diagnose: kappa values must lie in [0, 1]\n";
            return kExitUsage;
        }
    std::vector<Checkpoint> checkpoints;
    for (const auto& p : opt.checkpoints) {
        try {
            checkpoints.push_back(load_checkpoint(p));
        } catch (const std::exception& e) {
            log << "diagnose: cannot load checkpoint '" << p << "': " << e.what() << "\n";
            return kExitFailure;
        }
    }
    const fs::path dir = opt.out ? fs::path(*opt.out) : resolve_out_root(std::nullopt) / "diagnose";
    try {
        write_diagnose_csvs(dir, run_diagnose(checkpoints, opt.kappas));
        log << "diagnose: " << (dir / "fit.csv").string() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        log << "diagnose: " << e.what() << "\n";
        return kExitFailure;
    }
}

// ---------------------------------------------------------------------------
// plotdata

struct LongRow {
    std::string metric;
    std::string kappa;
    std::string phase;
    std::string mean;
    std::string std;
};

inline constexpr const char* kLongHeader = "metric,kappa,phase,mean,std";

/// Canonical %.9g form of a numeric field; empty stays empty.
inline std::string normalize_number(const std::string& field, int line) {
    if (field.empty()) return field;
    char* end = nullptr;
    const double v = std::strtod(field.c_str(), &end);
    if (*end != '\0') throw ConfigError("not a number: '" + field + "'", line);
    return csv_number(v);
}

/// Accepts a sweep summary or an already-long file and returns long rows.
inline std::vector<LongRow> tidy_summary(std::istream& in) {
    std::string header;
    if (!std::getline(in, header) || header.empty()) return {};
    if (!header.empty() && header.back() == '\r') header.pop_back();
    const auto names = split_csv_line(header);
    auto column = [&](const std::string& name) -> std::size_t {
        const auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw ConfigError("missing column '" + name + "'", 1);
        return static_cast<std::size_t>(it - names.begin());
    };
    const bool already_long = header == kLongHeader;
    std::vector<LongRow> rows;
    std::string line;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != names.size())
            throw ConfigError("expected " + std::to_string(names.size()) + " fields, got " + std::to_string(f.size()), line_no);
        if (already_long) {
            rows.push_back({f[0], normalize_number(f[1], line_no), f[2], normalize_number(f[3], line_no),
                            normalize_number(f[4], line_no)});
            continue;
        }
        const std::string kappa = normalize_number(f[column("kappa")], line_no);
        const std::string phase = f[column("phase")];
        if (phase.empty()) throw ConfigError("empty phase", line_no);
        rows.push_back({"return", kappa, phase, normalize_number(f[column("return_mean")], line_no),
                        normalize_number(f[column("return_std")], line_no)});
        rows.push_back({"rel_improvement", kappa, phase, normalize_number(f[column("rel_improvement_mean")], line_no),
                        normalize_number(f[column("rel_improvement_std")], line_no)});
    }
    return rows;
}

inline void write_long_csv(std::ostream& out, const std::vector<LongRow>& rows) {
    out << kLongHeader << '\n';
    for (const auto& r : rows) out << r.metric << ',' << r.kappa << ',' << r.phase << ',' << r.mean << ',' << r.std << '\n';
}

struct PlotdataOptions {
    std::string input;
    std::optional<std::string> out;  // file; stdout when absent
};

inline int cmd_plotdata(const PlotdataOptions& opt, std::ostream& log = std::cerr, std::ostream& stdout_stream = std::cout) {
    std::ifstream in(opt.input, std::ios::binary);
    if (!in) {
        log << "plotdata: cannot read " << opt.input << "\n";
        return kExitUsage;
    }
    std::vector<LongRow> rows;
    try {
        rows = tidy_summary(in);
    } catch (const ConfigError& e) {
        log << opt.input << ": " << e.what() << "\n";
        return kExitFailure;
    }
    try {
        if (opt.out) {
            auto out = open_output(*opt.out);
            write_long_csv(out, rows);
        } else {
            write_long_csv(stdout_stream, rows);
        }
    } catch (const std::exception& e) {
        log << "plotdata: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitOk;
}

}  // namespace prft
