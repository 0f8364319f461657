#pragma once

// Predicted-reward fine-tuning end to end.
//
//   train_source     joint soft Q-learning + reward regression on true
//                    rewards in the source domain (optionally with overlay
//                    augmentation and an inverse-dynamics head)
//   finetune_target  soft Q-learning in the target domain on rewards
//                    predicted by the frozen reward model; the environment's
//                    true reward is never read
//   evaluate         greedy episodes scored with true rewards
//
// The inverse-dynamics baseline adapts only the first hidden layer of the
// Q-network through the inverse-dynamics loss.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prft/env.hpp"
#include "prft/errors.hpp"
#include "prft/maxent.hpp"
#include "prft/nn.hpp"
#include "prft/reward_model.hpp"
#include "prft/rng.hpp"

namespace prft {

enum class Augmentation { none, overlay };
enum class Baseline { none, idm };

struct RunConfig {
    EnvConfig env;
    double target_intensity = 0.4;
    std::uint64_t master_seed = 0;
    int train_steps = 60000;
    int finetune_steps = 20000;
    int eval_episodes = 20;

    std::vector<int> q_hidden{256, 256};
    std::vector<int> reward_hidden{256, 256};
    Activation activation = Activation::relu;
    SoftQConfig q;
    int batch_size = 128;
    std::size_t buffer_capacity = 100000;
    double q_learning_rate = 1e-3;
    double reward_learning_rate = 1e-3;
    double finetune_learning_rate = 1e-3;
    int updates_per_step = 1;
    int random_steps = 1000;  // uniform-random actions at the start of source training
    bool bootstrap_on_timeout = true;

    Augmentation augmentation = Augmentation::none;
    double overlay_max = 0.5;
    int overlay_bank_size = 1024;
    bool reward_sees_augmented = false;

    Baseline baseline = Baseline::none;
    std::vector<int> idm_hidden{256};
    double idm_learning_rate = 1e-3;

    bool finetune_reset_optimizer = true;
    bool finetune_encoder_only = false;
    ActMode train_exploration = ActMode::sample;
    ActMode finetune_exploration = ActMode::sample;
    ActMode eval_mode = ActMode::greedy;
    int snapshot_every = 5000;

    std::optional<Vec2> fixed_goal;

    void validate() const {
        env.validate();
        if (!(target_intensity >= 0.0 && target_intensity <= 1.0)) throw ConfigError("target intensity must lie in [0, 1]");
        if (train_steps < 0 || finetune_steps < 0) throw ConfigError("step counts must be non-negative");
        if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (buffer_capacity < 1) throw ConfigError("buffer_capacity must be >= 1");
        if (updates_per_step < 1) throw ConfigError("updates_per_step must be >= 1");
        if (random_steps < 0) throw ConfigError("random_steps must be non-negative");
        if (!(q.alpha > 0.0)) throw ConfigError("alpha must be > 0");
        if (!(q.gamma > 0.0 && q.gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
        if (!(q.tau > 0.0 && q.tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
        if (q.sync_every < 1) throw ConfigError("sync_every must be >= 1");
        if (!(overlay_max >= 0.0 && overlay_max <= 1.0)) throw ConfigError("overlay_max must lie in [0, 1]");
        if (overlay_bank_size < 1) throw ConfigError("overlay_bank_size must be >= 1");
        if (!(q_learning_rate > 0.0 && reward_learning_rate > 0.0 && idm_learning_rate > 0.0 &&
              finetune_learning_rate > 0.0))
            throw ConfigError("learning rates must be > 0");
        if (snapshot_every < 1) throw ConfigError("snapshot_every must be >= 1");
        for (int h : q_hidden)
            if (h < 1) throw ConfigError("hidden sizes must be positive");
        for (int h : reward_hidden)
            if (h < 1) throw ConfigError("hidden sizes must be positive");
        for (int h : idm_hidden)
            if (h < 1) throw ConfigError("hidden sizes must be positive");
        if (baseline == Baseline::idm && q_hidden.empty()) throw ConfigError("the idm baseline needs a hidden layer to adapt");
    }

    NetworkSpec q_spec() const {
        NetworkSpec s;
        s.layer_sizes.push_back(env.observation_size());
        s.layer_sizes.insert(s.layer_sizes.end(), q_hidden.begin(), q_hidden.end());
        s.layer_sizes.push_back(env.action_count);
        s.activation = activation;
        return s;
    }
};

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// One row of the per-run metrics stream. NaN marks a column that does not
/// apply to the row.
struct MetricRow {
    std::string phase;
    int step = 0;
    int episode = 0;
    double td_loss = kMissing;
    double reward_loss = kMissing;
    double idm_loss = kMissing;
    double return_true = kMissing;
    double return_predicted = kMissing;
    double kappa = 0.0;
    std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Overlay augmentation

/// Fixed set of value-noise images that overlays are drawn from, the way an
/// image dataset would be. Generated once per run from the master seed.
struct OverlayBank {
    std::vector<std::vector<double>> images;

    static OverlayBank generate(std::uint64_t seed, int count, const EnvConfig& config) {
        if (count < 1) throw ConfigError("overlay bank needs at least one image");
        OverlayBank bank;
        bank.images.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i)
            bank.images.push_back(render_detail::value_noise(derive_seed(seed, "overlay-bank", static_cast<std::uint64_t>(i)), config));
        return bank;
    }
};

/// o' = (1 - lambda) o + lambda n, lambda ~ U[0, max_blend], n drawn
/// uniformly from the bank, clamped to [0, 1].
inline Observation augment_overlay(const Observation& obs, Rng& rng, double max_blend, const OverlayBank& bank) {
    if (!(max_blend >= 0.0 && max_blend <= 1.0)) throw DomainError("overlay blend bound must lie in [0, 1]");
    if (bank.images.empty()) throw ContractViolation("empty overlay bank");
    const double lambda = rng.uniform() * max_blend;
    const std::vector<double>& noise = bank.images[static_cast<std::size_t>(rng.below(bank.images.size()))];
    if (noise.size() != static_cast<std::size_t>(obs.size())) throw ContractViolation("observation size does not match overlay bank");
    Observation out;
    out.pixels.resize(obs.size());
    for (Eigen::Index i = 0; i < obs.size(); ++i) {
        const double v = (1.0 - lambda) * static_cast<double>(obs.pixels[i]) + lambda * noise[static_cast<std::size_t>(i)];
        out.pixels[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    return out;
}

inline void augment_columns(Matrix& observations, Rng& rng, double max_blend, const OverlayBank& bank) {
    for (Eigen::Index c = 0; c < observations.cols(); ++c) {
        Observation o;
        o.pixels = observations.col(c).cast<float>();
        observations.col(c) = augment_overlay(o, rng, max_blend, bank).pixels.cast<double>();
    }
}

// ---------------------------------------------------------------------------
// Inverse dynamics head sharing the Q-network's first hidden layer

struct InverseDynamicsModel {
    NetworkParams head;  // concat(features(o), features(o')) -> action logits

    static InverseDynamicsModel create(int feature_size, const std::vector<int>& hidden, Activation activation,
                                       std::uint64_t seed) {
        NetworkSpec spec;
        spec.layer_sizes.push_back(2 * feature_size);
        spec.layer_sizes.insert(spec.layer_sizes.end(), hidden.begin(), hidden.end());
        spec.layer_sizes.push_back(kActionCount);
        spec.activation = activation;
        return {init_params(spec, seed)};
    }
};

struct IdmStepResult {
    double loss = 0.0;
    double accuracy = 0.0;
    NetworkParams head_gradient;
    NetworkParams encoder_gradient;  // shaped like the Q-network, non-zero only in layer 0
};

/// Cross-entropy of the inverse-dynamics head, with gradients for the head
/// and for the Q-network's first layer.
inline IdmStepResult idm_loss_and_gradients(const NetworkParams& q_network, const InverseDynamicsModel& idm,
                                            const Matrix& observations, const Matrix& next_observations,
                                            std::span<const int> actions) {
    const auto& enc = q_network.layers.front();
    const Activation act = q_network.spec.activation;
    const auto n = observations.cols();
    const auto width = enc.weight.rows();

    Matrix z_obs = enc.weight * observations;
    z_obs.colwise() += enc.bias;
    Matrix z_next = enc.weight * next_observations;
    z_next.colwise() += enc.bias;
    Matrix h_obs = z_obs, h_next = z_next;
    apply_activation(act, h_obs);
    apply_activation(act, h_next);

    Matrix features(2 * width, n);
    features.topRows(width) = h_obs;
    features.bottomRows(width) = h_next;
    const Tape tape = forward(idm.head, features);

    Matrix grad_logits(kActionCount, n);
    double loss = 0.0;
    int correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vector logits = tape.output.col(i);
        const std::vector<double> p = boltzmann_policy(logits, 1.0);
        const int a = actions[static_cast<std::size_t>(i)];
        loss -= std::log(std::max(p[static_cast<std::size_t>(a)], 1e-300));
        if (greedy_action(logits) == a) ++correct;
        for (int k = 0; k < kActionCount; ++k)
            grad_logits(k, i) = (p[static_cast<std::size_t>(k)] - (k == a ? 1.0 : 0.0)) / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite inverse-dynamics loss");

    Gradient g = backward(idm.head, tape, grad_logits, true);
    Matrix d_obs = g.input.topRows(width);
    Matrix d_next = g.input.bottomRows(width);
    apply_activation_derivative(act, z_obs, h_obs, d_obs);
    apply_activation_derivative(act, z_next, h_next, d_next);

    IdmStepResult r;
    r.loss = loss;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    r.head_gradient = std::move(g.params);
    r.encoder_gradient = NetworkParams::zeros(q_network.spec);
    r.encoder_gradient.layers[0].weight = d_obs * observations.transpose() + d_next * next_observations.transpose();
    r.encoder_gradient.layers[0].bias = d_obs.rowwise().sum() + d_next.rowwise().sum();
    return r;
}

/// Optimizer that only touches the first layer of a network.
inline AdamState encoder_only_adam(const NetworkSpec& spec, AdamConfig config) {
    AdamState s = AdamState::create(spec, config);
    for (std::size_t l = 1; l < s.trainable.size(); ++l) s.trainable[l] = false;
    return s;
}

// ---------------------------------------------------------------------------
// Source training

struct SourceResult {
    QFunction policy;
    RewardPredictor reward_model;
    std::optional<InverseDynamicsModel> idm;
    AdamState q_optimizer;
    AdamState reward_optimizer;
    std::vector<MetricRow> metrics;
    std::uint64_t reward_reads = 0;
};

struct TrainHooks {
    int checkpoint_every = 0;  // 0 disables periodic checkpoints
    std::function<void(int step, const SourceResult&)> on_checkpoint;
    std::function<void(int step, const SourceResult&)> on_divergence;
};

inline SourceResult initial_source(const RunConfig& config) {
    config.validate();
    const std::uint64_t seed = config.master_seed;
    SourceResult r{
        QFunction::create(config.q_spec(), derive_seed(seed, "q-init"), config.q),
        RewardPredictor::create(config.env.observation_size(), config.reward_hidden, derive_seed(seed, "reward-init"),
                                config.activation),
        std::nullopt,
        {},
        {},
        {},
        0,
    };
    r.q_optimizer = AdamState::create(r.policy.network.spec, {config.q_learning_rate});
    r.reward_optimizer = AdamState::create(r.reward_model.network().spec, {config.reward_learning_rate});
    if (config.baseline == Baseline::idm)
        r.idm = InverseDynamicsModel::create(config.q_hidden.front(), config.idm_hidden, config.activation,
                                             derive_seed(seed, "idm-init"));
    return r;
}

inline SourceResult train_source(const RunConfig& config, const TrainHooks& hooks = {}) {
    SourceResult result = initial_source(config);
    const std::uint64_t seed = config.master_seed;
    Environment env(config.env, DomainSpec::source());
    ReplayBuffer buffer(config.buffer_capacity, derive_seed(seed, "buffer-train"));
    Rng act_rng(derive_seed(seed, "act-train"));
    Rng aug_rng(derive_seed(seed, "augment-train"));
    std::optional<OverlayBank> bank;
    if (config.augmentation == Augmentation::overlay)
        bank = OverlayBank::generate(derive_seed(seed, "overlay-bank"), config.overlay_bank_size, config.env);

    std::optional<AdamState> idm_head_opt, idm_encoder_opt;
    if (result.idm) {
        idm_head_opt = AdamState::create(result.idm->head.spec, {config.idm_learning_rate});
        idm_encoder_opt = encoder_only_adam(result.policy.network.spec, {config.idm_learning_rate});
    }

    int episode = 0;
    double episode_return = 0.0;
    Observation obs = env.reset(derive_seed(seed, "train-episode", 0), config.fixed_goal);
    int step = 0;
    try {
        for (step = 1; step <= config.train_steps; ++step) {
            const int action = step <= config.random_steps
                                   ? static_cast<int>(act_rng.below(static_cast<std::uint64_t>(config.env.action_count)))
                                   : act(result.policy, obs, config.train_exploration, act_rng);
            const bool done = env.step(action);
            const double reward = env.true_reward();
            episode_return += reward;
            buffer.push({obs, action, reward, env.observation(), done && !config.bootstrap_on_timeout, RewardSource::truth});

            MetricRow row;
            row.phase = "train";
            row.step = step;
            row.episode = episode;
            row.kappa = 0.0;
            row.seed = seed;
            for (int u = 0; u < config.updates_per_step; ++u) {
                const Batch batch = buffer.sample(static_cast<std::size_t>(config.batch_size));
                if (config.augmentation == Augmentation::overlay) {
                    Batch augmented = batch;
                    augment_columns(augmented.observations, aug_rng, config.overlay_max, *bank);
                    row.td_loss = q_update(result.policy, augmented, result.q_optimizer);
                    row.reward_loss = reward_train_step(result.reward_model,
                                                        config.reward_sees_augmented ? augmented : batch,
                                                        result.reward_optimizer);
                } else {
                    row.td_loss = q_update(result.policy, batch, result.q_optimizer);
                    row.reward_loss = reward_train_step(result.reward_model, batch, result.reward_optimizer);
                }
                if (result.idm) {
                    const IdmStepResult idm = idm_loss_and_gradients(result.policy.network, *result.idm, batch.observations,
                                                                     batch.next_observations, batch.actions);
                    adam_step(result.idm->head, idm.head_gradient, *idm_head_opt);
                    adam_step(result.policy.network, idm.encoder_gradient, *idm_encoder_opt);
                    row.idm_loss = idm.loss;
                }
            }
            if (done) {
                row.return_true = episode_return;
                episode_return = 0.0;
                ++episode;
                obs = env.reset(derive_seed(seed, "train-episode", static_cast<std::uint64_t>(episode)), config.fixed_goal);
            } else {
                obs = env.observation();
            }
            result.metrics.push_back(std::move(row));
            if (!result.policy.network.all_finite() || !result.reward_model.network().all_finite())
                throw DivergenceError("non-finite parameters after update");
            if (hooks.checkpoint_every > 0 && hooks.on_checkpoint && step % hooks.checkpoint_every == 0 &&
                step < config.train_steps) {
                result.reward_reads = env.reward_reads();
                hooks.on_checkpoint(step, result);
            }
        }
    } catch (const DivergenceError& e) {
        result.reward_reads = env.reward_reads();
        if (hooks.on_divergence) hooks.on_divergence(step, result);
        throw DivergenceError(std::string(e.what()) + " at train step " + std::to_string(step));
    }
    result.reward_reads = env.reward_reads();
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalPhase { zero_shot, finetuned, source };

inline const char* to_string(EvalPhase p) {
    switch (p) {
        case EvalPhase::zero_shot: return "zero_shot";
        case EvalPhase::finetuned: return "finetuned";
        case EvalPhase::source: return "source";
    }
    return "unknown";
}

struct EvalReport {
    double mean_return = 0.0;
    double std_return = 0.0;
    std::vector<double> per_episode_returns;
    double domain_intensity = 0.0;
    EvalPhase phase = EvalPhase::source;
    std::uint64_t reward_reads = 0;
};

inline EvalReport summarize_returns(std::vector<double> returns, double intensity, EvalPhase phase) {
    EvalReport r;
    r.per_episode_returns = std::move(returns);
    r.domain_intensity = intensity;
    r.phase = phase;
    const double n = static_cast<double>(r.per_episode_returns.size());
    for (double x : r.per_episode_returns) r.mean_return += x;
    r.mean_return /= n;
    double var = 0.0;
    for (double x : r.per_episode_returns) var += (x - r.mean_return) * (x - r.mean_return);
    r.std_return = std::sqrt(var / n);
    return r;
}

/// Seed of evaluation episode `i`. Identical across domains, so zero-shot and
/// fine-tuned evaluations start from the same states.
inline std::uint64_t eval_episode_seed(std::uint64_t master_seed, int i) {
    return derive_seed(master_seed, "eval-episode", static_cast<std::uint64_t>(i));
}

/// Undiscounted true-reward return over `eval_episodes` episodes.
inline EvalReport evaluate(const QFunction& policy, const DomainSpec& domain, const RunConfig& config, EvalPhase phase) {
    std::vector<double> returns;
    std::uint64_t reads = 0;
    Rng rng(derive_seed(config.master_seed, "act-eval"));
    for (int i = 0; i < config.eval_episodes; ++i) {
        Environment env(config.env, domain);
        Observation obs = env.reset(eval_episode_seed(config.master_seed, i), config.fixed_goal);
        double total = 0.0;
        while (!env.done()) {
            env.step(act(policy, obs, config.eval_mode, rng));
            total += env.true_reward();
            obs = env.observation();
        }
        reads += env.reward_reads();
        returns.push_back(total);
    }
    EvalReport r = summarize_returns(std::move(returns), domain.intensity, phase);
    r.reward_reads = reads;
    return r;
}

/// Same protocol for a policy acting on the hidden state (used by oracles).
inline EvalReport evaluate_state_policy(const std::function<int(const EnvState&)>& policy, const RunConfig& config) {
    std::vector<double> returns;
    for (int i = 0; i < config.eval_episodes; ++i) {
        EnvState s = initial_state(eval_episode_seed(config.master_seed, i), config.fixed_goal);
        double total = 0.0;
        while (s.step_count < config.env.horizon) {
            s = advance(s, policy(s), config.env);
            total += true_reward(s.agent, s.goal);
        }
        returns.push_back(total);
    }
    return summarize_returns(std::move(returns), 0.0, EvalPhase::source);
}

// ---------------------------------------------------------------------------
// Target fine-tuning

struct FinetuneHooks {
    /// Called after every environment step with the target environment.
    std::function<void(Environment&)> on_step;
    /// Called every config.snapshot_every steps with the current policy.
    std::function<void(int step, const QFunction&)> on_snapshot;
};

struct FinetuneResult {
    QFunction policy;
    std::vector<MetricRow> metrics;
    std::uint64_t reward_reads = 0;
    std::vector<Transition> stored_sample;  // first few stored transitions, for audits
};

/// Fine-tunes `policy` in `target` using rewards from `model`, which is
/// frozen on entry. Throws ContractViolation if the target environment's
/// true reward was read.
inline FinetuneResult finetune_target(QFunction policy, RewardPredictor& model, const DomainSpec& target,
                                      const RunConfig& config, const FinetuneHooks& hooks = {},
                                      const AdamState* source_optimizer = nullptr) {
    config.validate();
    model.freeze();
    const std::uint64_t seed = config.master_seed;
    Environment env(config.env, target);
    ReplayBuffer buffer(config.buffer_capacity, derive_seed(seed, "buffer-finetune"));
    Rng act_rng(derive_seed(seed, "act-finetune"));

    AdamState opt = AdamState::create(policy.network.spec, {config.finetune_learning_rate});
    if (!config.finetune_reset_optimizer) {
        if (!source_optimizer) throw ConfigError("keeping optimizer state requires the source optimizer");
        opt = *source_optimizer;
    }
    if (config.finetune_encoder_only)
        for (std::size_t l = 1; l < opt.trainable.size(); ++l) opt.trainable[l] = false;

    FinetuneResult result{std::move(policy), {}, 0, {}};
    int episode = 0;
    double predicted_return = 0.0;
    Observation obs = env.reset(derive_seed(seed, "finetune-episode", 0), config.fixed_goal);
    for (int step = 1; step <= config.finetune_steps; ++step) {
        const int action = act(result.policy, obs, config.finetune_exploration, act_rng);
        const bool done = env.step(action);
        Transition t = relabel(model, Transition{obs, action, 0.0, env.observation(),
                                                 done && !config.bootstrap_on_timeout, RewardSource::predicted});
        predicted_return += t.reward;
        if (result.stored_sample.size() < 64) result.stored_sample.push_back(t);
        buffer.push(std::move(t));
        if (hooks.on_step) hooks.on_step(env);

        MetricRow row;
        row.phase = "finetune";
        row.step = step;
        row.episode = episode;
        row.kappa = target.intensity;
        row.seed = seed;
        for (int u = 0; u < config.updates_per_step; ++u)
            row.td_loss = q_update(result.policy, buffer.sample(static_cast<std::size_t>(config.batch_size)), opt);
        if (done) {
            row.return_predicted = predicted_return;
            predicted_return = 0.0;
            ++episode;
            obs = env.reset(derive_seed(seed, "finetune-episode", static_cast<std::uint64_t>(episode)), config.fixed_goal);
        } else {
            obs = env.observation();
        }
        result.metrics.push_back(std::move(row));
        if (!result.policy.network.all_finite()) throw DivergenceError("non-finite parameters during fine-tuning");
        if (hooks.on_snapshot && step % config.snapshot_every == 0) hooks.on_snapshot(step, result.policy);
    }
    result.reward_reads = env.reward_reads();
    if (result.reward_reads != 0)
        throw ContractViolation("true reward read " + std::to_string(result.reward_reads) +
                                " times during reward-free fine-tuning");
    return result;
}

/// Inverse-dynamics baseline: adapts only the Q-network's first layer by the
/// inverse-dynamics loss on target transitions. No reward of any kind is used.
inline FinetuneResult finetune_idm_baseline(QFunction policy, const std::optional<InverseDynamicsModel>& idm,
                                            const DomainSpec& target, const RunConfig& config,
                                            const FinetuneHooks& hooks = {}) {
    config.validate();
    if (!idm) throw ConfigError("idm baseline requested but the source run trained no inverse-dynamics head");
    const std::uint64_t seed = config.master_seed;
    Environment env(config.env, target);
    ReplayBuffer buffer(config.buffer_capacity, derive_seed(seed, "buffer-idm"));
    Rng act_rng(derive_seed(seed, "act-idm"));
    AdamState opt = encoder_only_adam(policy.network.spec, {config.idm_learning_rate});

    FinetuneResult result{std::move(policy), {}, 0, {}};
    int episode = 0;
    Observation obs = env.reset(derive_seed(seed, "finetune-episode", 0), config.fixed_goal);
    for (int step = 1; step <= config.finetune_steps; ++step) {
        const int action = act(result.policy, obs, config.finetune_exploration, act_rng);
        const bool done = env.step(action);
        buffer.push({obs, action, 0.0, env.observation(), false, RewardSource::predicted});
        if (hooks.on_step) hooks.on_step(env);

        const Batch batch = buffer.sample(static_cast<std::size_t>(config.batch_size));
        const IdmStepResult r =
            idm_loss_and_gradients(result.policy.network, *idm, batch.observations, batch.next_observations, batch.actions);
        adam_step(result.policy.network, r.encoder_gradient, opt);
        // The target network follows the adapted encoder so later TD use stays consistent.
        result.policy.target_network.layers[0] = result.policy.network.layers[0];

        MetricRow row;
        row.phase = "idm_finetune";
        row.step = step;
        row.episode = episode;
        row.idm_loss = r.loss;
        row.kappa = target.intensity;
        row.seed = seed;
        result.metrics.push_back(std::move(row));
        if (done) {
            ++episode;
            obs = env.reset(derive_seed(seed, "finetune-episode", static_cast<std::uint64_t>(episode)), config.fixed_goal);
        } else {
            obs = env.observation();
        }
        if (hooks.on_snapshot && step % config.snapshot_every == 0) hooks.on_snapshot(step, result.policy);
    }
    result.reward_reads = env.reward_reads();
    if (result.reward_reads != 0) throw ContractViolation("true reward read during inverse-dynamics fine-tuning");
    return result;
}

/// Held-out inverse-dynamics accuracy on fresh source-domain transitions.
inline double idm_accuracy(const QFunction& policy, const InverseDynamicsModel& idm, const RunConfig& config,
                           int episodes) {
    Environment env(config.env, DomainSpec::source());
    Rng rng(derive_seed(config.master_seed, "idm-heldout-act"));
    std::vector<Transition> ts;
    for (int e = 0; e < episodes; ++e) {
        Observation obs = env.reset(derive_seed(config.master_seed, "idm-heldout", static_cast<std::uint64_t>(e)));
        while (!env.done()) {
            const int a = static_cast<int>(rng.below(kActionCount));
            env.step(a);
            ts.push_back({obs, a, 0.0, env.observation(), false, RewardSource::predicted});
            obs = env.observation();
        }
    }
    const Batch b = make_batch(ts);
    return idm_loss_and_gradients(policy.network, idm, b.observations, b.next_observations, b.actions).accuracy;
}

}  // namespace prft
