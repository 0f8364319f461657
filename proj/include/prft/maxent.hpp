#pragma once

// Discrete-action maximum-entropy RL: soft values, Boltzmann policies, a
// replay buffer, and soft Q-learning updates against a Polyak target.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "prft/env.hpp"
#include "prft/errors.hpp"
#include "prft/nn.hpp"
#include "prft/rng.hpp"

namespace prft {

/// alpha * log sum exp(q / alpha), with the max subtracted first.
inline double soft_value(std::span<const double> q, double alpha) {
    if (q.empty()) throw ContractViolation("soft_value of an empty vector");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : q) m = std::max(m, v);
    double s = 0.0;
    for (double v : q) s += std::exp((v - m) / alpha);
    return m + alpha * std::log(s);
}

inline double soft_value(const Vector& q, double alpha) { return soft_value(std::span<const double>(q.data(), q.size()), alpha); }

inline std::vector<double> boltzmann_policy(std::span<const double> q, double alpha) {
    if (q.empty()) throw ContractViolation("boltzmann_policy of an empty vector");
    double m = -std::numeric_limits<double>::infinity();
    for (double v : q) m = std::max(m, v);
    std::vector<double> p(q.size());
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += (p[i] = std::exp((q[i] - m) / alpha));
    for (double& v : p) v /= s;
    return p;
}

inline std::vector<double> boltzmann_policy(const Vector& q, double alpha) {
    return boltzmann_policy(std::span<const double>(q.data(), q.size()), alpha);
}

/// Shannon entropy in nats, with 0 log 0 = 0.
inline double policy_entropy(std::span<const double> dist) {
    double h = 0.0;
    for (double p : dist)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

enum class RewardSource : std::uint8_t { truth = 0, predicted = 1 };

struct Transition {
    Observation obs;
    int action = 0;
    double reward = 0.0;
    Observation next_obs;
    bool done = false;
    RewardSource reward_source = RewardSource::truth;
};

/// Column-stacked view of a set of transitions.
struct Batch {
    Matrix observations;
    Matrix next_observations;
    std::vector<int> actions;
    Vector rewards;
    std::vector<bool> done;
    std::vector<RewardSource> sources;

    Eigen::Index size() const { return static_cast<Eigen::Index>(actions.size()); }
};

inline Batch make_batch(std::span<const Transition* const> items) {
    if (items.empty()) throw ContractViolation("empty batch");
    const Eigen::Index dim = items.front()->obs.size();
    const auto n = static_cast<Eigen::Index>(items.size());
    Batch b;
    b.observations.resize(dim, n);
    b.next_observations.resize(dim, n);
    b.rewards.resize(n);
    b.actions.reserve(items.size());
    b.done.reserve(items.size());
    b.sources.reserve(items.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Transition& t = *items[static_cast<std::size_t>(i)];
        b.observations.col(i) = t.obs.pixels.cast<double>();
        b.next_observations.col(i) = t.next_obs.pixels.cast<double>();
        b.actions.push_back(t.action);
        b.rewards[i] = t.reward;
        b.done.push_back(t.done);
        b.sources.push_back(t.reward_source);
    }
    return b;
}

inline Batch make_batch(const std::vector<Transition>& items) {
    std::vector<const Transition*> ptrs;
    ptrs.reserve(items.size());
    for (const auto& t : items) ptrs.push_back(&t);
    return make_batch(ptrs);
}

/// Bounded FIFO store with uniform sampling (with replacement).
class ReplayBuffer {
public:
    ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
        if (capacity == 0) throw ContractViolation("replay buffer capacity must be positive");
        storage_.reserve(std::min<std::size_t>(capacity, 1 << 16));
    }

    void push(Transition t) {
        if (t.action < 0 || t.action >= kActionCount) throw ContractViolation("transition action out of range");
        if (!std::isfinite(t.reward)) throw ContractViolation("transition reward is not finite");
        if (storage_.size() < capacity_) {
            storage_.push_back(std::move(t));
        } else {
            storage_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
    }

    std::size_t size() const { return storage_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return storage_.empty(); }

    /// i-th oldest transition currently stored.
    const Transition& at(std::size_t i) const { return storage_[(head_ + i) % storage_.size()]; }

    std::vector<std::size_t> sample_indices(std::size_t n) {
        if (storage_.empty()) throw ContractViolation("sampling from an empty replay buffer");
        std::vector<std::size_t> idx(n);
        for (auto& i : idx) i = static_cast<std::size_t>(rng_.below(storage_.size()));
        return idx;
    }

    Batch sample(std::size_t n) {
        const auto idx = sample_indices(n);
        std::vector<const Transition*> ptrs;
        ptrs.reserve(n);
        for (std::size_t i : idx) ptrs.push_back(&at(i));
        return make_batch(ptrs);
    }

    template <typename F>
    void for_each(F&& f) const {
        for (std::size_t i = 0; i < storage_.size(); ++i) f(at(i));
    }

private:
    std::size_t capacity_;
    std::vector<Transition> storage_;
    std::size_t head_ = 0;
    Rng rng_;
};

struct SoftQConfig {
    double alpha = 0.05;
    double gamma = 0.97;
    double tau = 0.01;
    int sync_every = 1;
};

/// Online and target Q-networks mapping an observation to one value per action.
struct QFunction {
    NetworkParams network;
    NetworkParams target_network;
    SoftQConfig config;
    std::int64_t updates = 0;

    static QFunction create(const NetworkSpec& spec, std::uint64_t seed, SoftQConfig config = {}) {
        QFunction q;
        q.network = init_params(spec, seed);
        q.target_network = q.network;
        q.config = config;
        q.validate();
        return q;
    }

    void validate() const {
        if (!(config.alpha > 0.0)) throw ContractViolation("entropy coefficient must be positive");
        if (!(config.gamma > 0.0 && config.gamma < 1.0)) throw ContractViolation("discount must lie in (0, 1)");
        if (!(config.tau > 0.0 && config.tau <= 1.0)) throw ContractViolation("tau must lie in (0, 1]");
        if (config.sync_every < 1) throw ContractViolation("sync_every must be >= 1");
        if (!network.same_shape(target_network)) throw ContractViolation("online and target networks differ in shape");
    }

    Vector q_values(const Observation& obs) const { return infer(network, Vector(obs.pixels.cast<double>())); }

    friend bool operator==(const QFunction& a, const QFunction& b) {
        return a.network == b.network && a.target_network == b.target_network;
    }
};

/// y = r + gamma * (1 - done) * soft_value(target(next_obs)).
inline Vector td_target(const Batch& batch, const QFunction& q) {
    if (batch.size() == 0) throw ContractViolation("td_target of an empty batch");
    const Matrix next_q = infer(q.target_network, batch.next_observations);
    Vector y(batch.size());
    for (Eigen::Index i = 0; i < batch.size(); ++i) {
        y[i] = batch.rewards[i];
        if (!batch.done[static_cast<std::size_t>(i)]) {
            const Vector col = next_q.col(i);
            y[i] += q.config.gamma * soft_value(col, q.config.alpha);
        }
    }
    return y;
}

/// One Adam step on the mean squared TD error, then a target sync every
/// `sync_every` updates. Returns the loss on the batch the step was taken on.
inline double q_update(QFunction& q, const Batch& batch, AdamState& opt) {
    const Vector y = td_target(batch, q);
    const Tape tape = forward(q.network, batch.observations);
    const auto n = batch.size();
    Matrix grad_out = Matrix::Zero(tape.output.rows(), n);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int a = batch.actions[static_cast<std::size_t>(i)];
        const double residual = tape.output(a, i) - y[i];
        loss += residual * residual;
        grad_out(a, i) = 2.0 * residual / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite TD loss");
    const Gradient g = backward(q.network, tape, grad_out);
    adam_step(q.network, g.params, opt);
    q.updates += 1;
    if (q.updates % q.config.sync_every == 0) soft_sync(q.target_network, q.network, q.config.tau);
    return loss;
}

enum class ActMode { sample, greedy };

/// Greedy ties break toward the lowest action index.
inline int greedy_action(const Vector& q) {
    int best = 0;
    for (int a = 1; a < q.size(); ++a)
        if (q[a] > q[best]) best = a;
    return best;
}

inline int sample_action(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.uniform();
    double c = 0.0;
    for (std::size_t a = 0; a < probs.size(); ++a) {
        c += probs[a];
        if (u < c) return static_cast<int>(a);
    }
    return static_cast<int>(probs.size()) - 1;
}

inline int act(const QFunction& q, const Observation& obs, ActMode mode, Rng& rng) {
    const Vector values = q.q_values(obs);
    if (mode == ActMode::greedy) return greedy_action(values);
    return sample_action(boltzmann_policy(values, q.config.alpha), rng);
}

}  // namespace prft
