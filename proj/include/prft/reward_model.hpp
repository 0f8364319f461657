#pragma once

// Reward predictor phi(o, a): an MLP over the flattened observation with a
// one-hot action appended. Trained by MSE on true rewards, then frozen and
// used to relabel reward-free transitions.

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "prft/env.hpp"
#include "prft/errors.hpp"
#include "prft/maxent.hpp"
#include "prft/nn.hpp"

namespace prft {

class RewardPredictor {
public:
    RewardPredictor() = default;
    explicit RewardPredictor(NetworkParams network, bool frozen = false)
        : network_(std::move(network)), frozen_(frozen) {
        if (network_.spec.output_size() != 1) throw ContractViolation("reward predictor must have one output");
    }

    /// Hidden sizes between the (observation + action) input and the scalar output.
    static RewardPredictor create(int observation_size, std::vector<int> hidden, std::uint64_t seed,
                                  Activation activation = Activation::relu) {
        NetworkSpec spec;
        spec.layer_sizes.push_back(observation_size + kActionCount);
        for (int h : hidden) spec.layer_sizes.push_back(h);
        spec.layer_sizes.push_back(1);
        spec.activation = activation;
        return RewardPredictor(init_params(spec, seed));
    }

    const NetworkParams& network() const { return network_; }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    /// Write access for training. Throws once frozen.
    NetworkParams& mutable_network() {
        if (frozen_) throw FreezeViolation("reward predictor is frozen");
        return network_;
    }

    int observation_size() const { return network_.spec.input_size() - kActionCount; }

private:
    NetworkParams network_;
    bool frozen_ = false;
};

/// concat(observation, one_hot(action)) as a column vector.
inline Vector reward_input(const Observation& obs, int action) {
    if (action < 0 || action >= kActionCount) throw ContractViolation("action index out of range");
    Vector x = Vector::Zero(obs.size() + kActionCount);
    x.head(obs.size()) = obs.pixels.cast<double>();
    x[obs.size() + action] = 1.0;
    return x;
}

inline Matrix reward_inputs(const Matrix& observations, std::span<const int> actions) {
    Matrix x = Matrix::Zero(observations.rows() + kActionCount, observations.cols());
    x.topRows(observations.rows()) = observations;
    for (Eigen::Index i = 0; i < observations.cols(); ++i) {
        const int a = actions[static_cast<std::size_t>(i)];
        if (a < 0 || a >= kActionCount) throw ContractViolation("action index out of range");
        x(observations.rows() + a, i) = 1.0;
    }
    return x;
}

inline double predict(const RewardPredictor& model, const Observation& obs, int action) {
    return infer(model.network(), reward_input(obs, action))[0];
}

inline Vector predict(const RewardPredictor& model, const Matrix& observations, std::span<const int> actions) {
    return infer(model.network(), reward_inputs(observations, actions)).row(0).transpose();
}

/// One Adam step on mean (phi(o, a) - r)^2 over the batch. Returns the
/// loss measured before the step.
inline double reward_train_step(RewardPredictor& model, const Matrix& observations, std::span<const int> actions,
                                const Vector& rewards, AdamState& opt) {
    if (model.frozen()) throw FreezeViolation("reward_train_step on a frozen reward predictor");
    const auto n = observations.cols();
    if (n == 0) throw ContractViolation("empty reward batch");
    if (rewards.size() != n || static_cast<Eigen::Index>(actions.size()) != n)
        throw ContractViolation("reward batch fields differ in length");
    const Tape tape = forward(model.network(), reward_inputs(observations, actions));
    const Matrix residual = tape.output - rewards.transpose();
    const double loss = residual.squaredNorm() / static_cast<double>(n);
    if (!std::isfinite(loss)) throw DivergenceError("non-finite reward loss");
    const Gradient g = backward(model.network(), tape, (2.0 / static_cast<double>(n)) * residual);
    adam_step(model.mutable_network(), g.params, opt);
    return loss;
}

inline double reward_train_step(RewardPredictor& model, const Batch& batch, AdamState& opt) {
    for (RewardSource s : batch.sources)
        if (s != RewardSource::truth) throw ContractViolation("reward model trains on true rewards only");
    return reward_train_step(model, batch.observations, batch.actions, batch.rewards, opt);
}

/// Replaces each reward with the frozen model's prediction.
inline std::vector<Transition> relabel(const RewardPredictor& model, std::vector<Transition> transitions) {
    if (!model.frozen()) throw FreezeViolation("relabel requires a frozen reward predictor");
    for (auto& t : transitions) {
        t.reward = predict(model, t.obs, t.action);
        t.reward_source = RewardSource::predicted;
    }
    return transitions;
}

inline Transition relabel(const RewardPredictor& model, Transition t) {
    if (!model.frozen()) throw FreezeViolation("relabel requires a frozen reward predictor");
    t.reward = predict(model, t.obs, t.action);
    t.reward_source = RewardSource::predicted;
    return t;
}

struct FitDiagnostic {
    double slope = 0.0;
    double intercept = 0.0;
    double r_squared = 0.0;
    double mse = 0.0;
    std::size_t sample_count = 0;
};

struct RewardPair {
    double predicted;
    double truth;
};

/// OLS of predicted on true reward: predicted ~ slope * truth + intercept.
/// mse is the raw prediction error mean (predicted - truth)^2.
inline FitDiagnostic linear_fit_diagnostic(std::span<const RewardPair> pairs) {
    const std::size_t n = pairs.size();
    if (n < 2) throw DegenerateFit("linear fit needs at least two pairs");
    double mean_x = 0.0, mean_y = 0.0;
    for (const auto& p : pairs) {
        mean_x += p.truth;
        mean_y += p.predicted;
    }
    mean_x /= static_cast<double>(n);
    mean_y /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0, syy = 0.0, sq_err = 0.0;
    for (const auto& p : pairs) {
        const double dx = p.truth - mean_x;
        const double dy = p.predicted - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sq_err += (p.predicted - p.truth) * (p.predicted - p.truth);
    }
    if (!(sxx > 1e-300)) throw DegenerateFit("true rewards are constant");
    FitDiagnostic d;
    d.slope = sxy / sxx;
    d.intercept = mean_y - d.slope * mean_x;
    double ss_res = 0.0;
    for (const auto& p : pairs) {
        const double e = p.predicted - (d.slope * p.truth + d.intercept);
        ss_res += e * e;
    }
    d.r_squared = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
    d.mse = sq_err / static_cast<double>(n);
    d.sample_count = n;
    return d;
}

}  // namespace prft
