#pragma once

// Tabular oracles: hard and soft value iteration (infinite and finite
// horizon), positive affine reward transforms, the robust reward-set margin
// of MaxEnt RL, and a grid discretization of the reacher.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "prft/env.hpp"
#include "prft/errors.hpp"
#include "prft/rng.hpp"

namespace prft {

struct TabularMDP {
    int n_states = 0;
    int n_actions = 0;
    std::vector<double> transitions;  // [(s * n_actions + a) * n_states + s']
    std::vector<double> rewards;      // [s * n_actions + a]
    double gamma = 0.9;
    std::vector<bool> terminal;       // terminal states have value zero

    static TabularMDP empty(int n_states, int n_actions, double gamma) {
        TabularMDP m;
        m.n_states = n_states;
        m.n_actions = n_actions;
        m.gamma = gamma;
        m.transitions.assign(static_cast<std::size_t>(n_states) * n_actions * n_states, 0.0);
        m.rewards.assign(static_cast<std::size_t>(n_states) * n_actions, 0.0);
        m.terminal.assign(static_cast<std::size_t>(n_states), false);
        return m;
    }

    double& p(int s, int a, int next) {
        return transitions[(static_cast<std::size_t>(s) * n_actions + a) * n_states + next];
    }
    double p(int s, int a, int next) const {
        return transitions[(static_cast<std::size_t>(s) * n_actions + a) * n_states + next];
    }
    std::span<const double> row(int s, int a) const {
        return {transitions.data() + (static_cast<std::size_t>(s) * n_actions + a) * n_states,
                static_cast<std::size_t>(n_states)};
    }
    double& r(int s, int a) { return rewards[static_cast<std::size_t>(s) * n_actions + a]; }
    double r(int s, int a) const { return rewards[static_cast<std::size_t>(s) * n_actions + a]; }

    void validate() const {
        if (n_states < 1 || n_actions < 1) throw ContractViolation("MDP needs at least one state and action");
        if (transitions.size() != static_cast<std::size_t>(n_states) * n_actions * n_states ||
            rewards.size() != static_cast<std::size_t>(n_states) * n_actions ||
            terminal.size() != static_cast<std::size_t>(n_states))
            throw ContractViolation("MDP table sizes are inconsistent");
        for (int s = 0; s < n_states; ++s) {
            for (int a = 0; a < n_actions; ++a) {
                double sum = 0.0;
                for (double v : row(s, a)) {
                    if (v < 0.0) throw ContractViolation("negative transition probability");
                    sum += v;
                }
                if (std::abs(sum - 1.0) > 1e-12) throw ContractViolation("transition row does not sum to 1");
                if (!std::isfinite(r(s, a))) throw ContractViolation("non-finite reward");
            }
        }
    }

    /// Random MDP with Dirichlet(1)-like rows and rewards uniform on [0, 1].
    /// Each row puts mass on at most `support` next states.
    static TabularMDP random(int n_states, int n_actions, double gamma, Rng& rng, int support = 3) {
        TabularMDP m = empty(n_states, n_actions, gamma);
        for (int s = 0; s < n_states; ++s) {
            for (int a = 0; a < n_actions; ++a) {
                m.r(s, a) = rng.uniform();
                double total = 0.0;
                for (int k = 0; k < std::min(support, n_states); ++k) {
                    const int next = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_states)));
                    const double w = -std::log(1.0 - rng.uniform());
                    m.p(s, a, next) += w;
                    total += w;
                }
                for (int next = 0; next < n_states; ++next) m.p(s, a, next) /= total;
                // Renormalize once more so the row sums to 1 to within rounding.
                double sum = 0.0;
                for (int next = 0; next < n_states; ++next) sum += m.p(s, a, next);
                for (int next = 0; next < n_states; ++next) m.p(s, a, next) /= sum;
            }
        }
        return m;
    }
};

struct QTable {
    int n_states = 0;
    int n_actions = 0;
    std::vector<double> values;

    static QTable zeros(int n_states, int n_actions) {
        return {n_states, n_actions, std::vector<double>(static_cast<std::size_t>(n_states) * n_actions, 0.0)};
    }
    double& at(int s, int a) { return values[static_cast<std::size_t>(s) * n_actions + a]; }
    double at(int s, int a) const { return values[static_cast<std::size_t>(s) * n_actions + a]; }
    std::span<const double> row(int s) const {
        return {values.data() + static_cast<std::size_t>(s) * n_actions, static_cast<std::size_t>(n_actions)};
    }

    /// Argmax per state, ties to the lowest index.
    int greedy(int s) const {
        int best = 0;
        for (int a = 1; a < n_actions; ++a)
            if (at(s, a) > at(s, best)) best = a;
        return best;
    }
    std::vector<int> greedy_policy() const {
        std::vector<int> pi(static_cast<std::size_t>(n_states));
        for (int s = 0; s < n_states; ++s) pi[static_cast<std::size_t>(s)] = greedy(s);
        return pi;
    }
    double max_abs_diff(const QTable& other) const {
        double d = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) d = std::max(d, std::abs(values[i] - other.values[i]));
        return d;
    }
};

namespace analysis_detail {

inline double log_sum_exp_scaled(std::span<const double> q, double alpha) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : q) m = std::max(m, v);
    double s = 0.0;
    for (double v : q) s += std::exp((v - m) / alpha);
    return m + alpha * std::log(s);
}

inline double max_of(std::span<const double> q) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : q) m = std::max(m, v);
    return m;
}

/// One Bellman backup. alpha <= 0 selects the hard max.
inline QTable backup(const TabularMDP& mdp, const QTable& q, double alpha, double discount) {
    std::vector<double> v(static_cast<std::size_t>(mdp.n_states), 0.0);
    for (int s = 0; s < mdp.n_states; ++s) {
        if (mdp.terminal[static_cast<std::size_t>(s)]) continue;
        v[static_cast<std::size_t>(s)] = alpha > 0.0 ? log_sum_exp_scaled(q.row(s), alpha) : max_of(q.row(s));
    }
    QTable out = QTable::zeros(mdp.n_states, mdp.n_actions);
    for (int s = 0; s < mdp.n_states; ++s) {
        for (int a = 0; a < mdp.n_actions; ++a) {
            double expected = 0.0;
            const auto row = mdp.row(s, a);
            for (int next = 0; next < mdp.n_states; ++next) expected += row[static_cast<std::size_t>(next)] * v[static_cast<std::size_t>(next)];
            out.at(s, a) = mdp.r(s, a) + discount * expected;
        }
    }
    return out;
}

inline QTable iterate_to_fixed_point(const TabularMDP& mdp, double alpha, double tol, int max_iterations) {
    mdp.validate();
    if (!(tol > 0.0)) throw ContractViolation("tolerance must be positive");
    QTable q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for (int it = 0; it < max_iterations; ++it) {
        QTable next = backup(mdp, q, alpha, mdp.gamma);
        const double change = next.max_abs_diff(q);
        q = std::move(next);
        if (change < tol) return q;
    }
    throw DivergenceError("value iteration did not converge within the iteration budget");
}

}  // namespace analysis_detail

/// Fixed point of Q(s,a) = R(s,a) + gamma * E[alpha * logsumexp(Q(s',.) / alpha)].
inline QTable soft_value_iteration(const TabularMDP& mdp, double alpha, double tol, int max_iterations = 1'000'000) {
    if (!(alpha > 0.0)) throw ContractViolation("soft value iteration needs alpha > 0");
    return analysis_detail::iterate_to_fixed_point(mdp, alpha, tol, max_iterations);
}

/// Fixed point of the Bellman optimality operator (max backup).
inline QTable value_iteration(const TabularMDP& mdp, double tol, int max_iterations = 1'000'000) {
    return analysis_detail::iterate_to_fixed_point(mdp, 0.0, tol, max_iterations);
}

/// sup over (s, a) of |Q - backup(Q)|.
inline double bellman_residual(const TabularMDP& mdp, const QTable& q, double alpha = 0.0) {
    return analysis_detail::backup(mdp, q, alpha, mdp.gamma).max_abs_diff(q);
}

/// Backward induction over `horizon` steps. Element t holds Q_t, the value
/// with horizon - t steps to go. alpha <= 0 uses the hard max.
inline std::vector<QTable> finite_horizon_value_iteration(const TabularMDP& mdp, int horizon, double discount,
                                                          double alpha = 0.0) {
    mdp.validate();
    if (horizon < 1) throw ContractViolation("horizon must be >= 1");
    std::vector<QTable> out(static_cast<std::size_t>(horizon));
    QTable next = QTable::zeros(mdp.n_states, mdp.n_actions);
    for (int t = horizon - 1; t >= 0; --t) {
        next = t == horizon - 1 ? analysis_detail::backup(mdp, QTable::zeros(mdp.n_states, mdp.n_actions), alpha, 0.0)
                                : analysis_detail::backup(mdp, next, alpha, discount);
        out[static_cast<std::size_t>(t)] = next;
    }
    return out;
}

/// R' = k R + b, everything else copied. Requires k > 0.
inline TabularMDP affine_transform(const TabularMDP& mdp, double k, double b) {
    if (!(k > 0.0)) throw DomainError("affine reward transform requires k > 0");
    TabularMDP out = mdp;
    for (double& r : out.rewards) r = k * r + b;
    return out;
}

struct RobustSetReport {
    double margin = 0.0;
    double standard_error = 0.0;
    double epsilon = 0.0;
    bool member = false;
    std::vector<double> per_step_terms;  // mean term at each time step
};

struct RobustRolloutSpec {
    int n_rollouts = 1000;
    int horizon = 10;
    double epsilon = 0.0;
    std::vector<double> initial_distribution;  // empty: uniform over states
};

/// Monte Carlo estimate of E_pi[ sum_t log sum_a' exp(R(s_t, a') - r_tilde(s_t, a')) ]
/// over on-policy rollouts of the tabular MDP. The entropy coefficient is
/// fixed at 1. `policy[s]` is a distribution over actions with full support.
inline RobustSetReport robust_set_margin(const TabularMDP& mdp, std::span<const double> r_tilde,
                                         const std::vector<std::vector<double>>& policy,
                                         const RobustRolloutSpec& spec, Rng& rng) {
    mdp.validate();
    if (r_tilde.size() != mdp.rewards.size()) throw ContractViolation("r_tilde table size mismatch");
    if (policy.size() != static_cast<std::size_t>(mdp.n_states)) throw ContractViolation("policy needs one row per state");
    for (const auto& row : policy) {
        if (row.size() != static_cast<std::size_t>(mdp.n_actions)) throw ContractViolation("policy row size mismatch");
        for (double p : row)
            if (!(p > 0.0)) throw ContractViolation("policy must put positive mass on every action");
    }
    if (spec.n_rollouts < 1 || spec.horizon < 1) throw ContractViolation("need at least one rollout of length >= 1");

    std::vector<double> term(static_cast<std::size_t>(mdp.n_states));
    for (int s = 0; s < mdp.n_states; ++s) {
        std::vector<double> diff(static_cast<std::size_t>(mdp.n_actions));
        for (int a = 0; a < mdp.n_actions; ++a)
            diff[static_cast<std::size_t>(a)] = mdp.r(s, a) - r_tilde[static_cast<std::size_t>(s) * mdp.n_actions + a];
        term[static_cast<std::size_t>(s)] = analysis_detail::log_sum_exp_scaled(diff, 1.0);
    }

    auto draw = [&rng](std::span<const double> probs) {
        const double u = rng.uniform();
        double c = 0.0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            c += probs[i];
            if (u < c) return static_cast<int>(i);
        }
        return static_cast<int>(probs.size()) - 1;
    };

    RobustSetReport report;
    report.epsilon = spec.epsilon;
    report.per_step_terms.assign(static_cast<std::size_t>(spec.horizon), 0.0);
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < spec.n_rollouts; ++i) {
        int s = spec.initial_distribution.empty()
                    ? static_cast<int>(rng.below(static_cast<std::uint64_t>(mdp.n_states)))
                    : draw(spec.initial_distribution);
        double total = 0.0;
        for (int t = 0; t < spec.horizon; ++t) {
            if (mdp.terminal[static_cast<std::size_t>(s)]) break;
            const double x = term[static_cast<std::size_t>(s)];
            total += x;
            report.per_step_terms[static_cast<std::size_t>(t)] += x;
            const int a = draw(policy[static_cast<std::size_t>(s)]);
            s = draw(mdp.row(s, a));
        }
        // Welford; the naive sum of squares leaves roundoff noise when every
        // rollout has the same total.
        const double delta = total - mean;
        mean += delta / (i + 1);
        m2 += delta * (total - mean);
    }
    const double n = spec.n_rollouts;
    report.margin = mean;
    for (double& x : report.per_step_terms) x /= n;
    const double var = n > 1 ? m2 / (n - 1) : 0.0;
    report.standard_error = std::sqrt(var / n);
    report.member = report.margin <= report.epsilon;
    return report;
}

/// The reacher with a fixed goal, agent positions snapped to a grid x grid
/// lattice over [0, 1]^2. State index = row * grid + column, where the
/// column indexes x and the row indexes y.
struct DiscretizedEnv {
    TabularMDP mdp;
    int grid = 21;
    Vec2 goal;

    Vec2 center(int s) const {
        const double h = 1.0 / (grid - 1);
        return {(s % grid) * h, (s / grid) * h};
    }
    int state_of(Vec2 p) const {
        const auto snap = [this](double v) {
            return std::clamp(static_cast<int>(std::lround(v * (grid - 1))), 0, grid - 1);
        };
        return snap(p.y) * grid + snap(p.x);
    }
};

inline DiscretizedEnv discretize_env(const EnvConfig& config, Vec2 goal, int grid = 21, double gamma = 0.97) {
    config.validate();
    if (grid < 2) throw ContractViolation("grid must have at least two cells per side");
    DiscretizedEnv d;
    d.grid = grid;
    d.goal = goal;
    d.mdp = TabularMDP::empty(grid * grid, config.action_count, gamma);
    for (int s = 0; s < grid * grid; ++s) {
        EnvState st;
        st.agent = d.center(s);
        st.goal = goal;
        for (int a = 0; a < config.action_count; ++a) {
            const EnvState next = advance(st, a, config);
            const int ns = d.state_of(next.agent);
            d.mdp.p(s, a, ns) = 1.0;
            d.mdp.r(s, a) = true_reward(d.center(ns), goal);
        }
    }
    return d;
}

/// Writes "state,action,q" rows.
inline void write_q_csv(const std::filesystem::path& path, const QTable& q) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "state,action,q\n";
    char buf[64];
    for (int s = 0; s < q.n_states; ++s)
        for (int a = 0; a < q.n_actions; ++a) {
            std::snprintf(buf, sizeof(buf), "%.9g", q.at(s, a));
            out << s << ',' << a << ',' << buf << '\n';
        }
}

}  // namespace prft
