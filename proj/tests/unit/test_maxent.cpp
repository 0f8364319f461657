#include <gtest/gtest.h>

#include <array>
#include <numbers>

#include "prft/analysis.hpp"
#include "prft/maxent.hpp"
#include "support/oracles.hpp"

using namespace prft;

namespace {

Observation obs_of(std::initializer_list<float> v) {
    Observation o;
    o.pixels = Eigen::VectorXf(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (float x : v) o.pixels[i++] = x;
    return o;
}

// A Q-function whose output does not depend on the input: zero weights and
// the given bias in both online and target networks.
QFunction constant_q(int input, std::vector<double> bias, SoftQConfig cfg = {}) {
    QFunction q = QFunction::create({{input, static_cast<int>(bias.size())}, Activation::relu}, 0, cfg);
    q.network = NetworkParams::zeros(q.network.spec);
    for (std::size_t i = 0; i < bias.size(); ++i) q.network.layers[0].bias[static_cast<Eigen::Index>(i)] = bias[i];
    q.target_network = q.network;
    return q;
}

Transition transition(float s, int a, double r, float next, bool done) {
    return {obs_of({s}), a, r, obs_of({next}), done, RewardSource::truth};
}

}  // namespace

TEST(SoftValue, Examples) {
    const std::array<double, 5> zeros{};
    EXPECT_NEAR(soft_value(zeros, 0.05), 0.05 * std::log(5.0), 1e-15);
    const std::array<double, 2> q{1.0, 1.0};
    EXPECT_NEAR(soft_value(q, 1.0), 1.0 + std::numbers::ln2, 1e-15);
    const std::array<double, 3> big{1000.0, 0.0, -1000.0};
    EXPECT_NEAR(soft_value(big, 0.05), 1000.0, 1e-12);
    EXPECT_THROW(soft_value(std::span<const double>{}, 1.0), ContractViolation);
}

TEST(SoftValue, BoundedByMaxAndMaxPlusEntropy) {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> q(1 + rng.below(6));
        for (double& v : q) v = rng.uniform(-10, 10);
        const double alpha = rng.uniform(0.01, 3.0);
        const double mx = *std::max_element(q.begin(), q.end());
        const double v = soft_value(q, alpha);
        EXPECT_GE(v, mx - 1e-12);
        EXPECT_LE(v, mx + alpha * std::log(static_cast<double>(q.size())) + 1e-12);
    }
}

TEST(SoftValue, EqualsExpectedQPlusEntropyUnderBoltzmann) {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> q(5);
        for (double& v : q) v = rng.uniform(-2, 2);
        const double alpha = rng.uniform(0.05, 2.0);
        const auto pi = boltzmann_policy(q, alpha);
        double expected = alpha * policy_entropy(pi);
        for (std::size_t a = 0; a < q.size(); ++a) expected += pi[a] * q[a];
        EXPECT_NEAR(soft_value(q, alpha), expected, 1e-10);
    }
}

TEST(Boltzmann, ExamplesAndNormalization) {
    const std::array<double, 5> flat{};
    for (double p : boltzmann_policy(flat, 0.05)) EXPECT_NEAR(p, 0.2, 1e-15);
    const std::array<double, 2> q{std::log(3.0), 0.0};
    const auto p = boltzmann_policy(q, 1.0);
    EXPECT_NEAR(p[0], 0.75, 1e-15);
    EXPECT_NEAR(p[1], 0.25, 1e-15);
    const std::array<double, 3> extreme{800.0, -800.0, 0.0};
    const auto e = boltzmann_policy(extreme, 0.01);
    EXPECT_DOUBLE_EQ(e[0], 1.0);
    EXPECT_TRUE(std::isfinite(e[1]));
}

TEST(Entropy, Examples) {
    const std::array<double, 4> uniform{0.25, 0.25, 0.25, 0.25};
    EXPECT_NEAR(policy_entropy(uniform), std::log(4.0), 1e-15);
    const std::array<double, 3> point{0.0, 1.0, 0.0};
    EXPECT_EQ(policy_entropy(point), 0.0);
}

TEST(TdTarget, Examples) {
    SoftQConfig cfg{0.05, 0.97, 0.01, 1};
    const QFunction q = constant_q(1, {0, 0, 0, 0, 0}, cfg);
    const Batch b = make_batch(std::vector<Transition>{transition(0, 0, 1.0, 0, true), transition(0, 1, 1.0, 0, false),
                                                       transition(0, 2, 0.25, 0, false)});
    const Vector y = td_target(b, q);
    EXPECT_DOUBLE_EQ(y[0], 1.0);
    EXPECT_NEAR(y[1], 1.0 + 0.97 * 0.05 * std::log(5.0), 1e-14);
    EXPECT_NEAR(y[2], 0.25 + 0.97 * 0.05 * std::log(5.0), 1e-14);
}

TEST(TdTarget, UsesTargetNetworkNotOnline) {
    QFunction q = constant_q(1, {1, 1, 1, 1, 1});
    q.network.layers[0].bias.setConstant(100.0);
    const Batch b = make_batch(std::vector<Transition>{transition(0, 0, 0.0, 0, false)});
    EXPECT_NEAR(td_target(b, q)[0], 0.97 * (1.0 + 0.05 * std::log(5.0)), 1e-12);
}

TEST(QUpdate, ZeroLossAtFixedPointAndNonNegative) {
    SoftQConfig cfg{0.05, 0.97, 0.01, 1};
    // Self-consistent constant Q: c = r + gamma * (c + alpha ln 5).
    const double r = 0.3;
    const double c = (r + 0.97 * 0.05 * std::log(5.0)) / (1.0 - 0.97);
    QFunction q = constant_q(1, {c, c, c, c, c}, cfg);
    AdamState opt = AdamState::create(q.network.spec);
    const Batch b = make_batch(std::vector<Transition>{transition(0.5f, 2, r, 0.1f, false), transition(0.9f, 4, r, 0.3f, false)});
    EXPECT_NEAR(q_update(q, b, opt), 0.0, 1e-20);

    QFunction random = QFunction::create({{1, 8, 5}, Activation::relu}, 4, cfg);
    AdamState opt2 = AdamState::create(random.network.spec);
    for (int i = 0; i < 20; ++i) EXPECT_GE(q_update(random, b, opt2), 0.0);
    EXPECT_EQ(random.updates, 20);
}

TEST(QUpdate, TargetSyncHonorsPeriod) {
    SoftQConfig cfg{0.05, 0.97, 1.0, 3};
    QFunction q = QFunction::create({{1, 5}, Activation::relu}, 1, cfg);
    AdamState opt = AdamState::create(q.network.spec);
    const Batch b = make_batch(std::vector<Transition>{transition(1, 0, 1.0, 1, true)});
    const NetworkParams initial = q.target_network;
    q_update(q, b, opt);
    q_update(q, b, opt);
    EXPECT_TRUE(q.target_network == initial);
    q_update(q, b, opt);
    EXPECT_TRUE(q.target_network == q.network);
}

TEST(QUpdate, ConvergesToTabularSoftFixedPoint) {
    // Three-state chain: actions move left/right, state 2 absorbs with reward 1.
    TabularMDP m = TabularMDP::empty(3, 2, 0.9);
    for (int s = 0; s < 3; ++s) {
        m.p(s, 0, std::max(0, s - 1)) = 1.0;
        m.p(s, 1, std::min(2, s + 1)) = 1.0;
        m.r(s, 0) = s == 0 ? 0.0 : 0.1;
        m.r(s, 1) = s == 1 ? 1.0 : 0.0;
    }
    m.terminal[2] = true;
    const auto ref = oracle::soft_q_fixed_point(m, 0.2);
    EXPECT_LT(oracle::tabular_soft_q_gap(m, 0.2, 20000, ref, 11), 0.05);
}

TEST(Act, GreedyAndTieBreak) {
    Rng rng(0);
    const QFunction q = constant_q(1, {0.1, 0.7, 0.7, 0.2, -1});
    EXPECT_EQ(act(q, obs_of({0}), ActMode::greedy, rng), 1);
    const QFunction ties = constant_q(1, {0, 0, 0, 0, 0});
    EXPECT_EQ(act(ties, obs_of({0}), ActMode::greedy, rng), 0);
}

TEST(Act, SampleFrequenciesFollowBoltzmann) {
    SoftQConfig cfg;
    cfg.alpha = 1.0;
    const std::vector<double> bias{0.0, std::log(2.0), std::log(3.0), 0.0, std::log(4.0)};
    const QFunction q = constant_q(1, bias, cfg);
    const auto pi = boltzmann_policy(bias, 1.0);
    Rng rng(5);
    std::array<int, 5> counts{};
    const int n = 50000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(act(q, obs_of({0}), ActMode::sample, rng))];
    double chi2 = 0.0;
    for (std::size_t a = 0; a < 5; ++a) {
        const double e = n * pi[a];
        chi2 += (counts[a] - e) * (counts[a] - e) / e;
    }
    EXPECT_LT(chi2, oracle::chi_square_quantile(4, 3.09));
}

TEST(ReplayBuffer, FifoEvictionAndValidation) {
    ReplayBuffer buf(3, 0);
    EXPECT_TRUE(buf.empty());
    EXPECT_THROW(buf.sample(1), ContractViolation);
    for (int i = 0; i < 5; ++i) buf.push(transition(static_cast<float>(i), 0, i, 0, false));
    EXPECT_EQ(buf.size(), 3u);
    EXPECT_DOUBLE_EQ(buf.at(0).reward, 2.0);
    EXPECT_DOUBLE_EQ(buf.at(2).reward, 4.0);
    EXPECT_THROW(buf.push(transition(0, 5, 0, 0, false)), ContractViolation);
    EXPECT_THROW(buf.push(transition(0, 0, std::nan(""), 0, false)), ContractViolation);
    EXPECT_THROW(ReplayBuffer(0, 0), ContractViolation);
}

TEST(ReplayBuffer, SamplingIsUniformAndSeeded) {
    ReplayBuffer a(10, 42), b(10, 42);
    for (int i = 0; i < 10; ++i) {
        a.push(transition(static_cast<float>(i), 0, i, 0, false));
        b.push(transition(static_cast<float>(i), 0, i, 0, false));
    }
    EXPECT_EQ(a.sample_indices(50), b.sample_indices(50));
    std::array<int, 10> counts{};
    const int n = 100000;
    for (std::size_t i : a.sample_indices(n)) ++counts[i];
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
    EXPECT_LT(chi2, oracle::chi_square_quantile(9, 3.09));
}

TEST(Batch, ColumnsFollowTransitions) {
    const Batch b = make_batch(std::vector<Transition>{transition(1, 3, 0.5, 2, true), transition(4, 1, -1, 5, false)});
    EXPECT_EQ(b.size(), 2);
    EXPECT_EQ(b.observations(0, 1), 4.0);
    EXPECT_EQ(b.next_observations(0, 0), 2.0);
    EXPECT_EQ(b.actions, (std::vector<int>{3, 1}));
    EXPECT_EQ(b.done, (std::vector<bool>{true, false}));
    EXPECT_THROW(make_batch(std::vector<Transition>{}), ContractViolation);
}
