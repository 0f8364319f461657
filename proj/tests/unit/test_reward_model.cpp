#include <gtest/gtest.h>

#include <Eigen/Cholesky>

#include "prft/env.hpp"
#include "prft/reward_model.hpp"

using namespace prft;

namespace {

struct Dataset {
    Matrix observations;
    std::vector<int> actions;
    Vector rewards;
};

// Source-domain (o, a, r) samples from random states; r is the reward of
// the state reached by taking a, exactly as the environment reports it.
Dataset sample_dataset(int n, std::uint64_t seed) {
    const EnvConfig config;
    const DomainSpec domain = DomainSpec::source();
    Rng rng(seed);
    Dataset d;
    d.observations.resize(3 * 16 * 16, n);
    d.rewards.resize(n);
    for (int i = 0; i < n; ++i) {
        const EnvState s = initial_state(rng.next_u64());
        const int a = static_cast<int>(rng.below(kActionCount));
        d.observations.col(i) = render(s, domain, config).pixels.cast<double>();
        d.actions.push_back(a);
        d.rewards[i] = step(s, a, config, domain).reward;
    }
    return d;
}

double mse(const Vector& predicted, const Vector& truth) { return (predicted - truth).squaredNorm() / truth.size(); }

Observation constant_obs(float v) {
    Observation o;
    o.pixels = Eigen::VectorXf::Constant(12, v);
    return o;
}

std::vector<Transition> some_transitions() {
    std::vector<Transition> out;
    for (int i = 0; i < 5; ++i)
        out.push_back({constant_obs(0.1f * static_cast<float>(i)), i, 0.0, constant_obs(0.5f), i == 4, RewardSource::truth});
    return out;
}

}  // namespace

TEST(Predict, ZeroNetworkPredictsZero) {
    RewardPredictor m(NetworkParams::zeros({{12 + kActionCount, 8, 1}, Activation::relu}));
    for (int a = 0; a < kActionCount; ++a) EXPECT_EQ(predict(m, constant_obs(0.7f), a), 0.0);
}

TEST(Predict, DeterministicAndActionSensitiveInput) {
    const RewardPredictor m = RewardPredictor::create(12, {16}, 3);
    EXPECT_EQ(predict(m, constant_obs(0.3f), 2), predict(m, constant_obs(0.3f), 2));
    const Vector a = reward_input(constant_obs(0.3f), 1), b = reward_input(constant_obs(0.3f), 3);
    EXPECT_EQ(a.size(), 12 + kActionCount);
    EXPECT_NE(a, b);
    EXPECT_EQ(a[12 + 1], 1.0);
    EXPECT_EQ(a.tail(kActionCount).sum(), 1.0);
    EXPECT_THROW(reward_input(constant_obs(0.3f), 5), ContractViolation);
}

TEST(Predict, BatchMatchesSingle) {
    const RewardPredictor m = RewardPredictor::create(12, {16, 8}, 4);
    const auto ts = some_transitions();
    const Batch b = make_batch(ts);
    const Vector batch = predict(m, b.observations, b.actions);
    for (std::size_t i = 0; i < ts.size(); ++i)
        EXPECT_NEAR(batch[static_cast<Eigen::Index>(i)], predict(m, ts[i].obs, ts[i].action), 1e-14);
}

TEST(RewardTrainStep, LossExamples) {
    const NetworkSpec spec{{12 + kActionCount, 1}, Activation::relu};
    RewardPredictor exact(NetworkParams::zeros(spec));
    exact.mutable_network().layers[0].bias[0] = 0.25;
    Batch b = make_batch(some_transitions());
    b.rewards.setConstant(0.25);
    AdamState opt = AdamState::create(spec);
    EXPECT_LT(reward_train_step(exact, b, opt), 1e-12);

    RewardPredictor zero(NetworkParams::zeros(spec));
    b.rewards.setConstant(1.0);
    AdamState opt2 = AdamState::create(spec);
    EXPECT_DOUBLE_EQ(reward_train_step(zero, b, opt2), 1.0);
}

TEST(RewardTrainStep, RejectsFrozenAndPredictedRewards) {
    RewardPredictor m = RewardPredictor::create(12, {8}, 1);
    AdamState opt = AdamState::create(m.network().spec);
    Batch b = make_batch(some_transitions());
    b.sources[1] = RewardSource::predicted;
    EXPECT_THROW(reward_train_step(m, b, opt), ContractViolation);
    b.sources[1] = RewardSource::truth;
    m.freeze();
    EXPECT_THROW(reward_train_step(m, b, opt), FreezeViolation);
    EXPECT_THROW(m.mutable_network(), FreezeViolation);
}

TEST(RewardTrainStep, BeatsRidgeBaselineOnSourceData) {
    const Dataset train = sample_dataset(1000, 1), test = sample_dataset(500, 2);
    RewardPredictor m = RewardPredictor::create(3 * 16 * 16, {64, 64}, 7);
    AdamState opt = AdamState::create(m.network().spec);
    Rng rng(3);
    const int batch = 64;
    Matrix obs(train.observations.rows(), batch);
    std::vector<int> acts(batch);
    Vector rew(batch);
    for (int step = 0; step < 5000; ++step) {
        for (int i = 0; i < batch; ++i) {
            const auto j = static_cast<Eigen::Index>(rng.below(1000));
            obs.col(i) = train.observations.col(j);
            acts[static_cast<std::size_t>(i)] = train.actions[static_cast<std::size_t>(j)];
            rew[i] = train.rewards[j];
        }
        reward_train_step(m, obs, acts, rew, opt);
    }
    const double train_mse = mse(predict(m, train.observations, train.actions), train.rewards);
    const double test_mse = mse(predict(m, test.observations, test.actions), test.rewards);
    EXPECT_LT(train_mse, 0.01);

    // Ridge regression on the same inputs, with an unpenalized intercept.
    const Matrix x = reward_inputs(train.observations, train.actions);
    const Vector mean_x = x.rowwise().mean();
    const double mean_y = train.rewards.mean();
    const Matrix xc = x.colwise() - mean_x;
    const Vector yc = train.rewards.array() - mean_y;
    Matrix gram = xc * xc.transpose();
    gram.diagonal().array() += 1.0;
    const Vector w = gram.ldlt().solve(xc * yc);
    const Matrix xt = reward_inputs(test.observations, test.actions);
    const Vector ridge = ((xt.colwise() - mean_x).transpose() * w).array() + mean_y;
    EXPECT_LT(test_mse, mse(ridge, test.rewards));
}

TEST(RewardTrainStep, LossDescendsOverWindows) {
    const Dataset d = sample_dataset(128, 5);
    RewardPredictor m = RewardPredictor::create(3 * 16 * 16, {16}, 2);
    AdamState opt = AdamState::create(m.network().spec);
    const int steps = 4000, window = 500;
    // Full-batch steps, so each returned loss is the dataset loss before the step.
    std::vector<double> loss;
    for (int i = 0; i < steps; ++i) loss.push_back(reward_train_step(m, d.observations, d.actions, d.rewards, opt));
    int windows = 0, non_increasing = 0;
    for (int t = 0; t + window < steps; ++t, ++windows) non_increasing += loss[t + window] <= loss[t];
    EXPECT_GE(non_increasing, 0.95 * windows);
}

TEST(Relabel, ContractsAndFreezeDiscipline) {
    RewardPredictor m = RewardPredictor::create(12, {8}, 9);
    EXPECT_THROW(relabel(m, some_transitions()), FreezeViolation);
    m.freeze();
    const auto before = checksum(m.network());
    EXPECT_TRUE(relabel(m, std::vector<Transition>{}).empty());
    const auto once = relabel(m, some_transitions());
    const auto twice = relabel(m, once);
    ASSERT_EQ(once.size(), 5u);
    for (std::size_t i = 0; i < once.size(); ++i) {
        EXPECT_EQ(once[i].reward_source, RewardSource::predicted);
        EXPECT_EQ(once[i].reward, twice[i].reward);
        EXPECT_EQ(once[i].reward, predict(m, once[i].obs, once[i].action));
        EXPECT_EQ(once[i].action, some_transitions()[i].action);
        EXPECT_EQ(once[i].done, some_transitions()[i].done);
    }
    for (int i = 0; i < 100; ++i) relabel(m, some_transitions()[static_cast<std::size_t>(i % 5)]);
    EXPECT_EQ(checksum(m.network()), before);
}

TEST(LinearFit, Examples) {
    const std::vector<RewardPair> identity{{1, 1}, {2, 2}, {3, 3}};
    const auto a = linear_fit_diagnostic(identity);
    EXPECT_NEAR(a.slope, 1.0, 1e-15);
    EXPECT_NEAR(a.intercept, 0.0, 1e-15);
    EXPECT_NEAR(a.r_squared, 1.0, 1e-15);
    EXPECT_EQ(a.mse, 0.0);
    EXPECT_EQ(a.sample_count, 3u);

    const std::vector<RewardPair> two{{1, 0}, {3, 1}};
    const auto b = linear_fit_diagnostic(two);
    EXPECT_NEAR(b.slope, 2.0, 1e-15);
    EXPECT_NEAR(b.intercept, 1.0, 1e-15);
    EXPECT_NEAR(b.r_squared, 1.0, 1e-15);
    EXPECT_NEAR(b.mse, 2.5, 1e-15);
}

TEST(LinearFit, SyntheticSampleMatchesClosedFormOls) {
    Rng rng(31);
    std::vector<RewardPair> pairs;
    for (int i = 0; i < 1000; ++i) {
        const double r = rng.uniform();
        pairs.push_back({0.5 * r + 0.2 + 0.01 * rng.normal(), r});
    }
    const auto d = linear_fit_diagnostic(pairs);
    EXPECT_GE(d.slope, 0.45);
    EXPECT_LE(d.slope, 0.55);
    EXPECT_GE(d.intercept, 0.17);
    EXPECT_LE(d.intercept, 0.23);

    // Normal equations solved independently.
    Eigen::MatrixXd x(1000, 2);
    Eigen::VectorXd y(1000);
    for (int i = 0; i < 1000; ++i) {
        x(i, 0) = pairs[static_cast<std::size_t>(i)].truth;
        x(i, 1) = 1.0;
        y[i] = pairs[static_cast<std::size_t>(i)].predicted;
    }
    const Eigen::Vector2d beta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    EXPECT_NEAR(d.slope, beta[0], 1e-10);
    EXPECT_NEAR(d.intercept, beta[1], 1e-10);
    EXPECT_LE(d.r_squared, 1.0);
    EXPECT_GT(d.r_squared, 0.9);
}

TEST(LinearFit, DegenerateInputsThrow) {
    const std::vector<RewardPair> one{{1, 1}};
    EXPECT_THROW(linear_fit_diagnostic(one), DegenerateFit);
    const std::vector<RewardPair> flat{{1, 0.5}, {2, 0.5}, {3, 0.5}};
    EXPECT_THROW(linear_fit_diagnostic(flat), DegenerateFit);
}
