#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "prft/env.hpp"

using namespace prft;

namespace {

EnvConfig cfg() { return {}; }

double plane_sum(const Observation& o, int channel, const EnvConfig& c) {
    const int n = c.image_height * c.image_width;
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += o.pixels[channel * n + i];
    return s;
}

// Mass of a unit-peak Gaussian blob truncated to the pixel grid, from the
// integral of exp(-t^2 / 2 sigma^2) over each pixel row and column range.
double gaussian_grid_mass(double row, double col, int h, int w, double sigma) {
    auto axis = [sigma](double centre, int n) {
        const double s = sigma * std::sqrt(2.0);
        return sigma * std::sqrt(M_PI / 2.0) * (std::erf((n - 0.5 - centre) / s) - std::erf((-0.5 - centre) / s));
    };
    return axis(row, h) * axis(col, w);
}

}  // namespace

TEST(Reset, IsDeterministic) {
    const auto d = make_domain(0.3, 1);
    const auto a = reset(cfg(), d, 99);
    const auto b = reset(cfg(), d, 99);
    EXPECT_EQ(a.state, b.state);
    EXPECT_EQ(a.observation, b.observation);
}

TEST(Reset, NeighbouringSeedsDiffer) {
    int differ = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto a = reset(cfg(), DomainSpec::source(), s).state;
        const auto b = reset(cfg(), DomainSpec::source(), s + 1).state;
        differ += (a.agent.x != b.agent.x || a.agent.y != b.agent.y || a.goal.x != b.goal.x || a.goal.y != b.goal.y);
    }
    EXPECT_GE(differ, 99);
}

TEST(Reset, StartStatesRespectBoundsAndSeparation) {
    for (std::uint64_t s = 0; s < 500; ++s) {
        const EnvState st = reset(cfg(), DomainSpec::source(), s).state;
        for (double v : {st.agent.x, st.agent.y, st.goal.x, st.goal.y}) {
            EXPECT_GE(v, 0.1);
            EXPECT_LE(v, 0.9);
        }
        EXPECT_GE(distance(st.agent, st.goal), 0.3);
        EXPECT_EQ(st.step_count, 0);
    }
}

TEST(Reset, DomainsShareStateButNotPixels) {
    const auto a = reset(cfg(), make_domain(0.0, 3), 17);
    const auto b = reset(cfg(), make_domain(0.5, 3), 17);
    EXPECT_EQ(a.state, b.state);
    EXPECT_FALSE(a.observation == b.observation);
}

TEST(Step, StayOnGoalEarnsFullReward) {
    EnvState s{{0.4, 0.6}, {0.4, 0.6}, 0};
    const auto r = step(s, static_cast<int>(Action::stay), cfg(), DomainSpec::source());
    EXPECT_DOUBLE_EQ(r.reward, 1.0);
}

TEST(Step, ClampsAtBoundary) {
    EnvState s{{0.0, 0.5}, {0.9, 0.9}, 0};
    const auto r = step(s, static_cast<int>(Action::left), cfg(), DomainSpec::source());
    EXPECT_DOUBLE_EQ(r.state.agent.x, 0.0);
    EXPECT_DOUBLE_EQ(r.state.agent.y, 0.5);
}

TEST(Step, UpMoveRewardMatchesHandArithmetic) {
    EnvState s{{0.5, 0.5}, {0.5, 0.9}, 0};
    const auto r = step(s, static_cast<int>(Action::up), cfg(), DomainSpec::source());
    const double d = 0.9 - (0.5 + 0.08);
    EXPECT_NEAR(d, 0.32, 1e-12);
    EXPECT_NEAR(r.reward, 1.0 - 0.32 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(r.reward, 0.7737, 1e-4);
}

TEST(Step, DirectionsFollowTheActionTable) {
    const EnvState s{{0.5, 0.5}, {0.1, 0.1}, 0};
    const double d = cfg().action_step;
    EXPECT_NEAR(advance(s, 0, cfg()).agent.y, 0.5 + d, 1e-15);
    EXPECT_NEAR(advance(s, 1, cfg()).agent.y, 0.5 - d, 1e-15);
    EXPECT_NEAR(advance(s, 2, cfg()).agent.x, 0.5 - d, 1e-15);
    EXPECT_NEAR(advance(s, 3, cfg()).agent.x, 0.5 + d, 1e-15);
    EXPECT_EQ(advance(s, 4, cfg()).agent, s.agent);
}

TEST(Step, DoneExactlyAtHorizonAndTerminalIsRejected) {
    EnvConfig c = cfg();
    c.horizon = 3;
    EnvState s{{0.5, 0.5}, {0.2, 0.2}, 0};
    for (int t = 1; t <= 3; ++t) {
        const auto r = step(s, 0, c, DomainSpec::source());
        EXPECT_EQ(r.done, t == 3);
        s = r.state;
    }
    EXPECT_THROW(step(s, 0, c, DomainSpec::source()), ContractViolation);
    EXPECT_THROW(advance(EnvState{}, 5, c), ContractViolation);
}

TEST(Render, SourceImageHasTwoBlobsWithGaussianMass) {
    const EnvConfig c = cfg();
    const EnvState s{{0.25, 0.3}, {0.75, 0.7}, 0};
    const Observation o = render(s, DomainSpec::source(), c);
    ASSERT_EQ(o.size(), 3 * 16 * 16);
    const double agent_mass = gaussian_grid_mass((1 - 0.3) * 15, 0.25 * 15, 16, 16, 1.5);
    const double goal_mass = gaussian_grid_mass((1 - 0.7) * 15, 0.75 * 15, 16, 16, 1.5);
    const double total = plane_sum(o, 0, c) + plane_sum(o, 1, c) + plane_sum(o, 2, c);
    EXPECT_NEAR(total, agent_mass + goal_mass, 0.05 * (agent_mass + goal_mass));
    EXPECT_NEAR(plane_sum(o, 0, c), agent_mass, 0.05 * agent_mass);
    EXPECT_NEAR(plane_sum(o, 1, c), goal_mass, 0.05 * goal_mass);
    EXPECT_EQ(plane_sum(o, 2, c), 0.0);
}

TEST(Render, BackgroundOnlyWhenOtherStagesAreNoOps) {
    const EnvConfig c = cfg();
    DomainSpec d;
    d.intensity = 0.3;
    d.background_seed = 1234;
    const EnvState s{{0.2, 0.8}, {0.6, 0.4}, 5};
    const Observation clean = render(s, DomainSpec::source(), c);
    const Observation shifted = render(s, d, c);
    const auto noise = render_detail::value_noise(d.background_seed, c);
    const double w = 0.3 * 0.6;
    for (Eigen::Index i = 0; i < clean.size(); ++i) {
        const double expected = std::clamp((1 - w) * clean.pixels[i] + w * noise[static_cast<std::size_t>(i)], 0.0, 1.0);
        ASSERT_NEAR(shifted.pixels[i], expected, 1e-6);
    }
}

TEST(Render, DistractorsMoveWithStepCount) {
    DomainSpec d = make_domain(0.5, 9);
    ASSERT_EQ(d.distractor_count, 4);
    EnvState a{{0.3, 0.3}, {0.7, 0.7}, 1};
    EnvState b = a;
    b.step_count = 2;
    EXPECT_FALSE(render(a, d, cfg()) == render(b, d, cfg()));
    EXPECT_TRUE(render(a, d, cfg()) == render(a, d, cfg()));
}

TEST(Render, CameraOffsetTranslatesPixels) {
    const EnvConfig c = cfg();
    DomainSpec d;
    d.intensity = 1.0;
    d.camera_offset = {2, -1};
    d.background_seed = 5;
    DomainSpec no_shift = d;
    no_shift.camera_offset = {0, 0};
    const EnvState s{{0.5, 0.5}, {0.2, 0.8}, 0};
    const Observation a = render(s, no_shift, c), b = render(s, d, c);
    const int plane = 16 * 16;
    for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < 16; ++r)
            for (int q = 0; q < 16; ++q) {
                const int sr = r + 1, sq = q - 2;
                const float expected = (sr < 0 || sr >= 16 || sq < 0 || sq >= 16) ? 0.0f : a.pixels[ch * plane + sr * 16 + sq];
                ASSERT_EQ(b.pixels[ch * plane + r * 16 + q], expected);
            }
}

TEST(Render, PixelsStayInUnitRangeForAnyIntensity) {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        const double k = rng.uniform();
        const auto d = make_domain(k, rng.next_u64());
        const EnvState s = initial_state(rng.next_u64());
        const Observation o = render(s, d, cfg());
        ASSERT_GE(o.pixels.minCoeff(), 0.0f);
        ASSERT_LE(o.pixels.maxCoeff(), 1.0f);
    }
}

TEST(MakeDomain, ZeroIntensityIsCanonical) {
    for (std::uint64_t seed : {0ULL, 7ULL, 123456789ULL}) EXPECT_EQ(make_domain(0.0, seed), DomainSpec::source());
}

TEST(MakeDomain, DeterministicAndWellFormed) {
    EXPECT_EQ(make_domain(0.5, 7), make_domain(0.5, 7));
    EXPECT_NE(make_domain(0.5, 7), make_domain(0.5, 8));
    for (double k : {0.1, 0.3, 0.5, 1.0}) {
        const auto d = make_domain(k, 3);
        EXPECT_EQ(d.distractor_count, static_cast<int>(std::lround(8 * k)));
        for (int r = 0; r < 3; ++r)
            EXPECT_NEAR(d.color_mix[r * 3] + d.color_mix[r * 3 + 1] + d.color_mix[r * 3 + 2], 1.0, 1e-12);
        for (int o : d.camera_offset) {
            EXPECT_GE(o, -3);
            EXPECT_LE(o, 3);
        }
    }
    EXPECT_EQ(make_domain(0.5, 1).distractor_count, 4);
}

TEST(MakeDomain, RejectsOutOfRangeIntensity) {
    EXPECT_THROW(make_domain(-0.1, 0), DomainError);
    EXPECT_THROW(make_domain(1.5, 0), DomainError);
    EXPECT_THROW(make_domain(std::nan(""), 0), DomainError);
}

TEST(Environment, StateTrajectoryIsDomainIndependent) {
    Rng rng(21);
    std::vector<int> actions(64);
    for (int& a : actions) a = static_cast<int>(rng.below(5));
    std::vector<std::vector<double>> rewards;
    std::vector<std::vector<EnvState>> states;
    for (double k : {0.0, 0.3, 1.0}) {
        Environment env(cfg(), make_domain(k, 4));
        env.reset(77);
        std::vector<double> rs;
        std::vector<EnvState> ss;
        for (int a : actions) {
            env.step(a);
            rs.push_back(env.true_reward());
            ss.push_back(env.state());
        }
        rewards.push_back(rs);
        states.push_back(ss);
    }
    EXPECT_EQ(rewards[0], rewards[1]);
    EXPECT_EQ(rewards[0], rewards[2]);
    EXPECT_EQ(states[0], states[2]);
}

TEST(Environment, RewardsLieInUnitInterval) {
    Rng rng(2);
    for (int i = 0; i < 10000; ++i) {
        const Vec2 a{rng.uniform(), rng.uniform()}, g{rng.uniform(), rng.uniform()};
        const double r = true_reward(a, g);
        ASSERT_GE(r, 0.0);
        ASSERT_LE(r, 1.0);
    }
    EXPECT_NEAR(true_reward({0, 0}, {1, 1}), 0.0, 1e-15);
}

TEST(Environment, CountsRewardReads) {
    Environment env(cfg(), DomainSpec::source());
    env.reset(1);
    EXPECT_THROW(env.true_reward(), ContractViolation);
    env.step(0);
    env.step(1);
    EXPECT_EQ(env.reward_reads(), 0u);
    env.true_reward();
    env.true_reward();
    EXPECT_EQ(env.reward_reads(), 2u);
}

TEST(Environment, WritesInterleavedPpm) {
    const auto path = std::filesystem::temp_directory_path() / "prft_test_obs.ppm";
    const Observation o = render({{0.5, 0.5}, {0.1, 0.9}, 0}, DomainSpec::source(), cfg());
    write_ppm(path, o, cfg());
    std::ifstream in(path, std::ios::binary);
    std::string data((std::istreambuf_iterator<char>(in)), {});
    const std::string header = "P6\n16 16\n255\n";
    ASSERT_EQ(data.size(), header.size() + 3 * 256);
    EXPECT_EQ(data.substr(0, header.size()), header);
    // Pixel (row 7.5 -> 8, col 7.5 -> 8) red channel near the agent blob peak.
    const auto px = static_cast<unsigned char>(data[header.size() + 3 * (8 * 16 + 8)]);
    EXPECT_GT(px, 150);
    std::filesystem::remove(path);
}
