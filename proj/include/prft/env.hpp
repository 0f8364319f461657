#pragma once

// Point-mass reacher with pixel observations.
//
// The hidden state (agent and goal positions, step counter) and the reward
// depend only on the state, never on the DomainSpec. The DomainSpec only
// changes how the state is rendered into pixels, so a source and a target
// domain share every trajectory and every true reward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "prft/errors.hpp"
#include "prft/rng.hpp"

namespace prft {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

enum class Action : int { up = 0, down = 1, left = 2, right = 3, stay = 4 };

inline constexpr int kActionCount = 5;
inline constexpr double kMaxDistance = 1.4142135623730951;  // diagonal of the unit square

struct EnvConfig {
    int horizon = 64;
    double action_step = 0.08;
    int action_count = kActionCount;
    int image_height = 16;
    int image_width = 16;

    int channels() const { return 3; }
    int observation_size() const { return 3 * image_height * image_width; }

    void validate() const {
        if (horizon < 1) throw ConfigError("env.horizon must be >= 1");
        if (!(action_step > 0.0)) throw ConfigError("env.action_step must be > 0");
        if (action_count != kActionCount) throw ConfigError("env.action_count must be 5");
        if (image_height < 2 || image_width < 2) throw ConfigError("env image size must be at least 2x2");
    }
};

struct EnvState {
    Vec2 agent;
    Vec2 goal;
    int step_count = 0;
    friend bool operator==(const EnvState&, const EnvState&) = default;
};

struct DomainSpec {
    double intensity = 0.0;
    std::uint64_t background_seed = 0;
    std::array<double, 9> color_mix{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major 3x3
    std::array<int, 2> camera_offset{0, 0};                      // (columns, rows) in pixels
    int distractor_count = 0;

    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;

    static DomainSpec source() { return {}; }
};

/// Flat channel-major image, index = channel * H * W + row * W + column.
struct Observation {
    Eigen::VectorXf pixels;

    Eigen::Index size() const { return pixels.size(); }
    friend bool operator==(const Observation& a, const Observation& b) {
        return a.pixels.size() == b.pixels.size() && a.pixels == b.pixels;
    }
};

namespace render_detail {

inline constexpr double kBlobSigma = 1.5;
inline constexpr double kNoiseWeight = 0.6;
inline constexpr int kNoiseLattice = 4;
inline constexpr double kDistractorAmplitude = 1.0;

inline double pixel_col(double x, const EnvConfig& c) { return x * (c.image_width - 1); }
inline double pixel_row(double y, const EnvConfig& c) { return (1.0 - y) * (c.image_height - 1); }

inline void add_blob(std::vector<double>& img, const EnvConfig& c, int channel, double row, double col,
                     double amplitude) {
    const int h = c.image_height;
    const int w = c.image_width;
    const double inv = 1.0 / (2.0 * kBlobSigma * kBlobSigma);
    double* plane = img.data() + static_cast<std::size_t>(channel) * h * w;
    for (int r = 0; r < h; ++r) {
        const double dr = r - row;
        for (int q = 0; q < w; ++q) {
            const double dq = q - col;
            plane[r * w + q] += amplitude * std::exp(-(dr * dr + dq * dq) * inv);
        }
    }
}

/// Smooth value noise: a 4x4 lattice of uniform values per channel,
/// bilinearly interpolated over the image.
inline std::vector<double> value_noise(std::uint64_t seed, const EnvConfig& c) {
    constexpr int n = kNoiseLattice;
    Rng rng(derive_seed(seed, "value-noise"));
    std::array<double, 3 * n * n> lattice{};
    for (double& v : lattice) v = rng.uniform();

    const int h = c.image_height;
    const int w = c.image_width;
    std::vector<double> out(static_cast<std::size_t>(3) * h * w);
    for (int ch = 0; ch < 3; ++ch) {
        const double* lat = lattice.data() + ch * n * n;
        for (int r = 0; r < h; ++r) {
            const double v = static_cast<double>(r) / (h - 1) * (n - 1);
            const int v0 = std::min(static_cast<int>(v), n - 2);
            const double fv = v - v0;
            for (int q = 0; q < w; ++q) {
                const double u = static_cast<double>(q) / (w - 1) * (n - 1);
                const int u0 = std::min(static_cast<int>(u), n - 2);
                const double fu = u - u0;
                const double top = (1 - fu) * lat[v0 * n + u0] + fu * lat[v0 * n + u0 + 1];
                const double bottom = (1 - fu) * lat[(v0 + 1) * n + u0] + fu * lat[(v0 + 1) * n + u0 + 1];
                out[(static_cast<std::size_t>(ch) * h + r) * w + q] = (1 - fv) * top + fv * bottom;
            }
        }
    }
    return out;
}

/// Position of distractor `index` at `step`: a fixed start and velocity per
/// distractor, wrapped around the unit square.
inline Vec2 distractor_position(std::uint64_t background_seed, int index, int step) {
    Rng rng(derive_seed(background_seed, "distractor", static_cast<std::uint64_t>(index)));
    const double x0 = rng.uniform();
    const double y0 = rng.uniform();
    const double heading = rng.uniform(0.0, 6.283185307179586);
    const double speed = rng.uniform(0.02, 0.05);
    auto wrap = [](double v) { return v - std::floor(v); };
    return {wrap(x0 + speed * std::cos(heading) * step), wrap(y0 + speed * std::sin(heading) * step)};
}

}  // namespace render_detail

/// Renders `state` under `domain`. Stages for intensity > 0, in order:
/// background noise blend, moving distractors (channel 2), color mixing,
/// camera translation with zero fill. The result is clamped to [0, 1].
inline Observation render(const EnvState& state, const DomainSpec& domain, const EnvConfig& config) {
    using namespace render_detail;
    const int h = config.image_height;
    const int w = config.image_width;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> img(3 * plane, 0.0);

    add_blob(img, config, 0, pixel_row(state.agent.y, config), pixel_col(state.agent.x, config), 1.0);
    add_blob(img, config, 1, pixel_row(state.goal.y, config), pixel_col(state.goal.x, config), 1.0);

    const double k = domain.intensity;
    if (k > 0.0) {
        const double blend = k * kNoiseWeight;
        const std::vector<double> noise = value_noise(domain.background_seed, config);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = (1.0 - blend) * img[i] + blend * noise[i];

        for (int d = 0; d < domain.distractor_count; ++d) {
            const Vec2 p = distractor_position(domain.background_seed, d, state.step_count);
            add_blob(img, config, 2, pixel_row(p.y, config), pixel_col(p.x, config), kDistractorAmplitude);
        }

        const auto& m = domain.color_mix;
        for (std::size_t i = 0; i < plane; ++i) {
            const double x0 = img[i], x1 = img[plane + i], x2 = img[2 * plane + i];
            const double y0 = m[0] * x0 + m[1] * x1 + m[2] * x2;
            const double y1 = m[3] * x0 + m[4] * x1 + m[5] * x2;
            const double y2 = m[6] * x0 + m[7] * x1 + m[8] * x2;
            img[i] = (1.0 - k) * x0 + k * y0;
            img[plane + i] = (1.0 - k) * x1 + k * y1;
            img[2 * plane + i] = (1.0 - k) * x2 + k * y2;
        }

        const int dc = static_cast<int>(std::lround(k * domain.camera_offset[0]));
        const int dr = static_cast<int>(std::lround(k * domain.camera_offset[1]));
        if (dc != 0 || dr != 0) {
            std::vector<double> shifted(img.size(), 0.0);
            for (int ch = 0; ch < 3; ++ch) {
                for (int r = 0; r < h; ++r) {
                    const int sr = r - dr;
                    if (sr < 0 || sr >= h) continue;
                    for (int q = 0; q < w; ++q) {
                        const int sq = q - dc;
                        if (sq < 0 || sq >= w) continue;
                        shifted[ch * plane + r * w + q] = img[ch * plane + sr * w + sq];
                    }
                }
            }
            img.swap(shifted);
        }
    }

    Observation obs;
    obs.pixels.resize(static_cast<Eigen::Index>(img.size()));
    for (std::size_t i = 0; i < img.size(); ++i)
        obs.pixels[static_cast<Eigen::Index>(i)] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
    return obs;
}

/// Deterministic DomainSpec for intensity `kappa`. kappa = 0 always yields
/// the canonical source domain.
inline DomainSpec make_domain(double kappa, std::uint64_t master_seed) {
    if (!(kappa >= 0.0 && kappa <= 1.0)) throw DomainError("distraction intensity must lie in [0, 1]");
    DomainSpec d;
    if (kappa == 0.0) return d;
    d.intensity = kappa;
    d.background_seed = derive_seed(master_seed, "background");

    Rng rng(derive_seed(master_seed, "color-mix"));
    for (int r = 0; r < 3; ++r) {
        // Rows whose sum falls near zero are redrawn so renormalization stays bounded.
        for (;;) {
            std::array<double, 3> row{};
            double sum = 0.0;
            for (int c = 0; c < 3; ++c) {
                row[c] = (r == c ? 1.0 : 0.0) + kappa * rng.uniform(-0.5, 0.5);
                sum += row[c];
            }
            if (sum < 0.25) continue;
            for (int c = 0; c < 3; ++c) d.color_mix[r * 3 + c] = row[c] / sum;
            break;
        }
    }
    Rng offset_rng(derive_seed(master_seed, "camera-offset"));
    d.camera_offset = {static_cast<int>(offset_rng.between(-3, 3)), static_cast<int>(offset_rng.between(-3, 3))};
    d.distractor_count = static_cast<int>(std::lround(8.0 * kappa));
    return d;
}

/// Initial state for `episode_seed`: agent and goal uniform on [0.1, 0.9]^2,
/// at least 0.3 apart. A fixed goal, when given, replaces the sampled one.
inline EnvState initial_state(std::uint64_t episode_seed, std::optional<Vec2> fixed_goal = std::nullopt) {
    Rng rng(derive_seed(episode_seed, "episode-start"));
    EnvState s;
    for (;;) {
        s.agent = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        s.goal = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
        if (fixed_goal) s.goal = *fixed_goal;
        if (distance(s.agent, s.goal) >= 0.3) break;
    }
    return s;
}

struct ResetResult {
    EnvState state;
    Observation observation;
};

inline ResetResult reset(const EnvConfig& config, const DomainSpec& domain, std::uint64_t episode_seed) {
    EnvState s = initial_state(episode_seed);
    return {s, render(s, domain, config)};
}

inline double true_reward(Vec2 agent, Vec2 goal) { return 1.0 - distance(agent, goal) / kMaxDistance; }

/// State transition without rendering or reward.
inline EnvState advance(const EnvState& state, int action, const EnvConfig& config) {
    if (state.step_count >= config.horizon) throw ContractViolation("step called on a terminal state");
    if (action < 0 || action >= config.action_count) throw ContractViolation("action index out of range");
    EnvState next = state;
    const double d = config.action_step;
    switch (static_cast<Action>(action)) {
        case Action::up: next.agent.y += d; break;
        case Action::down: next.agent.y -= d; break;
        case Action::left: next.agent.x -= d; break;
        case Action::right: next.agent.x += d; break;
        case Action::stay: break;
    }
    next.agent.x = std::clamp(next.agent.x, 0.0, 1.0);
    next.agent.y = std::clamp(next.agent.y, 0.0, 1.0);
    next.step_count += 1;
    return next;
}

struct StepResult {
    EnvState state;
    Observation observation;
    double reward = 0.0;
    bool done = false;
};

inline StepResult step(const EnvState& state, int action, const EnvConfig& config, const DomainSpec& domain) {
    EnvState next = advance(state, action, config);
    const double r = true_reward(next.agent, next.goal);
    const bool done = next.step_count == config.horizon;
    return {next, render(next, domain, config), r, done};
}

/// Stateful wrapper used by the training loops. The true reward of the last
/// step is only reachable through true_reward(), which counts every read;
/// reward-free phases assert the count stays at zero.
class Environment {
public:
    Environment(EnvConfig config, DomainSpec domain) : config_(config), domain_(domain) { config_.validate(); }

    const Observation& reset(std::uint64_t episode_seed, std::optional<Vec2> fixed_goal = std::nullopt) {
        state_ = initial_state(episode_seed, fixed_goal);
        obs_ = render(state_, domain_, config_);
        has_reward_ = false;
        return obs_;
    }

    /// Advances one step and returns whether the episode ended.
    bool step(int action) {
        state_ = advance(state_, action, config_);
        obs_ = render(state_, domain_, config_);
        last_reward_ = prft::true_reward(state_.agent, state_.goal);
        has_reward_ = true;
        return done();
    }

    double true_reward() {
        if (!has_reward_) throw ContractViolation("no reward available before the first step");
        ++reward_reads_;
        return last_reward_;
    }

    bool done() const { return state_.step_count >= config_.horizon; }
    const Observation& observation() const { return obs_; }
    const EnvState& state() const { return state_; }
    const EnvConfig& config() const { return config_; }
    const DomainSpec& domain() const { return domain_; }
    std::uint64_t reward_reads() const { return reward_reads_; }

private:
    EnvConfig config_;
    DomainSpec domain_;
    EnvState state_;
    Observation obs_;
    double last_reward_ = 0.0;
    bool has_reward_ = false;
    std::uint64_t reward_reads_ = 0;
};

/// Writes an interleaved 8-bit binary PPM (P6). Channels map to R, G, B.
inline void write_ppm(const std::filesystem::path& path, const Observation& obs, const EnvConfig& config) {
    const int h = config.image_height;
    const int w = config.image_width;
    if (obs.size() != config.observation_size()) throw ContractViolation("observation size does not match config");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i) {
        for (int ch = 0; ch < 3; ++ch) {
            const float v = obs.pixels[static_cast<Eigen::Index>(ch * plane + i)];
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
        }
    }
}

}  // namespace prft
