#pragma once

// Dense feed-forward networks with hand-written reverse-mode gradients and
// an Adam optimizer. Batches are matrices with one sample per column.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prft/errors.hpp"
#include "prft/rng.hpp"

namespace prft {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint32_t { relu = 0, tanh = 1 };

struct NetworkSpec {
    std::vector<int> layer_sizes;
    Activation activation = Activation::relu;

    std::size_t layer_count() const { return layer_sizes.empty() ? 0 : layer_sizes.size() - 1; }
    int input_size() const { return layer_sizes.front(); }
    int output_size() const { return layer_sizes.back(); }

    void validate() const {
        if (layer_sizes.size() < 2) throw ContractViolation("network needs at least an input and an output size");
        for (int s : layer_sizes)
            if (s < 1) throw ContractViolation("layer sizes must be positive");
    }

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out
};

/// Weights and biases of every layer. Gradients and optimizer moments use
/// the same type.
struct NetworkParams {
    NetworkSpec spec;
    std::vector<DenseLayer> layers;

    static NetworkParams zeros(const NetworkSpec& spec) {
        spec.validate();
        NetworkParams p;
        p.spec = spec;
        for (std::size_t l = 0; l < spec.layer_count(); ++l)
            p.layers.push_back({Matrix::Zero(spec.layer_sizes[l + 1], spec.layer_sizes[l]),
                                Vector::Zero(spec.layer_sizes[l + 1])});
        return p;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& layer : layers) n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
        return n;
    }

    bool all_finite() const {
        return std::all_of(layers.begin(), layers.end(),
                           [](const DenseLayer& l) { return l.weight.allFinite() && l.bias.allFinite(); });
    }

    bool same_shape(const NetworkParams& other) const {
        if (layers.size() != other.layers.size()) return false;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].weight.rows() != other.layers[l].weight.rows() ||
                layers[l].weight.cols() != other.layers[l].weight.cols() ||
                layers[l].bias.size() != other.layers[l].bias.size())
                return false;
        }
        return true;
    }

    friend bool operator==(const NetworkParams& a, const NetworkParams& b) {
        if (!(a.spec == b.spec) || !a.same_shape(b)) return false;
        for (std::size_t l = 0; l < a.layers.size(); ++l)
            if (a.layers[l].weight != b.layers[l].weight || a.layers[l].bias != b.layers[l].bias) return false;
        return true;
    }
};

/// He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
    NetworkParams p = NetworkParams::zeros(spec);
    Rng rng(derive_seed(seed, "init-params"));
    for (auto& layer : p.layers) {
        const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.cols()));
        // Row-major fill so the draw order matches the serialized layout.
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
    }
    return p;
}

inline void apply_activation(Activation act, Matrix& z) {
    if (act == Activation::relu)
        z = z.cwiseMax(0.0);
    else
        z = z.array().tanh().matrix();
}

/// Multiplies `grad` in place by the activation derivative, given the
/// pre-activation `z` and post-activation `a`.
inline void apply_activation_derivative(Activation act, const Matrix& z, const Matrix& a, Matrix& grad) {
    if (act == Activation::relu)
        grad.array() *= (z.array() > 0.0).cast<double>();
    else
        grad.array() *= 1.0 - a.array().square();
}

/// Activation record of one forward pass.
struct Tape {
    std::vector<Matrix> inputs;           // inputs[l] feeds layer l; inputs[0] is the batch
    std::vector<Matrix> pre_activations;  // one per hidden layer
    Matrix output;
};

inline void check_input(const NetworkParams& params, Eigen::Index rows) {
    if (params.layers.empty()) throw ContractViolation("network has no layers");
    if (rows != params.layers.front().weight.cols())
        throw ContractViolation("input size " + std::to_string(rows) + " does not match network input " +
                                std::to_string(params.layers.front().weight.cols()));
}

inline Tape forward(const NetworkParams& params, const Matrix& batch) {
    check_input(params, batch.rows());
    Tape tape;
    const std::size_t n = params.layers.size();
    tape.inputs.reserve(n);
    tape.inputs.push_back(batch);
    for (std::size_t l = 0; l < n; ++l) {
        const auto& layer = params.layers[l];
        Matrix z = layer.weight * tape.inputs.back();
        z.colwise() += layer.bias;
        if (l + 1 == n) {
            tape.output = std::move(z);
        } else {
            Matrix a = z;
            apply_activation(params.spec.activation, a);
            tape.pre_activations.push_back(std::move(z));
            tape.inputs.push_back(std::move(a));
        }
    }
    return tape;
}

inline Tape forward(const NetworkParams& params, const Vector& input) { return forward(params, Matrix(input)); }

/// Forward pass without recording a tape.
inline Matrix infer(const NetworkParams& params, const Matrix& batch) {
    check_input(params, batch.rows());
    Matrix x = batch;
    const std::size_t n = params.layers.size();
    for (std::size_t l = 0; l < n; ++l) {
        Matrix z = params.layers[l].weight * x;
        z.colwise() += params.layers[l].bias;
        if (l + 1 < n) apply_activation(params.spec.activation, z);
        x = std::move(z);
    }
    return x;
}

inline Vector infer(const NetworkParams& params, const Vector& input) {
    return infer(params, Matrix(input)).col(0);
}

struct Gradient {
    NetworkParams params;
    Matrix input;  // empty unless requested
};

/// Gradient of <output_gradient, output> with respect to every parameter,
/// summed over the batch columns. Optionally also with respect to the input.
inline Gradient backward(const NetworkParams& params, const Tape& tape, const Matrix& output_gradient,
                         bool want_input_gradient = false) {
    const std::size_t n = params.layers.size();
    if (tape.inputs.size() != n || tape.pre_activations.size() + 1 != n)
        throw ContractViolation("tape does not belong to this network");
    if (output_gradient.rows() != tape.output.rows() || output_gradient.cols() != tape.output.cols())
        throw ContractViolation("output gradient shape does not match the forward output");

    Gradient g{NetworkParams::zeros(params.spec), {}};
    Matrix delta = output_gradient;
    for (std::size_t l = n; l-- > 0;) {
        g.params.layers[l].weight.noalias() = delta * tape.inputs[l].transpose();
        g.params.layers[l].bias = delta.rowwise().sum();
        if (l == 0 && !want_input_gradient) break;
        Matrix upstream = params.layers[l].weight.transpose() * delta;
        if (l > 0)
            apply_activation_derivative(params.spec.activation, tape.pre_activations[l - 1], tape.inputs[l], upstream);
        else
            g.input = std::move(upstream);
        delta = std::move(upstream);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    NetworkParams first_moment;
    NetworkParams second_moment;
    std::int64_t step = 0;
    std::vector<bool> trainable;  // per layer; frozen layers are never touched

    static AdamState create(const NetworkSpec& spec, AdamConfig config = {}) {
        AdamState s;
        s.config = config;
        s.first_moment = NetworkParams::zeros(spec);
        s.second_moment = NetworkParams::zeros(spec);
        s.trainable.assign(spec.layer_count(), true);
        return s;
    }
};

inline void adam_step(NetworkParams& params, const NetworkParams& gradient, AdamState& state) {
    if (!params.same_shape(gradient) || !params.same_shape(state.first_moment))
        throw ContractViolation("adam_step: parameter, gradient, and moment shapes differ");
    if (!gradient.all_finite()) throw DivergenceError("non-finite gradient component");

    const auto& c = state.config;
    state.step += 1;
    const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const double step_size = c.learning_rate / correction1;
    const double inv_sqrt_c2 = 1.0 / std::sqrt(correction2);

    auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
        m.array() = c.beta1 * m.array() + (1.0 - c.beta1) * g.array();
        v.array() = c.beta2 * v.array() + (1.0 - c.beta2) * g.array().square();
        p.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + c.epsilon);
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        if (l < state.trainable.size() && !state.trainable[l]) continue;
        update(params.layers[l].weight, gradient.layers[l].weight, state.first_moment.layers[l].weight,
               state.second_moment.layers[l].weight);
        update(params.layers[l].bias, gradient.layers[l].bias, state.first_moment.layers[l].bias,
               state.second_moment.layers[l].bias);
    }
}

/// Polyak averaging: target <- (1 - tau) * target + tau * online.
inline void soft_sync(NetworkParams& target, const NetworkParams& online, double tau) {
    if (!target.same_shape(online)) throw ContractViolation("soft_sync: shape mismatch");
    if (tau == 1.0) {
        target = online;
        return;
    }
    for (std::size_t l = 0; l < target.layers.size(); ++l) {
        target.layers[l].weight = (1.0 - tau) * target.layers[l].weight + tau * online.layers[l].weight;
        target.layers[l].bias = (1.0 - tau) * target.layers[l].bias + tau * online.layers[l].bias;
    }
}

/// FNV-1a over the raw bytes of every parameter, in layer order.
inline std::uint64_t checksum(const NetworkParams& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const double* data, Eigen::Index n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& layer : params.layers) {
        mix(layer.weight.data(), layer.weight.size());
        mix(layer.bias.data(), layer.bias.size());
    }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Network record: "PRFT", u32 version, u32 size count, u32 sizes..., u32
// activation id, then little-endian f64 per layer: weights row-major, then
// bias. An optimizer file is two network records (first and second moment)
// followed by u64 step, f64 learning rate, beta1, beta2, epsilon, u32 layer
// count and one u8 trainable flag per layer.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace io_detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_bytes(std::istream& in, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
        const int c = in.get();
        if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint truncated");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}
inline std::uint32_t get_u32(std::istream& in) { return static_cast<std::uint32_t>(get_bytes(in, 4)); }
inline std::uint64_t get_u64(std::istream& in) { return get_bytes(in, 8); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace io_detail

inline void write_params(std::ostream& out, const NetworkParams& params) {
    using namespace io_detail;
    out.write("PRFT", 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(params.spec.layer_sizes.size()));
    for (int s : params.spec.layer_sizes) put_u32(out, static_cast<std::uint32_t>(s));
    put_u32(out, static_cast<std::uint32_t>(params.spec.activation));
    for (const auto& layer : params.layers) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) put_f64(out, layer.weight(r, c));
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) put_f64(out, layer.bias[i]);
    }
}

inline NetworkParams read_params(std::istream& in) {
    using namespace io_detail;
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "PRFT", 4) != 0) throw std::runtime_error("not a PRFT checkpoint");
    const std::uint32_t version = get_u32(in);
    if (version != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    NetworkSpec spec;
    const std::uint32_t count = get_u32(in);
    if (count < 2 || count > 64) throw std::runtime_error("corrupt checkpoint layer count");
    for (std::uint32_t i = 0; i < count; ++i) spec.layer_sizes.push_back(static_cast<int>(get_u32(in)));
    const std::uint32_t act = get_u32(in);
    if (act > 1) throw std::runtime_error("unknown activation id");
    spec.activation = static_cast<Activation>(act);
    NetworkParams p = NetworkParams::zeros(spec);
    for (auto& layer : p.layers) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = get_f64(in);
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = get_f64(in);
    }
    return p;
}

inline void write_adam(std::ostream& out, const AdamState& s) {
    using namespace io_detail;
    write_params(out, s.first_moment);
    write_params(out, s.second_moment);
    put_u64(out, static_cast<std::uint64_t>(s.step));
    put_f64(out, s.config.learning_rate);
    put_f64(out, s.config.beta1);
    put_f64(out, s.config.beta2);
    put_f64(out, s.config.epsilon);
    put_u32(out, static_cast<std::uint32_t>(s.trainable.size()));
    for (bool t : s.trainable) out.put(t ? 1 : 0);
}

inline AdamState read_adam(std::istream& in) {
    using namespace io_detail;
    AdamState s;
    s.first_moment = read_params(in);
    s.second_moment = read_params(in);
    s.step = static_cast<std::int64_t>(get_u64(in));
    s.config.learning_rate = get_f64(in);
    s.config.beta1 = get_f64(in);
    s.config.beta2 = get_f64(in);
    s.config.epsilon = get_f64(in);
    const std::uint32_t n = get_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) s.trainable.push_back(get_bytes(in, 1) != 0);
    return s;
}

inline void save_params(const std::filesystem::path& path, const NetworkParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_params(out, params);
}

inline NetworkParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return read_params(in);
}

inline void save_adam(const std::filesystem::path& path, const AdamState& state) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_adam(out, state);
}

inline AdamState load_adam(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return read_adam(in);
}

}  // namespace prft
