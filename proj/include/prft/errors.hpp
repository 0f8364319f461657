#pragma once

#include <stdexcept>
#include <string>

namespace prft {

/// A caller broke an operation's precondition (shape mismatch, stepping a
/// finished episode, reading a reward on a reward-free path, ...).
struct ContractViolation : std::logic_error {
    using std::logic_error::logic_error;
};

/// An argument lies outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// A non-finite loss, gradient, or parameter showed up during training.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Attempt to train a frozen reward model, or to relabel with a live one.
struct FreezeViolation : std::logic_error {
    using std::logic_error::logic_error;
};

/// Least-squares fit requested on data with no spread in the regressor.
struct DegenerateFit : std::domain_error {
    using std::domain_error::domain_error;
};

/// Invalid run or sweep configuration. `line` is 0 when not tied to a file line.
struct ConfigError : std::runtime_error {
    ConfigError(const std::string& message, int line = 0)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
          line(line) {}
    int line;
};

}  // namespace prft
