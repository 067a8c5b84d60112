#pragma once

#include <stdexcept>
#include <string>

namespace icrdn {

enum class ErrorKind {
    Config,      // malformed or unknown configuration input
    Validation,  // a precondition or invariant was violated
    Dependency,  // an upstream stage, model or artifact is missing
    Training,    // optimisation diverged
    Io,          // filesystem / codec failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] auto kind() const noexcept -> ErrorKind { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

class DependencyError : public Error {
public:
    explicit DependencyError(const std::string& what) : Error(ErrorKind::Dependency, what) {}
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, long last_finite_step)
        : Error(ErrorKind::Training, what), last_finite_step_(last_finite_step) {}
    [[nodiscard]] auto last_finite_step() const noexcept -> long { return last_finite_step_; }

private:
    long last_finite_step_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

// Throws ValidationError with `message` unless `condition` holds.
inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ValidationError(message);
    }
}

}  // namespace icrdn
