#pragma once

#include <stdexcept>
#include <string>

namespace fraccal {

/// Invalid or inconsistent configuration (mesh not fitted, bad parameter rule, ...).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Failure of a numerical stage: singular system, failed factorization.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the domain of a mathematical function (e.g. kernel at x == y).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Wraps an error raised inside a pipeline stage with the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what, bool numerical)
        : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)), numerical_(numerical) {}

    const std::string& stage() const noexcept { return stage_; }
    bool numerical() const noexcept { return numerical_; }

private:
    std::string stage_;
    bool numerical_;
};

}  // namespace fraccal
