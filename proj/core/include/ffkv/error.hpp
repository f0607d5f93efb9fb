#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ffkv {

/// Caller supplied something that violates an operation's precondition.
class InputError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A checkpoint file could not be read or failed validation.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Structured data (annotations, configs) failed validation.
class ValidationError : public std::runtime_error {
public:
    ValidationError(const std::string& what, std::vector<std::string> offending = {})
        : std::runtime_error(what), offending_(std::move(offending)) {}

    const std::vector<std::string>& offending() const noexcept { return offending_; }

private:
    std::vector<std::string> offending_;
};

/// Training produced a non-finite loss.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// An analysis invariant that holds by construction was observed broken.
class InvariantViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A pipeline stage failed; carries the stage name.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

}  // namespace ffkv
