#pragma once

#include <stdexcept>
#include <string>

namespace affine_reserve {

/// Malformed or inconsistent input data. `path` names the offending key or
/// argument when one is known.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what, std::string path = {})
        : std::invalid_argument(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}

    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

/// The optimization problem has no feasible point (or was built so that it
/// cannot have one).
class InfeasibleError : public std::runtime_error {
public:
    explicit InfeasibleError(const std::string& what, std::string label = {})
        : std::runtime_error(what), label_(std::move(label)) {}

    const std::string& label() const noexcept { return label_; }

private:
    std::string label_;
};

/// Solver breakdown, tolerance miss or failed post-solve audit.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what, std::string label = {})
        : std::runtime_error(what), label_(std::move(label)) {}

    const std::string& label() const noexcept { return label_; }

private:
    std::string label_;
};

}  // namespace affine_reserve
