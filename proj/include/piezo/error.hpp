#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace piezo {

/// Parameter outside the mathematical domain of an operation (order a outside (0,1), etc.).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Invalid or inconsistent configuration. Carries every violation found, not just the first.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(std::vector<std::string> violations)
        : std::invalid_argument(join(violations)), violations_(std::move(violations)) {}

    explicit ConfigError(const std::string& what)
        : ConfigError(std::vector<std::string>{what}) {}

    const std::vector<std::string>& violations() const noexcept { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) out += "; ";
            out += v[i];
        }
        return out;
    }

    std::vector<std::string> violations_;
};

/// A numerical invariant failed at run time (energy growth, singular solve, ...).
class InvariantError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace piezo
