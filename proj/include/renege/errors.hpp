#pragma once

#include <stdexcept>
#include <string>

namespace renege {

// Argument outside the support of a law (x >= H, zero survivor, bad parameters).
class DomainError : public std::domain_error {
public:
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Requested mass level above the total mass of a measure.
class MassExceeded : public std::runtime_error {
public:
    explicit MassExceeded(const std::string& what) : std::runtime_error(what) {}
};

class NoConvergence : public std::runtime_error {
public:
    explicit NoConvergence(const std::string& what) : std::runtime_error(what) {}
};

class HorizonExceeded : public std::runtime_error {
public:
    explicit HorizonExceeded(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace renege
