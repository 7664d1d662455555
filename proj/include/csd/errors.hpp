#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace csd {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A non-finite coefficient appeared while expanding a field.
struct EvalError : Error {
    std::vector<int> multi_index;
    EvalError(const std::string& msg, std::vector<int> mi)
        : Error(msg), multi_index(std::move(mi)) {}
};

/// Base points of composed jets disagree beyond tolerance.
struct CompositionError : Error {
    using Error::Error;
};

/// Singular or ill-conditioned Jacobian during map inversion.
struct InversionError : Error {
    using Error::Error;
};

/// An operation needs derivatives beyond the available jet order.
struct OrderBudgetError : Error {
    int needed;
    OrderBudgetError(const std::string& msg, int needed_order)
        : Error(msg), needed(needed_order) {}
};

/// log/sqrt/fractional power applied outside its domain.
struct DomainError : Error {
    using Error::Error;
};

/// Expression-language parse failure. `offset` is a byte offset into the source.
struct ParseError : Error {
    size_t offset;
    std::string expected;
    ParseError(const std::string& msg, size_t off, std::string exp = {})
        : Error(msg), offset(off), expected(std::move(exp)) {}
};

struct UnboundParameterError : Error {
    std::string name;
    explicit UnboundParameterError(const std::string& param)
        : Error("unbound parameter: " + param), name(param) {}
};

struct SingularMetricError : Error {
    using Error::Error;
};

/// Fractional power of a non-positive Jacobian determinant.
struct OrientationError : Error {
    using Error::Error;
};

/// A weight hit an excluded (resonant) value of an existence theorem.
struct ResonanceError : Error {
    std::string excluded;
    ResonanceError(const std::string& msg, std::string excluded_value)
        : Error(msg), excluded(std::move(excluded_value)) {}
};

struct DimensionError : Error {
    using Error::Error;
};

/// A probe point fell on (or too near) the singular locus of a map.
struct ProbeSingularError : Error {
    using Error::Error;
};

/// Surface operators were asked to run without conformal-flattening data.
struct FlatteningError : Error {
    using Error::Error;
};

/// Scenario- or CLI-level configuration problem (exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

} // namespace csd
