// Copyright (c) 2026 ctrlora contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ctrlora {

/// Base class for all engine errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or size mismatch between operands.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

/// Input claimed symmetric but is not, within tolerance.
class SymmetryError : public Error {
public:
    explicit SymmetryError(const std::string& msg) : Error(msg) {}
};

/// Numeric failure: overflow, NaN, or an iteration that failed to converge.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Metric has a non-positive eigenvalue after damping.
class SingularMetricError : public NumericError {
public:
    explicit SingularMetricError(const std::string& msg) : NumericError(msg) {}
};

/// Training loss blew past the divergence guard.
class DivergenceError : public NumericError {
public:
    DivergenceError(const std::string& msg, std::size_t step, double loss,
                    double initial_loss)
        : NumericError(msg), step(step), loss(loss), initial_loss(initial_loss) {}

    std::size_t step;
    double loss;
    double initial_loss;
};

/// Invalid or inconsistent run configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace ctrlora
