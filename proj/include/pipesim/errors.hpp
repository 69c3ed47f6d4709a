// Copyright (C) 2026 pipesim contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace pipesim {

/// Base class for all pipesim errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller-supplied spec or parameter violates its invariants.
class InvalidSpecError : public Error {
public:
    using Error::Error;
};

/// A constrained problem (partition, allocation) has no feasible solution.
class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// A file could not be parsed; message names the offending line/field.
class ParseError : public Error {
public:
    using Error::Error;
};

/// An analytic model was evaluated outside its region of convergence.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// The event loop stopped with work pending.
class DeadlockError : public Error {
public:
    using Error::Error;
};

}  // namespace pipesim
