#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace feedrank {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input. `line()` is 1-based, 0 when not tied to a line.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Data violates a uniqueness or consistency rule (duplicate ids, conflicting grades).
class IntegrityError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Not enough judged documents in a ranking to build a feedback set.
class InfeasibleQueryError : public PreconditionError {
public:
    using PreconditionError::PreconditionError;
};

/// Tensor or vector dimensions disagree.
class ShapeError : public Error {
public:
    using Error::Error;
};

}  // namespace feedrank
