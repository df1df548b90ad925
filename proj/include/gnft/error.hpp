#pragma once

#include <stdexcept>
#include <string>

namespace gnft {

/// Invalid call arguments (counts, ratios, ids, shapes).
class ArgumentError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Missing or unreadable inputs on disk. The message names the path.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or incompatible file contents (non-mono audio, bad checkpoint).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Class with too few samples to stratify.
class StratificationError : public ArgumentError {
public:
    using ArgumentError::ArgumentError;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ArgumentError(what);
}

}  // namespace detail
}  // namespace gnft
