#pragma once

#include <stdexcept>
#include <string>

namespace cmml {

// Error taxonomy: ConfigError / ParseError map to CLI exit code 1,
// everything else to exit code 2.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] inline void raise_shape(const std::string& msg) { throw ShapeError(msg); }
}  // namespace detail

// Always-on invariant check (independent of NDEBUG).
#define CMML_CHECK(cond, msg)                        \
    do {                                             \
        if (!(cond)) ::cmml::detail::raise_shape(msg); \
    } while (0)

}  // namespace cmml
