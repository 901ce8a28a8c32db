#pragma once

#include <stdexcept>
#include <string>

namespace nfaseg {

/// Stable error categories. The CLI maps these to single-line
/// machine-parseable diagnostics and nonzero exit codes.
enum class ErrorCode {
    Parameter,  // bad argument or shape mismatch
    Domain,     // math domain violation
    Numerical,  // iteration failed to converge, non-PD matrix, NaN loss
    Format,     // malformed file contents
    Io,         // filesystem failure
    Config,     // bad or unknown configuration key
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::Parameter: return "parameter_error";
        case ErrorCode::Domain: return "domain_error";
        case ErrorCode::Numerical: return "numerical_error";
        case ErrorCode::Format: return "format_error";
        case ErrorCode::Io: return "io_error";
        case ErrorCode::Config: return "config_error";
    }
    return "unknown_error";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void throw_parameter(const std::string& msg) { throw Error(ErrorCode::Parameter, msg); }
[[noreturn]] inline void throw_domain(const std::string& msg) { throw Error(ErrorCode::Domain, msg); }
[[noreturn]] inline void throw_numerical(const std::string& msg) { throw Error(ErrorCode::Numerical, msg); }
[[noreturn]] inline void throw_format(const std::string& msg) { throw Error(ErrorCode::Format, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(ErrorCode::Io, msg); }
[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrorCode::Config, msg); }

}  // namespace nfaseg
