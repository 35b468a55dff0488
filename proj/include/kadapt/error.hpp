#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kadapt {

/// Error families. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind {
  Dimension,
  Symmetry,
  Convergence,
  NotPsd,
  UnsupportedOp,
  InsufficientSamples,
  Format,
  Domain,
  Index,
  Parameter,
  EmptyInput,
  Label,
  Sampler,
  Protocol,
  Data,
  State,
  Config,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Symmetry: return "symmetry";
    case ErrorKind::Convergence: return "convergence";
    case ErrorKind::NotPsd: return "not-psd";
    case ErrorKind::UnsupportedOp: return "unsupported-op";
    case ErrorKind::InsufficientSamples: return "insufficient-samples";
    case ErrorKind::Format: return "format";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Index: return "index";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::EmptyInput: return "empty-input";
    case ErrorKind::Label: return "label";
    case ErrorKind::Sampler: return "sampler";
    case ErrorKind::Protocol: return "protocol";
    case ErrorKind::Data: return "data";
    case ErrorKind::State: return "state";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace kadapt
