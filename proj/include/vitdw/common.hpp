#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vitdw {

// Error taxonomy shared by all modules. Everything derives from std::runtime_error
// so callers that do not care about the kind can catch one type.
enum class ErrorKind {
  shape,     // operand dimensions incompatible
  config,    // invalid configuration field
  contract,  // API precondition violated
  format,    // malformed external data (dataset files, checkpoints)
  io,        // filesystem failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape(bool ok, const std::string& message) {
  if (!ok) fail(ErrorKind::shape, message);
}

inline void check_config(bool ok, const std::string& message) {
  if (!ok) fail(ErrorKind::config, message);
}

inline void check_contract(bool ok, const std::string& message) {
  if (!ok) fail(ErrorKind::contract, message);
}

}  // namespace vitdw
