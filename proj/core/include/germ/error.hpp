#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace germ {

// All recoverable failures carry a short machine-parsable code next to the
// human-readable message. The CLI prints "error[CODE]: message" and exits
// nonzero.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool cond, const std::string& code, const std::string& message) {
  if (!cond) fail(code, message);
}

}  // namespace germ
