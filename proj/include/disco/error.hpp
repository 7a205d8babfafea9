#pragma once

#include <stdexcept>
#include <string>

namespace disco {

enum class errc {
  parse,       // malformed input text
  vocab,       // label not in a loaded vocabulary
  reference,   // edge points at a missing node
  constraint,  // value violates a structural invariant
  shape,       // tensor shape mismatch
  nonfinite,   // NaN/inf where finite values are required
  io,          // file missing or unreadable
  corrupt,     // file readable but malformed/truncated
  version,     // checkpoint version mismatch
  internal,
};

class error : public std::runtime_error {
public:
  error(errc kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  errc kind() const noexcept { return kind_; }

private:
  errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string& what) { throw error(kind, what); }

} // namespace disco
