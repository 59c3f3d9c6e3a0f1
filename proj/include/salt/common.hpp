#pragma once

// Shared error taxonomy and small utilities used across the toolkit.

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

namespace salt {

enum class ErrorKind {
  Usage,       // bad command line
  Config,      // invalid or inconsistent configuration
  Dimension,   // tensor shape mismatch
  Contract,    // broken internal API contract
  Degenerate,  // empty batch / empty mask / unsatisfiable request
  Io,          // filesystem failure
  Corruption,  // damaged artifact on disk
  Numeric,     // NaN/Inf detected
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename Head, typename... Tail>
void cat_into(std::ostringstream& os, Head&& head, Tail&&... tail) {
  os << head;
  cat_into(os, std::forward<Tail>(tail)...);
}
}  // namespace detail

template <typename... Parts>
std::string cat(Parts&&... parts) {
  std::ostringstream os;
  detail::cat_into(os, std::forward<Parts>(parts)...);
  return os.str();
}

template <typename... Parts>
[[noreturn]] void fail(ErrorKind kind, Parts&&... parts) {
  throw Error(kind, cat(std::forward<Parts>(parts)...));
}

template <typename... Parts>
void check(bool ok, ErrorKind kind, Parts&&... parts) {
  if (!ok) fail(kind, std::forward<Parts>(parts)...);
}

// Rounding convention for fractional counts: round half away from zero.
inline int64_t round_half_up(double x) { return static_cast<int64_t>(std::floor(x + 0.5)); }

// FNV-1a over bytes; stable across platforms, used for checksums and stream labels.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

}  // namespace salt
