#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <exception>
#include <iostream>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace selfinject {

inline constexpr std::string_view kPipelineVersion = "selfinject-1.0.0";

// Error hierarchy. Each category maps onto one CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  [[nodiscard]] virtual int exit_code() const noexcept { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 2; }
};

class InputError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
 public:
  using Error::Error;
  [[nodiscard]] int exit_code() const noexcept override { return 4; }
};

class BackendError : public Error {
 public:
  enum class Kind { kTransport, kRejection, kTimeout, kCapability };

  BackendError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }
  [[nodiscard]] bool retryable() const noexcept { return kind_ == Kind::kTransport; }
  [[nodiscard]] int exit_code() const noexcept override { return 5; }

 private:
  Kind kind_;
};

// ---------------------------------------------------------------------------
// Logging. Warnings go to a replaceable sink so tests can capture them.

enum class LogLevel { kInfo, kWarning, kError };

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {
inline std::mutex& log_mutex() {
  static std::mutex m;
  return m;
}
inline LogSink& log_sink() {
  static LogSink sink = [](LogLevel level, std::string_view msg) {
    const char* tag = level == LogLevel::kInfo ? "info" : level == LogLevel::kWarning ? "warning" : "error";
    std::cerr << "[" << tag << "] " << msg << '\n';
  };
  return sink;
}
}  // namespace detail

inline LogSink set_log_sink(LogSink sink) {
  std::lock_guard lock(detail::log_mutex());
  return std::exchange(detail::log_sink(), std::move(sink));
}

inline void log(LogLevel level, std::string_view msg) {
  std::lock_guard lock(detail::log_mutex());
  if (detail::log_sink()) detail::log_sink()(level, msg);
}

inline void log_warning(std::string_view msg) { log(LogLevel::kWarning, msg); }
inline void log_info(std::string_view msg) { log(LogLevel::kInfo, msg); }

// ---------------------------------------------------------------------------
// Deterministic hashing and seeding. std::hash is not stable across
// platforms, so sample ids are hashed with FNV-1a.

inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Worker seed for one sample at one iteration:
/// splitmix64(splitmix64(master ^ fnv1a64(sample_id)) + iteration).
inline std::uint64_t derive_seed(std::uint64_t master_seed, std::string_view sample_id,
                                 std::uint64_t iteration) noexcept {
  return splitmix64(splitmix64(master_seed ^ fnv1a64(sample_id)) + iteration);
}

/// Seeded random source with platform-independent draws. The standard
/// distributions are implementation-defined, so doubles and bounded
/// integers are derived from the raw mt19937_64 stream here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % bound);
  }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// String helpers.

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline bool is_space(char c) noexcept {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::string_view trim(std::string_view s) noexcept {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

/// Trims and collapses every whitespace run to a single space.
inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : trim(s)) {
    if (is_space(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(s.substr(start));
      break;
    }
    parts.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return parts;
}

template <typename Range>
std::string join(const Range& parts, std::string_view sep) {
  std::string out;
  bool first = true;
  for (const auto& p : parts) {
    if (!first) out.append(sep);
    out.append(p);
    first = false;
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Bounded parallel loop with deterministic result placement: each index
// writes only its own slot, so output order never depends on scheduling.

template <typename Fn>
void parallel_for(std::size_t n, std::size_t max_workers, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(max_workers, n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace selfinject
