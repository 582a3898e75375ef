#pragma once

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace visa {

// All library errors derive from this so callers can catch one type at the
// CLI boundary and still branch on the specific failure in tests.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct DtypeError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct LeakageError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

std::string strformat(const char* fmt, ...) __attribute__((format(printf, 1, 2)));

// Diagnostics go to stderr so CSV/stdout output of the tools stays clean.
void log_warn(const std::string& msg);
void log_info(const std::string& msg);

template <typename E = Error>
[[noreturn]] inline void fail(const std::string& msg) {
  throw E(msg);
}

// FNV-1a over raw bytes; used for config/manifest fingerprints in run summaries.
uint64_t fnv1a64(const void* data, size_t n);
uint64_t fnv1a64_file(const std::string& path);

}  // namespace visa
