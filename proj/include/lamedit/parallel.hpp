#pragma once

#include "lamedit/core.hpp"

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace lamedit {

// Worker count from LAMEDIT_WORKERS; 1 when unset. Anything but a positive
// integer is a config error.
inline std::size_t workers_from_env() {
  const char* v = std::getenv("LAMEDIT_WORKERS");
  if (v == nullptr || *v == '\0') return 1;
  std::size_t used = 0;
  long n = 0;
  try {
    n = std::stol(v, &used);
  } catch (...) {
    used = 0;
  }
  if (used != std::strlen(v) || n < 1) throw ConfigError(std::string("LAMEDIT_WORKERS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

// Runs fn(i) for i in [0, n). Every task writes only its own slot, so the
// result is independent of scheduling. The first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace lamedit
