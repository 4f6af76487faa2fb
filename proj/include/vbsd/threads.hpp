#pragma once

#include <cstdlib>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "vbsd/error.hpp"

namespace vbsd {

// Worker cap: VBSD_THREADS if set, else hardware concurrency.
inline std::size_t max_threads() {
  if (const char* env = std::getenv("VBSD_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    require(end != env && *end == '\0' && v >= 1, "VBSD_THREADS must be a positive integer");
    return std::size_t(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

// Runs body(i) for i in [0, n) partitioned over threads. Each index writes
// only its own output slot and draws from its own rng stream, so results are
// identical for any thread count (including 1).
template <class F>
void parallel_for(std::size_t n, const F& body) {
  std::size_t workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error = nullptr;
  std::mutex error_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace vbsd
