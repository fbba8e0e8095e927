#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace adp {

/// Worker thread cap. Reads ADP_THREADS once; falls back to the hardware
/// concurrency. Always at least 1.
inline std::size_t worker_threads() {
  static const std::size_t count = [] {
    if (const char* env = std::getenv("ADP_THREADS")) {
      try {
        long v = std::stol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
      } catch (...) {
      }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }();
  return count;
}

/// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is handled
/// by exactly one call, so results written per index do not depend on the
/// thread count. Small ranges run inline.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t min_chunk, Fn&& fn) {
  const std::size_t threads =
      std::min(worker_threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (threads <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t chunk = (n + threads - 1) / threads;
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace adp
