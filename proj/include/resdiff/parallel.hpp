#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace resdiff {

// Worker cap: RESDIFF_THREADS if set, hardware concurrency otherwise.
inline int worker_count() {
  if (const char* env = std::getenv("RESDIFF_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs f(i) for i in [0, n) over a static chunking of worker threads.
// Each index owns its output slot, so results are identical for any
// thread count; callers must not share mutable state across indices.
template <typename F>
void parallel_for(Eigen::Index n, F&& f) {
  const int workers = std::min<Eigen::Index>(worker_count(), n);
  if (workers <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w) {
    const Eigen::Index lo = n * w / workers;
    const Eigen::Index hi = n * (w + 1) / workers;
    pool.emplace_back([&f, &first_error, &error_mutex, lo, hi] {
      try {
        for (Eigen::Index i = lo; i < hi; ++i) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace resdiff
