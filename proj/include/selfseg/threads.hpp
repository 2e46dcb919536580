#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace selfseg {

/// Worker cap for internal parallelism. 0 means "use hardware concurrency".
/// Results must never depend on this value; parallel loops only ever write to
/// disjoint, pre-allocated slots.
int effective_threads(int requested);

/// Resolve the cap from SELFSEG_THREADS when requested == 0.
int threads_from_env(int requested);

/// Runs fn(i) for i in [0, n). Each fn(i) must touch only its own outputs.
/// threads == 0 defers to SELFSEG_THREADS, then hardware concurrency.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const int workers = effective_threads(threads_from_env(threads));
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const std::size_t count = static_cast<std::size_t>(workers) < n
                                ? static_cast<std::size_t>(workers)
                                : n;
  pool.reserve(count);
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::mutex error_mutex;
  for (std::size_t t = 0; t < count; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!failed.exchange(true)) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failed.load()) std::rethrow_exception(error);
}

}  // namespace selfseg
