#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace polymerlab {

namespace detail {
inline std::atomic<unsigned>& worker_override() {
  static std::atomic<unsigned> n{0};
  return n;
}

// Set on pool workers so nested parallel_for calls run inline.
inline bool& inside_pool() {
  thread_local bool flag = false;
  return flag;
}
}  // namespace detail

/// Worker count: explicit override, else POLYMERLAB_THREADS, else hardware.
inline unsigned worker_count() {
  if (unsigned n = detail::worker_override().load(); n > 0) return n;
  if (const char* env = std::getenv("POLYMERLAB_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n > 0) return static_cast<unsigned>(n);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void set_worker_count(unsigned n) { detail::worker_override().store(n); }

/// Runs body(i) for i in [0, n) on a pool of workers. Tasks must write only
/// to their own slot; the first exception thrown is rethrown on the caller.
/// Calls made from inside a worker run serially on that worker.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, unsigned workers = 0) {
  if (n == 0) return;
  if (workers == 0) workers = worker_count();
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  if (workers <= 1 || detail::inside_pool()) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    detail::inside_pool() = true;
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
        return;
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run);
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace polymerlab
