#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace uncspan {

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
///
/// Work is split into fixed-size blocks that do not depend on the thread
/// count, and fn must only write to slot i, so results are identical for
/// any `threads` value. The first exception thrown by a worker is rethrown
/// on the caller.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  if (threads <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t block = 64;
  const std::size_t num_blocks = (n + block - 1) / block;
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;

  auto worker = [&]() {
    for (;;) {
      std::size_t b = next.fetch_add(1);
      if (b >= num_blocks) return;
      std::size_t lo = b * block;
      std::size_t hi = std::min(n, lo + block);
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  int nworkers = std::min<std::size_t>(threads, num_blocks);
  std::vector<std::thread> pool;
  pool.reserve(nworkers);
  for (int t = 0; t < nworkers; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace uncspan
