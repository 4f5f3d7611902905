#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace echoseg {

namespace detail {
inline std::atomic<int>& thread_count_ref() {
  static std::atomic<int> count{1};
  return count;
}
}  // namespace detail

/// Worker count used by batch-parallel operators. Defaults to 1.
inline int num_threads() { return detail::thread_count_ref().load(std::memory_order_relaxed); }

inline void set_num_threads(int n) {
  detail::thread_count_ref().store(std::max(1, n), std::memory_order_relaxed);
}

/// Runs body(i) for i in [0, n). Work items must be independent; every
/// reduction across items happens afterwards in index order, so results do
/// not depend on the thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace echoseg
