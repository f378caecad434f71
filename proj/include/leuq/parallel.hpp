#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace leuq {

// Worker cap: LEUQ_THREADS when set, hardware concurrency otherwise.
inline unsigned worker_count(std::size_t jobs) {
  unsigned cap = std::thread::hardware_concurrency();
  if (cap == 0) cap = 1;
  if (const char* env = std::getenv("LEUQ_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) cap = static_cast<unsigned>(v);
  }
  if (jobs < cap) cap = static_cast<unsigned>(jobs);
  return cap == 0 ? 1 : cap;
}

// Runs f(i) for i in [0, n) on a small worker pool. The first exception is
// rethrown on the calling thread after all workers join.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  if (n == 0) return;
  const unsigned workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mx;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      while (!failed.load(std::memory_order_relaxed)) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) break;
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(error_mx);
          if (!error) error = std::current_exception();
          failed.store(true);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace leuq
