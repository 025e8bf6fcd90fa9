#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ssmcast {

// Effective worker count: explicit request wins, then the SSMCAST_THREADS
// environment variable, then hardware concurrency.
int resolve_thread_count(int requested);

// Applies fn(index) for index in [0, n) across `threads` workers. Results are
// stored by input index, so the output (and any reduction over it in index
// order) is independent of scheduling.
template <class Out, class Fn>
std::vector<Out> parallel_map_n(std::size_t n, Fn&& fn, int threads) {
  std::vector<Out> out(n);
  const int workers =
      std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace ssmcast
