#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace ferlite {

// Intra-op worker count. Parallel sections write disjoint ranges; reductions
// combine per-thread partials in a fixed order, so results are bit-stable
// for a fixed thread count. set_num_threads(1) is the strictly sequential
// reference used by the determinism tests.
inline std::atomic<long>& num_threads_atomic() {
  static std::atomic<long> n{
      std::max(1L, static_cast<long>(std::thread::hardware_concurrency()))};
  return n;
}

inline long num_threads() { return num_threads_atomic().load(std::memory_order_relaxed); }
inline void set_num_threads(long n) {
  num_threads_atomic().store(std::max(1L, n), std::memory_order_relaxed);
}

// Runs f(chunk_index, begin, end) over [0, n) split into up to num_threads()
// contiguous chunks. Falls back to a plain call when the work is too small
// to be worth spawning for.
template <typename F>
void parallel_for(long n, long total_work, F&& f) {
  const long nt = std::min(num_threads(), n);
  if (nt <= 1 || n <= 1 || total_work < (1L << 16)) {
    f(0, 0, n);
    return;
  }
  const long chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nt - 1));
  for (long t = 1; t < nt; ++t) {
    const long b = t * chunk, e = std::min(n, (t + 1) * chunk);
    if (b >= e) break;
    workers.emplace_back([&f, t, b, e]() { f(t, b, e); });
  }
  f(0, 0, std::min(chunk, n));
  for (auto& w : workers) w.join();
}

}  // namespace ferlite
