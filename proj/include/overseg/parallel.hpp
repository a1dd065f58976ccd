#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace overseg {

// Kernel parallelism cap, read from OVERSEG_THREADS (default 1).
inline int thread_count() {
  static const int n = [] {
    const char* env = std::getenv("OVERSEG_THREADS");
    if (!env) return 1;
    try {
      return std::max(1, std::stoi(env));
    } catch (...) {
      return 1;
    }
  }();
  return n;
}

// Runs fn(i) for i in [0, n). Work items must write disjoint memory; the split
// never changes what an individual item computes, so results do not depend on
// the thread count.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
  const int threads = static_cast<int>(std::min<std::int64_t>(thread_count(), n));
  if (threads <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::int64_t i = t; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

}  // namespace overseg
