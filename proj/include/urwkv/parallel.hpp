#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace urwkv {

namespace detail {
inline std::atomic<std::size_t>& thread_cap_storage() {
  static std::atomic<std::size_t> cap = [] {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("URWKV_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
      } catch (...) {
      }
    }
    return n;
  }();
  return cap;
}
}  // namespace detail

/// Worker-thread cap; defaults to the hardware count, lowered by URWKV_THREADS.
inline std::size_t thread_cap() { return detail::thread_cap_storage().load(); }
inline void set_thread_cap(std::size_t n) { detail::thread_cap_storage().store(std::max<std::size_t>(1, n)); }

/// Runs fn(begin, end) over disjoint ranges of [0, n). Each index is handled by
/// exactly one call, so results never depend on the thread count.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t work_per_item, Fn&& fn) {
  constexpr std::size_t min_work_per_thread = 1 << 16;
  const std::size_t by_work = std::max<std::size_t>(1, n * std::max<std::size_t>(1, work_per_item) / min_work_per_thread);
  const std::size_t threads = std::min({thread_cap(), n, by_work});
  if (threads <= 1) {
    if (n) fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(std::size_t{0}, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace urwkv
