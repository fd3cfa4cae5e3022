#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string_view>
#include <thread>
#include <vector>

namespace onconet {

namespace detail {

inline bool env_deterministic() {
  const char* v = std::getenv("ONCONET_DETERMINISTIC");
  return v != nullptr && std::string_view(v) == "1";
}

inline bool& deterministic_flag() {
  static bool on = env_deterministic();
  return on;
}

}  // namespace detail

/// Deterministic mode forces serial execution and a fixed reduction order.
/// Initialised from ONCONET_DETERMINISTIC=1.
inline bool deterministic() { return detail::deterministic_flag(); }
inline void set_deterministic(bool on) { detail::deterministic_flag() = on; }

inline unsigned worker_count() {
  if (deterministic()) return 1;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Each index must write disjoint memory.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(worker_count(), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace onconet
