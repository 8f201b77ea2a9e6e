#ifndef STIMPUTE_PARALLEL_HPP
#define STIMPUTE_PARALLEL_HPP

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "stimpute/tensor.hpp"

namespace stimpute {

/// Worker count: STIMPUTE_THREADS if set and positive, else the hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("STIMPUTE_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return static_cast<unsigned>(n);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(begin, end) on contiguous chunks of [0, n). The first exception thrown is rethrown.
template <typename Fn>
void parallel_chunks(Index n, Fn&& fn, unsigned workers = worker_count()) {
  if (n <= 0) return;
  const Index count = std::min<Index>(workers, n);
  if (count <= 1) {
    fn(Index{0}, n);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  for (Index w = 0; w < count; ++w) {
    const Index begin = n * w / count, end = n * (w + 1) / count;
    threads.emplace_back([&, w, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace stimpute

#endif  // STIMPUTE_PARALLEL_HPP
