#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dis {

/// Columns per work item. Fixed so that results never depend on the thread count.
inline constexpr std::size_t kChunkSize = 256;

/// Runs fn(begin, end) over [0, n) in fixed-size chunks. Chunk boundaries are independent
/// of `threads`; callers that reduce across chunks must do so in chunk order.
inline void parallel_chunks(std::size_t n, std::size_t threads,
                            const std::function<void(std::size_t chunk, std::size_t begin, std::size_t end)>& fn,
                            std::size_t chunk_size = kChunkSize) {
  const std::size_t chunks = (n + chunk_size - 1) / chunk_size;
  auto run = [&](std::size_t c) { fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size)); };
  if (threads <= 1 || chunks <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) {
      run(c);
    }
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t workers = std::min(threads, chunks);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks; c += workers) {
        try {
          run(c);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) {
            error = std::current_exception();
          }
        }
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  if (error) {
    std::rethrow_exception(error);
  }
}

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size = kChunkSize) {
  return (n + chunk_size - 1) / chunk_size;
}

}  // namespace dis
