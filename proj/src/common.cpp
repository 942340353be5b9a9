#include "supergseg/common.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace supergseg {

namespace {
std::atomic<std::size_t> g_workers{0};
std::atomic<bool> g_logging{true};
std::mutex g_log_mutex;
}  // namespace

std::size_t worker_count() {
  std::size_t n = g_workers.load();
  if (n == 0) {
    n = std::clamp<std::size_t>(std::thread::hardware_concurrency(), 1, 8);
  }
  return n;
}

void set_worker_count(std::size_t n) { g_workers.store(n); }

void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(n, 1));
  if (workers <= 1 || n < 2) {
    fn(0, n, 0);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::jthread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
  }
}

void log_info(const std::string& message) {
  if (!g_logging.load()) return;
  std::lock_guard lock(g_log_mutex);
  std::clog << "[supergseg] " << message << '\n';
}

void set_logging(bool enabled) { g_logging.store(enabled); }

}  // namespace supergseg
