#pragma once
#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cloudtomo {

/// Execution settings shared by the parallel stages.
struct Exec {
  int workers = 1;

  static Exec hardware() {
    Exec e;
    e.workers = static_cast<int>(std::thread::hardware_concurrency());
    if (e.workers < 1) e.workers = 1;
    return e;
  }
};

/// Runs fn(block) for block in [0, nblocks). Blocks may run on any worker;
/// callers own determinism by writing block results to disjoint slots and
/// reducing them in block order afterwards.
inline void parallel_blocks(int nblocks, const Exec& exec, const std::function<void(int)>& fn) {
  if (nblocks <= 0) return;
  int workers = std::min(exec.workers, nblocks);
  if (workers <= 1) {
    for (int b = 0; b < nblocks; ++b) fn(b);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int b = next.fetch_add(1);
        if (b >= nblocks || failed.load()) break;
        try {
          fn(b);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          failed.store(true);
          break;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace cloudtomo
