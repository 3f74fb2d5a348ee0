#include "vitdw/threading.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace vitdw {
namespace {

int default_threads() {
  if (const char* env = std::getenv("VITDW_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return std::min(n, 64);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 16u));
}

std::atomic<int> g_threads{0};  // 0 = not yet resolved

// Set while a thread is executing a parallel_for chunk; nested parallel_for
// calls run inline on the calling thread.
thread_local bool tl_in_parallel = false;

// Minimal persistent pool. Workers block on a generation counter; dispatch
// hands every worker a precomputed [begin, end) range. run() is serialized by
// a mutex so concurrent eval-mode forwards from several threads stay safe.
class Pool {
 public:
  explicit Pool(int workers) : ranges_(workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this, i] { worker(i); });
    }
  }

  void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    std::unique_lock run_lock(run_mu_);
    const int workers = static_cast<int>(threads_.size());
    const int64_t chunk = (n + workers) / (workers + 1);
    {
      std::unique_lock lock(mu_);
      fn_ = &fn;
      pending_ = 0;
      for (int i = 0; i < workers; ++i) {
        int64_t begin = std::min<int64_t>(n, chunk * (i + 1));
        int64_t end = std::min<int64_t>(n, chunk * (i + 2));
        ranges_[i] = {begin, end};
        if (begin < end) ++pending_;
      }
      ++generation_;
    }
    cv_.notify_all();
    if (chunk > 0) {
      tl_in_parallel = true;
      fn(0, std::min<int64_t>(n, chunk));  // caller takes the first chunk
      tl_in_parallel = false;
    }
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void worker(int index) {
    tl_in_parallel = true;
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int64_t, int64_t)>* fn = nullptr;
      int64_t begin = 0, end = 0;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return generation_ != seen; });
        seen = generation_;
        begin = ranges_[index].first;
        end = ranges_[index].second;
        fn = fn_;
      }
      if (fn && begin < end) {
        (*fn)(begin, end);
        std::unique_lock lock(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex run_mu_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  std::vector<std::pair<int64_t, int64_t>> ranges_;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  int pending_ = 0;
  uint64_t generation_ = 0;
};

Pool* pool_instance(int workers) {
  static Pool* pool = new Pool(workers);  // lives for the process
  return pool;
}

}  // namespace

int num_threads() {
  int n = g_threads.load();
  if (n == 0) {
    n = default_threads();
    g_threads.store(n);
  }
  return n;
}

void set_num_threads(int n) {
  g_threads.store(std::max(1, n));
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  const int threads = num_threads();
  if (threads == 1 || n < 64 || tl_in_parallel) {
    fn(0, n);
    return;
  }
  pool_instance(threads - 1)->run(n, fn);
}

}  // namespace vitdw
