#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace timbre {

/// Fixed-size pool for recursive task trees: tasks may submit further tasks,
/// and wait() returns once the whole tree has drained.
class WorkPool {
 public:
  explicit WorkPool(std::size_t workers);
  ~WorkPool();
  WorkPool(const WorkPool&) = delete;
  WorkPool& operator=(const WorkPool&) = delete;

  void submit(std::function<void()> task);
  /// Blocks until no task is queued or running; rethrows the first task exception.
  void wait();

  std::size_t workers() const { return threads_.size(); }

 private:
  void run(std::stop_token stop);

  std::mutex mutex_;
  std::condition_variable_any ready_;
  std::condition_variable idle_;
  std::deque<std::function<void()>> queue_;
  std::size_t outstanding_ = 0;
  std::exception_ptr error_;
  std::vector<std::jthread> threads_;
};

/// Runs fn(i) for i in [0, n) on `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace timbre
