#include "timbre/work_pool.hpp"

#include <algorithm>

namespace timbre {

WorkPool::WorkPool(std::size_t workers) {
  const std::size_t n = std::max<std::size_t>(1, workers);
  threads_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    threads_.emplace_back([this](std::stop_token st) { run(st); });
  }
}

WorkPool::~WorkPool() {
  for (auto& t : threads_) t.request_stop();
  ready_.notify_all();
}

void WorkPool::submit(std::function<void()> task) {
  {
    std::lock_guard lock(mutex_);
    queue_.push_back(std::move(task));
    ++outstanding_;
  }
  ready_.notify_one();
}

void WorkPool::wait() {
  std::unique_lock lock(mutex_);
  idle_.wait(lock, [this] { return outstanding_ == 0; });
  if (error_) {
    auto e = std::exchange(error_, nullptr);
    std::rethrow_exception(e);
  }
}

void WorkPool::run(std::stop_token stop) {
  while (true) {
    std::function<void()> task;
    {
      std::unique_lock lock(mutex_);
      if (!ready_.wait(lock, stop, [this] { return !queue_.empty(); })) return;
      task = std::move(queue_.front());
      queue_.pop_front();
    }
    try {
      task();
    } catch (...) {
      std::lock_guard lock(mutex_);
      if (!error_) error_ = std::current_exception();
    }
    std::lock_guard lock(mutex_);
    if (--outstanding_ == 0) idle_.notify_all();
  }
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  WorkPool pool(std::min(workers, n));
  for (std::size_t i = 0; i < n; ++i) pool.submit([&fn, i] { fn(i); });
  pool.wait();
}

}  // namespace timbre
