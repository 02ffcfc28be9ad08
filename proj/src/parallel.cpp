#include "driftalign/parallel.hpp"

namespace driftalign {

namespace {
std::atomic<int> g_threads{0};
}

void set_thread_count(int n) { g_threads = n; }

int thread_count() {
  const int n = g_threads.load();
  if (n > 0) return n;
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace driftalign
