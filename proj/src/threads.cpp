#include "selfseg/threads.hpp"

#include <string>

namespace selfseg {

int effective_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int threads_from_env(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SELFSEG_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
      // fall through to hardware default
    }
  }
  return 0;
}

}  // namespace selfseg
