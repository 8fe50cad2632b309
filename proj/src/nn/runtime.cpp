#include "motionbook/nn/runtime.hpp"

#include <cstdlib>
#include <new>
#include <string>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace motionbook::nn {

std::size_t thread_limit() {
  const char* v = std::getenv("MOTIONBOOK_THREADS");
  if (!v) return 1;
  try {
    const long n = std::stol(v);
    return n >= 1 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    return 1;
  }
}

void configure_runtime() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  Eigen::setNbThreads(static_cast<int>(thread_limit()));
}

}  // namespace motionbook::nn

// Every heap block starts on a 64-byte boundary, so vectorized reductions
// split their work the same way whatever the heap layout is and results are
// reproducible bit for bit across runs.
namespace {

constexpr std::size_t kAlign = 64;

void* aligned_or_null(std::size_t n) noexcept {
  const std::size_t size = n == 0 ? kAlign : (n + kAlign - 1) / kAlign * kAlign;
  return std::aligned_alloc(kAlign, size);
}

void* aligned_or_throw(std::size_t n) {
  if (void* p = aligned_or_null(n)) return p;
  throw std::bad_alloc();
}

}  // namespace

void* operator new(std::size_t n) { return aligned_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
