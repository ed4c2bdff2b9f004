#pragma once

// Flush-to-zero for the duration of a scope. Gaussian Gram entries of far
// apart points underflow into subnormals, and arithmetic on subnormals is
// one to two orders of magnitude slower on x86. Results differ from the
// default mode only below the smallest normal double.

#if defined(__SSE__) || defined(_M_X64)
#include <pmmintrin.h>
#include <xmmintrin.h>
#define KMC_HAS_MXCSR 1
#endif

namespace kmc {

class ScopedFlushToZero {
 public:
  ScopedFlushToZero() {
#ifdef KMC_HAS_MXCSR
    saved_ = _mm_getcsr();
    _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
    _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
#endif
  }
  ~ScopedFlushToZero() {
#ifdef KMC_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  ScopedFlushToZero(const ScopedFlushToZero&) = delete;
  ScopedFlushToZero& operator=(const ScopedFlushToZero&) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace kmc
