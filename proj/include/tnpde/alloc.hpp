#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace tnpde {

/// Training allocates and frees many sub-megabyte buffers per epoch. glibc
/// serves those with mmap/munmap by default, which costs more than the
/// arithmetic; keep them on the heap instead. No-op elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace tnpde
