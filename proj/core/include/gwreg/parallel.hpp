#pragma once

#include <cstdint>

namespace gwreg {

/// Parallel loop over independent work items. Each item must write only to
/// its own output slice; reductions across items are done serially by the
/// caller afterwards. This keeps results bit-identical for any thread count.
template <class F>
void parallel_for(int64_t n, const F& f) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) f(i);
}

}  // namespace gwreg
