#pragma once

#include <cstddef>
#include <functional>

namespace embedlens {

// Runs fn(i) for i in [0, count) on up to `threads` workers. Work items are
// claimed from a shared counter; callers write results into slot i so the
// assembled output never depends on scheduling.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace embedlens
