#pragma once

#include <cstddef>

namespace motionbook::nn {

// Process-wide setup for training: keeps large activation buffers on the heap
// instead of mapping fresh pages per op, and applies MOTIONBOOK_THREADS to
// Eigen. Safe to call repeatedly.
void configure_runtime();

// Value of MOTIONBOOK_THREADS, or 1 when unset or invalid.
std::size_t thread_limit();

}  // namespace motionbook::nn
