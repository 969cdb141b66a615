// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <exception>
#include <vector>

namespace hilora::detail {

/// Runs body(i) for i in [0, n) on up to `workers` OpenMP threads with a
/// static schedule. The first exception (lowest i) is rethrown after the
/// loop; bodies must only write to per-index slots.
template <class Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
    std::vector<std::exception_ptr> errors(n);
    const long count = static_cast<long>(n);
    const int threads = workers < 1 ? 1 : workers;
#pragma omp parallel for num_threads(threads) schedule(static)
    for (long i = 0; i < count; ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace hilora::detail
