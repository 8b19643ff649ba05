// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace smd {

/// Worker count: SMD_WORKERS if set and positive, else the hardware thread count.
inline int default_workers() {
    if (const char *env = std::getenv("SMD_WORKERS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return n;
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Splits [0, n) into contiguous chunks, one per worker, and runs fn(chunk,
/// begin, end) on each. Chunk boundaries depend only on n and the worker count,
/// so callers that reduce per-chunk results in chunk order are deterministic.
/// The first exception thrown by any worker is rethrown.
template <class F>
void parallel_chunks(size_t n, int workers, F &&fn) {
    const size_t w = std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(std::max(workers, 1)), n));
    if (w <= 1) {
        fn(size_t{0}, size_t{0}, n);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(w);
    for (size_t c = 0; c < w; ++c) {
        const size_t begin = n * c / w;
        const size_t end = n * (c + 1) / w;
        threads.emplace_back([&, c, begin, end] {
            try {
                fn(c, begin, end);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        });
    }
    for (auto &t : threads) {
        t.join();
    }
    for (auto &e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

/// Number of chunks parallel_chunks will use.
inline size_t chunk_count(size_t n, int workers) {
    return std::max<size_t>(1, std::min<size_t>(static_cast<size_t>(std::max(workers, 1)), n));
}

}  // namespace smd
