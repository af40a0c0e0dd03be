#pragma once

#include <atomic>
#include <cstdint>

namespace cdit {

// Exact work counters behind the bench command. Counts are incremented by
// the engine itself, never estimated.
struct Counters {
    std::atomic<std::uint64_t> condition_qkv_projections{0};
    std::atomic<std::uint64_t> attention_query_rows{0};

    void reset() {
        condition_qkv_projections = 0;
        attention_query_rows = 0;
    }
};

Counters& counters();

}  // namespace cdit
