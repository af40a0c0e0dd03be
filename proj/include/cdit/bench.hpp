#pragma once

#include <string>
#include <vector>

#include "cdit/kvcache.hpp"

namespace cdit {

// One timed configuration. Counts come from the instrumentation counters and
// are exact; times are medians over the repetitions with raw samples kept.
struct BenchRun {
    int conditions = 0;
    bool cached = false;
    double median_ms = 0;
    std::vector<double> samples_ms;
    std::uint64_t condition_projections = 0;
    std::uint64_t attention_rows = 0;
};

struct BenchReport {
    int sampler_steps = 0;
    int repetitions = 0;
    std::vector<BenchRun> runs;

    const BenchRun& find(int conditions, bool cached) const;
    double speedup(int conditions) const;  // uncached / cached median
};

// Times cached vs uncached generation for 1 and 2 conditions (spatial, then
// spatial+subject), with one warm-up run per configuration before timing.
BenchReport run_bench(const DitModel& model, const LoraAdapter& spatial,
                      const LoraAdapter& subject, const ToyImage& spatial_cond,
                      const ToyImage& subject_cond, const std::vector<int>& prompt, int steps,
                      int repetitions, std::uint64_t seed);

// CSV with a header row; one line per (conditions, cached, sample).
void write_bench_csv(const BenchReport& report, const std::string& path);

}  // namespace cdit
