#pragma once

#include "cdit/model.hpp"

namespace cdit {

// Uniform descending timesteps t(0)=1 ... t(steps)=0.
struct SamplerSchedule {
    int steps = 25;

    double t_at(int k) const { return 1.0 - static_cast<double>(k) / steps; }
    void validate() const { require(steps >= 1, "schedule: need at least one step"); }
};

// Per-layer, per-condition-block keys (rotation already applied) and values,
// computed once per generation and immutable afterwards.
struct KvCache {
    struct Block {
        Tensor k;  // (count x d)
        Tensor v;
    };

    bool primed = false;
    bool mutual_blocking = true;
    SequencePlan plan;                        // layout + positions of the full sequence
    std::vector<std::vector<Block>> layers;   // [layer][block]
    std::uint64_t primed_hash = 0;

    std::uint64_t content() const;
};

// Runs the condition blocks alone through every layer under their permitted
// attention (own block only; other blocks too when mutual blocking is off)
// and stores each layer's keys and values. Denoising tokens are never seen,
// so the result is valid for every timestep.
KvCache prime_cache(const DitModel& model, const std::vector<ConditionInput>& conditions,
                    const std::vector<const LoraAdapter*>& adapters, bool mutual_blocking);

// Same, into an existing cache; priming twice is an error.
void prime_cache_into(KvCache& cache, const DitModel& model,
                      const std::vector<ConditionInput>& conditions,
                      const std::vector<const LoraAdapter*>& adapters, bool mutual_blocking);

// One denoising step against the cache: fresh projections for the text/noise
// rows only, cached keys/values concatenated behind them, then the Euler
// update x + (t_next - t_cur) * v.
Tensor cached_step(const DitModel& model, const Tensor& x_raw, double t_cur, double t_next,
                   const std::vector<int>& prompt, const KvCache& cache);

struct GenerateOptions {
    std::uint64_t seed = 0;
    SamplerSchedule schedule;
    bool use_cache = true;
    bool mutual_blocking = true;
};

// Full sampling loop; conditions arrive as images with their kinds, adapters
// aligned by order. With use_cache off, the condition branch is recomputed
// at every step under the same masks.
ToyImage generate(const DitModel& model, const std::vector<int>& prompt,
                  const std::vector<std::pair<ConditionKind, ToyImage>>& conditions,
                  const std::vector<const LoraAdapter*>& adapters, const GenerateOptions& options,
                  std::vector<Tensor>* trajectory = nullptr);

}  // namespace cdit
