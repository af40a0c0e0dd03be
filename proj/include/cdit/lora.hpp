#pragma once

#include <string>

#include "cdit/autodiff.hpp"
#include "cdit/layout.hpp"
#include "cdit/params.hpp"

namespace cdit {

// Frozen shared projections of one transformer layer.
struct BaseProjection {
    Tensor wq, wk, wv, wo;  // each (d x d)
};

// Low-rank deltas for one condition kind: per layer, down/up factors for
// Q, K and V. Up factors start at zero so a fresh adapter is a no-op.
class LoraAdapter {
public:
    ConditionKind kind = ConditionKind::spatial;
    int d_model = 0;
    int rank = 0;
    int layer_count = 0;

    static LoraAdapter init(ConditionKind kind, int d_model, int rank, int layers, Rng& rng);

    const Tensor& down(int layer, char proj) const;  // proj in {'q','k','v'}, (d x r)
    const Tensor& up(int layer, char proj) const;    // (r x d)

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    void set_trainable(bool trainable);

    void save(const std::string& path) const;
    static LoraAdapter load(const std::string& path);

private:
    ParamStore params_;
    static std::string name(int layer, char proj, bool up);
};

struct Projected {
    Tensor q, k, v;  // each (n x d)
};

// Shared base projection for every token; condition rows additionally get
// their block's low-rank delta. Text and noise rows are the base projection
// bit for bit. Adapters align with layout.blocks by order and kind.
Projected project_qkv(const Tensor& features, const BranchLayout& layout,
                      const BaseProjection& base, const std::vector<const LoraAdapter*>& adapters,
                      int layer);

// Numeric rank probe of the effective deltas down*up for one layer.
struct MergeReport {
    int rank_q = 0, rank_k = 0, rank_v = 0;
    std::vector<double> sv_q, sv_k, sv_v;
    int configured_rank = 0;
    bool within_rank() const {
        return rank_q <= configured_rank && rank_k <= configured_rank && rank_v <= configured_rank;
    }
};

MergeReport merge_check(const LoraAdapter& adapter, int layer, double threshold = 1e-8);

}  // namespace cdit
