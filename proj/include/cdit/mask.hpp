#pragma once

#include <limits>

#include "cdit/layout.hpp"

namespace cdit {

// Additive attention mask in {0, -inf}, derived structurally from the branch
// layout; never materialized as an n x n tensor in the engine path.
//
//   conditional: condition queries may not read text/noise keys (training,
//                single condition block).
//   mutual:      distinct condition blocks may not read each other.
//   full:        both restrictions; the inference mask, which is what keeps
//                the condition branch self-contained and cacheable.
enum class MaskMode { none, conditional, mutual, full };

const char* to_string(MaskMode mode);

struct BranchMask {
    MaskMode mode = MaskMode::none;
    BranchLayout layout;
    // Verification-only hook: flips the decision at exactly one (query, key)
    // entry. Set by the verify command's fault injection, never by the engine.
    int fault_query = -1;
    int fault_key = -1;

    static BranchMask make(BranchLayout layout, MaskMode mode);
    // Inference mask: condition-to-denoising blocking always on, cross-block
    // blocking controlled by `mutual_blocking` (the no-mutual ablation turns
    // it off). Any number of blocks.
    static BranchMask make_inference(BranchLayout layout, bool mutual_blocking);

    int total() const { return layout.total(); }

    bool masked(int query, int key) const {
        const int bi = token_block_[static_cast<std::size_t>(query)];
        const int bj = token_block_[static_cast<std::size_t>(key)];
        bool m = (block_tn_ && bi >= 0 && bj < 0) ||
                 (block_cross_ && bi >= 0 && bj >= 0 && bi != bj);
        if (query == fault_query && key == fault_key) {
            m = !m;
        }
        return m;
    }

    double logit(int query, int key) const {
        return masked(query, key) ? -std::numeric_limits<double>::infinity() : 0.0;
    }

private:
    static BranchMask build(BranchLayout layout, MaskMode mode, bool block_tn, bool block_cross);

    bool block_tn_ = false;
    bool block_cross_ = false;
    std::vector<int> token_block_;
};

// Range-checked entry view of the mask.
double mask_logit(const BranchMask& mask, int query, int key);

}  // namespace cdit
