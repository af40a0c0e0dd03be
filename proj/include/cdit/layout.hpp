#pragma once

#include <string>
#include <vector>

#include "cdit/tensor.hpp"

namespace cdit {

enum class ConditionKind { spatial, subject };

const char* to_string(ConditionKind kind);
ConditionKind condition_kind_from_string(const std::string& s);

// Token bookkeeping for a concatenated sequence [text; noise; c1; ...; cm].
// Block order is the concatenation order.
struct BranchLayout {
    struct Block {
        ConditionKind kind;
        int count = 0;
    };

    int n_text = 0;
    int n_noise = 0;
    std::vector<Block> blocks;

    int tn() const { return n_text + n_noise; }
    int total() const;
    int block_start(std::size_t j) const;
    // -1 for text/noise tokens, otherwise the condition block index.
    int block_of(int token) const;
    bool is_tn(int token) const { return token < tn(); }
    void validate() const;
};

}  // namespace cdit
