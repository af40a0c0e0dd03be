#include "cdit/mask.hpp"

namespace cdit {

const char* to_string(ConditionKind kind) {
    return kind == ConditionKind::spatial ? "spatial" : "subject";
}

ConditionKind condition_kind_from_string(const std::string& s) {
    if (s == "spatial") return ConditionKind::spatial;
    if (s == "subject") return ConditionKind::subject;
    throw std::domain_error("unknown condition kind: " + s);
}

int BranchLayout::total() const {
    int n = tn();
    for (const Block& b : blocks) {
        n += b.count;
    }
    return n;
}

int BranchLayout::block_start(std::size_t j) const {
    require(j < blocks.size(), "layout: block index out of range");
    int start = tn();
    for (std::size_t i = 0; i < j; ++i) {
        start += blocks[i].count;
    }
    return start;
}

int BranchLayout::block_of(int token) const {
    require(token >= 0 && token < total(), "layout: token index out of range");
    if (token < tn()) return -1;
    int cursor = tn();
    for (std::size_t j = 0; j < blocks.size(); ++j) {
        cursor += blocks[j].count;
        if (token < cursor) return static_cast<int>(j);
    }
    return -1;  // unreachable
}

void BranchLayout::validate() const {
    require(n_text >= 0 && n_noise >= 0, "layout: negative token count");
    for (const Block& b : blocks) {
        require(b.count >= 0, "layout: negative block count");
    }
}

const char* to_string(MaskMode mode) {
    switch (mode) {
        case MaskMode::none: return "none";
        case MaskMode::conditional: return "conditional";
        case MaskMode::mutual: return "mutual";
        case MaskMode::full: return "full";
    }
    return "?";
}

BranchMask BranchMask::build(BranchLayout layout, MaskMode mode, bool block_tn,
                             bool block_cross) {
    layout.validate();
    BranchMask m;
    m.mode = mode;
    m.block_tn_ = block_tn;
    m.block_cross_ = block_cross;
    m.layout = std::move(layout);
    m.token_block_.resize(static_cast<std::size_t>(m.layout.total()));
    for (int i = 0; i < m.layout.total(); ++i) {
        m.token_block_[static_cast<std::size_t>(i)] = m.layout.block_of(i);
    }
    return m;
}

BranchMask BranchMask::make(BranchLayout layout, MaskMode mode) {
    if (mode == MaskMode::conditional) {
        require(layout.blocks.size() == 1, "conditional mask requires exactly one condition block");
    }
    const bool block_tn = mode == MaskMode::conditional || mode == MaskMode::full;
    const bool block_cross = mode == MaskMode::mutual || mode == MaskMode::full;
    return build(std::move(layout), mode, block_tn, block_cross);
}

BranchMask BranchMask::make_inference(BranchLayout layout, bool mutual_blocking) {
    return build(std::move(layout), MaskMode::full, true, mutual_blocking);
}

double mask_logit(const BranchMask& mask, int query, int key) {
    if (query < 0 || key < 0 || query >= mask.total() || key >= mask.total()) {
        throw std::domain_error("mask_logit: index out of range");
    }
    return mask.logit(query, key);
}

}  // namespace cdit
