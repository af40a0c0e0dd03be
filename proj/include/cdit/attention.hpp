#pragma once

#include "cdit/autodiff.hpp"
#include "cdit/mask.hpp"
#include "cdit/rope.hpp"

namespace cdit {

// Column split into `heads` contiguous per-head blocks, fixed head order.
std::vector<Tensor> split_heads(const Tensor& x, int heads);

std::vector<Tensor> rope_heads(const std::vector<Tensor>& heads, const PositionGrid& grid,
                               const RopeParams& params);

// Scaled dot-product attention over already-rotated per-head tensors:
// logits masked structurally by `mask`, heads concatenated in order, then
// the output projection. Query row i is token i of the mask's layout.
Tensor attention_core(const std::vector<Tensor>& q_heads, const std::vector<Tensor>& k_heads,
                      const std::vector<Tensor>& v_heads, const BranchMask& mask,
                      const Tensor& wo);

// Full-sequence masked multi-head attention; rotates Q and K internally.
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const PositionGrid& positions, const BranchMask& mask, int heads,
                        const RopeParams& rope, const Tensor& wo);

// Attention outputs for only the leading `q.rows()` query rows (the
// text/noise prefix) against the full key/value set; equals the matching
// rows of masked_attention on the full sequence.
Tensor attention_rows(const Tensor& q, const PositionGrid& q_positions, const Tensor& k,
                      const Tensor& v, const PositionGrid& k_positions, const BranchMask& mask,
                      int heads, const RopeParams& rope, const Tensor& wo);

}  // namespace cdit
