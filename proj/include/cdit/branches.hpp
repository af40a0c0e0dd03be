#pragma once

#include "cdit/autodiff.hpp"
#include "cdit/layout.hpp"
#include "cdit/pnm.hpp"
#include "cdit/rope.hpp"

namespace cdit {

// Ordered token features plus the branch layout and per-token positions.
struct BranchedSequence {
    Tensor features;  // (n x d_model)
    BranchLayout layout;
    PositionGrid positions;

    void validate() const;
};

// One condition stream before concatenation: embedded tokens, the integer
// patch grid of the resized image, and the dimensions the positions refer to.
struct ConditionInput {
    ConditionKind kind = ConditionKind::spatial;
    Tensor tokens;  // (n_c x d_model)
    PositionGrid grid;
    int orig_h = 0, orig_w = 0;        // pixel dims of the full-resolution signal
    int resized_h = 0, resized_w = 0;  // pixel dims after resizing
};

// Flattens non-overlapping p x p patches row-major; no projection.
// Returns (tokens (hp*wp x p*p*c), integer patch grid).
std::pair<Tensor, PositionGrid> patchify_raw(const ToyImage& img, int patch);

// Projection through a learned embedding: raw patches times embed (p*p*c x d),
// plus optional bias.
std::pair<Tensor, PositionGrid> patchify(const ToyImage& img, int patch, const Tensor& embed,
                                         const Tensor* bias = nullptr);

// Inverse arrangement of per-token patch values back into an image.
ToyImage unpatchify(const Tensor& tokens, int patch, int channels, int height, int width);

// Area-average downsampling to exactly (h x w); fractional box coverage is
// weighted exactly, so integer factors reduce to plain block means.
ToyImage resize_condition(const ToyImage& img, int target_h, int target_w);

// Embedding lookup for prompt ids.
Tensor encode_text(const Tensor& table, const std::vector<int>& ids);

// Positions of an assembled sequence without its features: text at (0,0),
// noise on its integer grid, spatial conditions interpolated back to
// original-image coordinates, subject conditions displaced by k*delta_h.
struct SequencePlan {
    BranchLayout layout;
    PositionGrid positions;
};

SequencePlan plan_sequence(int n_text, const PositionGrid& noise_grid,
                           const std::vector<ConditionInput>& conditions, int patch,
                           double delta_h);

// Concatenation [text; noise; c1; ...; cm] with positions from plan_sequence.
BranchedSequence assemble(const Tensor& text_tokens, const Tensor& noise_tokens,
                          const PositionGrid& noise_grid,
                          const std::vector<ConditionInput>& conditions, int patch,
                          double delta_h);

}  // namespace cdit
