#pragma once

#include <functional>
#include <vector>

#include "cdit/mask.hpp"
#include "cdit/rope.hpp"
#include "cdit/tensor.hpp"

namespace cdit {

// Reverse-mode tape node. Ops record their parents and a backward closure
// that reads the output gradient and accumulates into the parents' buffers.
struct Node {
    std::vector<Tensor> parents;
    std::function<void(const Tensor& out)> backward;
};

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Accumulate d(loss)/d(leaf) for every reachable leaf with requires_grad.
// Gradient accumulation is serialized: nodes run one at a time in reverse
// topological order.
void backward(Tensor& loss);

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T with b given as (n x k).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real alpha);
// x (rows x d) + bias (1 x d), broadcast over rows.
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor rmsnorm_rows(const Tensor& x, real eps = real(1e-6));

// Row-stochastic softmax. Entries whose logit is -inf (sentinel form) or
// masked (structural form) come out exactly 0 and are excluded from the
// row max and the normalizer. A row with no admissible entry is an error.
Tensor softmax_rows(const Tensor& logits);
Tensor softmax_rows_masked(const Tensor& logits, const BranchMask& mask);

Tensor rope_rotate(const Tensor& x, const PositionGrid& grid, const RopeParams& params);

Tensor slice_rows(const Tensor& x, int begin, int count);
Tensor slice_cols(const Tensor& x, int begin, int count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor embed_rows(const Tensor& table, const std::vector<int>& ids);

// Rows in [row_begin, row_end) become x*(1+s) + b; other rows pass through.
// s and b are (1 x d).
Tensor modulate_rows(const Tensor& x, const Tensor& s, const Tensor& b, int row_begin, int row_end);

// Scalar mean of squared differences over all entries.
Tensor mean_sq_diff(const Tensor& a, const Tensor& b);

}  // namespace ops

}  // namespace cdit
