#include "cdit/attention.hpp"

#include <cmath>

#include "cdit/instrument.hpp"

namespace cdit {

std::vector<Tensor> split_heads(const Tensor& x, int heads) {
    require(heads > 0 && x.cols() % heads == 0, "attention: width not divisible by head count");
    const int dh = x.cols() / heads;
    std::vector<Tensor> out;
    out.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        out.push_back(ops::slice_cols(x, h * dh, dh));
    }
    return out;
}

std::vector<Tensor> rope_heads(const std::vector<Tensor>& heads, const PositionGrid& grid,
                               const RopeParams& params) {
    std::vector<Tensor> out;
    out.reserve(heads.size());
    for (const Tensor& h : heads) {
        out.push_back(ops::rope_rotate(h, grid, params));
    }
    return out;
}

Tensor attention_core(const std::vector<Tensor>& q_heads, const std::vector<Tensor>& k_heads,
                      const std::vector<Tensor>& v_heads, const BranchMask& mask,
                      const Tensor& wo) {
    require(!q_heads.empty() && q_heads.size() == k_heads.size() &&
                k_heads.size() == v_heads.size(),
            "attention: head list mismatch");
    const int dh = q_heads.front().cols();
    const real inv_sqrt = static_cast<real>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor> ctx;
    ctx.reserve(q_heads.size());
    for (std::size_t h = 0; h < q_heads.size(); ++h) {
        Tensor logits = ops::scale(ops::matmul_nt(q_heads[h], k_heads[h]), inv_sqrt);
        Tensor probs = ops::softmax_rows_masked(logits, mask);
        ctx.push_back(ops::matmul(probs, v_heads[h]));
    }
    counters().attention_query_rows += static_cast<std::uint64_t>(q_heads.front().rows());
    return ops::matmul(ops::concat_cols(ctx), wo);
}

Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const PositionGrid& positions, const BranchMask& mask, int heads,
                        const RopeParams& rope, const Tensor& wo) {
    require(q.rows() == mask.total() && k.rows() == mask.total() && v.rows() == mask.total(),
            "attention: token count does not match mask layout");
    auto q_heads = rope_heads(split_heads(q, heads), positions, rope);
    auto k_heads = rope_heads(split_heads(k, heads), positions, rope);
    auto v_heads = split_heads(v, heads);
    return attention_core(q_heads, k_heads, v_heads, mask, wo);
}

Tensor attention_rows(const Tensor& q, const PositionGrid& q_positions, const Tensor& k,
                      const Tensor& v, const PositionGrid& k_positions, const BranchMask& mask,
                      int heads, const RopeParams& rope, const Tensor& wo) {
    require(q.rows() <= mask.total(), "attention_rows: more queries than layout tokens");
    require(k.rows() == mask.total() && v.rows() == mask.total(),
            "attention_rows: key/value count does not match mask layout");
    if (q.rows() == 0) {
        return Tensor::zeros({0, wo.cols()});
    }
    auto q_heads = rope_heads(split_heads(q, heads), q_positions, rope);
    auto k_heads = rope_heads(split_heads(k, heads), k_positions, rope);
    auto v_heads = split_heads(v, heads);
    return attention_core(q_heads, k_heads, v_heads, mask, wo);
}

}  // namespace cdit
