#include "cdit/branches.hpp"

#include <cmath>

namespace cdit {

void BranchedSequence::validate() const {
    layout.validate();
    require(features.rows() == layout.total(),
            "sequence: feature rows do not match layout total");
    require(positions.size() == static_cast<std::size_t>(layout.total()),
            "sequence: position count does not match layout total");
}

std::pair<Tensor, PositionGrid> patchify_raw(const ToyImage& img, int patch) {
    img.validate();
    require(patch > 0, "patchify: patch size must be positive");
    const int c = img.channels(), h = img.height(), w = img.width();
    require(h % patch == 0 && w % patch == 0,
            "patchify: image dimensions must be divisible by the patch size");
    const int hp = h / patch, wp = w / patch;
    const int token_dim = patch * patch * c;
    Tensor tokens = Tensor::zeros({hp * wp, token_dim});
    for (int i = 0; i < hp; ++i) {
        for (int j = 0; j < wp; ++j) {
            real* row = tokens.ptr() + static_cast<std::size_t>(i * wp + j) * token_dim;
            int k = 0;
            for (int ch = 0; ch < c; ++ch) {
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        row[k++] = img.at(ch, i * patch + py, j * patch + px);
                    }
                }
            }
        }
    }
    return {std::move(tokens), PositionGrid::integer_grid(hp, wp)};
}

std::pair<Tensor, PositionGrid> patchify(const ToyImage& img, int patch, const Tensor& embed,
                                         const Tensor* bias) {
    auto [raw, grid] = patchify_raw(img, patch);
    Tensor tokens = ops::matmul(raw, embed);
    if (bias != nullptr) {
        tokens = ops::add_bias_rows(tokens, *bias);
    }
    return {std::move(tokens), std::move(grid)};
}

ToyImage unpatchify(const Tensor& tokens, int patch, int channels, int height, int width) {
    require(height % patch == 0 && width % patch == 0,
            "unpatchify: image dimensions must be divisible by the patch size");
    const int hp = height / patch, wp = width / patch;
    const int token_dim = patch * patch * channels;
    require(tokens.rows() == hp * wp, "unpatchify: token count does not match dimensions");
    require(tokens.cols() == token_dim, "unpatchify: token width does not match patch size");
    ToyImage img = ToyImage::zeros(channels, height, width);
    for (int i = 0; i < hp; ++i) {
        for (int j = 0; j < wp; ++j) {
            const real* row = tokens.ptr() + static_cast<std::size_t>(i * wp + j) * token_dim;
            int k = 0;
            for (int ch = 0; ch < channels; ++ch) {
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        img.at(ch, i * patch + py, j * patch + px) = row[k++];
                    }
                }
            }
        }
    }
    return img;
}

ToyImage resize_condition(const ToyImage& img, int target_h, int target_w) {
    img.validate();
    if (target_h <= 0 || target_w <= 0 || target_h > img.height() || target_w > img.width()) {
        throw std::domain_error("resize_condition: target must be positive and no larger than the source");
    }
    const int c = img.channels(), sh = img.height(), sw = img.width();
    ToyImage out = ToyImage::zeros(c, target_h, target_w);
    const double ry = static_cast<double>(sh) / target_h;
    const double rx = static_cast<double>(sw) / target_w;
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < target_h; ++y) {
            const double y0 = y * ry, y1 = (y + 1) * ry;
            for (int x = 0; x < target_w; ++x) {
                const double x0 = x * rx, x1 = (x + 1) * rx;
                double acc = 0;
                for (int sy = static_cast<int>(std::floor(y0)); sy < sh && sy < y1; ++sy) {
                    const double wy = std::min<double>(sy + 1, y1) - std::max<double>(sy, y0);
                    if (wy <= 0) continue;
                    for (int sx = static_cast<int>(std::floor(x0)); sx < sw && sx < x1; ++sx) {
                        const double wx = std::min<double>(sx + 1, x1) - std::max<double>(sx, x0);
                        if (wx <= 0) continue;
                        acc += wy * wx * double(img.at(ch, sy, sx));
                    }
                }
                out.at(ch, y, x) = static_cast<real>(acc / (ry * rx));
            }
        }
    }
    return out;
}

Tensor encode_text(const Tensor& table, const std::vector<int>& ids) {
    return ops::embed_rows(table, ids);
}

SequencePlan plan_sequence(int n_text, const PositionGrid& noise_grid,
                           const std::vector<ConditionInput>& conditions, int patch,
                           double delta_h) {
    SequencePlan plan;
    plan.layout.n_text = n_text;
    plan.layout.n_noise = static_cast<int>(noise_grid.size());
    plan.positions = PositionGrid::constant(n_text, 0.0, 0.0);
    plan.positions.append(noise_grid);

    int subject_index = 0;
    for (const ConditionInput& cond : conditions) {
        const int count = cond.tokens.rows();
        require(static_cast<std::size_t>(count) == cond.grid.size(),
                "assemble: condition token count does not match its grid");
        plan.layout.blocks.push_back({cond.kind, count});
        if (cond.kind == ConditionKind::spatial) {
            const auto [s_h, s_w] =
                scale_factors(cond.orig_h, cond.orig_w, cond.resized_h, cond.resized_w);
            plan.positions.append(interpolate_positions(cond.resized_h / patch,
                                                        cond.resized_w / patch, s_h, s_w));
        } else {
            subject_index += 1;
            plan.positions.append(offset_positions(cond.grid, subject_index, delta_h));
        }
    }
    require(plan.positions.all_finite_nonnegative(), "assemble: invalid token positions");
    return plan;
}

BranchedSequence assemble(const Tensor& text_tokens, const Tensor& noise_tokens,
                          const PositionGrid& noise_grid,
                          const std::vector<ConditionInput>& conditions, int patch,
                          double delta_h) {
    const int d = noise_tokens.cols();
    require(text_tokens.rows() == 0 || text_tokens.cols() == d,
            "assemble: text token width differs from noise token width");
    std::vector<Tensor> parts;
    if (text_tokens.rows() > 0) {
        parts.push_back(text_tokens);
    }
    parts.push_back(noise_tokens);
    for (const ConditionInput& cond : conditions) {
        require(cond.tokens.cols() == d, "assemble: condition token width differs");
        parts.push_back(cond.tokens);
    }

    BranchedSequence seq;
    SequencePlan plan = plan_sequence(text_tokens.rows(), noise_grid, conditions, patch, delta_h);
    seq.layout = std::move(plan.layout);
    seq.positions = std::move(plan.positions);
    seq.features = ops::concat_rows(parts);
    seq.validate();
    return seq;
}

}  // namespace cdit
