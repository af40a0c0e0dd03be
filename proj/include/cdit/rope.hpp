#pragma once

#include <utility>
#include <vector>

#include "cdit/tensor.hpp"

namespace cdit {

// Per-token 2D position in patch units of the full-resolution image.
// Fractional coordinates are produced by interpolation and fed to the
// rotation angles untouched.
struct PositionGrid {
    std::vector<std::pair<double, double>> positions;  // (row, col)

    std::size_t size() const { return positions.size(); }
    static PositionGrid constant(int count, double row, double col);
    static PositionGrid integer_grid(int h, int w);  // row-major (i, j)
    PositionGrid slice(std::size_t begin, std::size_t count) const;
    void append(const PositionGrid& other);
    bool all_finite_nonnegative() const;
};

// Axial rotary encoding: the first half of a head's channel pairs rotates by
// the row coordinate, the second half by the column coordinate, with
// frequencies base^(-2f/axis_dim) per axis.
struct RopeParams {
    int head_dim = 16;
    double base_frequency = 10000.0;

    int axis_dim() const { return head_dim / 2; }
    int pairs_per_axis() const { return head_dim / 4; }
    double freq(int pair_index) const;
    void validate() const;
};

// Scaling factors from original dimensions (M, N) to resized (H, W).
std::pair<double, double> scale_factors(int orig_h, int orig_w, int resized_h, int resized_w);

// Patch (i, j) of the resized image keeps the position (i*s_h, j*s_w) it had
// in the original image; s = 1 degenerates to the integer grid.
PositionGrid interpolate_positions(int h, int w, double s_h, double s_w);

// Shift every row coordinate by k * delta_h; columns untouched. Used to
// displace the k-th subject condition away from the image plane.
PositionGrid offset_positions(const PositionGrid& grid, int k, double delta_h);

// Rotate one (tokens x head_dim) feature block in place of the angles implied
// by grid/params; inverse applies the transposed rotation (used by autodiff).
void rope_rotate_raw(const real* x, real* y, int tokens, const PositionGrid& grid,
                     const RopeParams& params, bool inverse);

}  // namespace cdit
