#include "cdit/rope.hpp"

#include <cmath>

namespace cdit {

PositionGrid PositionGrid::constant(int count, double row, double col) {
    PositionGrid g;
    g.positions.assign(static_cast<std::size_t>(count), {row, col});
    return g;
}

PositionGrid PositionGrid::integer_grid(int h, int w) {
    return interpolate_positions(h, w, 1.0, 1.0);
}

PositionGrid PositionGrid::slice(std::size_t begin, std::size_t count) const {
    require(begin + count <= positions.size(), "position grid: slice out of range");
    PositionGrid g;
    g.positions.assign(positions.begin() + begin, positions.begin() + begin + count);
    return g;
}

void PositionGrid::append(const PositionGrid& other) {
    positions.insert(positions.end(), other.positions.begin(), other.positions.end());
}

bool PositionGrid::all_finite_nonnegative() const {
    for (const auto& [r, c] : positions) {
        if (!std::isfinite(r) || !std::isfinite(c) || r < 0 || c < 0) return false;
    }
    return true;
}

double RopeParams::freq(int pair_index) const {
    return std::pow(base_frequency, -2.0 * pair_index / axis_dim());
}

void RopeParams::validate() const {
    require(head_dim > 0 && head_dim % 4 == 0, "rope: head_dim must be a positive multiple of 4");
    require(base_frequency > 0, "rope: base frequency must be positive");
}

std::pair<double, double> scale_factors(int orig_h, int orig_w, int resized_h, int resized_w) {
    if (resized_h <= 0 || resized_w <= 0 || orig_h <= 0 || orig_w <= 0) {
        throw std::domain_error("scale_factors: dimensions must be positive");
    }
    return {static_cast<double>(orig_h) / resized_h, static_cast<double>(orig_w) / resized_w};
}

PositionGrid interpolate_positions(int h, int w, double s_h, double s_w) {
    require(h >= 1 && w >= 1, "interpolate_positions: grid dimensions must be >= 1");
    require(s_h > 0 && s_w > 0, "interpolate_positions: scale factors must be positive");
    PositionGrid g;
    g.positions.reserve(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            g.positions.emplace_back(i * s_h, j * s_w);
        }
    }
    return g;
}

PositionGrid offset_positions(const PositionGrid& grid, int k, double delta_h) {
    PositionGrid g = grid;
    const double shift = k * delta_h;
    for (auto& [r, c] : g.positions) {
        r += shift;
    }
    return g;
}

void rope_rotate_raw(const real* x, real* y, int tokens, const PositionGrid& grid,
                     const RopeParams& params, bool inverse) {
    params.validate();
    require(static_cast<std::size_t>(tokens) == grid.size(),
            "rope: token count does not match grid length");
    const int d = params.head_dim;
    const int pairs_axis = params.pairs_per_axis();
    for (int t = 0; t < tokens; ++t) {
        const real* xt = x + static_cast<std::size_t>(t) * d;
        real* yt = y + static_cast<std::size_t>(t) * d;
        const auto [row, col] = grid.positions[static_cast<std::size_t>(t)];
        for (int p = 0; p < 2 * pairs_axis; ++p) {
            const bool row_axis = p < pairs_axis;
            const int f = row_axis ? p : p - pairs_axis;
            double angle = params.freq(f) * (row_axis ? row : col);
            if (inverse) angle = -angle;
            const real cs = static_cast<real>(std::cos(angle));
            const real sn = static_cast<real>(std::sin(angle));
            const real a = xt[2 * p];
            const real b = xt[2 * p + 1];
            yt[2 * p] = a * cs - b * sn;
            yt[2 * p + 1] = a * sn + b * cs;
        }
    }
}

}  // namespace cdit
