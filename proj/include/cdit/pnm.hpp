#pragma once

#include <string>

#include "cdit/tensor.hpp"

namespace cdit {

// Small dense image standing in for a latent: (channels, height, width),
// values in [0,1], 1 channel (PGM) or 3 channels (PPM) on disk.
struct ToyImage {
    Tensor pixels;  // shape {c, h, w}

    int channels() const { return pixels.dim(0); }
    int height() const { return pixels.dim(1); }
    int width() const { return pixels.dim(2); }

    real at(int c, int y, int x) const;
    real& at(int c, int y, int x);

    static ToyImage zeros(int channels, int height, int width);
    void validate() const;
};

// Binary PGM (P5) / PPM (P6), 8-bit, byte = round(pixel * 255).
void write_pnm(const ToyImage& img, const std::string& path);
ToyImage read_pnm(const std::string& path);

}  // namespace cdit
