#include "cdit/pnm.hpp"

#include <cmath>
#include <fstream>

namespace cdit {

real ToyImage::at(int c, int y, int x) const {
    return pixels.at((static_cast<std::size_t>(c) * height() + y) * width() + x);
}

real& ToyImage::at(int c, int y, int x) {
    return pixels.at((static_cast<std::size_t>(c) * height() + y) * width() + x);
}

ToyImage ToyImage::zeros(int channels, int height, int width) {
    require(channels == 1 || channels == 3, "image: channels must be 1 or 3");
    require(height > 0 && width > 0, "image: dimensions must be positive");
    ToyImage img;
    img.pixels = Tensor::zeros({channels, height, width});
    return img;
}

void ToyImage::validate() const {
    require(pixels.shape.size() == 3, "image: pixels must be (c, h, w)");
    require(channels() == 1 || channels() == 3, "image: channels must be 1 or 3");
}

void write_pnm(const ToyImage& img, const std::string& path) {
    img.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    const int c = img.channels(), h = img.height(), w = img.width();
    os << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int ch = 0; ch < c; ++ch) {
                const double v = std::clamp(double(img.at(ch, y, x)), 0.0, 1.0);
                const int byte = static_cast<int>(std::lround(v * 255.0));
                os.put(static_cast<char>(byte));
            }
        }
    }
    if (!os) throw std::runtime_error("failed writing " + path);
}

namespace {

int read_pnm_int(std::istream& is) {
    // Skips whitespace and '#' comments between header tokens.
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (!std::isspace(ch)) {
            break;
        }
        ch = is.get();
    }
    if (ch == EOF || !std::isdigit(ch)) {
        throw std::runtime_error("pnm: malformed header");
    }
    int value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        ch = is.get();
    }
    return value;
}

}  // namespace

ToyImage read_pnm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != 'P' || (m1 != '5' && m1 != '6')) {
        throw std::runtime_error("pnm: " + path + " is not a binary PGM/PPM file");
    }
    const int channels = m1 == '5' ? 1 : 3;
    const int w = read_pnm_int(is);
    const int h = read_pnm_int(is);
    const int maxval = read_pnm_int(is);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
        throw std::runtime_error("pnm: unsupported header in " + path);
    }
    ToyImage img = ToyImage::zeros(channels, h, w);
    std::vector<char> row(static_cast<std::size_t>(w) * channels);
    for (int y = 0; y < h; ++y) {
        is.read(row.data(), static_cast<std::streamsize>(row.size()));
        if (!is) throw std::runtime_error("pnm: truncated pixel data in " + path);
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < channels; ++c) {
                const auto byte = static_cast<unsigned char>(row[static_cast<std::size_t>(x) * channels + c]);
                img.at(c, y, x) = static_cast<real>(double(byte) / maxval);
            }
        }
    }
    return img;
}

}  // namespace cdit
