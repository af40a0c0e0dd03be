#include "cdit/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cdit {

namespace fs = std::filesystem;

Task task_from_string(const std::string& s) {
    if (s == "spatial") return Task::spatial;
    if (s == "subject") return Task::subject;
    throw std::domain_error("unknown task: " + s);
}

namespace {

real quantize8(double v) {
    return static_cast<real>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
}

// Marks pixels whose 4-neighborhood contains a tone jump.
ToyImage edge_map(const ToyImage& img) {
    const int h = img.height(), w = img.width();
    ToyImage edges = ToyImage::zeros(1, h, w);
    const int dy[4] = {-1, 1, 0, 0};
    const int dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool edge = false;
            for (int k = 0; k < 4 && !edge; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
                edge = std::abs(double(img.at(0, y, x)) - double(img.at(0, ny, nx))) > 0.05;
            }
            if (edge) edges.at(0, y, x) = real(1);
        }
    }
    return edges;
}

ToyImage spatial_target(Rng& rng, const ModelConfig& cfg, std::vector<int>& prompt) {
    const int h = cfg.noise_h, w = cfg.noise_w;
    const int fg_bucket = rng.uniform_int(0, 7);
    const int bg_bucket = rng.uniform_int(0, 7);
    const real fg = quantize8(0.55 + (fg_bucket + 0.5) * 0.05);
    const real bg = quantize8(0.08 + (bg_bucket + 0.5) * 0.045);
    prompt = {fg_bucket, 8 + bg_bucket};

    // Convex polygon: 3..5 vertices on an ellipse at sorted angles.
    const double cx = w * (0.35 + 0.3 * rng.uniform());
    const double cy = h * (0.35 + 0.3 * rng.uniform());
    const double rx = w * (0.18 + 0.18 * rng.uniform());
    const double ry = h * (0.18 + 0.18 * rng.uniform());
    const int verts = rng.uniform_int(3, 5);
    std::vector<double> angles(static_cast<std::size_t>(verts));
    for (double& a : angles) a = rng.uniform() * 2.0 * 3.14159265358979323846;
    std::sort(angles.begin(), angles.end());
    std::vector<std::pair<double, double>> poly;
    for (double a : angles) {
        poly.emplace_back(cx + rx * std::cos(a), cy + ry * std::sin(a));
    }

    auto inside = [&poly](double px, double py) {
        const std::size_t n = poly.size();
        int sign = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& [x1, y1] = poly[i];
            const auto& [x2, y2] = poly[(i + 1) % n];
            const double cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
            if (cross > 0) {
                if (sign < 0) return false;
                sign = 1;
            } else if (cross < 0) {
                if (sign > 0) return false;
                sign = -1;
            }
        }
        return true;
    };

    ToyImage target = ToyImage::zeros(1, h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            target.at(0, y, x) = inside(x + 0.5, y + 0.5) ? fg : bg;
        }
    }
    return target;
}

// Four distinguishable glyph stencils on an s x s grid.
bool glyph_pixel(int glyph, int y, int x, int s) {
    switch (glyph) {
        case 0:  // square ring
            return std::min(std::min(x, y), std::min(s - 1 - x, s - 1 - y)) < 2;
        case 1:  // plus
            return std::abs(2 * x - (s - 1)) <= 3 || std::abs(2 * y - (s - 1)) <= 3;
        case 2:  // diagonal cross
            return std::abs(x - y) <= 1 || std::abs(x + y - (s - 1)) <= 1;
        default:  // filled diamond
            return std::abs(2 * x - (s - 1)) + std::abs(2 * y - (s - 1)) <= s - 1;
    }
}

void draw_glyph(ToyImage& img, int glyph, int top, int left, int size, real fg) {
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            if (glyph_pixel(glyph, y, x, size)) {
                img.at(0, top + y, left + x) = fg;
            }
        }
    }
}

}  // namespace

ToyImage spatial_condition_for(const ToyImage& target, const ModelConfig& cfg) {
    return resize_condition(edge_map(target), cfg.cond_h, cfg.cond_w);
}

void generate_dataset(Task task, int n, std::uint64_t seed, const std::string& out_dir,
                      const ModelConfig& cfg) {
    require(n >= 0, "gen-data: negative sample count");
    fs::create_directories(out_dir);
    std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
    if (!manifest) throw std::runtime_error("cannot write manifest in " + out_dir);

    Rng rng(seed);
    const real subject_bg = quantize8(0.12);
    const real subject_fg = quantize8(0.88);
    for (int i = 0; i < n; ++i) {
        std::vector<int> prompt;
        ToyImage target;
        ToyImage condition;
        if (task == Task::spatial) {
            target = spatial_target(rng, cfg, prompt);
            condition = spatial_condition_for(target, cfg);
        } else {
            const int glyph = rng.uniform_int(0, 3);
            const int location = rng.uniform_int(0, 3);
            prompt = {location};
            const int size = 12;
            target = ToyImage::zeros(1, cfg.noise_h, cfg.noise_w);
            std::fill(target.pixels.data->begin(), target.pixels.data->end(), subject_bg);
            const int qy = (location / 2) ? 3 * cfg.noise_h / 4 : cfg.noise_h / 4;
            const int qx = (location % 2) ? 3 * cfg.noise_w / 4 : cfg.noise_w / 4;
            draw_glyph(target, glyph, qy - size / 2, qx - size / 2, size, subject_fg);
            condition = ToyImage::zeros(1, cfg.cond_h, cfg.cond_w);
            std::fill(condition.pixels.data->begin(), condition.pixels.data->end(), subject_bg);
            draw_glyph(condition, glyph, (cfg.cond_h - size) / 2, (cfg.cond_w - size) / 2, size,
                       subject_fg);
        }

        char cond_name[32], target_name[32];
        std::snprintf(cond_name, sizeof cond_name, "cond_%04d.pgm", i);
        std::snprintf(target_name, sizeof target_name, "target_%04d.pgm", i);
        write_pnm(condition, (fs::path(out_dir) / cond_name).string());
        write_pnm(target, (fs::path(out_dir) / target_name).string());

        for (std::size_t p = 0; p < prompt.size(); ++p) {
            manifest << (p ? "," : "") << prompt[p];
        }
        if (prompt.empty()) manifest << "-";
        manifest << " " << cond_name << " " << target_name << "\n";
    }
    if (!manifest) throw std::runtime_error("failed writing manifest in " + out_dir);
}

Dataset Dataset::load(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.txt");
    if (!in) throw std::runtime_error("cannot open manifest in " + dir);
    Dataset ds;
    ds.dir = dir;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string prompt_field, cond_field, target_field;
        if (!(ls >> prompt_field >> cond_field >> target_field)) {
            throw std::runtime_error("malformed manifest line: " + line);
        }
        DatasetEntry e;
        if (prompt_field != "-") {
            std::istringstream ps(prompt_field);
            std::string id;
            while (std::getline(ps, id, ',')) {
                e.prompt.push_back(std::stoi(id));
            }
        }
        if (cond_field != "-") {
            e.condition_path = cond_field;
        }
        e.target_path = target_field;
        ds.entries.push_back(std::move(e));
    }
    return ds;
}

std::vector<TrainSample> Dataset::load_samples() const {
    std::vector<TrainSample> samples;
    samples.reserve(entries.size());
    for (const DatasetEntry& e : entries) {
        TrainSample s;
        s.prompt = e.prompt;
        s.target = read_pnm((fs::path(dir) / e.target_path).string());
        if (!e.condition_path.empty()) {
            s.condition = read_pnm((fs::path(dir) / e.condition_path).string());
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace cdit
