#pragma once

#include <string>
#include <vector>

#include "cdit/model.hpp"

namespace cdit {

enum class Task { spatial, subject };

Task task_from_string(const std::string& s);

// Manifest line: "<comma-separated prompt ids|-> <condition path|-> <target path>".
struct DatasetEntry {
    std::vector<int> prompt;
    std::string condition_path;  // empty = none
    std::string target_path;
};

struct Dataset {
    std::string dir;
    std::vector<DatasetEntry> entries;

    static Dataset load(const std::string& dir);
    std::vector<TrainSample> load_samples() const;
};

// Writes n paired condition/target images plus the manifest, deterministic
// under the seed.
//   spatial: target is a random two-tone convex polygon; the condition is the
//            area-downsampled edge map of the target. Prompt ids encode the
//            quantized foreground and background tones.
//   subject: target places one of a small glyph set at a prompt-indexed
//            quadrant; the condition shows the glyph centered.
void generate_dataset(Task task, int n, std::uint64_t seed, const std::string& out_dir,
                      const ModelConfig& cfg);

// The condition image the spatial generator would derive from this target;
// kept separate so tests can recompute and compare stored conditions.
ToyImage spatial_condition_for(const ToyImage& target, const ModelConfig& cfg);

}  // namespace cdit
