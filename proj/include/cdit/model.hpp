#pragma once

#include <optional>
#include <string>

#include "cdit/attention.hpp"
#include "cdit/branches.hpp"
#include "cdit/lora.hpp"
#include "cdit/params.hpp"

namespace cdit {

struct ModelConfig {
    int d_model = 64;
    int heads = 4;
    int layers = 4;
    int patch = 2;
    int noise_h = 32, noise_w = 32;
    int cond_h = 16, cond_w = 16;
    int vocab = 16;
    int rank = 4;
    int channels = 1;
    int mlp_ratio = 4;
    double base_freq = 10000.0;
    double delta_h = 64.0;

    int head_dim() const { return d_model / heads; }
    int patch_dim() const { return patch * patch * channels; }
    int noise_tokens() const { return (noise_h / patch) * (noise_w / patch); }
    int cond_tokens() const { return (cond_h / patch) * (cond_w / patch); }
    RopeParams rope() const { return RopeParams{head_dim(), base_freq}; }
    PositionGrid noise_grid() const { return PositionGrid::integer_grid(noise_h / patch, noise_w / patch); }
    void validate() const;
};

// Linear interpolation state between data and noise at time t.
struct FlowState {
    Tensor x0;   // clean latent tokens (n x patch_dim)
    Tensor eps;  // standard normal, same shape
    double t = 0;
    Tensor z_t;  // (1-t)*x0 + t*eps

    static FlowState make(const Tensor& x0, const Tensor& eps, double t);
};

// Per-layer, per-condition-block post-rotation keys and values captured from
// a joint forward pass; lets tests compare against the primed cache.
struct ForwardTrace {
    std::vector<std::vector<Tensor>> keys;    // [layer][block] (count x d)
    std::vector<std::vector<Tensor>> values;  // [layer][block]
};

class DitModel {
public:
    ModelConfig cfg;

    static DitModel init(const ModelConfig& cfg, std::uint64_t seed);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    BaseProjection layer_projection(int layer) const;
    Tensor embed_image_tokens(const Tensor& raw_tokens) const;  // (n x patch_dim) -> (n x d)
    Tensor text_features(const std::vector<int>& prompt) const;
    Tensor time_features(double t) const;  // (1 x d)

    // Condition image -> embedded tokens + patch grid; resizes down to the
    // fixed condition resolution when the input is larger.
    ConditionInput prepare_condition(const ToyImage& img, ConditionKind kind) const;

    // Full joint pass over the assembled sequence; returns per-noise-token
    // velocity (n_noise x patch_dim). Only text/noise rows receive timestep
    // modulation, so condition computation does not depend on t.
    Tensor forward(const BranchedSequence& seq, double t,
                   const std::vector<const LoraAdapter*>& adapters, const BranchMask& mask,
                   ForwardTrace* trace = nullptr) const;

    void save(const std::string& path) const;
    static DitModel load(const std::string& path);

private:
    ParamStore params_;
    std::string layer_name(int layer, const char* field) const;
};

Tensor flow_loss(const Tensor& velocity, const Tensor& eps, const Tensor& x0);

struct TrainSample {
    std::vector<int> prompt;
    ToyImage target;
    std::optional<ToyImage> condition;
};

struct TrainResult {
    std::vector<double> losses;  // one entry per step
};

// Unconditional pretraining of every base parameter.
TrainResult train_stage1(DitModel& model, const std::vector<TrainSample>& data, int steps,
                         double lr, std::uint64_t seed);

// Adapter training against a frozen base; every sample must carry one
// condition of the given kind. Throws if any frozen gradient becomes nonzero.
TrainResult train_stage2(DitModel& model, LoraAdapter& adapter, const std::vector<TrainSample>& data,
                         int steps, double lr, std::uint64_t seed);

// Deterministic evaluation loss: fixed timestep grid, seeded noise.
double evaluate_flow_loss(const DitModel& model, const LoraAdapter* adapter,
                          const std::vector<TrainSample>& data, int probes_per_sample,
                          std::uint64_t seed);

}  // namespace cdit
