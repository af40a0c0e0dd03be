#include "cdit/model.hpp"

#include <cmath>
#include <fstream>

namespace cdit {

namespace {
constexpr char kMagic[4] = {'D', 'I', 'T', 'B'};
constexpr std::uint32_t kVersion = 1;

Tensor timestep_embedding(double t, int dim) {
    Tensor e = Tensor::zeros({1, dim});
    const int half = dim / 2;
    const double scaled = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e.at(static_cast<std::size_t>(i)) = static_cast<real>(std::cos(scaled * freq));
        e.at(static_cast<std::size_t>(half + i)) = static_cast<real>(std::sin(scaled * freq));
    }
    return e;
}

}  // namespace

void ModelConfig::validate() const {
    require(d_model > 0 && heads > 0 && d_model % heads == 0,
            "config: d_model must be divisible by heads");
    require(head_dim() % 4 == 0, "config: head_dim must be divisible by 4");
    require(layers >= 0, "config: negative layer count");
    require(patch > 0 && noise_h % patch == 0 && noise_w % patch == 0,
            "config: noise resolution must be divisible by the patch size");
    require(cond_h % patch == 0 && cond_w % patch == 0,
            "config: condition resolution must be divisible by the patch size");
    require(vocab > 0, "config: vocabulary must be nonempty");
    require(rank >= 1 && rank <= d_model / 4, "config: rank must be in [1, d_model/4]");
    require(channels == 1 || channels == 3, "config: channels must be 1 or 3");
    require(mlp_ratio >= 1, "config: mlp_ratio must be >= 1");
    require(base_freq > 0 && delta_h >= 0, "config: bad rope constants");
}

FlowState FlowState::make(const Tensor& x0, const Tensor& eps, double t) {
    require(x0.shape == eps.shape, "flow state: x0 and noise shapes differ");
    FlowState fs;
    fs.x0 = x0;
    fs.eps = eps;
    fs.t = t;
    fs.z_t = Tensor::zeros(x0.shape);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        (*fs.z_t.data)[i] = static_cast<real>((1.0 - t) * (*x0.data)[i] + t * (*eps.data)[i]);
    }
    return fs;
}

std::string DitModel::layer_name(int layer, const char* field) const {
    return "layers." + std::to_string(layer) + "." + field;
}

DitModel DitModel::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DitModel m;
    m.cfg = cfg;
    Rng rng(seed);
    const int d = cfg.d_model;
    const int hidden = cfg.mlp_ratio * d;
    const double ws = std::sqrt(1.0 / d);

    m.params_.add("text_embed", rng.gaussian_tensor({cfg.vocab, d}, ws), true);
    m.params_.add("patch_embed.w",
                  rng.gaussian_tensor({cfg.patch_dim(), d}, std::sqrt(1.0 / cfg.patch_dim())),
                  true);
    m.params_.add("patch_embed.b", Tensor::zeros({1, d}), true);
    m.params_.add("time_embed.w", rng.gaussian_tensor({d, d}, ws), true);
    m.params_.add("time_embed.b", Tensor::zeros({1, d}), true);
    for (int l = 0; l < cfg.layers; ++l) {
        m.params_.add(m.layer_name(l, "attn.wq"), rng.gaussian_tensor({d, d}, ws), true);
        m.params_.add(m.layer_name(l, "attn.wk"), rng.gaussian_tensor({d, d}, ws), true);
        m.params_.add(m.layer_name(l, "attn.wv"), rng.gaussian_tensor({d, d}, ws), true);
        m.params_.add(m.layer_name(l, "attn.wo"), rng.gaussian_tensor({d, d}, ws), true);
        // Modulation starts as identity: zero scale, zero shift.
        m.params_.add(m.layer_name(l, "mod.w"), Tensor::zeros({d, 4 * d}), true);
        m.params_.add(m.layer_name(l, "mod.b"), Tensor::zeros({1, 4 * d}), true);
        m.params_.add(m.layer_name(l, "mlp.w1"), rng.gaussian_tensor({d, hidden}, ws), true);
        m.params_.add(m.layer_name(l, "mlp.b1"), Tensor::zeros({1, hidden}), true);
        m.params_.add(m.layer_name(l, "mlp.w2"),
                      rng.gaussian_tensor({hidden, d}, std::sqrt(1.0 / hidden)), true);
        m.params_.add(m.layer_name(l, "mlp.b2"), Tensor::zeros({1, d}), true);
    }
    m.params_.add("final.mod.w", Tensor::zeros({d, 2 * d}), true);
    m.params_.add("final.mod.b", Tensor::zeros({1, 2 * d}), true);
    // Zero-initialized head: the velocity field starts at zero.
    m.params_.add("final.head.w", Tensor::zeros({d, cfg.patch_dim()}), true);
    m.params_.add("final.head.b", Tensor::zeros({1, cfg.patch_dim()}), true);
    return m;
}

BaseProjection DitModel::layer_projection(int layer) const {
    BaseProjection p;
    p.wq = params_.get(layer_name(layer, "attn.wq"));
    p.wk = params_.get(layer_name(layer, "attn.wk"));
    p.wv = params_.get(layer_name(layer, "attn.wv"));
    p.wo = params_.get(layer_name(layer, "attn.wo"));
    return p;
}

Tensor DitModel::embed_image_tokens(const Tensor& raw_tokens) const {
    return ops::add_bias_rows(ops::matmul(raw_tokens, params_.get("patch_embed.w")),
                              params_.get("patch_embed.b"));
}

Tensor DitModel::text_features(const std::vector<int>& prompt) const {
    if (prompt.empty()) {
        return Tensor::zeros({0, cfg.d_model});
    }
    return encode_text(params_.get("text_embed"), prompt);
}

Tensor DitModel::time_features(double t) const {
    Tensor emb = timestep_embedding(t, cfg.d_model);
    return ops::gelu(ops::add_bias_rows(ops::matmul(emb, params_.get("time_embed.w")),
                                        params_.get("time_embed.b")));
}

ConditionInput DitModel::prepare_condition(const ToyImage& img, ConditionKind kind) const {
    ToyImage resized = img;
    if (img.height() != cfg.cond_h || img.width() != cfg.cond_w) {
        resized = resize_condition(img, cfg.cond_h, cfg.cond_w);
    }
    auto [raw, grid] = patchify_raw(resized, cfg.patch);
    ConditionInput cond;
    cond.kind = kind;
    cond.tokens = embed_image_tokens(raw);
    cond.grid = std::move(grid);
    // Spatial signals address the generation canvas, so their full-resolution
    // dimensions are the noise resolution.
    cond.orig_h = cfg.noise_h;
    cond.orig_w = cfg.noise_w;
    cond.resized_h = cfg.cond_h;
    cond.resized_w = cfg.cond_w;
    return cond;
}

Tensor DitModel::forward(const BranchedSequence& seq, double t,
                         const std::vector<const LoraAdapter*>& adapters, const BranchMask& mask,
                         ForwardTrace* trace) const {
    seq.validate();
    require(mask.total() == seq.layout.total(), "forward: mask layout does not match sequence");
    const int n_tn = seq.layout.tn();
    const int d = cfg.d_model;
    const RopeParams rope = cfg.rope();

    if (trace != nullptr) {
        trace->keys.assign(static_cast<std::size_t>(cfg.layers), {});
        trace->values.assign(static_cast<std::size_t>(cfg.layers), {});
    }

    Tensor x = seq.features;
    Tensor t_feat = time_features(t);
    for (int l = 0; l < cfg.layers; ++l) {
        Tensor mod = ops::add_bias_rows(ops::matmul(t_feat, params_.get(layer_name(l, "mod.w"))),
                                        params_.get(layer_name(l, "mod.b")));
        Tensor s_attn = ops::slice_cols(mod, 0, d);
        Tensor b_attn = ops::slice_cols(mod, d, d);
        Tensor s_mlp = ops::slice_cols(mod, 2 * d, d);
        Tensor b_mlp = ops::slice_cols(mod, 3 * d, d);

        Tensor h = ops::modulate_rows(ops::rmsnorm_rows(x), s_attn, b_attn, 0, n_tn);
        Projected p = project_qkv(h, seq.layout, layer_projection(l), adapters, l);
        auto q_heads = rope_heads(split_heads(p.q, cfg.heads), seq.positions, rope);
        auto k_heads = rope_heads(split_heads(p.k, cfg.heads), seq.positions, rope);
        auto v_heads = split_heads(p.v, cfg.heads);
        if (trace != nullptr && !seq.layout.blocks.empty()) {
            Tensor k_all = ops::concat_cols(k_heads);
            for (std::size_t j = 0; j < seq.layout.blocks.size(); ++j) {
                const int start = seq.layout.block_start(j);
                const int count = seq.layout.blocks[j].count;
                trace->keys[static_cast<std::size_t>(l)].push_back(
                    ops::slice_rows(k_all, start, count));
                trace->values[static_cast<std::size_t>(l)].push_back(
                    ops::slice_rows(p.v, start, count));
            }
        }
        Tensor attn =
            attention_core(q_heads, k_heads, v_heads, mask, params_.get(layer_name(l, "attn.wo")));
        x = ops::add(x, attn);

        Tensor h2 = ops::modulate_rows(ops::rmsnorm_rows(x), s_mlp, b_mlp, 0, n_tn);
        Tensor mlp = ops::add_bias_rows(
            ops::matmul(ops::gelu(ops::add_bias_rows(
                            ops::matmul(h2, params_.get(layer_name(l, "mlp.w1"))),
                            params_.get(layer_name(l, "mlp.b1")))),
                        params_.get(layer_name(l, "mlp.w2"))),
            params_.get(layer_name(l, "mlp.b2")));
        x = ops::add(x, mlp);
    }

    Tensor fmod = ops::add_bias_rows(ops::matmul(t_feat, params_.get("final.mod.w")),
                                     params_.get("final.mod.b"));
    Tensor fs = ops::slice_cols(fmod, 0, d);
    Tensor fb = ops::slice_cols(fmod, d, d);
    Tensor h = ops::modulate_rows(ops::rmsnorm_rows(x), fs, fb, 0, n_tn);
    Tensor noise_rows = ops::slice_rows(h, seq.layout.n_text, seq.layout.n_noise);
    return ops::add_bias_rows(ops::matmul(noise_rows, params_.get("final.head.w")),
                              params_.get("final.head.b"));
}

void DitModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    for (int v : {cfg.d_model, cfg.heads, cfg.layers, cfg.patch, cfg.noise_h, cfg.noise_w,
                  cfg.cond_h, cfg.cond_w, cfg.vocab, cfg.rank, cfg.channels, cfg.mlp_ratio}) {
        write_u32(os, static_cast<std::uint32_t>(v));
    }
    write_f64(os, cfg.base_freq);
    write_f64(os, cfg.delta_h);
    write_u32(os, static_cast<std::uint32_t>(params_.size()));
    params_.write_values(os);
    if (!os) throw std::runtime_error("failed writing " + path);
}

DitModel DitModel::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw std::runtime_error(path + " is not a base checkpoint");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kVersion) {
        throw std::runtime_error(path + ": unsupported checkpoint version");
    }
    ModelConfig cfg;
    int* fields[12] = {&cfg.d_model, &cfg.heads, &cfg.layers, &cfg.patch,
                       &cfg.noise_h, &cfg.noise_w, &cfg.cond_h, &cfg.cond_w,
                       &cfg.vocab, &cfg.rank, &cfg.channels, &cfg.mlp_ratio};
    for (int* f : fields) {
        *f = static_cast<int>(read_u32(is));
    }
    cfg.base_freq = read_f64(is);
    cfg.delta_h = read_f64(is);
    DitModel m = DitModel::init(cfg, 0);
    const std::uint32_t entry_count = read_u32(is);
    if (entry_count != m.params_.size()) {
        throw std::runtime_error(path + ": parameter table does not match configuration");
    }
    m.params_.read_values(is);
    return m;
}

Tensor flow_loss(const Tensor& velocity, const Tensor& eps, const Tensor& x0) {
    require(eps.shape == x0.shape, "flow_loss: noise and data shapes differ");
    Tensor target = ops::sub(eps, x0);
    return ops::mean_sq_diff(velocity, target);
}

namespace {

struct StepContext {
    FlowState flow;
    BranchedSequence seq;
    BranchMask mask;
    std::vector<const LoraAdapter*> adapters;
};

// One training example at a uniformly sampled timestep.
StepContext make_step(const DitModel& model, const TrainSample& sample, Rng& rng,
                      const LoraAdapter* adapter) {
    const ModelConfig& cfg = model.cfg;
    const double t = rng.uniform();
    Tensor x0 = patchify_raw(sample.target, cfg.patch).first;
    Tensor eps = rng.gaussian_tensor({cfg.noise_tokens(), cfg.patch_dim()});

    StepContext ctx;
    ctx.flow = FlowState::make(x0, eps, t);
    Tensor noise_feat = model.embed_image_tokens(ctx.flow.z_t);
    Tensor text = model.text_features(sample.prompt);

    std::vector<ConditionInput> conds;
    if (adapter != nullptr) {
        require(sample.condition.has_value(), "training: sample is missing its condition image");
        conds.push_back(model.prepare_condition(*sample.condition, adapter->kind));
        ctx.adapters.push_back(adapter);
    }
    ctx.seq = assemble(text, noise_feat, cfg.noise_grid(), conds, cfg.patch, cfg.delta_h);
    ctx.mask = BranchMask::make(ctx.seq.layout,
                                adapter != nullptr ? MaskMode::conditional : MaskMode::none);
    return ctx;
}

void check_finite(double loss, int step) {
    if (!std::isfinite(loss)) {
        throw std::runtime_error("training diverged (loss not finite) at step " +
                                 std::to_string(step));
    }
}

}  // namespace

TrainResult train_stage1(DitModel& model, const std::vector<TrainSample>& data, int steps,
                         double lr, std::uint64_t seed) {
    require(!data.empty(), "training: empty dataset");
    Rng rng(seed);
    Adam opt;
    opt.lr = lr;
    TrainResult result;
    result.losses.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        const TrainSample& sample = data[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
        StepContext ctx = make_step(model, sample, rng, nullptr);
        Tensor vel = model.forward(ctx.seq, ctx.flow.t, {}, ctx.mask);
        Tensor loss = flow_loss(vel, ctx.flow.eps, ctx.flow.x0);
        check_finite(loss.value(), step);
        model.params().zero_grads();
        backward(loss);
        if (lr != 0.0) {
            opt.step(model.params());
        }
        result.losses.push_back(loss.value());
    }
    return result;
}

TrainResult train_stage2(DitModel& model, LoraAdapter& adapter, const std::vector<TrainSample>& data,
                         int steps, double lr, std::uint64_t seed) {
    require(!data.empty(), "training: empty dataset");
    require(adapter.layer_count == model.cfg.layers && adapter.d_model == model.cfg.d_model,
            "training: adapter does not match model configuration");
    model.params().freeze_all();
    adapter.set_trainable(true);
    Rng rng(seed);
    Adam opt;
    opt.lr = lr;
    TrainResult result;
    result.losses.reserve(static_cast<std::size_t>(steps));
    for (int step = 0; step < steps; ++step) {
        const TrainSample& sample = data[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
        StepContext ctx = make_step(model, sample, rng, &adapter);
        Tensor vel = model.forward(ctx.seq, ctx.flow.t, ctx.adapters, ctx.mask);
        Tensor loss = flow_loss(vel, ctx.flow.eps, ctx.flow.x0);
        check_finite(loss.value(), step);
        model.params().zero_grads();
        adapter.params().zero_grads();
        backward(loss);
        if (model.params().max_frozen_grad() != real(0)) {
            throw std::logic_error("frozen base parameter received a gradient at step " +
                                   std::to_string(step));
        }
        if (lr != 0.0) {
            opt.step(adapter.params());
        }
        result.losses.push_back(loss.value());
    }
    return result;
}

double evaluate_flow_loss(const DitModel& model, const LoraAdapter* adapter,
                          const std::vector<TrainSample>& data, int probes_per_sample,
                          std::uint64_t seed) {
    require(!data.empty() && probes_per_sample > 0, "evaluate: nothing to evaluate");
    NoGradGuard no_grad;
    double total = 0;
    Rng sample_rng(seed ^ 0x9e3779b97f4a7c15ull);
    for (const TrainSample& sample : data) {
        for (int p = 0; p < probes_per_sample; ++p) {
            const double t = (p + 0.5) / probes_per_sample;
            Tensor x0 = patchify_raw(sample.target, model.cfg.patch).first;
            Tensor eps = sample_rng.gaussian_tensor({model.cfg.noise_tokens(), model.cfg.patch_dim()});
            FlowState flow = FlowState::make(x0, eps, t);
            Tensor noise_feat = model.embed_image_tokens(flow.z_t);
            Tensor text = model.text_features(sample.prompt);
            std::vector<ConditionInput> conds;
            std::vector<const LoraAdapter*> adapters;
            if (adapter != nullptr) {
                require(sample.condition.has_value(), "evaluate: sample is missing its condition");
                conds.push_back(model.prepare_condition(*sample.condition, adapter->kind));
                adapters.push_back(adapter);
            }
            BranchedSequence seq =
                assemble(text, noise_feat, model.cfg.noise_grid(), conds, model.cfg.patch,
                         model.cfg.delta_h);
            BranchMask mask = BranchMask::make(
                seq.layout, adapter != nullptr ? MaskMode::conditional : MaskMode::none);
            Tensor vel = model.forward(seq, t, adapters, mask);
            total += flow_loss(vel, flow.eps, flow.x0).value();
        }
    }
    return total / (static_cast<double>(data.size()) * probes_per_sample);
}

}  // namespace cdit
