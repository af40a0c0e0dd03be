#include "cdit/kvcache.hpp"

#include <cmath>

namespace cdit {

namespace {

// x + dt * v, plain values.
Tensor euler_update(const Tensor& x, const Tensor& v, double dt) {
    require(x.shape == v.shape, "euler: state and velocity shapes differ");
    Tensor out = Tensor::zeros(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        (*out.data)[i] = (*x.data)[i] + static_cast<real>(dt) * (*v.data)[i];
    }
    return out;
}

void check_adapters(const std::vector<ConditionInput>& conditions,
                    const std::vector<const LoraAdapter*>& adapters) {
    if (conditions.size() != adapters.size()) {
        throw std::logic_error("generation: expected one adapter per condition");
    }
    for (std::size_t i = 0; i < conditions.size(); ++i) {
        require(adapters[i] != nullptr, "generation: null adapter");
        if (adapters[i]->kind != conditions[i].kind) {
            throw std::logic_error("generation: adapter kind does not match condition kind");
        }
    }
}

}  // namespace

void prime_cache_into(KvCache& cache, const DitModel& model,
                      const std::vector<ConditionInput>& conditions,
                      const std::vector<const LoraAdapter*>& adapters, bool mutual_blocking) {
    if (cache.primed) {
        throw std::logic_error("cache: already primed");
    }
    check_adapters(conditions, adapters);
    NoGradGuard no_grad;
    const ModelConfig& cfg = model.cfg;
    cache.mutual_blocking = mutual_blocking;
    cache.plan = plan_sequence(0, PositionGrid{}, conditions, cfg.patch, cfg.delta_h);
    cache.layers.assign(static_cast<std::size_t>(cfg.layers), {});

    if (!conditions.empty()) {
        BranchMask mask = BranchMask::make_inference(cache.plan.layout, mutual_blocking);
        std::vector<Tensor> parts;
        parts.reserve(conditions.size());
        for (const ConditionInput& c : conditions) {
            parts.push_back(c.tokens);
        }
        Tensor x = ops::concat_rows(parts);
        for (int l = 0; l < cfg.layers; ++l) {
            Tensor h = ops::rmsnorm_rows(x);
            Projected p = project_qkv(h, cache.plan.layout, model.layer_projection(l), adapters, l);
            auto q_heads = rope_heads(split_heads(p.q, cfg.heads), cache.plan.positions, cfg.rope());
            auto k_heads = rope_heads(split_heads(p.k, cfg.heads), cache.plan.positions, cfg.rope());
            auto v_heads = split_heads(p.v, cfg.heads);
            Tensor k_all = ops::concat_cols(k_heads);
            for (std::size_t j = 0; j < cache.plan.layout.blocks.size(); ++j) {
                const int start = cache.plan.layout.block_start(j);
                const int count = cache.plan.layout.blocks[j].count;
                cache.layers[static_cast<std::size_t>(l)].push_back(
                    {ops::slice_rows(k_all, start, count), ops::slice_rows(p.v, start, count)});
            }
            Tensor attn = attention_core(q_heads, k_heads, v_heads, mask,
                                         model.params().get("layers." + std::to_string(l) + ".attn.wo"));
            x = ops::add(x, attn);
            Tensor h2 = ops::rmsnorm_rows(x);
            const std::string base = "layers." + std::to_string(l) + ".";
            Tensor mlp = ops::add_bias_rows(
                ops::matmul(ops::gelu(ops::add_bias_rows(
                                ops::matmul(h2, model.params().get(base + "mlp.w1")),
                                model.params().get(base + "mlp.b1"))),
                            model.params().get(base + "mlp.w2")),
                model.params().get(base + "mlp.b2"));
            x = ops::add(x, mlp);
        }
    }
    cache.primed = true;
    cache.primed_hash = cache.content();
}

std::uint64_t KvCache::content() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& layer : layers) {
        for (const Block& b : layer) {
            h ^= content_hash(b.k);
            h *= 1099511628211ull;
            h ^= content_hash(b.v);
            h *= 1099511628211ull;
        }
    }
    return h;
}

KvCache prime_cache(const DitModel& model, const std::vector<ConditionInput>& conditions,
                    const std::vector<const LoraAdapter*>& adapters, bool mutual_blocking) {
    KvCache cache;
    prime_cache_into(cache, model, conditions, adapters, mutual_blocking);
    return cache;
}

Tensor cached_step(const DitModel& model, const Tensor& x_raw, double t_cur, double t_next,
                   const std::vector<int>& prompt, const KvCache& cache) {
    if (!cache.primed) {
        throw std::logic_error("cache: cached_step on an unprimed cache");
    }
    NoGradGuard no_grad;
    const ModelConfig& cfg = model.cfg;
    const int d = cfg.d_model;
    const int dh = cfg.head_dim();

    Tensor text = model.text_features(prompt);
    Tensor noise_feat = model.embed_image_tokens(x_raw);
    const int n_text = text.rows();
    const int n_noise = noise_feat.rows();
    const int n_tn = n_text + n_noise;

    BranchLayout full_layout;
    full_layout.n_text = n_text;
    full_layout.n_noise = n_noise;
    full_layout.blocks = cache.plan.layout.blocks;
    BranchMask mask = BranchMask::make_inference(full_layout, cache.mutual_blocking);

    PositionGrid tn_positions = PositionGrid::constant(n_text, 0.0, 0.0);
    tn_positions.append(cfg.noise_grid());

    BranchLayout tn_layout;
    tn_layout.n_text = n_text;
    tn_layout.n_noise = n_noise;

    Tensor x = n_text > 0 ? ops::concat_rows({text, noise_feat}) : noise_feat;
    Tensor t_feat = model.time_features(t_cur);
    const std::size_t n_blocks = cache.plan.layout.blocks.size();

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string base = "layers." + std::to_string(l) + ".";
        Tensor mod = ops::add_bias_rows(ops::matmul(t_feat, model.params().get(base + "mod.w")),
                                        model.params().get(base + "mod.b"));
        Tensor s_attn = ops::slice_cols(mod, 0, d);
        Tensor b_attn = ops::slice_cols(mod, d, d);
        Tensor s_mlp = ops::slice_cols(mod, 2 * d, d);
        Tensor b_mlp = ops::slice_cols(mod, 3 * d, d);

        Tensor h = ops::modulate_rows(ops::rmsnorm_rows(x), s_attn, b_attn, 0, n_tn);
        Projected p = project_qkv(h, tn_layout, model.layer_projection(l), {}, l);
        auto q_heads = rope_heads(split_heads(p.q, cfg.heads), tn_positions, cfg.rope());
        auto k_tn_heads = rope_heads(split_heads(p.k, cfg.heads), tn_positions, cfg.rope());
        auto v_tn_heads = split_heads(p.v, cfg.heads);

        std::vector<Tensor> k_heads, v_heads;
        k_heads.reserve(static_cast<std::size_t>(cfg.heads));
        v_heads.reserve(static_cast<std::size_t>(cfg.heads));
        const auto& layer_cache = cache.layers[static_cast<std::size_t>(l)];
        for (int head = 0; head < cfg.heads; ++head) {
            std::vector<Tensor> kp{k_tn_heads[static_cast<std::size_t>(head)]};
            std::vector<Tensor> vp{v_tn_heads[static_cast<std::size_t>(head)]};
            for (std::size_t j = 0; j < n_blocks; ++j) {
                kp.push_back(ops::slice_cols(layer_cache[j].k, head * dh, dh));
                vp.push_back(ops::slice_cols(layer_cache[j].v, head * dh, dh));
            }
            k_heads.push_back(kp.size() == 1 ? kp.front() : ops::concat_rows(kp));
            v_heads.push_back(vp.size() == 1 ? vp.front() : ops::concat_rows(vp));
        }
        Tensor attn =
            attention_core(q_heads, k_heads, v_heads, mask, model.params().get(base + "attn.wo"));
        x = ops::add(x, attn);

        Tensor h2 = ops::modulate_rows(ops::rmsnorm_rows(x), s_mlp, b_mlp, 0, n_tn);
        Tensor mlp = ops::add_bias_rows(
            ops::matmul(ops::gelu(ops::add_bias_rows(ops::matmul(h2, model.params().get(base + "mlp.w1")),
                                                     model.params().get(base + "mlp.b1"))),
                        model.params().get(base + "mlp.w2")),
            model.params().get(base + "mlp.b2"));
        x = ops::add(x, mlp);
    }

    Tensor fmod = ops::add_bias_rows(ops::matmul(t_feat, model.params().get("final.mod.w")),
                                     model.params().get("final.mod.b"));
    Tensor fs = ops::slice_cols(fmod, 0, d);
    Tensor fb = ops::slice_cols(fmod, d, d);
    Tensor h = ops::modulate_rows(ops::rmsnorm_rows(x), fs, fb, 0, n_tn);
    Tensor noise_rows = ops::slice_rows(h, n_text, n_noise);
    Tensor velocity = ops::add_bias_rows(ops::matmul(noise_rows, model.params().get("final.head.w")),
                                         model.params().get("final.head.b"));
    return euler_update(x_raw, velocity, t_next - t_cur);
}

ToyImage generate(const DitModel& model, const std::vector<int>& prompt,
                  const std::vector<std::pair<ConditionKind, ToyImage>>& conditions,
                  const std::vector<const LoraAdapter*>& adapters, const GenerateOptions& options,
                  std::vector<Tensor>* trajectory) {
    options.schedule.validate();
    NoGradGuard no_grad;
    const ModelConfig& cfg = model.cfg;

    std::vector<ConditionInput> prepared;
    prepared.reserve(conditions.size());
    for (const auto& [kind, img] : conditions) {
        prepared.push_back(model.prepare_condition(img, kind));
    }
    check_adapters(prepared, adapters);

    Rng rng(options.seed);
    Tensor x = rng.gaussian_tensor({cfg.noise_tokens(), cfg.patch_dim()});

    if (options.use_cache) {
        KvCache cache = prime_cache(model, prepared, adapters, options.mutual_blocking);
        for (int k = 0; k < options.schedule.steps; ++k) {
            x = cached_step(model, x, options.schedule.t_at(k), options.schedule.t_at(k + 1),
                            prompt, cache);
            if (trajectory != nullptr) trajectory->push_back(x);
        }
        if (cache.content() != cache.primed_hash) {
            throw std::logic_error("cache: primed entries changed during sampling");
        }
    } else {
        Tensor text = model.text_features(prompt);
        for (int k = 0; k < options.schedule.steps; ++k) {
            const double t_cur = options.schedule.t_at(k);
            Tensor noise_feat = model.embed_image_tokens(x);
            BranchedSequence seq =
                assemble(text, noise_feat, cfg.noise_grid(), prepared, cfg.patch, cfg.delta_h);
            BranchMask mask = BranchMask::make_inference(seq.layout, options.mutual_blocking);
            Tensor velocity = model.forward(seq, t_cur, adapters, mask);
            x = euler_update(x, velocity, options.schedule.t_at(k + 1) - t_cur);
            if (trajectory != nullptr) trajectory->push_back(x);
        }
    }

    ToyImage img = unpatchify(x, cfg.patch, cfg.channels, cfg.noise_h, cfg.noise_w);
    for (real& v : *img.pixels.data) {
        v = std::clamp(v, real(0), real(1));
    }
    return img;
}

}  // namespace cdit
