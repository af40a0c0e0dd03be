#include "cdit/verify.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "cdit/dataset.hpp"
#include "cdit/gradcheck.hpp"
#include "cdit/instrument.hpp"
#include "cdit/kernels.hpp"
#include "cdit/kvcache.hpp"
#include "cdit/linalg.hpp"

namespace cdit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.patch = 2;
    cfg.noise_h = cfg.noise_w = 8;
    cfg.cond_h = cfg.cond_w = 4;
    cfg.vocab = 8;
    cfg.rank = 4;
    return cfg;
}

ToyImage random_image(Rng& rng, int h, int w) {
    ToyImage img = ToyImage::zeros(1, h, w);
    for (real& v : *img.pixels.data) {
        v = static_cast<real>(rng.uniform());
    }
    return img;
}

struct Scene {
    DitModel model;
    LoraAdapter spatial;
    LoraAdapter subject;
    std::vector<int> prompt;
    ToyImage cond_a;
    ToyImage cond_b;
};

Scene make_scene(std::uint64_t seed, bool randomize_up) {
    Rng rng(seed);
    Scene s{DitModel::init(tiny_config(), rng.raw()),
            LoraAdapter::init(ConditionKind::spatial, 32, 4, 2, rng),
            LoraAdapter::init(ConditionKind::subject, 32, 4, 2, rng),
            {1, 3},
            random_image(rng, 4, 4),
            random_image(rng, 4, 4)};
    if (randomize_up) {
        for (LoraAdapter* a : {&s.spatial, &s.subject}) {
            for (auto& e : a->params().entries()) {
                for (real& v : *e.tensor.data) {
                    v += static_cast<real>(rng.gaussian() * 0.05);
                }
            }
        }
    }
    return s;
}

// Dense reference attention: materializes the full n x n mask matrix, adds
// it to the logits and runs textbook rows. Accumulation order matches the
// engine kernels (ascending key index), so agreement is exact.
Tensor dense_reference_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const PositionGrid& pos, const BranchMask& mask, int heads,
                                 const RopeParams& rope, const Tensor& wo) {
    const int n = q.rows(), d = q.cols(), dh = d / heads;
    std::vector<std::vector<double>> mask_matrix(static_cast<std::size_t>(n),
                                                 std::vector<double>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            mask_matrix[i][j] = mask_logit(mask, i, j);
        }
    }
    Tensor ctx = Tensor::zeros({n, d});
    for (int h = 0; h < heads; ++h) {
        Tensor qh = Tensor::zeros({n, dh}), kh = Tensor::zeros({n, dh});
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < dh; ++c) {
                qh.at2(r, c) = q.at2(r, h * dh + c);
                kh.at2(r, c) = k.at2(r, h * dh + c);
            }
        }
        Tensor qr = Tensor::zeros({n, dh}), kr = Tensor::zeros({n, dh});
        rope_rotate_raw(qh.ptr(), qr.ptr(), n, pos, rope, false);
        rope_rotate_raw(kh.ptr(), kr.ptr(), n, pos, rope, false);
        const real inv_sqrt = static_cast<real>(1.0 / std::sqrt(double(dh)));
        for (int i = 0; i < n; ++i) {
            std::vector<real> logits(static_cast<std::size_t>(n));
            real mx = -std::numeric_limits<real>::infinity();
            for (int j = 0; j < n; ++j) {
                if (mask_matrix[i][j] == -kInf) {
                    logits[static_cast<std::size_t>(j)] = -std::numeric_limits<real>::infinity();
                    continue;
                }
                real acc = 0;
                for (int c = 0; c < dh; ++c) {
                    acc += qr.at2(i, c) * kr.at2(j, c);
                }
                acc = acc * inv_sqrt;
                logits[static_cast<std::size_t>(j)] = acc;
                if (acc > mx) mx = acc;
            }
            real sum = 0;
            std::vector<real> p(static_cast<std::size_t>(n), real(0));
            for (int j = 0; j < n; ++j) {
                if (std::isinf(logits[static_cast<std::size_t>(j)])) continue;
                const real e = std::exp(logits[static_cast<std::size_t>(j)] - mx);
                p[static_cast<std::size_t>(j)] = e;
                sum += e;
            }
            const real inv = real(1) / sum;
            for (int j = 0; j < n; ++j) {
                p[static_cast<std::size_t>(j)] *= inv;
            }
            for (int c = 0; c < dh; ++c) {
                real acc = 0;
                for (int j = 0; j < n; ++j) {
                    acc += p[static_cast<std::size_t>(j)] * v.at2(j, h * dh + c);
                }
                ctx.at2(i, h * dh + c) = acc;
            }
        }
    }
    NoGradGuard ng;
    return ops::matmul(ctx, wo);
}

struct Property {
    std::string name;
    double tolerance;
    std::function<double()> run;  // returns measured error
};

double bit_diff(const Tensor& a, const Tensor& b) {
    return a.bitwise_equal(b) ? 0.0 : std::max(a.max_abs_diff(b), 1e-300);
}

}  // namespace

std::vector<PropertyResult> run_verification(const VerifyOptions& options) {
    std::vector<Property> properties;
    const bool leak_fault = options.fault == "leak-mask";
    if (!options.fault.empty() && !leak_fault) {
        throw std::domain_error("unknown fault mode: " + options.fault);
    }

    properties.push_back({"softmax.row-stochastic", 1e-12, [] {
        Rng rng(11);
        Tensor logits = rng.gaussian_tensor({8, 9}, 2.0);
        logits.at2(3, 4) = -std::numeric_limits<real>::infinity();
        logits.at2(0, 0) = -std::numeric_limits<real>::infinity();
        NoGradGuard ng;
        Tensor p = ops::softmax_rows(logits);
        double err = 0;
        for (int r = 0; r < 8; ++r) {
            double sum = 0;
            for (int c = 0; c < 9; ++c) {
                const double v = p.at2(r, c);
                if (v < 0) err = std::max(err, -v);
                sum += v;
            }
            err = std::max(err, std::abs(sum - 1.0));
        }
        if (p.at2(3, 4) != 0 || p.at2(0, 0) != 0) err = std::max(err, 1.0);
        return err;
    }});

    properties.push_back({"matmul.associativity", 1e-10, [] {
        Rng rng(13);
        NoGradGuard ng;
        Tensor a = rng.gaussian_tensor({6, 5});
        Tensor b = rng.gaussian_tensor({5, 4});
        Tensor c = rng.gaussian_tensor({4, 3});
        return double(ops::matmul(ops::matmul(a, b), c)
                          .max_abs_diff(ops::matmul(a, ops::matmul(b, c))));
    }});

    properties.push_back({"kernels.serial-parallel-bitwise", 0.0, [] {
        Rng rng(17);
        Tensor a = rng.gaussian_tensor({37, 23});
        Tensor b = rng.gaussian_tensor({23, 31});
        Tensor c1 = Tensor::zeros({37, 31}), c2 = Tensor::zeros({37, 31});
        kern::serial::matmul_nn(a.ptr(), b.ptr(), c1.ptr(), 37, 23, 31, false);
        kern::par::matmul_nn(a.ptr(), b.ptr(), c2.ptr(), 37, 23, 31, false);
        double err = bit_diff(c1, c2);
        Tensor bt = rng.gaussian_tensor({31, 23});
        Tensor d1 = Tensor::zeros({37, 31}), d2 = Tensor::zeros({37, 31});
        kern::serial::matmul_nt(a.ptr(), bt.ptr(), d1.ptr(), 37, 23, 31, false);
        kern::par::matmul_nt(a.ptr(), bt.ptr(), d2.ptr(), 37, 23, 31, false);
        err = std::max(err, bit_diff(d1, d2));
        Tensor at = rng.gaussian_tensor({23, 37});
        Tensor e1 = Tensor::zeros({37, 31}), e2 = Tensor::zeros({37, 31});
        kern::serial::matmul_tn(at.ptr(), b.ptr(), e1.ptr(), 37, 23, 31, false);
        kern::par::matmul_tn(at.ptr(), b.ptr(), e2.ptr(), 37, 23, 31, false);
        return std::max(err, bit_diff(e1, e2));
    }});

    properties.push_back({"rope.isometry", 1e-12, [] {
        Rng rng(19);
        RopeParams rp{16, 10000.0};
        PositionGrid g;
        for (int i = 0; i < 12; ++i) {
            g.positions.emplace_back(rng.uniform() * 40, rng.uniform() * 40);
        }
        Tensor x = rng.gaussian_tensor({12, 16});
        Tensor y = Tensor::zeros({12, 16});
        rope_rotate_raw(x.ptr(), y.ptr(), 12, g, rp, false);
        double err = 0;
        for (int r = 0; r < 12; ++r) {
            double nx = 0, ny = 0;
            for (int c = 0; c < 16; ++c) {
                nx += double(x.at2(r, c)) * x.at2(r, c);
                ny += double(y.at2(r, c)) * y.at2(r, c);
            }
            err = std::max(err, std::abs(std::sqrt(nx) - std::sqrt(ny)));
        }
        return err;
    }});

    properties.push_back({"rope.relative-shift", 1e-9, [] {
        Rng rng(23);
        RopeParams rp{16, 10000.0};
        double err = 0;
        for (int trial = 0; trial < 20; ++trial) {
            Tensor q = rng.gaussian_tensor({1, 16});
            Tensor k = rng.gaussian_tensor({1, 16});
            const double r1 = rng.uniform() * 30, c1 = rng.uniform() * 30;
            const double r2 = rng.uniform() * 30, c2 = rng.uniform() * 30;
            const double sr = rng.uniform() * 7.5, sc = rng.uniform() * 7.5;  // fractional shifts
            auto dot_at = [&](double ar, double ac, double br, double bc) {
                PositionGrid g1, g2;
                g1.positions = {{ar, ac}};
                g2.positions = {{br, bc}};
                Tensor qr = Tensor::zeros({1, 16}), kr = Tensor::zeros({1, 16});
                rope_rotate_raw(q.ptr(), qr.ptr(), 1, g1, rp, false);
                rope_rotate_raw(k.ptr(), kr.ptr(), 1, g2, rp, false);
                double acc = 0;
                for (int c = 0; c < 16; ++c) acc += double(qr.at2(0, c)) * kr.at2(0, c);
                return acc;
            };
            err = std::max(err, std::abs(dot_at(r1, c1, r2, c2) -
                                         dot_at(r1 + sr, c1 + sc, r2 + sr, c2 + sc)));
        }
        return err;
    }});

    properties.push_back({"pai.scale-factors", 0.0, [] {
        auto [a, b] = scale_factors(1024, 1024, 512, 512);
        auto [c, d] = scale_factors(96, 64, 32, 32);
        auto [e, f] = scale_factors(57, 57, 57, 57);
        return std::abs(a - 2) + std::abs(b - 2) + std::abs(c - 3) + std::abs(d - 2) +
               std::abs(e - 1) + std::abs(f - 1);
    }});

    properties.push_back({"pai.identity-grid", 0.0, [] {
        PositionGrid g = interpolate_positions(3, 4, 1.0, 1.0);
        double err = 0;
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 4; ++j) {
                const auto& [r, c] = g.positions[static_cast<std::size_t>(i * 4 + j)];
                err += std::abs(r - i) + std::abs(c - j);
            }
        }
        return err;
    }});

    properties.push_back({"pai.scaled-grid", 0.0, [] {
        PositionGrid g = interpolate_positions(2, 2, 2.0, 2.0);
        const std::vector<std::pair<double, double>> want = {{0, 0}, {0, 2}, {2, 0}, {2, 2}};
        double err = 0;
        for (std::size_t i = 0; i < want.size(); ++i) {
            err += std::abs(g.positions[i].first - want[i].first) +
                   std::abs(g.positions[i].second - want[i].second);
        }
        return err;
    }});

    properties.push_back({"pe-offset.height-only", 0.0, [] {
        PositionGrid g;
        g.positions = {{0, 0}, {1, 1}};
        PositionGrid shifted = offset_positions(g, 1, 64.0);
        double err = std::abs(shifted.positions[0].first - 64) + std::abs(shifted.positions[0].second) +
                     std::abs(shifted.positions[1].first - 65) +
                     std::abs(shifted.positions[1].second - 1);
        PositionGrid same = offset_positions(g, 3, 0.0);
        err += std::abs(same.positions[1].first - 1) + std::abs(same.positions[1].second - 1);
        PositionGrid twice = offset_positions(PositionGrid{{{2, 3}}}, 2, 8.0);
        err += std::abs(twice.positions[0].first - 18) + std::abs(twice.positions[0].second - 3);
        return err;
    }});

    properties.push_back({"mask.conditional-zero-leak", 0.0, [leak_fault] {
        Rng rng(29);
        NoGradGuard ng;
        BranchLayout layout;
        layout.n_text = 2;
        layout.n_noise = 5;
        layout.blocks = {{ConditionKind::spatial, 4}};
        BranchMask mask = BranchMask::make(layout, MaskMode::conditional);
        if (leak_fault) {
            mask.fault_query = layout.tn();  // first condition token
            mask.fault_key = 0;              // first text token
        }
        const int n = layout.total(), d = 16, heads = 2;
        RopeParams rp{8, 10000.0};
        PositionGrid pos;
        for (int i = 0; i < n; ++i) pos.positions.emplace_back(i, 2 * i);
        Tensor q = rng.gaussian_tensor({n, d});
        Tensor k = rng.gaussian_tensor({n, d});
        Tensor v = rng.gaussian_tensor({n, d});
        Tensor wo = rng.gaussian_tensor({d, d});
        Tensor out1 = masked_attention(q, k, v, pos, mask, heads, rp, wo);
        Tensor k2 = Tensor::from_values(k.shape, *k.data);
        Tensor v2 = Tensor::from_values(v.shape, *v.data);
        for (int r = 0; r < layout.tn(); ++r) {
            for (int c = 0; c < d; ++c) {
                k2.at2(r, c) += static_cast<real>(rng.gaussian());
                v2.at2(r, c) += static_cast<real>(rng.gaussian());
            }
        }
        Tensor out2 = masked_attention(q, k2, v2, pos, mask, heads, rp, wo);
        Tensor c1 = ops::slice_rows(out1, layout.tn(), 4);
        Tensor c2 = ops::slice_rows(out2, layout.tn(), 4);
        return bit_diff(c1, c2);
    }});

    properties.push_back({"mask.mutual-cross-isolation", 0.0, [] {
        Rng rng(31);
        NoGradGuard ng;
        BranchLayout layout;
        layout.n_text = 1;
        layout.n_noise = 3;
        layout.blocks = {{ConditionKind::spatial, 3}, {ConditionKind::subject, 2}};
        BranchMask mask = BranchMask::make(layout, MaskMode::mutual);
        const int n = layout.total(), d = 16, heads = 2;
        RopeParams rp{8, 10000.0};
        PositionGrid pos;
        for (int i = 0; i < n; ++i) pos.positions.emplace_back(i, i);
        Tensor q = rng.gaussian_tensor({n, d});
        Tensor k = rng.gaussian_tensor({n, d});
        Tensor v = rng.gaussian_tensor({n, d});
        Tensor wo = rng.gaussian_tensor({d, d});
        Tensor out1 = masked_attention(q, k, v, pos, mask, heads, rp, wo);
        // Perturb block 1 keys/values; block 0 outputs must not move.
        Tensor k2 = Tensor::from_values(k.shape, *k.data);
        Tensor v2 = Tensor::from_values(v.shape, *v.data);
        const int b1 = layout.block_start(1);
        for (int r = b1; r < b1 + 2; ++r) {
            for (int c = 0; c < d; ++c) {
                k2.at2(r, c) += static_cast<real>(rng.gaussian());
                v2.at2(r, c) += static_cast<real>(rng.gaussian());
            }
        }
        Tensor out2 = masked_attention(q, k2, v2, pos, mask, heads, rp, wo);
        const int b0 = layout.block_start(0);
        return bit_diff(ops::slice_rows(out1, b0, 3), ops::slice_rows(out2, b0, 3));
    }});

    properties.push_back({"mask.dense-equivalence", 0.0, [] {
        Rng rng(37);
        NoGradGuard ng;
        double err = 0;
        for (int trial = 0; trial < 10; ++trial) {
            BranchLayout layout;
            layout.n_text = rng.uniform_int(0, 4);
            layout.n_noise = rng.uniform_int(1, 16);
            const int nblocks = rng.uniform_int(1, 3);
            for (int b = 0; b < nblocks; ++b) {
                layout.blocks.push_back(
                    {b % 2 ? ConditionKind::subject : ConditionKind::spatial,
                     rng.uniform_int(1, 8)});
            }
            if (layout.total() > 64) continue;
            const MaskMode mode = nblocks == 1
                                      ? (trial % 2 ? MaskMode::conditional : MaskMode::mutual)
                                      : (trial % 2 ? MaskMode::mutual : MaskMode::full);
            BranchMask mask = BranchMask::make(layout, mode);
            const int n = layout.total(), d = 16, heads = 2;
            RopeParams rp{8, 10000.0};
            PositionGrid pos;
            for (int i = 0; i < n; ++i) {
                pos.positions.emplace_back(rng.uniform() * 20, rng.uniform() * 20);
            }
            Tensor q = rng.gaussian_tensor({n, d});
            Tensor k = rng.gaussian_tensor({n, d});
            Tensor v = rng.gaussian_tensor({n, d});
            Tensor wo = rng.gaussian_tensor({d, d});
            Tensor engine = masked_attention(q, k, v, pos, mask, heads, rp, wo);
            Tensor dense = dense_reference_attention(q, k, v, pos, mask, heads, rp, wo);
            err = std::max(err, bit_diff(engine, dense));
        }
        return err;
    }});

    properties.push_back({"lora.branch-isolation", 0.0, [] {
        NoGradGuard ng;
        double err = 0;
        for (int trial = 0; trial < 10; ++trial) {
            Rng rng(100 + static_cast<std::uint64_t>(trial));
            const int d = 32;
            BranchLayout layout;
            layout.n_text = 2;
            layout.n_noise = 6;
            layout.blocks = {{ConditionKind::spatial, 4}};
            LoraAdapter adapter = LoraAdapter::init(ConditionKind::spatial, d, 4, 1, rng);
            for (auto& e : adapter.params().entries()) {
                for (real& v : *e.tensor.data) v += static_cast<real>(rng.gaussian() * 0.1);
            }
            BaseProjection base{rng.gaussian_tensor({d, d}), rng.gaussian_tensor({d, d}),
                                rng.gaussian_tensor({d, d}), rng.gaussian_tensor({d, d})};
            Tensor x = rng.gaussian_tensor({layout.total(), d});
            Projected with = project_qkv(x, layout, base, {&adapter}, 0);
            Projected without = project_qkv(x, layout, base, {}, 0);
            for (auto [a, b] : {std::pair{&with.q, &without.q}, std::pair{&with.k, &without.k},
                                std::pair{&with.v, &without.v}}) {
                err = std::max(err, bit_diff(ops::slice_rows(*a, 0, layout.tn()),
                                             ops::slice_rows(*b, 0, layout.tn())));
            }
        }
        return err;
    }});

    properties.push_back({"lora.zero-init-transparency", 0.0, [] {
        NoGradGuard ng;
        Scene s = make_scene(41, false);  // up factors still zero
        Tensor cond_raw = patchify_raw(s.cond_a, 2).first;
        Tensor noise_raw = Tensor::zeros({s.model.cfg.noise_tokens(), s.model.cfg.patch_dim()});
        Rng rng(43);
        for (real& v : *noise_raw.data) v = static_cast<real>(rng.gaussian());
        Tensor text = s.model.text_features(s.prompt);
        std::vector<ConditionInput> conds{s.model.prepare_condition(s.cond_a, ConditionKind::spatial)};
        BranchedSequence seq = assemble(text, s.model.embed_image_tokens(noise_raw),
                                        s.model.cfg.noise_grid(), conds, 2, s.model.cfg.delta_h);
        BranchMask mask = BranchMask::make(seq.layout, MaskMode::conditional);
        Tensor with = s.model.forward(seq, 0.4, {&s.spatial}, mask);
        Tensor without = s.model.forward(seq, 0.4, {}, mask);
        (void)cond_raw;
        return bit_diff(with, without);
    }});

    properties.push_back({"lora.rank-bound", 1e-8, [] {
        Rng rng(47);
        LoraAdapter adapter = LoraAdapter::init(ConditionKind::subject, 32, 4, 1, rng);
        for (auto& e : adapter.params().entries()) {
            for (real& v : *e.tensor.data) v = static_cast<real>(rng.gaussian() * 0.3);
        }
        MergeReport rep = merge_check(adapter, 0);
        double err = rep.within_rank() ? 0.0 : 1.0;
        // Rank 32x32 delta of rank<=4: singular values 5.. must be ~0.
        for (const auto* sv : {&rep.sv_q, &rep.sv_k, &rep.sv_v}) {
            for (std::size_t i = 4; i < sv->size(); ++i) {
                err = std::max(err, (*sv)[i]);
            }
        }
        return err;
    }});

    properties.push_back({"grad.quadratic", 1e-8, [] {
        ParamStore store;
        Rng rng(53);
        store.add("p", rng.gaussian_tensor({5, 7}), true);
        auto loss = [&store] {
            Tensor& p = store.get("p");
            Tensor zero = Tensor::zeros(p.shape);
            return ops::scale(ops::mean_sq_diff(p, zero), static_cast<real>(p.numel()) / 2);
        };
        GradCheckReport rep = check_gradients(loss, store, 1e-6, 1e-8, 200);
        return rep.max_rel_err;
    }});

    properties.push_back({"grad.flow-loss-adapter", 1e-4, [] {
        Scene s = make_scene(59, true);
        Rng rng(61);
        Tensor x0 = patchify_raw(random_image(rng, 8, 8), 2).first;
        Tensor eps = rng.gaussian_tensor(x0.shape);
        FlowState flow = FlowState::make(x0, eps, 0.37);
        s.model.params().freeze_all();
        s.spatial.set_trainable(true);
        auto loss = [&] {
            std::vector<ConditionInput> conds{
                s.model.prepare_condition(s.cond_a, ConditionKind::spatial)};
            BranchedSequence seq =
                assemble(s.model.text_features(s.prompt), s.model.embed_image_tokens(flow.z_t),
                         s.model.cfg.noise_grid(), conds, 2, s.model.cfg.delta_h);
            BranchMask mask = BranchMask::make(seq.layout, MaskMode::conditional);
            Tensor vel = s.model.forward(seq, flow.t, {&s.spatial}, mask);
            return flow_loss(vel, flow.eps, flow.x0);
        };
        GradCheckReport rep = check_gradients(loss, s.spatial.params(), 1e-5, 1e-4, 120);
        return rep.max_rel_err;
    }});

    properties.push_back({"grad.frozen-base-zero", 0.0, [] {
        Scene s = make_scene(67, true);
        Rng rng(71);
        Tensor x0 = patchify_raw(random_image(rng, 8, 8), 2).first;
        Tensor eps = rng.gaussian_tensor(x0.shape);
        FlowState flow = FlowState::make(x0, eps, 0.61);
        s.model.params().freeze_all();
        s.spatial.set_trainable(true);
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial)};
        BranchedSequence seq =
            assemble(s.model.text_features(s.prompt), s.model.embed_image_tokens(flow.z_t),
                     s.model.cfg.noise_grid(), conds, 2, s.model.cfg.delta_h);
        BranchMask mask = BranchMask::make(seq.layout, MaskMode::conditional);
        s.model.params().zero_grads();
        s.spatial.params().zero_grads();
        Tensor loss = flow_loss(s.model.forward(seq, flow.t, {&s.spatial}, mask), flow.eps,
                                flow.x0);
        backward(loss);
        double adapter_grad = 0;
        for (const auto& e : s.spatial.params().entries()) {
            for (real g : *e.tensor.grad) adapter_grad = std::max(adapter_grad, std::abs(double(g)));
        }
        if (adapter_grad == 0) return 1.0;  // gradient must reach the adapter
        return double(s.model.params().max_frozen_grad());
    }});

    properties.push_back({"cache.timestep-independence", 0.0, [] {
        NoGradGuard ng;
        Scene s = make_scene(73, true);
        Rng rng(79);
        Tensor noise_raw = rng.gaussian_tensor({s.model.cfg.noise_tokens(), s.model.cfg.patch_dim()});
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial)};
        BranchedSequence seq =
            assemble(s.model.text_features(s.prompt), s.model.embed_image_tokens(noise_raw),
                     s.model.cfg.noise_grid(), conds, 2, s.model.cfg.delta_h);
        BranchMask mask = BranchMask::make(seq.layout, MaskMode::conditional);
        ForwardTrace ta, tb;
        s.model.forward(seq, 0.05, {&s.spatial}, mask, &ta);
        s.model.forward(seq, 0.95, {&s.spatial}, mask, &tb);
        double err = 0;
        for (std::size_t l = 0; l < ta.keys.size(); ++l) {
            for (std::size_t b = 0; b < ta.keys[l].size(); ++b) {
                err = std::max(err, bit_diff(ta.keys[l][b], tb.keys[l][b]));
                err = std::max(err, bit_diff(ta.values[l][b], tb.values[l][b]));
            }
        }
        return err;
    }});

    properties.push_back({"cache.matches-joint-forward", 1e-12, [] {
        NoGradGuard ng;
        Scene s = make_scene(83, true);
        Rng rng(89);
        Tensor noise_raw = rng.gaussian_tensor({s.model.cfg.noise_tokens(), s.model.cfg.patch_dim()});
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial),
            s.model.prepare_condition(s.cond_b, ConditionKind::subject)};
        std::vector<const LoraAdapter*> adapters{&s.spatial, &s.subject};
        BranchedSequence seq =
            assemble(s.model.text_features(s.prompt), s.model.embed_image_tokens(noise_raw),
                     s.model.cfg.noise_grid(), conds, 2, s.model.cfg.delta_h);
        BranchMask mask = BranchMask::make_inference(seq.layout, true);
        ForwardTrace trace;
        s.model.forward(seq, 0.42, adapters, mask, &trace);
        KvCache cache = prime_cache(s.model, conds, adapters, true);
        double err = 0;
        for (std::size_t l = 0; l < trace.keys.size(); ++l) {
            for (std::size_t b = 0; b < trace.keys[l].size(); ++b) {
                err = std::max(err, double(trace.keys[l][b].max_abs_diff(cache.layers[l][b].k)));
                err = std::max(err, double(trace.values[l][b].max_abs_diff(cache.layers[l][b].v)));
            }
        }
        return err;
    }});

    properties.push_back({"cache.joint-vs-separate-priming", 0.0, [] {
        NoGradGuard ng;
        Scene s = make_scene(97, true);
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial),
            s.model.prepare_condition(s.cond_b, ConditionKind::subject)};
        KvCache joint = prime_cache(s.model, conds, {&s.spatial, &s.subject}, true);
        KvCache only_a = prime_cache(s.model, {conds[0]}, {&s.spatial}, true);
        // The second block alone still sits at subject offset index 1.
        KvCache only_b = prime_cache(s.model, {conds[1]}, {&s.subject}, true);
        double err = 0;
        for (std::size_t l = 0; l < joint.layers.size(); ++l) {
            err = std::max(err, bit_diff(joint.layers[l][0].k, only_a.layers[l][0].k));
            err = std::max(err, bit_diff(joint.layers[l][0].v, only_a.layers[l][0].v));
            err = std::max(err, bit_diff(joint.layers[l][1].k, only_b.layers[l][0].k));
            err = std::max(err, bit_diff(joint.layers[l][1].v, only_b.layers[l][0].v));
        }
        return err;
    }});

    properties.push_back({"cache.trajectory-equivalence", 1e-9, [] {
        Scene s = make_scene(101, true);
        GenerateOptions opt;
        opt.seed = 7;
        opt.schedule.steps = 6;
        std::vector<std::pair<ConditionKind, ToyImage>> conds{
            {ConditionKind::spatial, s.cond_a}, {ConditionKind::subject, s.cond_b}};
        std::vector<const LoraAdapter*> adapters{&s.spatial, &s.subject};
        std::vector<Tensor> traj_cached, traj_full;
        opt.use_cache = true;
        generate(s.model, s.prompt, conds, adapters, opt, &traj_cached);
        opt.use_cache = false;
        generate(s.model, s.prompt, conds, adapters, opt, &traj_full);
        double err = 0;
        for (std::size_t i = 0; i < traj_cached.size(); ++i) {
            err = std::max(err, double(traj_cached[i].max_abs_diff(traj_full[i])));
        }
        return err;
    }});

    properties.push_back({"cache.projection-counts", 0.0, [] {
        Scene s = make_scene(103, true);
        GenerateOptions opt;
        opt.seed = 9;
        opt.schedule.steps = 5;
        std::vector<std::pair<ConditionKind, ToyImage>> conds{
            {ConditionKind::spatial, s.cond_a}, {ConditionKind::subject, s.cond_b}};
        std::vector<const LoraAdapter*> adapters{&s.spatial, &s.subject};
        counters().reset();
        opt.use_cache = true;
        generate(s.model, s.prompt, conds, adapters, opt);
        const auto cached = counters().condition_qkv_projections.load();
        counters().reset();
        opt.use_cache = false;
        generate(s.model, s.prompt, conds, adapters, opt);
        const auto uncached = counters().condition_qkv_projections.load();
        const auto layers = static_cast<std::uint64_t>(s.model.cfg.layers);
        double err = 0;
        if (cached != layers * 2) err += 1;
        if (uncached != layers * 2 * 5) err += 1;
        if (cached * 5 != uncached) err += 1;
        return err;
    }});

    properties.push_back({"cache.immutability", 0.0, [] {
        NoGradGuard ng;
        Scene s = make_scene(107, true);
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial)};
        KvCache cache = prime_cache(s.model, conds, {&s.spatial}, true);
        const std::uint64_t before = cache.content();
        Rng rng(109);
        Tensor x = rng.gaussian_tensor({s.model.cfg.noise_tokens(), s.model.cfg.patch_dim()});
        for (int k = 0; k < 4; ++k) {
            x = cached_step(s.model, x, 1.0 - k * 0.25, 0.75 - k * 0.25, s.prompt, cache);
        }
        return cache.content() == before && before == cache.primed_hash ? 0.0 : 1.0;
    }});

    properties.push_back({"compose.isolation-on-joint-layout", 0.0, [] {
        NoGradGuard ng;
        Scene s = make_scene(113, true);
        Rng rng(127);
        const ModelConfig& cfg = s.model.cfg;
        std::vector<ConditionInput> conds{
            s.model.prepare_condition(s.cond_a, ConditionKind::spatial),
            s.model.prepare_condition(s.cond_b, ConditionKind::subject)};
        Tensor noise_raw = rng.gaussian_tensor({cfg.noise_tokens(), cfg.patch_dim()});
        BranchedSequence seq =
            assemble(s.model.text_features(s.prompt), s.model.embed_image_tokens(noise_raw),
                     cfg.noise_grid(), conds, 2, cfg.delta_h);
        BranchMask mask = BranchMask::make_inference(seq.layout, true);
        // Condition queries see no text/noise keys and no other block.
        double err = 0;
        for (int i = seq.layout.tn(); i < seq.layout.total(); ++i) {
            const int bi = seq.layout.block_of(i);
            for (int j = 0; j < seq.layout.total(); ++j) {
                const bool should_mask = seq.layout.block_of(j) != bi;
                if (mask.masked(i, j) != should_mask) err += 1;
            }
        }
        return err;
    }});

    std::vector<PropertyResult> results;
    results.reserve(properties.size());
    for (const Property& p : properties) {
        PropertyResult r;
        r.name = p.name;
        r.tolerance = p.tolerance;
        r.measured = p.run();
        r.pass = r.measured <= r.tolerance;
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace cdit
