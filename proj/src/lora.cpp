#include "cdit/lora.hpp"

#include <fstream>

#include "cdit/instrument.hpp"
#include "cdit/linalg.hpp"

namespace cdit {

namespace {
Counters g_counters;
constexpr char kMagic[4] = {'C', 'I', 'L', 'A'};
constexpr std::uint32_t kVersion = 1;
const char kProjs[3] = {'q', 'k', 'v'};
}  // namespace

Counters& counters() { return g_counters; }

std::string LoraAdapter::name(int layer, char proj, bool up) {
    return "layer" + std::to_string(layer) + "." + (up ? "up_" : "down_") + proj;
}

LoraAdapter LoraAdapter::init(ConditionKind kind, int d_model, int rank, int layers, Rng& rng) {
    require(rank >= 1 && rank <= d_model / 4, "adapter: rank must be in [1, d_model/4]");
    LoraAdapter a;
    a.kind = kind;
    a.d_model = d_model;
    a.rank = rank;
    a.layer_count = layers;
    const double stddev = std::sqrt(1.0 / d_model);
    for (int l = 0; l < layers; ++l) {
        for (char p : kProjs) {
            a.params_.add(name(l, p, false), rng.gaussian_tensor({d_model, rank}, stddev), true);
            a.params_.add(name(l, p, true), Tensor::zeros({rank, d_model}), true);
        }
    }
    return a;
}

const Tensor& LoraAdapter::down(int layer, char proj) const {
    return params_.get(name(layer, proj, false));
}

const Tensor& LoraAdapter::up(int layer, char proj) const {
    return params_.get(name(layer, proj, true));
}

void LoraAdapter::set_trainable(bool trainable) {
    for (auto& e : params_.entries()) {
        e.tensor.requires_grad = trainable;
    }
}

void LoraAdapter::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(d_model));
    write_u32(os, static_cast<std::uint32_t>(rank));
    write_u32(os, static_cast<std::uint32_t>(layer_count));
    write_u32(os, kind == ConditionKind::spatial ? 0u : 1u);
    for (int l = 0; l < layer_count; ++l) {
        for (char p : kProjs) {
            write_f64_block(os, down(l, p));
            write_f64_block(os, up(l, p));
        }
    }
    if (!os) throw std::runtime_error("failed writing " + path);
}

LoraAdapter LoraAdapter::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw std::runtime_error(path + " is not an adapter checkpoint");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kVersion) {
        throw std::runtime_error(path + ": unsupported adapter version " + std::to_string(version));
    }
    const int d_model = static_cast<int>(read_u32(is));
    const int rank = static_cast<int>(read_u32(is));
    const int layers = static_cast<int>(read_u32(is));
    const std::uint32_t kind_tag = read_u32(is);
    require(kind_tag <= 1, path + ": bad condition kind tag");

    LoraAdapter a;
    a.kind = kind_tag == 0 ? ConditionKind::spatial : ConditionKind::subject;
    a.d_model = d_model;
    a.rank = rank;
    a.layer_count = layers;
    for (int l = 0; l < layers; ++l) {
        for (char p : kProjs) {
            Tensor& d = a.params_.add(name(l, p, false), Tensor::zeros({d_model, rank}), true);
            read_f64_block(is, d);
            Tensor& u = a.params_.add(name(l, p, true), Tensor::zeros({rank, d_model}), true);
            read_f64_block(is, u);
        }
    }
    return a;
}

Projected project_qkv(const Tensor& features, const BranchLayout& layout,
                      const BaseProjection& base, const std::vector<const LoraAdapter*>& adapters,
                      int layer) {
    require(features.rows() == layout.total(), "project_qkv: rows do not match layout");
    // Empty list = base-only projection of every row; otherwise one adapter
    // per condition block, matched by order and kind.
    if (!adapters.empty() && adapters.size() != layout.blocks.size()) {
        throw std::logic_error("project_qkv: expected one adapter per condition block");
    }
    for (std::size_t j = 0; j < adapters.size(); ++j) {
        require(adapters[j] != nullptr, "project_qkv: null adapter");
        if (adapters[j]->kind != layout.blocks[j].kind) {
            throw std::logic_error("project_qkv: adapter kind does not match block kind");
        }
    }

    Projected out;
    Tensor* targets[3] = {&out.q, &out.k, &out.v};
    const Tensor* weights[3] = {&base.wq, &base.wk, &base.wv};
    for (int w = 0; w < 3; ++w) {
        Tensor full = ops::matmul(features, *weights[w]);
        if (adapters.empty()) {
            *targets[w] = std::move(full);
            continue;
        }
        std::vector<Tensor> parts;
        if (layout.tn() > 0) {
            parts.push_back(ops::slice_rows(full, 0, layout.tn()));
        }
        for (std::size_t j = 0; j < adapters.size(); ++j) {
            const int start = layout.block_start(j);
            const int count = layout.blocks[j].count;
            Tensor block_rows = ops::slice_rows(full, start, count);
            Tensor cond_features = ops::slice_rows(features, start, count);
            const char proj = kProjs[w];
            Tensor delta = ops::matmul(ops::matmul(cond_features, adapters[j]->down(layer, proj)),
                                       adapters[j]->up(layer, proj));
            parts.push_back(ops::add(block_rows, delta));
        }
        *targets[w] = ops::concat_rows(parts);
    }
    // One projection event per condition block in this layer.
    g_counters.condition_qkv_projections += layout.blocks.size();
    return out;
}

MergeReport merge_check(const LoraAdapter& adapter, int layer, double threshold) {
    MergeReport r;
    r.configured_rank = adapter.rank;
    NoGradGuard no_grad;
    const char projs[3] = {'q', 'k', 'v'};
    for (int w = 0; w < 3; ++w) {
        Tensor delta = ops::matmul(adapter.down(layer, projs[w]), adapter.up(layer, projs[w]));
        std::vector<double> sv = singular_values(delta);
        int rank = 0;
        for (double s : sv) {
            if (s > threshold) ++rank;
        }
        switch (w) {
            case 0: r.rank_q = rank; r.sv_q = std::move(sv); break;
            case 1: r.rank_k = rank; r.sv_k = std::move(sv); break;
            default: r.rank_v = rank; r.sv_v = std::move(sv); break;
        }
    }
    return r;
}

}  // namespace cdit
