#include "cdit/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

namespace cdit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

Tensor& ParamStore::add(const std::string& name, Tensor tensor, bool trainable) {
    require(!has(name), "param store: duplicate parameter " + name);
    tensor.requires_grad = trainable;
    tensor.ensure_grad();
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(tensor)});
    return entries_.back().tensor;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "param store: unknown parameter " + name);
    return entries_[it->second].tensor;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "param store: unknown parameter " + name);
    return entries_[it->second].tensor;
}

bool ParamStore::has(const std::string& name) const {
    return index_.count(name) != 0;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
    get(name).requires_grad = trainable;
}

void ParamStore::freeze_all() {
    for (Entry& e : entries_) {
        e.tensor.requires_grad = false;
    }
}

bool ParamStore::trainable(const std::string& name) const {
    return get(name).requires_grad;
}

std::size_t ParamStore::total_values() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) {
        n += e.tensor.numel();
    }
    return n;
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) {
        e.tensor.zero_grad();
    }
}

real ParamStore::max_frozen_grad() const {
    real m = 0;
    for (const Entry& e : entries_) {
        if (e.tensor.requires_grad || !e.tensor.grad) continue;
        for (real g : *e.tensor.grad) {
            m = std::max(m, std::abs(g));
        }
    }
    return m;
}

std::uint64_t ParamStore::state_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const Entry& e : entries_) {
        const std::uint64_t eh = content_hash(e.tensor);
        h ^= eh;
        h *= 1099511628211ull;
    }
    return h;
}

void ParamStore::write_values(std::ostream& os) const {
    for (const Entry& e : entries_) {
        write_f64_block(os, e.tensor);
    }
}

void ParamStore::read_values(std::istream& is) {
    for (Entry& e : entries_) {
        read_f64_block(is, e.tensor);
    }
}

void Adam::step(ParamStore& store) {
    t_ += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (ParamStore::Entry& e : store.entries()) {
        Tensor& p = e.tensor;
        if (!p.requires_grad) continue;
        auto& m = m_[e.name];
        auto& v = v_[e.name];
        if (m.empty()) {
            m.assign(p.numel(), real(0));
            v.assign(p.numel(), real(0));
        }
        const real* g = p.grad->data();
        real* x = p.ptr();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = static_cast<real>(beta1 * m[i] + (1.0 - beta1) * g[i]);
            v[i] = static_cast<real>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= static_cast<real>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

void Adam::reset() {
    t_ = 0;
    m_.clear();
    v_.clear();
}

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file while reading u32");
    return v;
}

double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw std::runtime_error("checkpoint: truncated file while reading f64");
    return v;
}

void write_f64_block(std::ostream& os, const Tensor& t) {
    for (real v : *t.data) {
        write_f64(os, static_cast<double>(v));
    }
}

void read_f64_block(std::istream& is, Tensor& t) {
    for (real& v : *t.data) {
        v = static_cast<real>(read_f64(is));
    }
}

}  // namespace cdit
