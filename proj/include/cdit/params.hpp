#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdit/tensor.hpp"

namespace cdit {

// Named parameters in declaration order. Every parameter carries a gradient
// slot of the same shape; frozen parameters keep requires_grad off so the
// slot stays zero and the optimizer skips them.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
    };

    Tensor& add(const std::string& name, Tensor tensor, bool trainable);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;

    void set_trainable(const std::string& name, bool trainable);
    void freeze_all();
    bool trainable(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t total_values() const;
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    void zero_grads();
    // Largest absolute gradient over frozen parameters; must stay 0.
    real max_frozen_grad() const;
    std::uint64_t state_hash() const;

    void write_values(std::ostream& os) const;
    void read_values(std::istream& is);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Adam over the trainable subset of a store.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void step(ParamStore& store);
    void reset();

private:
    std::int64_t t_ = 0;
    std::unordered_map<std::string, std::vector<real>> m_;
    std::unordered_map<std::string, std::vector<real>> v_;
};

// Little-endian f64 stream helpers shared by the checkpoint formats.
void write_u32(std::ostream& os, std::uint32_t v);
void write_f64(std::ostream& os, double v);
std::uint32_t read_u32(std::istream& is);
double read_f64(std::istream& is);
void write_f64_block(std::ostream& os, const Tensor& t);
void read_f64_block(std::istream& is, Tensor& t);

}  // namespace cdit
