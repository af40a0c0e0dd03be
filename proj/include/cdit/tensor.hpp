#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdit {

#ifdef CDIT_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

struct Node;

inline void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

// Dense row-major tensor. Values are immutable once an op has produced them;
// data/grad buffers are shared between copies so gradients accumulate in one
// place. `node` links the value back into the autodiff graph.
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<real>> data;
    std::shared_ptr<std::vector<real>> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, real value);
    static Tensor from_values(std::vector<int> shape, std::vector<real> values);
    static Tensor scalar(real value);
    static Tensor identity(int n);

    bool defined() const { return data != nullptr; }
    std::size_t numel() const;
    int dim(std::size_t i) const { return shape.at(i); }
    int rows() const;
    int cols() const;
    bool is_matrix() const { return shape.size() == 2; }

    real* ptr() { return data->data(); }
    const real* ptr() const { return data->data(); }
    real* grad_ptr() { return grad ? grad->data() : nullptr; }
    const real* grad_ptr() const { return grad ? grad->data() : nullptr; }

    real at(std::size_t i) const { return (*data)[i]; }
    real& at(std::size_t i) { return (*data)[i]; }
    real at2(int r, int c) const { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }
    real& at2(int r, int c) { return (*data)[static_cast<std::size_t>(r) * cols() + c]; }

    // Scalar read; requires numel() == 1.
    real value() const;

    void ensure_grad();
    void zero_grad();
    bool all_finite() const;
    real max_abs_diff(const Tensor& other) const;
    bool bitwise_equal(const Tensor& other) const;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Deterministic random stream (seeded mt19937_64).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double uniform() { return uniform_(engine_); }
    double gaussian() { return gaussian_(engine_); }
    int uniform_int(int lo, int hi) {
        std::uniform_int_distribution<int> d(lo, hi);
        return d(engine_);
    }
    std::uint64_t raw() { return engine_(); }

    Tensor gaussian_tensor(std::vector<int> shape, double stddev = 1.0, bool requires_grad = false);
    Tensor uniform_tensor(std::vector<int> shape, double lo, double hi, bool requires_grad = false);

private:
    std::mt19937_64 engine_;
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
    std::normal_distribution<double> gaussian_{0.0, 1.0};
};

// FNV-1a over raw bytes; used for checkpoint and cache immutability checks.
std::uint64_t fnv1a(const void* bytes, std::size_t len);
std::uint64_t content_hash(const Tensor& t);

}  // namespace cdit
