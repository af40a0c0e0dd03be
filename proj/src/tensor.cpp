#include "cdit/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace cdit {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "tensor: negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<real>>(shape_numel(t.shape), real(0));
    t.requires_grad = requires_grad;
    if (requires_grad) {
        t.ensure_grad();
    }
    return t;
}

Tensor Tensor::full(std::vector<int> shape, real value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<real> values) {
    require(shape_numel(shape) == values.size(), "tensor: value count does not match shape");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<real>>(std::move(values));
    return t;
}

Tensor Tensor::scalar(real value) {
    return from_values({1}, {value});
}

Tensor Tensor::identity(int n) {
    Tensor t = zeros({n, n});
    for (int i = 0; i < n; ++i) {
        t.at2(i, i) = real(1);
    }
    return t;
}

std::size_t Tensor::numel() const {
    return data ? data->size() : 0;
}

int Tensor::rows() const {
    require(is_matrix(), "tensor: expected a matrix, got " + shape_str(shape));
    return shape[0];
}

int Tensor::cols() const {
    require(is_matrix(), "tensor: expected a matrix, got " + shape_str(shape));
    return shape[1];
}

real Tensor::value() const {
    require(numel() == 1, "tensor: value() needs a scalar, got " + shape_str(shape));
    return (*data)[0];
}

void Tensor::ensure_grad() {
    if (!grad) {
        grad = std::make_shared<std::vector<real>>(numel(), real(0));
    }
}

void Tensor::zero_grad() {
    if (grad) {
        std::fill(grad->begin(), grad->end(), real(0));
    }
}

bool Tensor::all_finite() const {
    for (real v : *data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

real Tensor::max_abs_diff(const Tensor& other) const {
    require(shape == other.shape, "max_abs_diff: shape mismatch");
    real m = 0;
    for (std::size_t i = 0; i < numel(); ++i) {
        m = std::max(m, std::abs((*data)[i] - (*other.data)[i]));
    }
    return m;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    if (shape != other.shape) return false;
    return std::memcmp(data->data(), other.data->data(), numel() * sizeof(real)) == 0;
}

Tensor Rng::gaussian_tensor(std::vector<int> shape, double stddev, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (real& v : *t.data) {
        v = static_cast<real>(gaussian() * stddev);
    }
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int> shape, double lo, double hi, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (real& v : *t.data) {
        v = static_cast<real>(lo + uniform() * (hi - lo));
    }
    return t;
}

std::uint64_t fnv1a(const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t content_hash(const Tensor& t) {
    return t.defined() ? fnv1a(t.data->data(), t.numel() * sizeof(real)) : 0;
}

}  // namespace cdit
