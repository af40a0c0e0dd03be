#pragma once

#include <vector>

#include "cdit/tensor.hpp"

namespace cdit {

// Singular values of a (possibly rectangular) matrix, descending, via cyclic
// Jacobi on A^T A. Adequate for the small adapter-delta matrices here.
std::vector<double> singular_values(const Tensor& a);

// Count of singular values above the threshold.
int numeric_rank(const Tensor& a, double threshold = 1e-8);

}  // namespace cdit
