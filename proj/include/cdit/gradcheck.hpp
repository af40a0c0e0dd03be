#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cdit/params.hpp"

namespace cdit {

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_err = 0;
};

struct GradCheckReport {
    double max_rel_err = 0;
    int entries_checked = 0;
    std::vector<GradCheckEntry> failures;
    bool passed(double) const { return failures.empty(); }
    GradCheckEntry worst;
};

// Central finite differences against tape gradients for the trainable
// entries of `store`. loss_fn must rebuild the loss from the current store
// values and be deterministic. Checks every entry, or a seeded subsample of
// at least `min_entries` when there are more.
GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn, ParamStore& store,
                                double eps, double tol, int min_entries = 100,
                                std::uint64_t seed = 0x5eedULL);

}  // namespace cdit
