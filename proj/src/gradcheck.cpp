#include "cdit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cdit/autodiff.hpp"

namespace cdit {

GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn, ParamStore& store,
                                double eps, double tol, int min_entries, std::uint64_t seed) {
    store.zero_grads();
    Tensor loss = loss_fn();
    backward(loss);

    struct Slot {
        std::string name;
        Tensor* tensor;
        std::size_t index;
    };
    std::vector<Slot> slots;
    for (auto& e : store.entries()) {
        if (!e.tensor.requires_grad) continue;
        for (std::size_t i = 0; i < e.tensor.numel(); ++i) {
            slots.push_back({e.name, &e.tensor, i});
        }
    }

    std::vector<std::size_t> picks(slots.size());
    for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    if (static_cast<int>(slots.size()) > min_entries) {
        Rng rng(seed);
        for (std::size_t i = picks.size() - 1; i > 0; --i) {
            std::swap(picks[i], picks[rng.uniform_int(0, static_cast<int>(i))]);
        }
        picks.resize(static_cast<std::size_t>(min_entries));
    }

    GradCheckReport report;
    NoGradGuard no_grad;
    for (std::size_t pick : picks) {
        Slot& s = slots[pick];
        real& x = (*s.tensor->data)[s.index];
        const real saved = x;
        x = saved + static_cast<real>(eps);
        const double plus = loss_fn().value();
        x = saved - static_cast<real>(eps);
        const double minus = loss_fn().value();
        x = saved;

        const double numeric = (plus - minus) / (2.0 * eps);
        const double analytic = (*s.tensor->grad)[s.index];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        const double rel = std::abs(numeric - analytic) / denom;

        GradCheckEntry entry{s.name, s.index, analytic, numeric, rel};
        report.entries_checked += 1;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst = entry;
        }
        if (rel > tol) {
            report.failures.push_back(entry);
        }
    }
    return report;
}

}  // namespace cdit
