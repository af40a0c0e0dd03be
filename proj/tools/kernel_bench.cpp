// Times the serial reference kernels against the OpenMP path, plus one full
// model forward both ways, and checks they agree bit for bit.

#include <chrono>
#include <iomanip>
#include <iostream>

#include "cdit/kernels.hpp"
#include "cdit/kvcache.hpp"

using namespace cdit;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto start = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto stop = Clock::now();
    return std::chrono::duration<double, std::milli>(stop - start).count() / reps;
}

}  // namespace

int main() {
    std::cout << "threads available: " << kern::max_threads() << "\n\n";
    Rng rng(1);

    std::cout << "matmul (m x k x n), serial vs parallel, ms per call\n";
    for (int size : {64, 128, 256, 384}) {
        Tensor a = rng.gaussian_tensor({size, size});
        Tensor b = rng.gaussian_tensor({size, size});
        Tensor c1 = Tensor::zeros({size, size});
        Tensor c2 = Tensor::zeros({size, size});
        const int reps = size <= 128 ? 40 : 10;
        const double serial_ms = time_ms(
            [&] { kern::serial::matmul_nn(a.ptr(), b.ptr(), c1.ptr(), size, size, size, false); },
            reps);
        const double par_ms = time_ms(
            [&] { kern::par::matmul_nn(a.ptr(), b.ptr(), c2.ptr(), size, size, size, false); },
            reps);
        std::cout << "  " << std::setw(4) << size << ": serial " << std::fixed
                  << std::setprecision(3) << std::setw(8) << serial_ms << "  parallel "
                  << std::setw(8) << par_ms << "  speedup x" << std::setprecision(2)
                  << serial_ms / par_ms << (c1.bitwise_equal(c2) ? "  (bitwise equal)" : "  MISMATCH")
                  << "\n";
    }

    std::cout << "\nfull forward pass (default config, 1 condition)\n";
    DitModel model = DitModel::init(ModelConfig{}, 7);
    LoraAdapter adapter = LoraAdapter::init(ConditionKind::spatial, model.cfg.d_model,
                                            model.cfg.rank, model.cfg.layers, rng);
    ToyImage cond = ToyImage::zeros(1, model.cfg.cond_h, model.cfg.cond_w);
    for (real& v : *cond.pixels.data) v = static_cast<real>(rng.uniform());
    NoGradGuard ng;
    Tensor noise = rng.gaussian_tensor({model.cfg.noise_tokens(), model.cfg.patch_dim()});
    std::vector<ConditionInput> conds{model.prepare_condition(cond, ConditionKind::spatial)};
    BranchedSequence seq = assemble(model.text_features({1, 2}), model.embed_image_tokens(noise),
                                    model.cfg.noise_grid(), conds, model.cfg.patch,
                                    model.cfg.delta_h);
    BranchMask mask = BranchMask::make(seq.layout, MaskMode::conditional);

    Tensor out_serial, out_parallel;
    kern::set_parallel(false);
    const double fwd_serial = time_ms(
        [&] { out_serial = model.forward(seq, 0.5, {&adapter}, mask); }, 5);
    kern::set_parallel(true);
    const double fwd_par = time_ms(
        [&] { out_parallel = model.forward(seq, 0.5, {&adapter}, mask); }, 5);
    std::cout << "  serial " << std::fixed << std::setprecision(2) << fwd_serial
              << " ms, parallel " << fwd_par << " ms, speedup x" << fwd_serial / fwd_par
              << (out_serial.bitwise_equal(out_parallel) ? "  (bitwise equal)" : "  MISMATCH")
              << "\n";
    return out_serial.bitwise_equal(out_parallel) ? 0 : 1;
}
