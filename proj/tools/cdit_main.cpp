// Command-line driver: dataset generation, two-stage training, cached
// sampling, benchmarking and the invariant suite.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "cdit/bench.hpp"
#include "cdit/dataset.hpp"
#include "cdit/instrument.hpp"
#include "cdit/kernels.hpp"
#include "cdit/kvcache.hpp"
#include "cdit/verify.hpp"

namespace fs = std::filesystem;
using namespace cdit;

namespace {

std::vector<int> parse_prompt(const std::string& s) {
    std::vector<int> ids;
    if (s.empty() || s == "-") return ids;
    std::istringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        ids.push_back(std::stoi(part));
    }
    return ids;
}

std::pair<ConditionKind, std::string> parse_kind_path(const std::string& s, const char* what) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
        throw CLI::ValidationError(std::string(what) + " must look like kind=path, got: " + s);
    }
    return {condition_kind_from_string(s.substr(0, eq)), s.substr(eq + 1)};
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw std::runtime_error(std::string(what) + " not found: " + path);
    }
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "step,loss\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < losses.size(); ++i) {
        os << i << "," << losses[i] << "\n";
    }
}

const LoraAdapter* adapter_for(const std::vector<LoraAdapter>& adapters, ConditionKind kind) {
    for (const LoraAdapter& a : adapters) {
        if (a.kind == kind) return &a;
    }
    throw std::runtime_error(std::string("no adapter loaded for kind ") + to_string(kind));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional diffusion-transformer engine with branch-cached inference"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file; flags win over file entries")
        ->envname("CDIT_CONFIG");

    int threads = 0;
    bool serial = false;
    app.add_option("--threads", threads, "worker threads for the parallel kernels (0 = default)");
    app.add_flag("--serial", serial, "run the serial reference kernels instead of OpenMP");

    ModelConfig cfg;

    // gen-data
    auto* gen_data = app.add_subcommand("gen-data", "write a synthetic paired dataset");
    std::string gd_task = "spatial", gd_out;
    int gd_n = 64;
    std::uint64_t gd_seed = 0;
    gen_data->add_option("--task", gd_task, "spatial | subject")
        ->check(CLI::IsMember({"spatial", "subject"}));
    gen_data->add_option("--n", gd_n, "sample count");
    gen_data->add_option("--seed", gd_seed, "rng seed");
    gen_data->add_option("--out", gd_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train the base model or one condition adapter");
    std::string tr_stage = "base", tr_dataset, tr_checkpoint, tr_base, tr_kind = "spatial",
                tr_loss_csv;
    int tr_steps = 2000;
    double tr_lr = 1e-3;
    std::uint64_t tr_seed = 0;
    train->add_option("--stage", tr_stage, "base | lora")->check(CLI::IsMember({"base", "lora"}));
    train->add_option("--dataset", tr_dataset, "dataset directory")->required();
    train->add_option("--steps", tr_steps, "optimizer steps");
    train->add_option("--lr", tr_lr, "learning rate");
    train->add_option("--seed", tr_seed, "rng seed");
    train->add_option("--checkpoint", tr_checkpoint, "output checkpoint path")->required();
    train->add_option("--base", tr_base, "base checkpoint (stage lora)");
    train->add_option("--kind", tr_kind, "condition kind (stage lora)")
        ->check(CLI::IsMember({"spatial", "subject"}));
    train->add_option("--loss-csv", tr_loss_csv, "per-step loss curve output");
    train->add_option("--d-model", cfg.d_model, "model width (stage base)");
    train->add_option("--heads", cfg.heads, "attention heads (stage base)");
    train->add_option("--layers", cfg.layers, "transformer depth (stage base)");
    train->add_option("--patch", cfg.patch, "patch size (stage base)");
    train->add_option("--noise-res", cfg.noise_h, "noise image resolution (square, stage base)");
    train->add_option("--cond-res", cfg.cond_h, "condition resolution (square, stage base)");
    train->add_option("--vocab", cfg.vocab, "prompt vocabulary size (stage base)");
    train->add_option("--rank", cfg.rank, "adapter rank (stage lora)");

    // generate
    auto* gen = app.add_subcommand("generate", "sample an image");
    std::string g_base, g_prompt, g_out;
    std::vector<std::string> g_adapters, g_conditions;
    int g_steps = 25;
    std::uint64_t g_seed = 0;
    bool g_no_cache = false, g_no_mutual = false;
    gen->add_option("--base", g_base, "base checkpoint")->required();
    gen->add_option("--adapter", g_adapters, "adapter as kind=path (repeatable)");
    gen->add_option("--condition", g_conditions, "condition image as kind=path (repeatable)");
    gen->add_option("--prompt", g_prompt, "comma-separated prompt ids");
    gen->add_option("--steps", g_steps, "sampler steps");
    gen->add_option("--seed", g_seed, "rng seed");
    gen->add_option("--out", g_out, "output image (pgm/ppm)")->required();
    gen->add_flag("--no-cache", g_no_cache, "recompute the condition branch at every step");
    gen->add_flag("--no-mutual", g_no_mutual, "disable cross-condition blocking");

    // bench
    auto* bench = app.add_subcommand("bench", "time cached vs uncached generation");
    std::string b_base, b_spatial_adapter, b_subject_adapter, b_spatial_cond, b_subject_cond,
        b_csv, b_prompt;
    int b_steps = 25, b_reps = 5;
    std::uint64_t b_seed = 0;
    bench->add_option("--base", b_base, "base checkpoint")->required();
    bench->add_option("--spatial-adapter", b_spatial_adapter, "spatial adapter checkpoint")
        ->required();
    bench->add_option("--subject-adapter", b_subject_adapter, "subject adapter checkpoint")
        ->required();
    bench->add_option("--spatial-cond", b_spatial_cond, "spatial condition image")->required();
    bench->add_option("--subject-cond", b_subject_cond, "subject condition image")->required();
    bench->add_option("--prompt", b_prompt, "comma-separated prompt ids");
    bench->add_option("--steps", b_steps, "sampler steps");
    bench->add_option("--reps", b_reps, "timed repetitions per configuration (>= 5)");
    bench->add_option("--seed", b_seed, "rng seed");
    bench->add_option("--csv", b_csv, "bench report CSV path");

    // verify
    auto* verify = app.add_subcommand("verify", "run the invariant suite");
    std::string v_fault;
    verify->add_option("--fault", v_fault, "inject a fault (leak-mask) to prove the suite can fail");

    CLI11_PARSE(app, argc, argv);

    try {
        kern::set_threads(threads);
        kern::set_parallel(!serial);

        if (*gen_data) {
            generate_dataset(task_from_string(gd_task), gd_n, gd_seed, gd_out, cfg);
            std::cout << "wrote " << gd_n << " " << gd_task << " samples to " << gd_out << "\n";
            return 0;
        }

        if (*train) {
            require_file(fs::path(tr_dataset) / "manifest.txt", "dataset manifest");
            std::vector<TrainSample> samples = Dataset::load(tr_dataset).load_samples();
            TrainResult result;
            if (tr_stage == "base") {
                cfg.noise_w = cfg.noise_h;
                cfg.cond_w = cfg.cond_h;
                DitModel model = DitModel::init(cfg, tr_seed);
                result = train_stage1(model, samples, tr_steps, tr_lr, tr_seed + 1);
                model.save(tr_checkpoint);
            } else {
                if (tr_base.empty()) {
                    throw std::runtime_error("stage lora needs --base <checkpoint>");
                }
                require_file(tr_base, "base checkpoint");
                DitModel model = DitModel::load(tr_base);
                Rng rng(tr_seed);
                LoraAdapter adapter = LoraAdapter::init(condition_kind_from_string(tr_kind),
                                                        model.cfg.d_model, model.cfg.rank,
                                                        model.cfg.layers, rng);
                result = train_stage2(model, adapter, samples, tr_steps, tr_lr, tr_seed + 1);
                adapter.save(tr_checkpoint);
            }
            if (!tr_loss_csv.empty()) {
                write_loss_csv(tr_loss_csv, result.losses);
            }
            if (!result.losses.empty()) {
                std::cout << "steps " << result.losses.size() << ", first loss "
                          << result.losses.front() << ", last loss " << result.losses.back()
                          << "\n";
            }
            std::cout << "wrote " << tr_checkpoint << "\n";
            return 0;
        }

        if (*gen) {
            require_file(g_base, "base checkpoint");
            DitModel model = DitModel::load(g_base);
            std::vector<LoraAdapter> adapters;
            for (const std::string& spec : g_adapters) {
                auto [kind, path] = parse_kind_path(spec, "--adapter");
                require_file(path, "adapter checkpoint");
                LoraAdapter a = LoraAdapter::load(path);
                if (a.kind != kind) {
                    throw std::runtime_error("adapter at " + path + " is " + to_string(a.kind) +
                                             ", requested " + to_string(kind));
                }
                adapters.push_back(std::move(a));
            }
            std::vector<std::pair<ConditionKind, ToyImage>> conds;
            std::vector<const LoraAdapter*> aligned;
            for (const std::string& spec : g_conditions) {
                auto [kind, path] = parse_kind_path(spec, "--condition");
                require_file(path, "condition image");
                conds.emplace_back(kind, read_pnm(path));
                aligned.push_back(adapter_for(adapters, kind));
            }
            GenerateOptions opt;
            opt.seed = g_seed;
            opt.schedule.steps = g_steps;
            opt.use_cache = !g_no_cache;
            opt.mutual_blocking = !g_no_mutual;
            ToyImage img = generate(model, parse_prompt(g_prompt), conds, aligned, opt);
            write_pnm(img, g_out);
            std::cout << "wrote " << g_out << "\n";
            return 0;
        }

        if (*bench) {
            for (const auto& [p, what] :
                 {std::pair{b_base, "base checkpoint"}, {b_spatial_adapter, "spatial adapter"},
                  {b_subject_adapter, "subject adapter"}, {b_spatial_cond, "spatial condition"},
                  {b_subject_cond, "subject condition"}}) {
                require_file(p, what);
            }
            DitModel model = DitModel::load(b_base);
            LoraAdapter spatial = LoraAdapter::load(b_spatial_adapter);
            LoraAdapter subject = LoraAdapter::load(b_subject_adapter);
            BenchReport report =
                run_bench(model, spatial, subject, read_pnm(b_spatial_cond),
                          read_pnm(b_subject_cond), parse_prompt(b_prompt), b_steps, b_reps, b_seed);
            std::cout << "conditions cached median_ms cond_projections attention_rows\n";
            for (const BenchRun& r : report.runs) {
                std::cout << r.conditions << "          " << (r.cached ? "yes" : "no ") << "    "
                          << std::fixed << std::setprecision(2) << std::setw(9) << r.median_ms
                          << " " << std::setw(16) << r.condition_projections << " "
                          << std::setw(14) << r.attention_rows << "\n";
            }
            std::cout << std::setprecision(3) << "speedup x" << report.speedup(1)
                      << " (1 condition), x" << report.speedup(2) << " (2 conditions)\n";
            if (!b_csv.empty()) {
                write_bench_csv(report, b_csv);
                std::cout << "wrote " << b_csv << "\n";
            }
            return 0;
        }

        if (*verify) {
            VerifyOptions opt;
            opt.fault = v_fault;
            std::vector<PropertyResult> results = run_verification(opt);
            bool all_pass = true;
            for (const PropertyResult& r : results) {
                std::cout << (r.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(36)
                          << r.name << " measured " << std::scientific << std::setprecision(3)
                          << r.measured << "  tolerance " << r.tolerance << "\n"
                          << std::defaultfloat;
                all_pass = all_pass && r.pass;
            }
            std::cout << (all_pass ? "all " : "FAILURES among ") << results.size()
                      << " properties\n";
            return all_pass ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
