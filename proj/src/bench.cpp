#include "cdit/bench.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "cdit/instrument.hpp"

namespace cdit {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const BenchRun& BenchReport::find(int conditions, bool cached) const {
    for (const BenchRun& r : runs) {
        if (r.conditions == conditions && r.cached == cached) return r;
    }
    throw std::logic_error("bench: no such run");
}

double BenchReport::speedup(int conditions) const {
    return find(conditions, false).median_ms / find(conditions, true).median_ms;
}

BenchReport run_bench(const DitModel& model, const LoraAdapter& spatial,
                      const LoraAdapter& subject, const ToyImage& spatial_cond,
                      const ToyImage& subject_cond, const std::vector<int>& prompt, int steps,
                      int repetitions, std::uint64_t seed) {
    require(repetitions >= 5, "bench: need at least 5 repetitions");
    BenchReport report;
    report.sampler_steps = steps;
    report.repetitions = repetitions;

    using Clock = std::chrono::steady_clock;
    for (int conditions = 1; conditions <= 2; ++conditions) {
        std::vector<std::pair<ConditionKind, ToyImage>> conds{{ConditionKind::spatial, spatial_cond}};
        std::vector<const LoraAdapter*> adapters{&spatial};
        if (conditions == 2) {
            conds.emplace_back(ConditionKind::subject, subject_cond);
            adapters.push_back(&subject);
        }
        for (bool cached : {true, false}) {
            GenerateOptions opt;
            opt.seed = seed;
            opt.schedule.steps = steps;
            opt.use_cache = cached;
            BenchRun run;
            run.conditions = conditions;
            run.cached = cached;
            generate(model, prompt, conds, adapters, opt);  // warm-up
            counters().reset();
            generate(model, prompt, conds, adapters, opt);
            run.condition_projections = counters().condition_qkv_projections.load();
            run.attention_rows = counters().attention_query_rows.load();
            for (int rep = 0; rep < repetitions; ++rep) {
                const auto start = Clock::now();
                generate(model, prompt, conds, adapters, opt);
                const auto stop = Clock::now();
                run.samples_ms.push_back(
                    std::chrono::duration<double, std::milli>(stop - start).count());
            }
            run.median_ms = median(run.samples_ms);
            report.runs.push_back(std::move(run));
        }
    }
    return report;
}

void write_bench_csv(const BenchReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "conditions,cached,sample_index,ms,median_ms,condition_projections,attention_rows\n";
    for (const BenchRun& r : report.runs) {
        for (std::size_t i = 0; i < r.samples_ms.size(); ++i) {
            os << r.conditions << "," << (r.cached ? 1 : 0) << "," << i << "," << r.samples_ms[i]
               << "," << r.median_ms << "," << r.condition_projections << "," << r.attention_rows
               << "\n";
        }
    }
    if (!os) throw std::runtime_error("failed writing " + path);
}

}  // namespace cdit
