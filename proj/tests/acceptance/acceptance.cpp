// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails. Per-seed details go to stdout above
// the summary.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mckd/data.hpp"
#include "mckd/experiment.hpp"
#include "mckd/gradcheck.hpp"
#include "mckd/io.hpp"
#include "mckd/losses.hpp"
#include "mckd/model.hpp"
#include "mckd/trainer.hpp"

using namespace mckd;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr std::uint64_t kSeeds = 10;

struct Verdict {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Verdict> verdicts;

void record(int id, bool pass, const std::string& detail) {
    verdicts.push_back({id, pass, detail});
    std::printf("[criterion %d] %s: %s\n", id, pass ? "pass" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------

void criterion_gradients() {
    const auto t0 = Clock::now();
    const auto entries = gradcheck_suite(0);
    const double secs = seconds_since(t0);
    double worst = 0;
    bool all = true;
    for (const auto& e : entries) {
        worst = std::max(worst, e.max_rel_error);
        all = all && e.pass;
        std::printf("  gradcheck %-45s %.3e%s\n", e.name.c_str(), e.max_rel_error, e.pass ? "" : "  FAIL");
    }
    record(1, all && secs < 60.0,
           std::to_string(entries.size()) + " composites, max rel. error " + fmt("%.2e", worst) + " (< 1e-4), " +
               fmt("%.1f", secs) + " s");
}

void criterion_invariants() {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> nd(2, 6), bd(1, 8), dd(1, 6);
    std::normal_distribution<double> gauss(0.0, 1.0), wide(0.0, 3.0);
    std::bernoulli_distribution coin(0.7), pick_p(0.5);
    std::map<std::string, std::size_t> failures;
    const std::size_t instances = 1000;
    for (std::size_t trial = 0; trial < instances; ++trial) {
        const std::size_t N = nd(rng), B = bd(rng), d = dd(rng);
        const int p = pick_p(rng) ? 1 : 2;
        std::vector<double> raw(N);
        for (auto& v : raw) v = wide(rng);
        std::vector<Tensor> feats;
        for (std::size_t i = 0; i < N; ++i) {
            Tensor t({B, d});
            for (auto& v : t.data()) v = gauss(rng);
            feats.push_back(std::move(t));
        }
        std::vector<std::uint8_t> present(B * N);
        for (auto& v : present) v = coin(rng);

        const auto w = softmax_values(raw);
        if (std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0) > 1e-12) ++failures["sum-to-one"];
        std::vector<double> shifted(raw);
        const double c = wide(rng) * 5;
        for (auto& v : shifted) v += c;
        const auto w2 = softmax_values(shifted);
        for (std::size_t i = 0; i < N; ++i) {
            if (std::abs(w[i] - w2[i]) > 1e-12) ++failures["shift invariance"];
            for (std::size_t j = 0; j < N; ++j) {
                const double ref = std::exp(raw[i] - raw[j]);
                if (std::abs(w[i] / w[j] - ref) > 1e-12 * ref) ++failures["ratio identity"];
            }
        }

        auto total = [&](const std::vector<std::uint8_t>& mask, std::span<const double> ws) {
            Tape tape;
            std::vector<Var> vars;
            for (const auto& f : feats) vars.push_back(tape.constant(f));
            CkdTotal t = ckd_total(vars, mask, ws, 0.1, p);
            return std::pair{t.value.item(), t.pair_terms};
        };
        const auto [value, P] = total(present, w);
        double pair_sum = 0;
        for (std::size_t i = 0; i < N; ++i) {
            if (P[i * N + i] != 0.0) ++failures["zero diagonal"];
            for (std::size_t j = 0; j < N; ++j)
                if (P[i * N + j] != P[j * N + i]) ++failures["pair symmetry"];
            for (std::size_t j = i + 1; j < N; ++j) pair_sum += P[i * N + j];
        }
        if (value < 2.0 * 0.1 * pair_sum * (1 - 1e-12)) ++failures["AM-GM bound"];
        const double shifted_value = total(present, w2).first;
        if (std::abs(shifted_value - value) > 1e-12 * std::max(1.0, value)) ++failures["ckd shift invariance"];

        const std::size_t k = trial % N;
        auto gated = present;
        for (std::size_t b = 0; b < B; ++b) gated[b * N + k] = 0;
        const auto G = total(gated, w).second;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) {
                const bool touches = i == k || j == k;
                if (touches ? G[i * N + j] != 0.0 : G[i * N + j] != P[i * N + j]) ++failures["presence gating"];
            }
    }
    std::string detail = std::to_string(instances) + " random instances, 8 properties";
    for (const auto& [name, n] : failures) detail += "; " + name + " violated " + std::to_string(n) + "x";
    record(2, failures.empty(), detail);
}

void criterion_imputation() {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> nd(2, 6), bd(1, 16);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    std::size_t checked = 0, mismatches = 0;
    for (std::uint64_t trial = 0; trial < 300; ++trial) {
        ModelConfig mc;
        mc.n_modalities = nd(rng);
        mc.input_dims.assign(mc.n_modalities, 6);
        if (trial % 3 == 0)  // heterogeneous widths exercise the adapters
            for (std::size_t i = 0; i < mc.n_modalities; ++i) mc.input_dims[i] = 3 + i;
        mc.feature_dim = 5;
        mc.encoder_hidden = {7};
        mc.decoder_hidden = {4};
        mc.head.n_classes = 3;
        MckdModel model = init_params(mc, trial);
        const std::size_t B = bd(rng), N = mc.n_modalities;
        Batch batch;
        for (auto d : mc.input_dims) {
            Tensor t({B, d});
            for (auto& v : t.data()) v = gauss(rng);
            batch.inputs.push_back(std::move(t));
        }
        batch.present.resize(B * N);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < N; ++i) batch.present[b * N + i] = coin(rng);
            batch.present[b * N + rng() % N] = 1;
        }
        batch.labels.assign(B, 0);
        Tape tape;
        const Encoded e = encode(bind(tape, model, Binding::Frozen), batch);
        const Tensor& f = e.features.value();
        for (std::size_t b = 0; b < B; ++b) {
            std::vector<double> acc(5, 0.0);
            double count = 0;
            for (std::size_t i = 0; i < N; ++i)
                if (batch.is_present(b, i)) {
                    for (std::size_t k = 0; k < 5; ++k) acc[k] += e.per_modality[i].value().at(b, k);
                    count += 1;
                }
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t k = 0; k < 5; ++k) {
                    const double want =
                        batch.is_present(b, i) ? e.per_modality[i].value().at(b, k) : acc[k] / count;
                    ++checked;
                    if (f[(b * N + i) * 5 + k] != want) ++mismatches;
                }
        }
    }
    record(3, mismatches == 0,
           std::to_string(checked) + " feature coordinates over 300 random batches, " + std::to_string(mismatches) +
               " differ from the exact mean");
}

// ---------------------------------------------------------------------------
// Training-based criteria share one set of runs per seed.

struct RunResult {
    double planted_missing = 0;
    std::vector<double> w;
    std::vector<MetricsRow> history;
    double seconds = 0;
};

RunResult run(const RunConfig& base, const Dataset& data, double alpha, IwvNorm norm) {
    RunConfig rc = base;
    rc.train.alpha = alpha;
    rc.train.norm = norm;
    const auto t0 = Clock::now();
    TrainState st = run_training(rc, data);
    RunResult r;
    r.seconds = seconds_since(t0);
    r.planted_missing = evaluate(st.model, data.test, planted_missing(data.spec)).metric;
    r.w = st.iwv.normalized;
    r.history = std::move(st.history);
    return r;
}

const double kAlphas[] = {0.0, 0.01, 0.1, 0.5, 1.0};

struct ClassificationSeed {
    double gap = 0;
    std::size_t planted = 0;
    std::map<double, RunResult> by_alpha;  // softmax
    RunResult sigmoid, relu;
};

struct SegmentationSeed {
    RunResult baseline, mckd;
};

SynthSpec segmentation_spec(std::uint64_t seed) {
    SynthSpec s;
    s.task = TaskKind::Segmentation;
    s.n_classes = 4;
    s.seed = seed;
    return s;
}

std::string joined(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt("%.3f", v[i]);
    return s;
}

void training_criteria() {
    std::vector<ClassificationSeed> cls(kSeeds);
    std::vector<SegmentationSeed> seg(kSeeds);
    double max_default_seconds = 0;
    const auto t_all = Clock::now();

    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        SynthSpec spec;  // defaults
        spec.seed = seed;
        const Dataset data = synthesize(spec);
        auto& c = cls[seed];
        c.gap = bayes_gap(spec).gap;
        c.planted = spec.informative;
        RunConfig rc;
        rc.train.seed = seed;
        for (double a : kAlphas) c.by_alpha[a] = run(rc, data, a, IwvNorm::Softmax);
        c.sigmoid = run(rc, data, 0.1, IwvNorm::Sigmoid);
        c.relu = run(rc, data, 0.1, IwvNorm::Relu);
        max_default_seconds = std::max(max_default_seconds, c.by_alpha[0.1].seconds);

        std::printf("  classification seed %llu: gap %.3f, w [%s]", static_cast<unsigned long long>(seed), c.gap,
                    joined(c.by_alpha[0.1].w).c_str());
        for (double a : kAlphas) std::printf(", a=%g %.3f", a, c.by_alpha[a].planted_missing);
        std::printf(", sigmoid %.3f, relu %.3f (%.1f s/run)\n", c.sigmoid.planted_missing, c.relu.planted_missing,
                    c.by_alpha[0.1].seconds);
        std::fflush(stdout);
    }
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const Dataset data = synthesize(segmentation_spec(seed));
        RunConfig rc;
        rc.train.seed = seed;
        seg[seed].baseline = run(rc, data, 0.0, IwvNorm::Softmax);
        seg[seed].mckd = run(rc, data, 0.1, IwvNorm::Softmax);
        std::printf("  segmentation seed %llu: planted-missing Dice a=0 %.4f, a=0.1 %.4f, w [%s] (%.1f s/run)\n",
                    static_cast<unsigned long long>(seed), seg[seed].baseline.planted_missing,
                    seg[seed].mckd.planted_missing, joined(seg[seed].mckd.w).c_str(), seg[seed].mckd.seconds);
        std::fflush(stdout);
    }
    std::printf("  training runs took %.0f s\n", seconds_since(t_all));

    // 4: identification
    {
        std::size_t hits = 0;
        double min_gap = INFINITY;
        for (const auto& c : cls) {
            min_gap = std::min(min_gap, c.gap);
            hits += argmax(c.by_alpha.at(0.1).w) == c.planted;
        }
        record(4, min_gap > 0.15 && hits >= 9 && max_default_seconds <= 300,
               "bayes gap >= " + fmt("%.3f", min_gap) + "; argmax(w) = planted in " + std::to_string(hits) +
                   "/10 seeds; slowest run " + fmt("%.1f", max_default_seconds) + " s");
    }
    // 5: CKD benefit, paired per seed
    {
        std::size_t wins_c = 0, wins_s = 0;
        double gain_c = 0, gain_s = 0;
        for (const auto& c : cls) {
            const double d = c.by_alpha.at(0.1).planted_missing - c.by_alpha.at(0.0).planted_missing;
            wins_c += d > 0;
            gain_c += d / kSeeds;
        }
        for (const auto& s : seg) {
            const double d = s.mckd.planted_missing - s.baseline.planted_missing;
            wins_s += d > 0;
            gain_s += d / kSeeds;
        }
        const bool pass = wins_c >= 8 && gain_c > 0.01 && wins_s >= 8 && gain_s > 0.01;
        record(5, pass,
               "classification: alpha 0.1 beats alpha 0 in " + std::to_string(wins_c) + "/10, mean " +
                   fmt("%+.2f", 100 * gain_c) + " points; segmentation: " + std::to_string(wins_s) + "/10, mean " +
                   fmt("%+.2f", 100 * gain_s) + " Dice points");
    }
    // 6: alpha = 0 strictly worst
    {
        std::size_t ok = 0;
        for (const auto& c : cls) {
            const double base = c.by_alpha.at(0.0).planted_missing;
            bool worst = true;
            for (double a : kAlphas)
                if (a != 0.0) worst = worst && c.by_alpha.at(a).planted_missing > base;
            ok += worst;
        }
        record(6, ok >= 8, "alpha 0 strictly worst of {0, 0.01, 0.1, 0.5, 1} in " + std::to_string(ok) + "/10 seeds");
    }
    // 7: normalization ablation
    {
        std::size_t ok = 0;
        for (const auto& c : cls) {
            const double s = c.by_alpha.at(0.1).planted_missing;
            ok += s >= c.sigmoid.planted_missing && s >= c.relu.planted_missing;
        }
        record(7, ok >= 7, "softmax >= sigmoid and relu in " + std::to_string(ok) + "/10 seeds");
    }
    // 8: imputation probe trend over the default runs
    {
        std::size_t ok = 0;
        std::string trace;
        for (const auto& c : cls) {
            const auto& h = c.by_alpha.at(0.1).history;
            const bool better = h.back().impute_l1 < h.front().impute_l1 && h.back().impute_cos > h.front().impute_cos;
            ok += better;
        }
        const auto& h0 = cls[0].by_alpha.at(0.1).history;
        trace = "; seed 0: L1 " + fmt("%.3f", h0.front().impute_l1) + " -> " + fmt("%.3f", h0.back().impute_l1) +
                ", cos " + fmt("%.3f", h0.front().impute_cos) + " -> " + fmt("%.3f", h0.back().impute_cos);
        record(8, ok >= 9, "L1 falls and cosine rises from first to last cycle in " + std::to_string(ok) + "/10 seeds" +
                               trace);
    }
}

void criterion_determinism(const fs::path& scratch) {
    bool ok = true;
    std::string detail;

    SynthSpec spec;
    spec.seed = 3;
    const Dataset a = generate(spec, scratch / "data_a");
    (void)generate(spec, scratch / "data_b");
    const Dataset back = load_dataset(scratch / "data_a");
    bool lossless = true;
    for (auto [x, y] : {std::pair{&a.train, &back.train}, {&a.val, &back.val}, {&a.test, &back.test}}) {
        lossless = lossless && x->labels == y->labels && x->ids == y->ids;
        for (std::size_t i = 0; i < x->inputs.size(); ++i)
            lossless = lossless && x->inputs[i].values() == y->inputs[i].values();
    }
    bool same_files = true;
    for (const auto& e : fs::directory_iterator(scratch / "data_a"))
        same_files = same_files && slurp(e.path()) == slurp(scratch / "data_b" / e.path().filename());
    ok = ok && lossless && same_files;
    detail += std::string("dataset round trip ") + (lossless ? "lossless" : "LOSSY") + ", regeneration " +
              (same_files ? "byte-identical" : "DIFFERS");

    RunConfig rc;
    rc.train.seed = 3;
    (void)run_training(rc, a, scratch / "run_a");
    (void)run_training(rc, a, scratch / "run_b");
    bool same_run = slurp(scratch / "run_a" / "metrics.csv") == slurp(scratch / "run_b" / "metrics.csv");
    std::size_t files = 1;
    for (const auto& e : fs::directory_iterator(scratch / "run_a" / "checkpoint")) {
        same_run = same_run && slurp(e.path()) == slurp(scratch / "run_b" / "checkpoint" / e.path().filename());
        ++files;
    }
    ok = ok && same_run;
    detail += "; metrics + checkpoint (" + std::to_string(files) + " files) " +
              (same_run ? "byte-identical" : "DIFFER") + " across runs";

    const std::size_t patterns = all_patterns(4).size();
    ok = ok && patterns == 15;
    detail += "; " + std::to_string(patterns) + " patterns for 4 modalities";
    record(9, ok, detail);
}

}  // namespace

int main() {
    const fs::path scratch = fs::temp_directory_path() / ("mckd_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(scratch);
    int status = 0;
    try {
        criterion_gradients();
        criterion_invariants();
        criterion_imputation();
        training_criteria();
        criterion_determinism(scratch);
    } catch (const std::exception& e) {
        std::printf("acceptance aborted: %s\n", e.what());
        status = 2;
    }
    std::error_code ec;
    fs::remove_all(scratch, ec);

    std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& x, const Verdict& y) { return x.id < y.id; });
    std::printf("\nacceptance summary\n");
    for (const auto& v : verdicts) {
        std::printf("criterion %d: %s  %s\n", v.id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        if (!v.pass) status = status ? status : 1;
    }
    return status;
}
