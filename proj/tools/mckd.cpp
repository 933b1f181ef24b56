// SPDX-License-Identifier: Apache-2.0
//
// mckd: generate synthetic data, train, evaluate, sweep alpha, ablate the IWV
// normalization and run the gradient-check suite.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mckd/data.hpp"
#include "mckd/error.hpp"
#include "mckd/experiment.hpp"
#include "mckd/io.hpp"
#include "mckd/report.hpp"
#include "mckd/trainer.hpp"

namespace fs = std::filesystem;
using namespace mckd;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool quiet = false;
    std::vector<std::string> sets;
    std::string dataset;
};

void add_common(CLI::App* cmd, Common& c, bool with_dataset) {
    cmd->add_option("--config", c.config, "Config file of `key = value` lines");
    cmd->add_option("--seed", c.seed, "Seed override");
    cmd->add_option("--out", c.out, "Output directory");
    cmd->add_flag("--quiet", c.quiet, "Only print errors and final results");
    cmd->add_option("--set", c.sets, "Override one config key: key=value (repeatable)");
    if (with_dataset) cmd->add_option("--dataset", c.dataset, "Dataset directory or manifest (data.path)");
}

KvFile read_config(const std::string& path) {
    if (!fs::is_regular_file(path)) throw Error(ErrorKind::Config, "config file not found: " + path);
    return KvFile::read(path);
}

std::string join(const std::vector<double>& xs, int prec = 4) {
    std::string s;
    char buf[32];
    for (std::size_t i = 0; i < xs.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.*f", prec, xs[i]);
        s += (i ? " " : "") + std::string(buf);
    }
    return s;
}

RunConfig run_config(const Common& c) {
    RunConfig rc;
    if (!c.config.empty()) rc.apply(read_config(c.config));
    for (const auto& s : c.sets) {
        auto [k, v] = split_assignment(s);
        rc.set(k, v);
    }
    if (c.seed) rc.train.seed = *c.seed;
    if (!c.dataset.empty()) rc.data_path = c.dataset;
    if (!c.out.empty()) rc.out_dir = c.out;
    if (rc.data_path.empty()) throw Error(ErrorKind::Config, "no dataset: pass --dataset or set data.path");
    return rc;
}

fs::path require_out(const RunConfig& rc) {
    if (rc.out_dir.empty()) throw Error(ErrorKind::Config, "no output directory: pass --out or set run.out");
    return rc.out_dir;
}

Dataset load(const RunConfig& rc) {
    if (!fs::exists(rc.data_path)) throw Error(ErrorKind::Io, "dataset not found: " + rc.data_path.string());
    return load_dataset(rc.data_path);
}

void echo_config(const RunConfig& rc, const fs::path& dir) {
    fs::create_directories(dir);
    rc.to_kv().write(dir / "config.txt");
}

// --- verbs ------------------------------------------------------------------

int cmd_gen(const Common& c, const std::string& spec_file) {
    KvFile kv;
    const std::string path = !spec_file.empty() ? spec_file : c.config;
    if (!path.empty()) kv = read_config(path);
    KvFile known;
    SynthSpec{}.write(known);
    for (const auto& s : c.sets) {
        auto [k, v] = split_assignment(s);
        kv.set(k, v);
    }
    for (const auto& [k, v] : kv.entries())
        if (!known.has(k)) throw Error(ErrorKind::Config, "unknown spec key `" + k + "`");
    SynthSpec spec = SynthSpec::read(kv);
    if (c.seed) spec.seed = *c.seed;
    if (c.out.empty()) throw Error(ErrorKind::Config, "gen needs --out");
    const Dataset d = generate(spec, c.out);
    if (!c.quiet) {
        std::printf("wrote %s: train %zu, val %zu, test %zu, planted modality %zu\n", c.out.c_str(), d.train.size(),
                    d.val.size(), d.test.size(), spec.informative);
    }
    return 0;
}

int cmd_train(const Common& c) {
    const RunConfig rc = run_config(c);
    const fs::path out = require_out(rc);
    const Dataset data = load(rc);
    RowSink progress;
    if (!c.quiet) {
        progress = [](const MetricsRow& r) {
            std::printf("iter %6zu  task %.4f  ckd %.4f  meta %.4f  val %.4f  w [%s]\n", r.iter, r.task_loss,
                        r.ckd_loss, r.meta_loss, r.val_metric, join(r.w).c_str());
            std::fflush(stdout);
        };
    }
    TrainState st = run_training(rc, data, out, progress);
    const auto& last = st.history.back();
    std::printf("final w = [%s]\n", join(st.iwv.normalized).c_str());
    std::printf("val metric = %.6f\n", last.val_metric);
    return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& patterns_arg,
             const std::string& split_name) {
    RunConfig rc = run_config(c);
    if (checkpoint.empty()) throw Error(ErrorKind::Config, "eval needs --checkpoint");
    const Dataset data = load(rc);
    if (!fs::exists(checkpoint)) throw Error(ErrorKind::Io, "checkpoint not found: " + checkpoint);
    MckdModel model = load_checkpoint(checkpoint);
    const ModelConfig expect = rc.model_for(data.spec);
    if (model.config.n_modalities != expect.n_modalities || model.config.input_dims != expect.input_dims ||
        model.config.head.kind != expect.head.kind || model.config.head.n_classes != expect.head.n_classes ||
        model.config.output_size() != expect.output_size()) {
        throw Error(ErrorKind::Format, "checkpoint " + checkpoint + " does not match the dataset's shapes");
    }
    const std::size_t N = model.config.n_modalities;
    std::vector<MissingPattern> patterns;
    if (patterns_arg == "all") {
        patterns = all_patterns(N);
    } else {
        std::size_t start = 0;
        for (;;) {
            const auto comma = patterns_arg.find(',', start);
            const std::string tok = patterns_arg.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            if (tok.size() != N) {
                throw Error(ErrorKind::Config, "pattern `" + tok + "` needs one 0/1 character per modality (" +
                                                   std::to_string(N) + ")");
            }
            patterns.push_back(MissingPattern::parse(tok));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    const Split* split = nullptr;
    if (split_name == "test") split = &data.test;
    else if (split_name == "val") split = &data.val;
    else if (split_name == "train") split = &data.train;
    else throw Error(ErrorKind::Config, "--split must be train, val or test");
    const Table t = pattern_table(model, *split, patterns);
    if (!rc.out_dir.empty()) {
        fs::create_directories(rc.out_dir);
        t.write(rc.out_dir / "eval.csv");
    }
    std::cout << t.str();
    return 0;
}

int cmd_sweep(const Common& c, const std::string& alphas_arg) {
    const RunConfig rc = run_config(c);
    const fs::path out = require_out(rc);
    const Dataset data = load(rc);
    std::vector<double> alphas(std::begin(kDefaultAlphas), std::end(kDefaultAlphas));
    if (!alphas_arg.empty()) {
        try {
            alphas = parse_doubles(alphas_arg);
        } catch (const Error&) {
            throw Error(ErrorKind::Config, "--alphas must be a comma-separated list of numbers");
        }
    }
    echo_config(rc, out);
    const auto points = sweep_alpha(rc, data, alphas, out);
    const Table t = sweep_table(points, data);
    t.write(out / "sweep.csv");
    write_text(out / "sweep.svg", sweep_chart(points, data));
    std::cout << t.str();
    return 0;
}

int cmd_ablate(const Common& c, const std::string& norms_arg) {
    const RunConfig rc = run_config(c);
    const fs::path out = require_out(rc);
    const Dataset data = load(rc);
    std::vector<IwvNorm> norms;
    std::size_t start = 0;
    for (;;) {
        const auto comma = norms_arg.find(',', start);
        norms.push_back(parse_iwv_norm(norms_arg.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    echo_config(rc, out);
    const auto points = ablate_norm(rc, data, norms, out);
    const Table t = ablation_table(points, data);
    t.write(out / "ablation.csv");
    std::cout << t.str();
    return 0;
}

int cmd_gradcheck(const Common& c, const std::string& corrupt_op, double corrupt_factor) {
    std::optional<OpKind> corrupt;
    if (!corrupt_op.empty()) {
        corrupt = parse_op_kind(corrupt_op);
        if (!corrupt) throw Error(ErrorKind::Config, "unknown op `" + corrupt_op + "`");
    }
    const auto entries = gradcheck_suite(c.seed.value_or(0), corrupt, corrupt_factor);
    const Table t = gradcheck_table(entries);
    if (!c.out.empty()) {
        fs::create_directories(c.out);
        t.write(fs::path(c.out) / "gradcheck.csv");
    }
    std::cout << t.str();
    bool ok = true;
    for (const auto& e : entries) ok = ok && e.pass;
    if (!c.quiet) std::printf("%s (tolerance %.0e)\n", ok ? "all checks pass" : "GRADCHECK FAILED", kGradCheckTolerance);
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-learned cross-modal knowledge distillation on synthetic multi-modal data"};
    app.require_subcommand(1);

    Common common;
    std::string spec_file, checkpoint, patterns = "all", split = "test", alphas, norms = "softmax,sigmoid,relu",
                                        corrupt_op;
    double corrupt_factor = 1.5;

    auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    add_common(gen, common, false);
    gen->add_option("spec", spec_file, "Spec file with synth.* keys");

    auto* tr = app.add_subcommand("train", "Train and write metrics.csv plus a checkpoint");
    add_common(tr, common, true);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint per missing-modality pattern");
    add_common(ev, common, true);
    ev->add_option("--checkpoint", checkpoint, "Checkpoint directory");
    ev->add_option("--patterns", patterns, "`all` or comma-separated masks such as 1101 (1 = present)");
    ev->add_option("--split", split, "train, val or test");

    auto* sw = app.add_subcommand("sweep-alpha", "Train per alpha and compare on the planted-missing pattern");
    add_common(sw, common, true);
    sw->add_option("--alphas", alphas, "Comma-separated alphas (default 0,0.01,0.1,0.5,1)");

    auto* ab = app.add_subcommand("ablate-norm", "Train per IWV normalization");
    add_common(ab, common, true);
    ab->add_option("--norms", norms, "Comma-separated subset of softmax,sigmoid,relu");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of all training composites");
    add_common(gc, common, false);
    gc->add_option("--corrupt-op", corrupt_op)->group("");
    gc->add_option("--corrupt-factor", corrupt_factor)->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code(ErrorKind::Config);
    }

    try {
        if (gen->parsed()) return cmd_gen(common, spec_file);
        if (tr->parsed()) return cmd_train(common);
        if (ev->parsed()) return cmd_eval(common, checkpoint, patterns, split);
        if (sw->parsed()) return cmd_sweep(common, alphas);
        if (ab->parsed()) return cmd_ablate(common, norms);
        if (gc->parsed()) return cmd_gradcheck(common, corrupt_op, corrupt_factor);
    } catch (const Error& e) {
        std::fflush(stdout);
        std::fprintf(stderr, "mckd: %s: %s\n", to_string(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "mckd: io error: %s\n", e.what());
        return exit_code(ErrorKind::Io);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "mckd: %s\n", e.what());
        return 1;
    }
    return 0;
}
