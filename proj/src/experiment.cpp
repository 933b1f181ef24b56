// SPDX-License-Identifier: Apache-2.0

#include "mckd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "mckd/error.hpp"
#include "mckd/gradcheck.hpp"

namespace mckd {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
    throw Error(ErrorKind::Config, "config key `" + key + "`: expected " + want + ", got `" + value + "`");
}

double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) bad_value(key, v, "a number");
    return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) bad_value(key, v, "a non-negative integer");
    return out;
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
    try {
        return parse_sizes(v);
    } catch (const Error&) {
        bad_value(key, v, "a comma-separated list of integers");
    }
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

std::string doubles_text(std::span<const double> xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + format_double(xs[i]);
    return s;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
    TrainConfig& t = train;
    if (key == "model.feature_dim") feature_dim = to_size(key, value);
    else if (key == "model.encoder_hidden") encoder_hidden = value.empty() ? std::vector<std::size_t>{} : to_sizes(key, value);
    else if (key == "model.decoder_hidden") decoder_hidden = value.empty() ? std::vector<std::size_t>{} : to_sizes(key, value);
    else if (key == "train.alpha") t.alpha = to_double(key, value);
    else if (key == "train.p") t.p = static_cast<int>(to_size(key, value));
    else if (key == "train.inner_iters_per_meta") t.inner_iters_per_meta = to_size(key, value);
    else if (key == "train.total_iters") t.total_iters = to_size(key, value);
    else if (key == "train.batch_size") t.batch_size = to_size(key, value);
    else if (key == "train.lr_model") t.lr_model = to_double(key, value);
    else if (key == "train.momentum") t.momentum = to_double(key, value);
    else if (key == "train.cosine_anneal") t.cosine_anneal = to_bool(key, value);
    else if (key == "train.lr_iwv") t.lr_iwv = to_double(key, value);
    else if (key == "train.wd_iwv") t.wd_iwv = to_double(key, value);
    else if (key == "train.dropout_max") {
        if (value == "auto") t.dropout_max.reset();
        else t.dropout_max = to_size(key, value);
    } else if (key == "train.meta_dropout") t.meta_dropout = to_bool(key, value);
    else if (key == "train.clip_norm") t.clip_norm = to_double(key, value);
    else if (key == "train.norm") t.norm = parse_iwv_norm(value);
    else if (key == "train.iwv_init") {
        if (value == "random") {
            t.iwv_init.reset();
        } else {
            try {
                t.iwv_init = parse_doubles(value);
            } catch (const Error&) {
                bad_value(key, value, "`random` or a comma-separated list of numbers");
            }
        }
    } else if (key == "train.probe_modality") {
        if (value == "planted") probe_modality.reset();
        else probe_modality = to_size(key, value);
    } else if (key == "train.probe_samples") t.probe_samples = to_size(key, value);
    else if (key == "train.eval_batch") t.eval_batch = to_size(key, value);
    else if (key == "train.seed") t.seed = to_size(key, value);
    else if (key == "data.path") data_path = value;
    else if (key == "run.out") out_dir = value;
    else if (key == "run.name") name = value;
    else throw Error(ErrorKind::Config, "unknown config key `" + key + "`");
}

void RunConfig::apply(const KvFile& kv) {
    for (const auto& [k, v] : kv.entries()) set(k, v);
}

KvFile RunConfig::to_kv() const {
    const TrainConfig& t = train;
    KvFile kv;
    kv.set("model.feature_dim", static_cast<std::uint64_t>(feature_dim));
    kv.set("model.encoder_hidden", format_sizes(encoder_hidden));
    kv.set("model.decoder_hidden", format_sizes(decoder_hidden));
    kv.set("train.alpha", t.alpha);
    kv.set("train.p", t.p);
    kv.set("train.inner_iters_per_meta", static_cast<std::uint64_t>(t.inner_iters_per_meta));
    kv.set("train.total_iters", static_cast<std::uint64_t>(t.total_iters));
    kv.set("train.batch_size", static_cast<std::uint64_t>(t.batch_size));
    kv.set("train.lr_model", t.lr_model);
    kv.set("train.momentum", t.momentum);
    kv.set("train.cosine_anneal", bool_text(t.cosine_anneal));
    kv.set("train.lr_iwv", t.lr_iwv);
    kv.set("train.wd_iwv", t.wd_iwv);
    kv.set("train.dropout_max", t.dropout_max ? std::to_string(*t.dropout_max) : std::string("auto"));
    kv.set("train.meta_dropout", bool_text(t.meta_dropout));
    kv.set("train.clip_norm", t.clip_norm);
    kv.set("train.norm", std::string(to_string(t.norm)));
    kv.set("train.iwv_init", t.iwv_init ? doubles_text(*t.iwv_init) : std::string("random"));
    kv.set("train.probe_modality", probe_modality ? std::to_string(*probe_modality) : std::string("planted"));
    kv.set("train.probe_samples", static_cast<std::uint64_t>(t.probe_samples));
    kv.set("train.eval_batch", static_cast<std::uint64_t>(t.eval_batch));
    kv.set("train.seed", t.seed);
    if (!data_path.empty()) kv.set("data.path", data_path.string());
    if (!out_dir.empty()) kv.set("run.out", out_dir.string());
    kv.set("run.name", name);
    return kv;
}

ModelConfig RunConfig::model_for(const SynthSpec& spec) const {
    ModelConfig m;
    m.n_modalities = spec.n_modalities;
    m.input_dims = spec.effective_input_dims();
    m.feature_dim = feature_dim;
    m.encoder_hidden = encoder_hidden;
    m.decoder_hidden = decoder_hidden;
    m.head.kind = spec.task == TaskKind::Classification ? HeadKind::Classification : HeadKind::Segmentation;
    m.head.n_classes = spec.n_classes;
    m.head.grid_h = spec.grid_h;
    m.head.grid_w = spec.grid_w;
    m.validate();
    return m;
}

TrainConfig RunConfig::train_for(const SynthSpec& spec) const {
    TrainConfig t = train;
    t.probe_modality = probe_modality.value_or(spec.informative);
    t.validate(spec.n_modalities);
    return t;
}

std::pair<std::string, std::string> split_assignment(const std::string& text) {
    const auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorKind::Config, "expected key=value, got `" + text + "`");
    }
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t");
        const auto b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

// ---------------------------------------------------------------------------

std::size_t max_threads() {
    if (const char* env = std::getenv("MCKD_THREADS")) {
        std::size_t n = 0;
        const std::string s(env);
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
        if (ec == std::errc() && p == s.data() + s.size() && n >= 1) return n;
        throw Error(ErrorKind::Config, "MCKD_THREADS must be a positive integer, got `" + s + "`");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job) {
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t k = std::min(n, max_threads());
    if (k <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < k; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

TrainState run_training(const RunConfig& config, const Dataset& data, const std::filesystem::path& out,
                        const RowSink& on_row) {
    const ModelConfig mc = config.model_for(data.spec);
    const TrainConfig tc = config.train_for(data.spec);
    if (out.empty()) return train(mc, tc, data.train, data.val, on_row);

    namespace fs = std::filesystem;
    const bool stage = !fs::exists(out);
    const fs::path dir = stage ? fs::path(out.string() + ".partial") : out;
    std::error_code ec;
    if (stage) fs::remove_all(dir, ec);
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());

    auto publish = [&] {
        if (!stage) return;
        std::error_code e;
        fs::rename(dir, out, e);
        if (e) throw Error(ErrorKind::Io, "cannot move " + dir.string() + " to " + out.string() + ": " + e.message());
    };

    KvFile effective = config.to_kv();
    effective.set("run.out", out.string());
    effective.set("train.probe_modality", static_cast<std::uint64_t>(tc.probe_modality));
    effective.write(dir / "config.txt");

    MetricsWriter writer(dir / "metrics.csv", mc.n_modalities);
    std::optional<TrainState> state;
    try {
        state = train(mc, tc, data.train, data.val, [&](const MetricsRow& row) {
            writer.write(row);
            if (on_row) on_row(row);
        });
    } catch (...) {
        publish();
        throw;
    }
    CheckpointMeta meta;
    meta.seed = tc.seed;
    meta.iteration = state->iter;
    meta.iwv_raw = state->iwv.raw.values();
    meta.extra["iwv.norm"] = to_string(tc.norm);
    meta.extra["run.name"] = config.name;
    save_checkpoint(dir / "checkpoint", state->model, meta);
    publish();
    return std::move(*state);
}

MissingPattern planted_missing(const SynthSpec& spec) {
    MissingPattern p;
    p.mask = 1u << spec.informative;
    return p;
}

// ---------------------------------------------------------------------------

namespace {

std::string alpha_dir(double a) { return "alpha_" + format_double(a); }

std::vector<std::string> metric_columns(const Dataset& data, const char* prefix) {
    std::vector<std::string> cols{std::string(prefix)};
    if (data.spec.task == TaskKind::Segmentation)
        for (std::size_t c = 0; c < data.spec.n_classes; ++c)
            cols.push_back(std::string(prefix) + "_dice_" + std::to_string(c));
    return cols;
}

void push_metric(std::vector<std::string>& row, const EvalResult& r) {
    row.push_back(format_double(r.metric));
    for (double d : r.per_class) row.push_back(format_double(d));
}

std::vector<std::string> w_columns(std::size_t n) {
    std::vector<std::string> cols;
    for (std::size_t i = 1; i <= n; ++i) cols.push_back("w_" + std::to_string(i));
    return cols;
}

}  // namespace

std::vector<SweepPoint> sweep_alpha(const RunConfig& config, const Dataset& data, std::span<const double> alphas,
                                    const std::filesystem::path& out) {
    for (double a : alphas)
        if (!(a >= 0.0)) throw Error(ErrorKind::Config, "alpha values must be non-negative");
    if (!out.empty()) std::filesystem::create_directories(out);
    std::vector<SweepPoint> points(alphas.size());
    const MissingPattern hard = planted_missing(data.spec);
    parallel_for(alphas.size(), [&](std::size_t k) {
        RunConfig c = config;
        c.train.alpha = alphas[k];
        TrainState st = run_training(c, data, out.empty() ? out : out / alpha_dir(alphas[k]));
        SweepPoint& p = points[k];
        p.alpha = alphas[k];
        p.baseline = alphas[k] == 0.0;
        p.planted_missing = evaluate(st.model, data.test, hard, c.train.eval_batch);
        p.all_present = evaluate(st.model, data.test, MissingPattern::none(), c.train.eval_batch);
        p.w = st.iwv.normalized;
        p.history = std::move(st.history);
    });
    return points;
}

Table sweep_table(const std::vector<SweepPoint>& points, const Dataset& data) {
    Table t;
    t.header = {"alpha", "baseline"};
    for (auto& c : metric_columns(data, "planted_missing")) t.header.push_back(c);
    for (auto& c : metric_columns(data, "all_present")) t.header.push_back(c);
    for (auto& c : w_columns(data.spec.n_modalities)) t.header.push_back(c);
    for (const auto& p : points) {
        std::vector<std::string> row{format_double(p.alpha), p.baseline ? "yes" : "no"};
        push_metric(row, p.planted_missing);
        push_metric(row, p.all_present);
        for (double w : p.w) row.push_back(format_double(w));
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::string sweep_chart(const std::vector<SweepPoint>& points, const Dataset& data) {
    const bool seg = data.spec.task == TaskKind::Segmentation;
    const std::string metric = seg ? "Dice" : "accuracy";
    std::vector<Series> series;
    Series hard{metric + ", planted modality missing", {}, {}};
    Series full{metric + ", all present", {}, {}};
    std::vector<Series> per_class;
    if (seg)
        for (std::size_t c = 0; c < data.spec.n_classes; ++c)
            per_class.push_back({"Dice class " + std::to_string(c) + ", planted missing", {}, {}});
    for (const auto& p : points) {
        hard.x.push_back(p.alpha);
        hard.y.push_back(p.planted_missing.metric);
        full.x.push_back(p.alpha);
        full.y.push_back(p.all_present.metric);
        for (std::size_t c = 0; c < per_class.size() && c < p.planted_missing.per_class.size(); ++c) {
            per_class[c].x.push_back(p.alpha);
            per_class[c].y.push_back(p.planted_missing.per_class[c]);
        }
    }
    series.push_back(std::move(hard));
    series.push_back(std::move(full));
    for (auto& s : per_class) series.push_back(std::move(s));
    return svg_line_chart(metric + " as a function of alpha", "alpha", metric, series);
}

std::vector<AblationPoint> ablate_norm(const RunConfig& config, const Dataset& data, std::span<const IwvNorm> norms,
                                       const std::filesystem::path& out) {
    if (!out.empty()) std::filesystem::create_directories(out);
    std::vector<AblationPoint> points(norms.size());
    const MissingPattern hard = planted_missing(data.spec);
    parallel_for(norms.size(), [&](std::size_t k) {
        RunConfig c = config;
        c.train.norm = norms[k];
        TrainState st = run_training(c, data, out.empty() ? out : out / (std::string("norm_") + to_string(norms[k])));
        AblationPoint& p = points[k];
        p.norm = norms[k];
        p.is_default = norms[k] == IwvNorm::Softmax;
        p.planted_missing = evaluate(st.model, data.test, hard, c.train.eval_batch);
        p.all_present = evaluate(st.model, data.test, MissingPattern::none(), c.train.eval_batch);
        p.w = st.iwv.normalized;
    });
    return points;
}

Table ablation_table(const std::vector<AblationPoint>& points, const Dataset& data) {
    Table t;
    t.header = {"norm", "default"};
    for (auto& c : metric_columns(data, "planted_missing")) t.header.push_back(c);
    for (auto& c : metric_columns(data, "all_present")) t.header.push_back(c);
    for (auto& c : w_columns(data.spec.n_modalities)) t.header.push_back(c);
    for (const auto& p : points) {
        std::vector<std::string> row{to_string(p.norm), p.is_default ? "yes" : "no"};
        push_metric(row, p.planted_missing);
        push_metric(row, p.all_present);
        for (double w : p.w) row.push_back(format_double(w));
        t.rows.push_back(std::move(row));
    }
    return t;
}

Table pattern_table(MckdModel& model, const Split& split, std::span<const MissingPattern> patterns) {
    const std::size_t N = model.config.n_modalities;
    const bool seg = model.config.head.kind == HeadKind::Segmentation;
    Table t;
    t.header = {"pattern", "present", seg ? "dice" : "accuracy"};
    if (seg)
        for (std::size_t c = 0; c < model.config.head.n_classes; ++c) t.header.push_back("dice_" + std::to_string(c));
    for (const auto& p : patterns) {
        const EvalResult r = evaluate(model, split, p);
        std::size_t present = 0;
        for (std::size_t i = 0; i < N; ++i) present += p.missing(i) ? 0 : 1;
        std::vector<std::string> row{p.label(N), std::to_string(present)};
        push_metric(row, r);
        t.rows.push_back(std::move(row));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

constexpr double kKinkMargin = 1e-3;
constexpr std::size_t kMaxResamples = 50;
// Below this an element's gradient is comparable to the finite-difference
// rounding noise (~1e-10 at O(1) losses), so the point is redrawn.
constexpr double kTinyGrad = 1e-6;

struct Instance {
    MckdModel model;
    Batch batch;
    Iwv iwv;
};

// Small random instance: three modalities, heterogeneous widths for the
// classification head so the adapters are exercised, random masks keeping at
// least one modality per sample.
Instance make_instance(HeadKind head, std::uint64_t seed) {
    SynthSpec spec;
    spec.n_modalities = 3;
    spec.informative = 1;
    spec.n_classes = 3;
    spec.n_train = 12;
    spec.n_val = 1;
    spec.n_test = 1;
    spec.seed = seed;
    spec.input_dims = {5, 6, 4};
    if (head == HeadKind::Segmentation) {
        spec.task = TaskKind::Segmentation;
        spec.grid_h = 3;
        spec.grid_w = 3;
    }
    const Dataset d = synthesize(spec);
    ModelConfig mc;
    mc.n_modalities = 3;
    mc.input_dims = spec.effective_input_dims();
    mc.feature_dim = 4;
    mc.encoder_hidden = {6};
    mc.decoder_hidden = {5};
    mc.head = {head, spec.n_classes, spec.grid_h, spec.grid_w};

    std::mt19937_64 rng(seed ^ 0x5bd1e995u);
    Instance inst{init_params(mc, seed), d.train.all(), {}};
    std::normal_distribution<double> nd(0.0, 0.3);
    auto jitter = [&](std::vector<Linear>& layers) {
        for (auto& l : layers)
            for (auto& v : l.bias.data()) v = 0.1 * nd(rng);  // nonzero biases
    };
    jitter(inst.model.adapters);
    jitter(inst.model.encoder);
    jitter(inst.model.decoder);
    drop_modalities(inst.batch, rng, 2);
    std::vector<double> raw(3);
    for (auto& v : raw) v = nd(rng);
    inst.iwv = Iwv::from_raw(raw);
    return inst;
}

template <class Build>
GradCheckEntry check(const std::string& name, HeadKind head, std::uint64_t seed, const Build& build,
                     const std::function<void(Tape&)>& configure) {
    GradCheckEntry e;
    e.name = name;
    for (std::size_t attempt = 0;; ++attempt) {
        Instance inst = make_instance(head, seed + 1000 * attempt);
        auto [fn, params] = build(inst);
        const GradCheckResult r = grad_check(fn, params, 1e-5, configure);
        if ((r.min_kink_distance < kKinkMargin || r.min_nonzero_grad < kTinyGrad) && attempt + 1 < kMaxResamples) {
            ++e.resamples;
            continue;
        }
        e.max_rel_error = r.max_rel_error;
        break;
    }
    e.pass = e.max_rel_error < kGradCheckTolerance;
    return e;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, std::optional<OpKind> corrupt, double corrupt_factor) {
    std::function<void(Tape&)> configure;
    if (corrupt) configure = [k = *corrupt, corrupt_factor](Tape& t) { t.corrupt(k, corrupt_factor); };

    using Params = std::vector<Tensor*>;
    std::vector<GradCheckEntry> out;
    for (HeadKind head : {HeadKind::Classification, HeadKind::Segmentation}) {
        const std::string tag = head == HeadKind::Classification ? "classification" : "segmentation";
        for (int p : {1, 2}) {
            for (const char* part : {"theta", "zeta"}) {
                const bool theta = part[0] == 't';
                out.push_back(check(
                    "inner_loss/" + tag + "/p" + std::to_string(p) + "/" + part, head, seed,
                    [&](Instance& inst) {
                        Params ps = theta ? inst.model.theta() : inst.model.zeta();
                        LossFn fn = [&inst, p](Tape& t) { return inner_loss(t, inst.model, inst.batch, inst.iwv, 0.1, p).total; };
                        return std::pair{fn, ps};
                    },
                    configure));
            }
        }
        out.push_back(check(
            "meta_loss/" + tag + "/raw_w", head, seed,
            [](Instance& inst) {
                LossFn fn = [&inst](Tape& t) { return meta_loss(t, inst.model, inst.batch, inst.iwv); };
                return std::pair{fn, Params{&inst.iwv.raw}};
            },
            configure));
    }
    for (IwvNorm norm : {IwvNorm::Sigmoid, IwvNorm::Relu}) {
        out.push_back(check(
            std::string("meta_loss/classification/raw_w/") + to_string(norm), HeadKind::Classification, seed,
            [norm](Instance& inst) {
                inst.iwv.norm = norm;
                inst.iwv.refresh();
                LossFn fn = [&inst](Tape& t) { return meta_loss(t, inst.model, inst.batch, inst.iwv); };
                return std::pair{fn, Params{&inst.iwv.raw}};
            },
            configure));
    }
    return out;
}

Table gradcheck_table(const std::vector<GradCheckEntry>& entries) {
    Table t;
    t.header = {"composite", "max_rel_error", "resamples", "status"};
    for (const auto& e : entries) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3e", e.max_rel_error);
        t.rows.push_back({e.name, buf, std::to_string(e.resamples), e.pass ? "pass" : "FAIL"});
    }
    return t;
}

std::optional<OpKind> parse_op_kind(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(OpKind::ScaleBlocks); ++k) {
        const auto kind = static_cast<OpKind>(k);
        if (name == to_string(kind)) return kind;
    }
    return std::nullopt;
}

}  // namespace mckd
