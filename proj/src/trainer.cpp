// SPDX-License-Identifier: Apache-2.0

#include "mckd/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mckd/error.hpp"

namespace mckd {

void TrainConfig::validate(std::size_t n_modalities) const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "train config: " + m); };
    if (p != 1 && p != 2) fail("p must be 1 or 2");
    if (!(alpha >= 0.0)) fail("alpha must be non-negative");
    if (inner_iters_per_meta == 0) fail("inner_iters_per_meta must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lr_model > 0.0) || !(lr_iwv > 0.0)) fail("learning rates must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(wd_iwv >= 0.0)) fail("wd_iwv must be non-negative");
    if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
    if (effective_dropout_max(n_modalities) > n_modalities - 1) fail("dropout_max must be at most N - 1");
    if (probe_modality >= n_modalities) fail("probe_modality out of range");
    if (iwv_init && iwv_init->size() != n_modalities) fail("iwv_init length must equal N");
    if (eval_batch == 0 || probe_samples == 0) fail("eval_batch and probe_samples must be positive");
}

// ---------------------------------------------------------------------------

void SgdNesterov::step(std::span<Tensor* const> params, double lr) {
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const Tensor* p : params) velocity_.emplace_back(p->numel(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto data = p.data();
        auto& v = velocity_[k];
        for (std::size_t i = 0; i < data.size(); ++i) {
            v[i] = momentum_ * v[i] + g[i];
            data[i] -= lr * (g[i] + momentum_ * v[i]);
        }
    }
}

void AdamW::step(Tensor& param) {
    auto data = param.data();
    if (m_.size() != data.size()) {
        m_.assign(data.size(), 0.0);
        v_.assign(data.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto g = param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = m_[i] / bc1;
        const double vhat = v_[i] / bc2;
        data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * data[i]);
    }
}

double cosine_lr(double lr0, std::size_t t, std::size_t total, bool anneal) {
    if (!anneal || total == 0) return lr0;
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(total));
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
    double sq = 0.0;
    for (Tensor* p : params)
        for (double g : p->grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor* p : params)
            for (double& g : p->grad()) g *= s;
    }
    return norm;
}

void drop_modalities(Batch& batch, std::mt19937_64& rng, std::size_t dropout_max) {
    const std::size_t N = batch.n_modalities();
    if (N == 0) return;
    dropout_max = std::min(dropout_max, N - 1);
    std::uniform_int_distribution<std::size_t> count(0, dropout_max);
    std::vector<std::size_t> idx(N);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t k = count(rng);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        // Partial Fisher-Yates: the first k entries are a uniform k-subset.
        for (std::size_t i = 0; i < k; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, N - 1);
            std::swap(idx[i], idx[pick(rng)]);
            batch.present[b * N + idx[i]] = 0;
        }
    }
}

// ---------------------------------------------------------------------------

TrainState TrainState::init(const ModelConfig& model_config, const TrainConfig& config) {
    model_config.validate();
    config.validate(model_config.n_modalities);
    TrainState s{init_params(model_config, config.seed),
                 config.iwv_init ? Iwv::from_raw(*config.iwv_init, config.norm)
                                 : Iwv::init(model_config.n_modalities, config.seed ^ 0x9e3779b97f4a7c15ULL, config.norm),
                 SgdNesterov(config.momentum),
                 AdamW(config.lr_iwv, config.wd_iwv),
                 0,
                 {}};
    return s;
}

namespace {

std::string diagnostics(const TrainState& state, const std::string& what, double value) {
    std::ostringstream os;
    os << "non-finite " << what << " (" << value << ") at iteration " << state.iter << "; raw IWV [";
    for (std::size_t i = 0; i < state.iwv.size(); ++i) os << (i ? ", " : "") << state.iwv.raw[i];
    os << "]";
    if (!state.history.empty()) {
        const auto& r = state.history.back();
        os << "; last metrics row: iter " << r.iter << ", task " << r.task_loss << ", ckd " << r.ckd_loss
           << ", meta " << r.meta_loss;
    }
    return os.str();
}

// Diverged parameters surface as non-finite op inputs during the forward pass;
// in training that is a numerical abort, not a caller error.
template <class F>
auto forward_or_abort(const TrainState& state, const char* what, F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::Domain) throw;
        throw Error(ErrorKind::Numerical,
                    diagnostics(state, what, std::numeric_limits<double>::quiet_NaN()) + " (" + e.what() + ")");
    }
}

}  // namespace

LossBreakdown inner_step(TrainState& state, const TrainConfig& config, const Batch& batch) {
    auto params = state.model.parameters();
    for (Tensor* p : params) p->zero_grad();
    Tape tape;
    InnerLoss loss = forward_or_abort(
        state, "inner loss", [&] { return inner_loss(tape, state.model, batch, state.iwv, config.alpha, config.p); });
    if (!std::isfinite(loss.breakdown.total)) {
        throw Error(ErrorKind::Numerical, diagnostics(state, "inner loss", loss.breakdown.total));
    }
    tape.backward(loss.total);
    const double gnorm = clip_grad_norm(params, config.clip_norm);
    if (!std::isfinite(gnorm)) throw Error(ErrorKind::Numerical, diagnostics(state, "gradient norm", gnorm));
    const double lr = cosine_lr(config.lr_model, state.iter, config.total_iters, config.cosine_anneal);
    state.model_opt.step(params, lr);
    ++state.iter;
    return loss.breakdown;
}

double meta_step(TrainState& state, const TrainConfig& config, const Batch& val_batch) {
    state.iwv.raw.zero_grad();
    Tape tape;
    Var loss = forward_or_abort(state, "meta loss", [&] { return meta_loss(tape, state.model, val_batch, state.iwv); });
    const double value = loss.item();
    if (!std::isfinite(value)) throw Error(ErrorKind::Numerical, diagnostics(state, "meta loss", value));
    tape.backward(loss);
    Tensor* raw = &state.iwv.raw;
    clip_grad_norm(std::span(&raw, 1), config.clip_norm);
    state.iwv_opt.step(state.iwv.raw);
    state.iwv.refresh();
    return value;
}

TrainState train(const ModelConfig& model_config, const TrainConfig& config, const Split& train_split,
                 const Split& val_split, const RowSink& on_row) {
    {
        std::unordered_set<std::int32_t> seen(train_split.ids.begin(), train_split.ids.end());
        for (auto id : val_split.ids) {
            if (seen.count(id) != 0) {
                throw Error(ErrorKind::Input, "train and validation splits share sample " + std::to_string(id));
            }
        }
    }
    TrainState state = TrainState::init(model_config, config);
    const std::size_t N = model_config.n_modalities;
    const std::size_t drop_max = config.effective_dropout_max(N);

    BatchStream train_stream(train_split, config.batch_size, config.seed * 4 + 1);
    BatchStream val_stream(val_split, std::min(config.batch_size, val_split.size()), config.seed * 4 + 2);
    std::mt19937_64 drop_rng(config.seed * 4 + 3);

    std::vector<std::size_t> probe_rows(std::min(config.probe_samples, val_split.size()));
    std::iota(probe_rows.begin(), probe_rows.end(), std::size_t{0});
    const Batch probe_batch = val_split.batch(probe_rows);

    while (state.iter < config.total_iters) {
        MetricsRow row;
        Batch vb = val_stream.next();
        if (config.meta_dropout) drop_modalities(vb, drop_rng, drop_max);
        row.meta_loss = meta_step(state, config, vb);
        row.w = state.iwv.normalized;

        std::size_t steps = 0;
        for (std::size_t n = 0; n < config.inner_iters_per_meta && state.iter < config.total_iters; ++n) {
            Batch tb = train_stream.next();
            drop_modalities(tb, drop_rng, drop_max);
            const LossBreakdown lb = inner_step(state, config, tb);
            row.task_loss += lb.task;
            row.ckd_loss += lb.ckd;
            ++steps;
        }
        row.task_loss /= static_cast<double>(steps);
        row.ckd_loss /= static_cast<double>(steps);
        row.iter = state.iter;
        row.val_metric = evaluate(state.model, val_split, MissingPattern::none(), config.eval_batch).metric;
        const ProbeResult probe = probe_imputation(state.model, probe_batch, config.probe_modality);
        row.impute_l1 = probe.l1;
        row.impute_cos = probe.cosine;
        state.history.push_back(row);
        if (on_row) on_row(state.history.back());
    }
    return state;
}

// ---------------------------------------------------------------------------

MissingPattern MissingPattern::of(std::initializer_list<std::size_t> missing) {
    MissingPattern p;
    for (auto i : missing) p.mask |= 1u << i;
    return p;
}

std::string MissingPattern::label(std::size_t n_modalities) const {
    std::string s(n_modalities, '1');
    for (std::size_t i = 0; i < n_modalities; ++i)
        if (missing(i)) s[i] = '0';
    return s;
}

MissingPattern MissingPattern::parse(const std::string& label) {
    MissingPattern p;
    if (label.empty() || label.size() > 31) throw Error(ErrorKind::Config, "bad pattern `" + label + "`");
    for (std::size_t i = 0; i < label.size(); ++i) {
        if (label[i] == '0') {
            p.mask |= 1u << i;
        } else if (label[i] != '1') {
            throw Error(ErrorKind::Config, "pattern `" + label + "` must contain only 0 and 1");
        }
    }
    return p;
}

std::vector<MissingPattern> all_patterns(std::size_t n_modalities) {
    if (n_modalities == 0 || n_modalities > 20) throw Error(ErrorKind::Config, "unsupported modality count");
    const std::uint32_t full = (1u << n_modalities) - 1u;
    std::vector<MissingPattern> out;
    for (std::uint32_t present = 1; present <= full; ++present) out.push_back({full & ~present});
    std::stable_sort(out.begin(), out.end(), [&](MissingPattern a, MissingPattern b) {
        return std::popcount(full & ~a.mask) < std::popcount(full & ~b.mask);
    });
    return out;
}

EvalResult evaluate(MckdModel& model, const Split& split, MissingPattern pattern, std::size_t eval_batch) {
    const ModelConfig& cfg = model.config;
    const std::size_t N = cfg.n_modalities;
    bool any_present = false;
    for (std::size_t i = 0; i < N; ++i) any_present = any_present || !pattern.missing(i);
    if (!any_present || (pattern.mask >> N) != 0) {
        throw Error(ErrorKind::Input, "evaluation pattern " + pattern.label(N) + " leaves no modality present");
    }
    const std::size_t C = cfg.head.n_classes;
    const bool seg = cfg.head.kind == HeadKind::Segmentation;
    std::size_t correct = 0;
    std::vector<double> inter(C, 0.0), pred_count(C, 0.0), true_count(C, 0.0);

    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < split.size(); start += eval_batch) {
        const std::size_t end = std::min(split.size(), start + eval_batch);
        rows.resize(end - start);
        std::iota(rows.begin(), rows.end(), start);
        Batch batch = split.batch(rows);
        for (std::size_t b = 0; b < batch.size(); ++b)
            for (std::size_t i = 0; i < N; ++i)
                if (pattern.missing(i)) batch.present[b * N + i] = 0;
        Tape tape;
        BoundModel bound = bind(tape, model, Binding::Frozen);
        const Tensor& logits = decode(bound, encode(bound, batch).features).value();
        const auto& L = logits.values();
        const std::size_t n_rows = L.size() / C;
        for (std::size_t r = 0; r < n_rows; ++r) {
            const double* row = L.data() + r * C;
            const auto pred = static_cast<std::size_t>(std::max_element(row, row + C) - row);
            const auto truth = static_cast<std::size_t>(batch.labels[r]);
            if (seg) {
                pred_count[pred] += 1.0;
                true_count[truth] += 1.0;
                if (pred == truth) inter[truth] += 1.0;
            } else if (pred == truth) {
                ++correct;
            }
        }
    }
    EvalResult out;
    if (!seg) {
        out.metric = static_cast<double>(correct) / static_cast<double>(split.size());
        return out;
    }
    out.per_class.resize(C);
    for (std::size_t c = 0; c < C; ++c)
        out.per_class[c] = (2.0 * inter[c] + kDiceEps) / (pred_count[c] + true_count[c] + kDiceEps);
    out.metric = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / static_cast<double>(C);
    return out;
}

ProbeResult probe_imputation(MckdModel& model, const Batch& full_batch, std::size_t target) {
    const std::size_t N = model.config.n_modalities;
    if (target >= N) throw Error(ErrorKind::Input, "probe target out of range");
    Tape tape;
    BoundModel bound = bind(tape, model, Binding::Frozen);
    Batch full = full_batch;
    std::fill(full.present.begin(), full.present.end(), std::uint8_t{1});
    const Tensor& real = encode(bound, full).per_modality[target].value();

    Batch masked = full;
    for (std::size_t b = 0; b < masked.size(); ++b) masked.present[b * N + target] = 0;
    Var imputed_all = encode(bound, masked).features;
    const Tensor& imputed = block(imputed_all, target).value();

    const std::size_t B = real.dim(0), d = real.dim(1);
    ProbeResult out;
    for (std::size_t b = 0; b < B; ++b) {
        double l1 = 0.0, dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double x = imputed.at(b, k), y = real.at(b, k);
            l1 += std::abs(x - y);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        out.l1 += l1;
        out.cosine += dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12);
    }
    out.l1 /= static_cast<double>(B);
    out.cosine /= static_cast<double>(B);
    return out;
}

}  // namespace mckd
