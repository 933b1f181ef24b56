// SPDX-License-Identifier: Apache-2.0

#include "mckd/losses.hpp"

#include <cmath>
#include <random>

#include "mckd/error.hpp"

namespace mckd {

const char* to_string(IwvNorm norm) noexcept {
    switch (norm) {
        case IwvNorm::Softmax: return "softmax";
        case IwvNorm::Sigmoid: return "sigmoid";
        case IwvNorm::Relu: return "relu";
    }
    return "?";
}

IwvNorm parse_iwv_norm(const std::string& name) {
    if (name == "softmax") return IwvNorm::Softmax;
    if (name == "sigmoid") return IwvNorm::Sigmoid;
    if (name == "relu") return IwvNorm::Relu;
    throw Error(ErrorKind::Config, "unknown IWV normalization `" + name + "` (softmax|sigmoid|relu)");
}

std::vector<double> normalize_values(std::span<const double> raw, IwvNorm norm) {
    std::vector<double> out(raw.size());
    switch (norm) {
        case IwvNorm::Softmax: return softmax_values(raw);
        case IwvNorm::Sigmoid:
            for (std::size_t i = 0; i < raw.size(); ++i) {
                const double v = raw[i];
                out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            }
            return out;
        case IwvNorm::Relu: {
            double s = 0.0;
            for (std::size_t i = 0; i < raw.size(); ++i) {
                out[i] = std::max(raw[i], 0.0) + kReluNormFloor;
                s += out[i];
            }
            for (auto& v : out) v /= s;
            return out;
        }
    }
    return out;
}

Var normalize(Var raw, IwvNorm norm) {
    switch (norm) {
        case IwvNorm::Softmax: return softmax(raw);
        case IwvNorm::Sigmoid: return sigmoid(raw);
        case IwvNorm::Relu: {
            Var r = relu(raw) + kReluNormFloor;
            return r / sum(r);
        }
    }
    throw Error(ErrorKind::Config, "unknown IWV normalization");
}

Iwv Iwv::init(std::size_t n, std::uint64_t seed, IwvNorm norm) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 0.01);
    std::vector<double> raw(n);
    for (auto& v : raw) v = dist(rng);
    return from_raw(std::move(raw), norm);
}

Iwv Iwv::from_raw(std::vector<double> raw, IwvNorm norm) {
    Iwv w;
    const std::size_t n = raw.size();
    w.raw = Tensor({n}, std::move(raw));
    w.norm = norm;
    w.refresh();
    return w;
}

// ---------------------------------------------------------------------------

namespace {

// Collapse leading dims: [.., C] -> [M x C].
Var as_rows(Var logits) {
    const Shape& s = logits.shape();
    if (s.size() < 2) throw Error(ErrorKind::Dimension, "logits need a class axis: " + shape_string(s));
    const std::size_t c = s.back();
    const std::size_t m = logits.value().numel() / c;
    return s.size() == 2 ? logits : reshape(logits, {m, c});
}

Tensor one_hot(std::span<const std::int32_t> labels, std::size_t rows, std::size_t classes) {
    if (labels.size() != rows) {
        throw Error(ErrorKind::Dimension,
                    std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " prediction rows");
    }
    Tensor t({rows, classes}, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto l = labels[r];
        if (l < 0 || static_cast<std::size_t>(l) >= classes) {
            throw Error(ErrorKind::Input,
                        "label " + std::to_string(l) + " out of range for " + std::to_string(classes) + " classes");
        }
        t.at(r, static_cast<std::size_t>(l)) = 1.0;
    }
    return t;
}

}  // namespace

Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
    Var rows = as_rows(logits);
    const std::size_t m = rows.shape()[0], c = rows.shape()[1];
    Var target = rows.tape()->constant(one_hot(labels, m, c));
    return scale(sum(log_softmax_rows(rows) * target), -1.0 / static_cast<double>(m));
}

Var soft_dice_loss(Var probs, const Tensor& targets) {
    if (probs.shape() != targets.shape() || probs.shape().size() != 2) {
        throw Error(ErrorKind::Dimension, "dice: probabilities " + shape_string(probs.shape()) + " vs targets " +
                                              shape_string(targets.shape()));
    }
    Tape& tape = *probs.tape();
    const std::size_t c = targets.dim(1);
    Tensor target_sum({c}, 0.0);
    for (std::size_t r = 0; r < targets.dim(0); ++r)
        for (std::size_t k = 0; k < c; ++k) target_sum[k] += targets.at(r, k);

    Var g = tape.constant(targets);
    Var inter = sum(probs * g, 0);
    Var denom = sum(probs, 0) + tape.constant(target_sum) + kDiceEps;
    Var dice = (scale(inter, 2.0) + kDiceEps) / denom;
    return add_scalar(scale(mean(dice), -1.0), 1.0);
}

Var dice_loss(Var logits, std::span<const std::int32_t> labels) {
    Var rows = as_rows(logits);
    return soft_dice_loss(softmax_rows(rows), one_hot(labels, rows.shape()[0], rows.shape()[1]));
}

Var task_loss(Var logits, std::span<const std::int32_t> labels, HeadKind head) {
    Var ce = cross_entropy(logits, labels);
    if (head == HeadKind::Classification) return ce;
    return ce + dice_loss(logits, labels);
}

// ---------------------------------------------------------------------------

Var ckd_pair(Var f_i, Var f_j, std::span<const std::uint8_t> present_i, std::span<const std::uint8_t> present_j,
             int p) {
    if (p != 1 && p != 2) throw Error(ErrorKind::Config, "unsupported CKD norm p=" + std::to_string(p));
    if (f_i.shape() != f_j.shape() || f_i.shape().size() != 2) {
        throw Error(ErrorKind::Dimension,
                    "ckd_pair: feature shapes " + shape_string(f_i.shape()) + " and " + shape_string(f_j.shape()));
    }
    const std::size_t B = f_i.shape()[0];
    if (present_i.size() != B || present_j.size() != B) {
        throw Error(ErrorKind::Dimension, "ckd_pair: presence masks do not match the batch");
    }
    Tape& tape = *f_i.tape();
    Tensor gate({B}, 0.0);
    bool any = false;
    for (std::size_t b = 0; b < B; ++b) {
        if (present_i[b] != 0 && present_j[b] != 0) {
            gate[b] = 1.0;
            any = true;
        }
    }
    if (!any) return tape.constant(0.0);
    Var diff = f_i - f_j;
    Var norms = p == 1 ? sum(abs(diff), 1) : row_norm2(diff);
    return scale(sum(norms * tape.constant(std::move(gate))), 1.0 / static_cast<double>(B));
}

CkdTotal ckd_total(std::span<const Var> features, std::span<const std::uint8_t> present,
                   std::span<const double> w_norm, double alpha, int p) {
    const std::size_t N = features.size();
    if (N == 0) throw Error(ErrorKind::Input, "ckd_total: no features");
    if (w_norm.size() != N) throw Error(ErrorKind::Dimension, "ckd_total: weight vector length mismatch");
    const std::size_t B = features[0].shape()[0];
    if (present.size() != B * N) throw Error(ErrorKind::Dimension, "ckd_total: presence mask mismatch");
    Tape& tape = *features[0].tape();

    std::vector<std::vector<std::uint8_t>> cols(N, std::vector<std::uint8_t>(B));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n) cols[n][b] = present[b * N + n];

    CkdTotal out{tape.constant(0.0), std::vector<double>(N * N, 0.0)};
    std::vector<Var> weighted;
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = i + 1; j < N; ++j) {
            Var pair = ckd_pair(features[i], features[j], cols[i], cols[j], p);
            out.pair_terms[i * N + j] = out.pair_terms[j * N + i] = pair.item();
            // (i, j) and (j, i) share one distance.
            weighted.push_back(scale(pair, w_norm[i] / w_norm[j] + w_norm[j] / w_norm[i]));
        }
    }
    if (alpha != 0.0) {
        Var acc = weighted.front();
        for (std::size_t k = 1; k < weighted.size(); ++k) acc = acc + weighted[k];
        out.value = scale(acc, alpha);
    }
    return out;
}

InnerLoss inner_loss(Tape& tape, MckdModel& model, const Batch& batch, const Iwv& iwv, double alpha, int p) {
    BoundModel bound = bind(tape, model, Binding::Trainable);
    Encoded enc = encode(bound, batch);
    Var logits = decode(bound, enc.features);
    Var task = task_loss(logits, batch.labels, model.config.head.kind);
    CkdTotal ckd = ckd_total(enc.per_modality, batch.present, iwv.normalized, alpha, p);

    InnerLoss out;
    out.total = alpha != 0.0 ? task + ckd.value : task;
    out.breakdown.task = task.item();
    out.breakdown.ckd = ckd.value.item();
    out.breakdown.total = out.total.item();
    out.breakdown.alpha = alpha;
    out.breakdown.n_modalities = model.config.n_modalities;
    out.breakdown.pair_terms = std::move(ckd.pair_terms);
    return out;
}

Var meta_loss(Tape& tape, MckdModel& model, const Batch& batch, Iwv& iwv) {
    if (iwv.size() != model.config.n_modalities) {
        throw Error(ErrorKind::Dimension, "meta_loss: IWV has " + std::to_string(iwv.size()) + " entries for " +
                                              std::to_string(model.config.n_modalities) + " modalities");
    }
    BoundModel bound = bind(tape, model, Binding::Frozen);
    Encoded enc = encode(bound, batch);
    Var w = normalize(tape.param(iwv.raw), iwv.norm);
    Var logits = decode_scaled(bound, enc.features, w);
    return task_loss(logits, batch.labels, model.config.head.kind);
}

}  // namespace mckd
