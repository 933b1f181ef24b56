// SPDX-License-Identifier: Apache-2.0
//
// Bi-level training loop: each cycle takes one meta step on the importance
// weights against a validation batch, then a run of inner SGD steps on the
// model against the task + weighted CKD objective.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mckd/data.hpp"
#include "mckd/losses.hpp"
#include "mckd/model.hpp"

namespace mckd {

struct TrainConfig {
    double alpha = 0.1;
    int p = 1;
    std::size_t inner_iters_per_meta = 100;
    std::size_t total_iters = 2000;
    std::size_t batch_size = 32;
    double lr_model = 1e-3;
    double momentum = 0.99;
    bool cosine_anneal = true;
    double lr_iwv = 1e-2;
    double wd_iwv = 5e-5;
    /// Largest number of modalities dropped per sample; unset means N - 1.
    std::optional<std::size_t> dropout_max;
    /// Apply modality dropout to meta-validation batches as well.
    bool meta_dropout = true;
    double clip_norm = 10.0;
    IwvNorm norm = IwvNorm::Softmax;
    /// Initial raw IWV; random when unset.
    std::optional<std::vector<double>> iwv_init;
    std::size_t probe_modality = 0;
    std::size_t probe_samples = 256;
    std::size_t eval_batch = 256;
    std::uint64_t seed = 0;

    std::size_t effective_dropout_max(std::size_t n_modalities) const {
        return dropout_max.value_or(n_modalities - 1);
    }
    void validate(std::size_t n_modalities) const;
};

/// SGD with Nesterov momentum: v <- mu v + g; p <- p - lr (g + mu v).
class SgdNesterov {
  public:
    explicit SgdNesterov(double momentum = 0.0) : momentum_(momentum) {}
    void step(std::span<Tensor* const> params, double lr);
    const std::vector<std::vector<double>>& velocity() const { return velocity_; }

  private:
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

/// Adam with decoupled weight decay applied to the parameter directly.
class AdamW {
  public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(Tensor& param);
    std::uint64_t steps() const { return t_; }

  private:
    double lr_, wd_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<double> m_, v_;
};

/// eta_0 * (1 + cos(pi t / T)) / 2, or eta_0 when annealing is off.
double cosine_lr(double lr0, std::size_t t, std::size_t total, bool anneal = true);

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

/// Mark k ~ Uniform{0..dropout_max} modalities absent per sample, chosen
/// uniformly without replacement; at least one modality always remains.
void drop_modalities(Batch& batch, std::mt19937_64& rng, std::size_t dropout_max);

struct MetricsRow {
    std::size_t iter = 0;
    double task_loss = 0.0;
    double ckd_loss = 0.0;
    double meta_loss = 0.0;
    double val_metric = 0.0;
    std::vector<double> w;  // normalized IWV
    double impute_l1 = 0.0;
    double impute_cos = 0.0;
};

struct TrainState {
    MckdModel model;
    Iwv iwv;
    SgdNesterov model_opt;
    AdamW iwv_opt;
    std::size_t iter = 0;
    std::vector<MetricsRow> history;

    static TrainState init(const ModelConfig& model_config, const TrainConfig& config);
};

/// One SGD step on theta and zeta with the current normalized IWV held fixed.
/// Throws Numerical on a non-finite loss.
LossBreakdown inner_step(TrainState& state, const TrainConfig& config, const Batch& batch);

/// One Adam step on the raw IWV against the meta loss with the model frozen.
/// Returns the meta loss before the update.
double meta_step(TrainState& state, const TrainConfig& config, const Batch& val_batch);

using RowSink = std::function<void(const MetricsRow&)>;

/// Alternate meta and inner steps until `total_iters` inner iterations have
/// run, appending one metrics row per cycle. `on_row` sees each row as soon
/// as it is appended.
TrainState train(const ModelConfig& model_config, const TrainConfig& config, const Split& train_split,
                 const Split& val_split, const RowSink& on_row = {});

/// Set of missing modalities (bit i set = modality i missing).
struct MissingPattern {
    std::uint32_t mask = 0;

    static MissingPattern none() { return {}; }
    static MissingPattern of(std::initializer_list<std::size_t> missing);
    bool missing(std::size_t i) const { return (mask >> i) & 1u; }
    /// One character per modality: '1' present, '0' missing.
    std::string label(std::size_t n_modalities) const;
    static MissingPattern parse(const std::string& label);
};

/// Every pattern leaving at least one modality present: 2^N - 1 of them,
/// ordered by increasing number of present modalities.
std::vector<MissingPattern> all_patterns(std::size_t n_modalities);

struct EvalResult {
    double metric = 0.0;             // accuracy, or mean per-class Dice
    std::vector<double> per_class;   // Dice per class (segmentation only)
};

/// Deterministic forward over the split with the pattern applied to every
/// sample.
EvalResult evaluate(MckdModel& model, const Split& split, MissingPattern pattern, std::size_t eval_batch = 256);

struct ProbeResult {
    double l1 = 0.0;
    double cosine = 0.0;
};

/// Mean L1 distance and cosine similarity between the imputed feature of
/// `target` (when it is masked) and its real encoder feature.
ProbeResult probe_imputation(MckdModel& model, const Batch& full_batch, std::size_t target);

}  // namespace mckd
