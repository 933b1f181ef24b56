// SPDX-License-Identifier: Apache-2.0
//
// Task losses, the presence-gated cross-modal distillation (CKD) loss, the
// importance weight vector (IWV), and the inner/meta objectives built from
// them.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mckd/model.hpp"
#include "mckd/tensor.hpp"

namespace mckd {

enum class IwvNorm { Softmax, Sigmoid, Relu };

const char* to_string(IwvNorm norm) noexcept;
IwvNorm parse_iwv_norm(const std::string& name);

/// Floor added by the relu normalization so an all-non-positive raw vector
/// maps to uniform weights.
inline constexpr double kReluNormFloor = 1e-6;

/// Normalized weights from raw ones:
///   softmax: exp(w_i) / sum_j exp(w_j)
///   sigmoid: 1 / (1 + exp(-w_i))   (not summing to one)
///   relu:    (max(w_i, 0) + eps) / (sum_j max(w_j, 0) + N eps)
std::vector<double> normalize_values(std::span<const double> raw, IwvNorm norm);
Var normalize(Var raw, IwvNorm norm);

/// Importance weight vector. `raw` is the trainable meta-parameter;
/// `normalized` is a cache of normalize(raw) refreshed after each update.
struct Iwv {
    Tensor raw;
    std::vector<double> normalized;
    IwvNorm norm = IwvNorm::Softmax;

    /// Raw weights drawn uniformly from [0, 0.01).
    static Iwv init(std::size_t n, std::uint64_t seed, IwvNorm norm = IwvNorm::Softmax);
    static Iwv from_raw(std::vector<double> raw, IwvNorm norm = IwvNorm::Softmax);

    void refresh() { normalized = normalize_values(raw.data(), norm); }
    std::size_t size() const { return raw.numel(); }
};

/// Mean over rows of -log softmax(logits)[label]. Logits are [B x C] or
/// [B x H x W x C]; labels hold one class index per row.
Var cross_entropy(Var logits, std::span<const std::int32_t> labels);

inline constexpr double kDiceEps = 1e-5;

/// 1 - mean_c (2 sum p*g + eps) / (sum p + sum g + eps), with p and g given
/// as [M x C] class probabilities.
Var soft_dice_loss(Var probs, const Tensor& targets);
/// soft_dice_loss of softmax(logits) against one-hot labels.
Var dice_loss(Var logits, std::span<const std::int32_t> labels);

/// Cross-entropy for classification; cross-entropy plus Dice for segmentation.
Var task_loss(Var logits, std::span<const std::int32_t> labels, HeadKind head);

/// Batch mean of present_i * present_j * ||f_i - f_j||_p, p in {1, 2}.
Var ckd_pair(Var f_i, Var f_j, std::span<const std::uint8_t> present_i, std::span<const std::uint8_t> present_j,
             int p);

struct CkdTotal {
    Var value;                       // alpha * sum_{i != j} (w_i / w_j) * pair(i, j)
    std::vector<double> pair_terms;  // N x N, symmetric, zero diagonal
};

/// `present` is the [B x N] mask, `w_norm` the normalized IWV.
CkdTotal ckd_total(std::span<const Var> features, std::span<const std::uint8_t> present,
                   std::span<const double> w_norm, double alpha, int p);

struct LossBreakdown {
    double task = 0.0;
    double ckd = 0.0;  // already multiplied by alpha
    double total = 0.0;
    double alpha = 0.0;
    std::size_t n_modalities = 0;
    std::vector<double> pair_terms;  // N x N

    double pair(std::size_t i, std::size_t j) const { return pair_terms[i * n_modalities + j]; }
};

struct InnerLoss {
    Var total;
    LossBreakdown breakdown;
};

/// Task loss plus weighted CKD. Model parameters are bound trainable; the
/// IWV enters only through its normalized cache and receives no gradient.
InnerLoss inner_loss(Tape& tape, MckdModel& model, const Batch& batch, const Iwv& iwv, double alpha, int p);

/// Task-form loss of the decoder applied to weight-scaled features. The model
/// is frozen; gradients reach `iwv.raw` only.
Var meta_loss(Tape& tape, MckdModel& model, const Batch& batch, Iwv& iwv);

}  // namespace mckd
