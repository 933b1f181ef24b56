// SPDX-License-Identifier: Apache-2.0
//
// Multi-modal network: a shared per-modality encoder, mean imputation of
// missing modality features, and a decoder over the concatenated features.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mckd/tensor.hpp"

namespace mckd {

enum class HeadKind { Classification, Segmentation };

struct HeadConfig {
    HeadKind kind = HeadKind::Classification;
    std::size_t n_classes = 10;
    // Segmentation only.
    std::size_t grid_h = 16;
    std::size_t grid_w = 16;
};

struct ModelConfig {
    std::size_t n_modalities = 4;
    std::vector<std::size_t> input_dims{32, 32, 32, 32};
    std::size_t feature_dim = 16;
    std::vector<std::size_t> encoder_hidden{64};
    std::vector<std::size_t> decoder_hidden{64};
    HeadConfig head;

    /// Throws a Config error on any inconsistency.
    void validate() const;
    /// Heterogeneous input widths get a per-modality first layer; equal widths
    /// share the entire encoder.
    bool uses_adapters() const;
    /// Logits per sample: n_classes, or grid_h * grid_w * n_classes.
    std::size_t output_size() const;
    std::size_t cells() const { return head.grid_h * head.grid_w; }
};

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
};

struct MckdModel {
    ModelConfig config;
    std::vector<Linear> adapters;  // one per modality when uses_adapters()
    std::vector<Linear> encoder;   // shared trunk (theta)
    std::vector<Linear> decoder;   // zeta

    struct NamedTensor {
        std::string name;
        Tensor* tensor;
    };
    /// Encoder parameters (adapters included) followed by decoder parameters.
    std::vector<NamedTensor> named_parameters();
    std::vector<Tensor*> theta();
    std::vector<Tensor*> zeta();
    std::vector<Tensor*> parameters();
    std::size_t parameter_count() const;
};

/// Kaiming-uniform fan-in weights, zero biases; deterministic per seed.
MckdModel init_params(const ModelConfig& config, std::uint64_t seed);

/// A mini-batch. Inputs of absent modalities are ignored.
struct Batch {
    std::vector<Tensor> inputs;          // per modality, [B x input_dim_i]
    std::vector<std::uint8_t> present;   // [B x N], row-major
    std::vector<std::int32_t> labels;    // [B] or [B x H x W]

    std::size_t size() const { return inputs.empty() ? 0 : inputs[0].dim(0); }
    std::size_t n_modalities() const { return inputs.size(); }
    bool is_present(std::size_t b, std::size_t i) const { return present[b * inputs.size() + i] != 0; }
    void validate(const ModelConfig& config) const;
};

struct BoundLinear {
    Var weight;
    Var bias;
};

/// Model parameters placed on a tape, either as trainable params (gradients
/// flow into the model tensors) or as frozen constants.
struct BoundModel {
    const ModelConfig* config = nullptr;
    std::vector<BoundLinear> adapters;
    std::vector<BoundLinear> encoder;
    std::vector<BoundLinear> decoder;
};

enum class Binding { Trainable, Frozen };

BoundModel bind(Tape& tape, MckdModel& model, Binding mode);

struct Encoded {
    Var features;                       // [B x N x d], imputed
    std::vector<Var> per_modality;      // encoder outputs [B x d] before imputation
    std::vector<std::uint8_t> imputed;  // [B x N], 1 where a slot was filled by the mean
};

/// Encode every modality with the shared encoder and fill missing slots with
/// the mean of the sample's present features.
Encoded encode(const BoundModel& model, const Batch& batch);

/// Logits: [B x C] for classification, [B x H x W x C] for segmentation.
Var decode(const BoundModel& model, Var features);

/// decode() with block i of the features multiplied by w_norm[i].
Var decode_scaled(const BoundModel& model, Var features, Var w_norm);

/// Directory checkpoint: `checkpoint.txt` manifest plus one little-endian
/// float64 payload per parameter.
struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::uint64_t iteration = 0;
    std::vector<double> iwv_raw;
    std::map<std::string, std::string> extra;  // echoed as-is
};

void save_checkpoint(const std::filesystem::path& dir, const MckdModel& model, const CheckpointMeta& meta);
MckdModel load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace mckd
