// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-modal datasets with one planted informative modality, the
// on-disk dataset format, and mini-batch streaming.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mckd/io.hpp"
#include "mckd/model.hpp"

namespace mckd {

enum class TaskKind { Classification, Segmentation };

struct SynthSpec {
    std::size_t n_modalities = 4;
    std::size_t n_classes = 10;
    std::size_t n_train = 2000;
    std::size_t n_val = 500;
    std::size_t n_test = 1000;
    std::vector<std::size_t> input_dims{32, 32, 32, 32};
    std::size_t informative = 2;
    double snr_informative = 2.0;
    double snr_others = 0.5;
    /// Prototype coordinates are N(0, (prototype_scale^2) / dim).
    double prototype_scale = 3.0;
    TaskKind task = TaskKind::Classification;
    std::size_t grid_h = 16;
    std::size_t grid_w = 16;
    std::uint64_t seed = 0;

    void validate() const;
    double snr(std::size_t modality) const { return modality == informative ? snr_informative : snr_others; }
    /// Per-modality input widths; segmentation observes one value per cell.
    std::vector<std::size_t> effective_input_dims() const;
    /// Labels per sample: 1, or grid_h * grid_w.
    std::size_t label_stride() const { return task == TaskKind::Classification ? 1 : grid_h * grid_w; }

    void write(KvFile& kv) const;  // keys under `synth.`
    static SynthSpec read(const KvFile& kv);
};

struct Split {
    std::string name;
    std::vector<Tensor> inputs;         // per modality, [n x dim_i]
    std::vector<std::int32_t> labels;   // n * label_stride
    std::vector<std::int32_t> ids;      // global sample index
    std::size_t label_stride = 1;

    std::size_t size() const { return ids.size(); }
    /// Gather the given rows with every modality present.
    Batch batch(std::span<const std::size_t> rows) const;
    Batch all() const;
};

struct Dataset {
    SynthSpec spec;
    Split train;
    Split val;
    Split test;
};

/// Class prototypes for classification: [C x dim_i] per modality.
std::vector<Tensor> class_prototypes(const SynthSpec& spec);

/// Build the dataset in memory. Splits draw from disjoint sample indices.
Dataset synthesize(const SynthSpec& spec);

inline constexpr const char* kDatasetManifest = "manifest.txt";

/// Write manifest and payloads into `dir` (created if needed).
void write_dataset(const Dataset& data, const std::filesystem::path& dir);

/// synthesize() + write_dataset().
Dataset generate(const SynthSpec& spec, const std::filesystem::path& dir);

/// Load from a manifest file or the directory holding it. Checksum mismatch
/// raises Integrity, inconsistent shapes raise Format.
Dataset load_dataset(const std::filesystem::path& path);

/// Endless shuffled mini-batches; a new permutation is drawn per epoch and
/// the tail shorter than a batch is dropped.
class BatchStream {
  public:
    BatchStream(const Split& split, std::size_t batch_size, std::uint64_t seed);

    Batch next();
    std::span<const std::size_t> order() const { return order_; }
    std::size_t epoch() const { return epoch_; }

  private:
    void reshuffle();

    const Split* split_;
    std::size_t batch_size_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

struct BayesGap {
    double informative_accuracy = 0.0;
    double others_accuracy = 0.0;  // best single non-informative modality
    double gap = 0.0;
};

/// Monte-Carlo accuracy of the Bayes-optimal classifier that sees only one
/// modality. Classification only.
BayesGap bayes_gap(const SynthSpec& spec, std::size_t draws = 100000);

}  // namespace mckd
