// SPDX-License-Identifier: Apache-2.0
//
// Experiment plumbing behind the CLI: run configuration, a training driver
// that leaves metrics/checkpoints on disk, alpha sweeps, the normalization
// ablation and the gradient-check suite.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mckd/data.hpp"
#include "mckd/io.hpp"
#include "mckd/report.hpp"
#include "mckd/trainer.hpp"

namespace mckd {

/// Model and training settings plus paths. Input widths, modality count and
/// head come from the dataset; everything else from flat dotted keys:
///   model.feature_dim, model.encoder_hidden, model.decoder_hidden,
///   train.<field> for every TrainConfig field, data.path, run.out, run.name.
struct RunConfig {
    TrainConfig train;
    std::size_t feature_dim = 16;
    std::vector<std::size_t> encoder_hidden{64};
    std::vector<std::size_t> decoder_hidden{64};
    /// Modality whose imputation is probed; the dataset's planted one if unset.
    std::optional<std::size_t> probe_modality;
    std::filesystem::path data_path;
    std::filesystem::path out_dir;
    std::string name = "run";

    /// Throws Config on unknown keys or unparsable values.
    void set(const std::string& key, const std::string& value);
    void apply(const KvFile& kv);
    KvFile to_kv() const;

    ModelConfig model_for(const SynthSpec& spec) const;
    TrainConfig train_for(const SynthSpec& spec) const;
};

/// Parse `key=value` (flag form of RunConfig::set).
std::pair<std::string, std::string> split_assignment(const std::string& text);

/// Worker count for sweeps: MCKD_THREADS if set (>= 1), else the hardware
/// concurrency.
std::size_t max_threads();

/// Run job(0..n-1) on up to max_threads() threads. Rethrows the first error
/// by job index after all jobs finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& job);

/// Train on the dataset. With a non-empty `out`, writes config.txt, a
/// metrics.csv flushed per row, and checkpoint/ on success. A directory that
/// does not exist yet is staged next to its final path and renamed into
/// place when training ends, also after an abort.
TrainState run_training(const RunConfig& config, const Dataset& data, const std::filesystem::path& out = {},
                        const RowSink& on_row = {});

/// The hardest pattern: the planted modality missing.
MissingPattern planted_missing(const SynthSpec& spec);

struct SweepPoint {
    double alpha = 0.0;
    bool baseline = false;          // alpha == 0
    EvalResult planted_missing;     // test split
    EvalResult all_present;         // test split
    std::vector<double> w;          // final normalized IWV
    std::vector<MetricsRow> history;
};

/// One training per alpha with the shared seed and dataset. Per-alpha runs are
/// written below `out/alpha_<value>` when `out` is non-empty.
std::vector<SweepPoint> sweep_alpha(const RunConfig& config, const Dataset& data, std::span<const double> alphas,
                                    const std::filesystem::path& out = {});
Table sweep_table(const std::vector<SweepPoint>& points, const Dataset& data);
std::string sweep_chart(const std::vector<SweepPoint>& points, const Dataset& data);

inline constexpr double kDefaultAlphas[] = {0.0, 0.01, 0.1, 0.5, 1.0};

struct AblationPoint {
    IwvNorm norm = IwvNorm::Softmax;
    bool is_default = false;  // softmax
    EvalResult planted_missing;
    EvalResult all_present;
    std::vector<double> w;
};

std::vector<AblationPoint> ablate_norm(const RunConfig& config, const Dataset& data, std::span<const IwvNorm> norms,
                                       const std::filesystem::path& out = {});
Table ablation_table(const std::vector<AblationPoint>& points, const Dataset& data);

/// Per-pattern evaluation table: pattern,present,metric[,dice_c...].
Table pattern_table(MckdModel& model, const Split& split, std::span<const MissingPattern> patterns);

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t resamples = 0;  // points redrawn for sitting near a kink
    bool pass = false;
};

/// Finite-difference checks of every differentiable training composite on
/// small random instances. `corrupt` scales one op's backward rule (test
/// fixture for the harness itself).
std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, std::optional<OpKind> corrupt = {},
                                            double corrupt_factor = 1.5);
Table gradcheck_table(const std::vector<GradCheckEntry>& entries);

std::optional<OpKind> parse_op_kind(const std::string& name);

}  // namespace mckd
