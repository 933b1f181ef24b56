// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the unit tests.

#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include "mckd/data.hpp"
#include "mckd/model.hpp"
#include "mckd/tensor.hpp"

namespace test {

inline mckd::Tensor random_tensor(mckd::Shape shape, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> nd(0.0, sd);
    mckd::Tensor t(std::move(shape));
    for (auto& v : t.data()) v = nd(rng);
    return t;
}

/// Fresh empty directory under the system temp dir, removed on scope exit.
class TempDir {
  public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("mckd_test_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

/// A small classification dataset that trains in well under a second.
inline mckd::SynthSpec tiny_spec(std::uint64_t seed = 0) {
    mckd::SynthSpec s;
    s.n_modalities = 3;
    s.n_classes = 3;
    s.n_train = 60;
    s.n_val = 20;
    s.n_test = 30;
    s.input_dims = {6, 6, 6};
    s.informative = 1;
    s.seed = seed;
    return s;
}

inline mckd::Batch random_batch(const mckd::ModelConfig& cfg, std::size_t B, std::mt19937_64& rng) {
    mckd::Batch b;
    for (auto d : cfg.input_dims) b.inputs.push_back(random_tensor({B, d}, rng));
    b.present.assign(B * cfg.n_modalities, 1);
    const std::size_t per = cfg.head.kind == mckd::HeadKind::Classification ? 1 : cfg.cells();
    std::uniform_int_distribution<int> lab(0, static_cast<int>(cfg.head.n_classes) - 1);
    for (std::size_t k = 0; k < B * per; ++k) b.labels.push_back(lab(rng));
    return b;
}

}  // namespace test
