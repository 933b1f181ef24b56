// SPDX-License-Identifier: Apache-2.0

#include "mckd/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mckd/error.hpp"

namespace mckd {

namespace {

// Salts separating the independent random streams of a dataset.
constexpr std::uint64_t kSaltPrototypes = 0x70726f746f;
constexpr std::uint64_t kSaltLabels = 0x6c6162656c;
constexpr std::uint64_t kSaltSample = 0x73616d706c;
constexpr std::uint64_t kSaltBayes = 0x6261796573;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

const char* task_name(TaskKind t) { return t == TaskKind::Classification ? "classification" : "segmentation"; }

// Intensity for each segmentation class, shared by all modalities: a random
// permutation of evenly spaced levels in [-1, 1].
std::vector<double> segmentation_levels(const SynthSpec& spec) {
    auto rng = stream(spec.seed, kSaltPrototypes);
    std::vector<double> lv(spec.n_classes);
    for (std::size_t c = 0; c < spec.n_classes; ++c)
        lv[c] = -1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(spec.n_classes - 1);
    std::shuffle(lv.begin(), lv.end(), rng);
    return lv;
}

// Nested discs: class c occupies the c-th disc, innermost class wins.
void draw_mask(const SynthSpec& spec, std::mt19937_64& rng, std::int32_t* out) {
    const double H = static_cast<double>(spec.grid_h), W = static_cast<double>(spec.grid_w);
    const double side = std::min(H, W);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double cy = H * (0.3 + 0.4 * u(rng));
    double cx = W * (0.3 + 0.4 * u(rng));
    double r = side * (0.2 + 0.2 * u(rng));
    for (std::size_t k = 0; k < spec.grid_h * spec.grid_w; ++k) out[k] = 0;
    for (std::size_t c = 1; c < spec.n_classes; ++c) {
        for (std::size_t y = 0; y < spec.grid_h; ++y) {
            for (std::size_t x = 0; x < spec.grid_w; ++x) {
                const double dy = static_cast<double>(y) + 0.5 - cy;
                const double dx = static_cast<double>(x) + 0.5 - cx;
                if (dy * dy + dx * dx <= r * r) out[y * spec.grid_w + x] = static_cast<std::int32_t>(c);
            }
        }
        cy += r * 0.3 * (u(rng) - 0.5);
        cx += r * 0.3 * (u(rng) - 0.5);
        r *= 0.5 + 0.3 * u(rng);
    }
}

Split make_split(const SynthSpec& spec, const std::string& name, std::size_t first, std::size_t count,
                 std::uint64_t split_salt, const std::vector<Tensor>& protos,
                 const std::vector<double>& levels) {
    const auto dims = spec.effective_input_dims();
    const std::size_t N = spec.n_modalities;
    Split s;
    s.name = name;
    s.label_stride = spec.label_stride();
    for (std::size_t i = 0; i < N; ++i) s.inputs.emplace_back(Shape{count, dims[i]});
    s.ids.resize(count);
    s.labels.resize(count * s.label_stride);

    // Balanced classification labels: each class appears floor/ceil(count / C) times.
    std::vector<std::int32_t> classes(count);
    for (std::size_t j = 0; j < count; ++j) classes[j] = static_cast<std::int32_t>(j % spec.n_classes);
    auto label_rng = stream(spec.seed, kSaltLabels, split_salt);
    std::shuffle(classes.begin(), classes.end(), label_rng);

    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t global = first + j;
        s.ids[j] = static_cast<std::int32_t>(global);
        auto rng = stream(spec.seed, kSaltSample, global);
        std::normal_distribution<double> noise(0.0, 1.0);
        if (spec.task == TaskKind::Classification) {
            const auto c = static_cast<std::size_t>(classes[j]);
            s.labels[j] = classes[j];
            for (std::size_t i = 0; i < N; ++i) {
                auto row = s.inputs[i].data().subspan(j * dims[i], dims[i]);
                for (std::size_t k = 0; k < dims[i]; ++k) row[k] = spec.snr(i) * protos[i].at(c, k) + noise(rng);
            }
        } else {
            std::int32_t* mask = s.labels.data() + j * s.label_stride;
            draw_mask(spec, rng, mask);
            for (std::size_t i = 0; i < N; ++i) {
                auto row = s.inputs[i].data().subspan(j * dims[i], dims[i]);
                for (std::size_t k = 0; k < dims[i]; ++k)
                    row[k] = spec.snr(i) * levels[static_cast<std::size_t>(mask[k])] + noise(rng);
            }
        }
    }
    return s;
}

}  // namespace

void SynthSpec::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "synthetic spec: " + m); };
    if (n_modalities < 2) fail("n_modalities must be at least 2");
    if (n_classes < 2) fail("n_classes must be at least 2");
    if (n_train == 0 || n_val == 0 || n_test == 0) fail("every split needs at least one sample");
    if (informative >= n_modalities) fail("informative modality index out of range");
    if (!(snr_informative >= snr_others) || !(snr_others >= 0.0)) {
        fail("need snr_informative >= snr_others >= 0");
    }
    if (!(prototype_scale > 0.0) || !std::isfinite(prototype_scale)) fail("prototype_scale must be positive");
    if (task == TaskKind::Classification) {
        if (input_dims.size() != n_modalities) fail("input_dims must list one width per modality");
        for (auto d : input_dims)
            if (d == 0) fail("input dims must be positive");
    } else if (grid_h == 0 || grid_w == 0) {
        fail("segmentation grid must be positive");
    }
}

std::vector<std::size_t> SynthSpec::effective_input_dims() const {
    if (task == TaskKind::Segmentation) return std::vector<std::size_t>(n_modalities, grid_h * grid_w);
    return input_dims;
}

void SynthSpec::write(KvFile& kv) const {
    kv.set("synth.n_modalities", static_cast<std::uint64_t>(n_modalities));
    kv.set("synth.n_classes", static_cast<std::uint64_t>(n_classes));
    kv.set("synth.n_train", static_cast<std::uint64_t>(n_train));
    kv.set("synth.n_val", static_cast<std::uint64_t>(n_val));
    kv.set("synth.n_test", static_cast<std::uint64_t>(n_test));
    kv.set("synth.input_dims", format_sizes(input_dims));
    kv.set("synth.informative", static_cast<std::uint64_t>(informative));
    kv.set("synth.snr_informative", snr_informative);
    kv.set("synth.snr_others", snr_others);
    kv.set("synth.prototype_scale", prototype_scale);
    kv.set("synth.task", task_name(task));
    kv.set("synth.grid_h", static_cast<std::uint64_t>(grid_h));
    kv.set("synth.grid_w", static_cast<std::uint64_t>(grid_w));
    kv.set("synth.seed", seed);
}

SynthSpec SynthSpec::read(const KvFile& kv) {
    SynthSpec s;
    s.n_modalities = kv.get_u64_or("synth.n_modalities", s.n_modalities);
    s.n_classes = kv.get_u64_or("synth.n_classes", s.n_classes);
    s.n_train = kv.get_u64_or("synth.n_train", s.n_train);
    s.n_val = kv.get_u64_or("synth.n_val", s.n_val);
    s.n_test = kv.get_u64_or("synth.n_test", s.n_test);
    if (kv.has("synth.input_dims")) {
        s.input_dims = kv.get_sizes("synth.input_dims");
    } else if (s.input_dims.size() != s.n_modalities) {
        s.input_dims.assign(s.n_modalities, 32);
    }
    s.informative = kv.get_u64_or("synth.informative", s.informative);
    s.snr_informative = kv.get_double_or("synth.snr_informative", s.snr_informative);
    s.snr_others = kv.get_double_or("synth.snr_others", s.snr_others);
    s.prototype_scale = kv.get_double_or("synth.prototype_scale", s.prototype_scale);
    const std::string task = kv.get_or("synth.task", "classification");
    if (task == "classification") {
        s.task = TaskKind::Classification;
    } else if (task == "segmentation") {
        s.task = TaskKind::Segmentation;
    } else {
        throw Error(ErrorKind::Config, "synth.task must be classification or segmentation, got `" + task + "`");
    }
    s.grid_h = kv.get_u64_or("synth.grid_h", s.grid_h);
    s.grid_w = kv.get_u64_or("synth.grid_w", s.grid_w);
    s.seed = kv.get_u64_or("synth.seed", s.seed);
    return s;
}

// ---------------------------------------------------------------------------

Batch Split::batch(std::span<const std::size_t> rows) const {
    Batch b;
    const std::size_t B = rows.size();
    const std::size_t N = inputs.size();
    for (const Tensor& src : inputs) {
        const std::size_t d = src.dim(1);
        Tensor t({B, d});
        for (std::size_t r = 0; r < B; ++r) {
            auto from = src.data().subspan(rows[r] * d, d);
            std::copy(from.begin(), from.end(), t.data().begin() + static_cast<std::ptrdiff_t>(r * d));
        }
        b.inputs.push_back(std::move(t));
    }
    b.present.assign(B * N, 1);
    b.labels.resize(B * label_stride);
    for (std::size_t r = 0; r < B; ++r)
        std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(rows[r] * label_stride), label_stride,
                    b.labels.begin() + static_cast<std::ptrdiff_t>(r * label_stride));
    return b;
}

Batch Split::all() const {
    std::vector<std::size_t> rows(size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return batch(rows);
}

std::vector<Tensor> class_prototypes(const SynthSpec& spec) {
    // One prototype set per input width, observed by every modality of that
    // width: modalities see the same class geometry at different SNR.
    std::vector<Tensor> protos;
    for (std::size_t i = 0; i < spec.n_modalities; ++i) {
        const std::size_t d = spec.input_dims[i];
        auto rng = stream(spec.seed, kSaltPrototypes, d);
        std::normal_distribution<double> dist(0.0, spec.prototype_scale / std::sqrt(static_cast<double>(d)));
        Tensor p({spec.n_classes, d});
        for (auto& v : p.data()) v = dist(rng);
        protos.push_back(std::move(p));
    }
    return protos;
}

Dataset synthesize(const SynthSpec& spec) {
    spec.validate();
    std::vector<Tensor> protos;
    std::vector<double> levels;
    if (spec.task == TaskKind::Classification) {
        protos = class_prototypes(spec);
    } else {
        levels = segmentation_levels(spec);
    }
    Dataset d;
    d.spec = spec;
    d.train = make_split(spec, "train", 0, spec.n_train, 1, protos, levels);
    d.val = make_split(spec, "val", spec.n_train, spec.n_val, 2, protos, levels);
    d.test = make_split(spec, "test", spec.n_train + spec.n_val, spec.n_test, 3, protos, levels);
    return d;
}

// ---------------------------------------------------------------------------
// On-disk format

namespace {

void put_payload(KvFile& kv, const std::filesystem::path& dir, const std::string& key, const std::string& file,
                 const std::vector<std::uint8_t>& bytes, const std::vector<std::size_t>& shape, const char* dtype) {
    write_bytes(dir / file, bytes);
    kv.set("file." + key + ".name", file);
    kv.set("file." + key + ".shape", format_sizes(shape));
    kv.set("file." + key + ".dtype", dtype);
    kv.set("file." + key + ".crc32", crc32_hex(crc32(bytes)));
}

// Verify checksum and expected shape, return the raw bytes.
std::vector<std::uint8_t> get_payload(const KvFile& kv, const std::filesystem::path& dir, const std::string& key,
                                      const std::vector<std::size_t>& shape, const char* dtype) {
    const auto path = dir / kv.get("file." + key + ".name");
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "missing payload " + path.string());
    auto bytes = read_bytes(path);
    if (crc32_hex(crc32(bytes)) != kv.get("file." + key + ".crc32")) {
        throw Error(ErrorKind::Integrity, "checksum mismatch for " + path.string());
    }
    if (kv.get("file." + key + ".dtype") != dtype) {
        throw Error(ErrorKind::Format, "payload " + key + " has dtype " + kv.get("file." + key + ".dtype"));
    }
    if (kv.get_sizes("file." + key + ".shape") != shape) {
        throw Error(ErrorKind::Format, "payload " + key + " shape " + kv.get("file." + key + ".shape") +
                                           " does not match the dataset spec");
    }
    const std::size_t elem = std::string(dtype) == "f64le" ? 8 : 4;
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    if (bytes.size() != n * elem) throw Error(ErrorKind::Format, "payload " + key + " has the wrong length");
    return bytes;
}

}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    KvFile kv;
    kv.set("format", "mckd-dataset");
    kv.set("version", 1);
    data.spec.write(kv);
    for (const Split* s : {&data.train, &data.val, &data.test}) {
        const std::size_t n = s->size();
        kv.set("split." + s->name + ".count", static_cast<std::uint64_t>(n));
        for (std::size_t i = 0; i < s->inputs.size(); ++i) {
            const std::string key = s->name + ".m" + std::to_string(i);
            put_payload(kv, dir, key, key + ".f64", encode_f64(s->inputs[i].data()), s->inputs[i].shape(), "f64le");
        }
        put_payload(kv, dir, s->name + ".labels", s->name + ".labels.i32", encode_i32(s->labels),
                    {n, s->label_stride}, "i32le");
        put_payload(kv, dir, s->name + ".ids", s->name + ".ids.i32", encode_i32(s->ids), {n}, "i32le");
    }
    kv.write(dir / kDatasetManifest);
}

Dataset generate(const SynthSpec& spec, const std::filesystem::path& dir) {
    Dataset d = synthesize(spec);
    write_dataset(d, dir);
    return d;
}

Dataset load_dataset(const std::filesystem::path& path) {
    const auto manifest = std::filesystem::is_directory(path) ? path / kDatasetManifest : path;
    const auto dir = manifest.parent_path();
    if (!std::filesystem::exists(manifest)) throw Error(ErrorKind::Io, "no dataset manifest at " + manifest.string());
    try {
        const KvFile kv = KvFile::read(manifest);
        if (kv.get("format") != "mckd-dataset") throw Error(ErrorKind::Format, "not a dataset manifest");
        if (kv.get_u64("version") != 1) throw Error(ErrorKind::Format, "unsupported dataset version");
        Dataset d;
        d.spec = SynthSpec::read(kv);
        d.spec.validate();
        const auto dims = d.spec.effective_input_dims();
        auto load_split = [&](const std::string& name, std::size_t expected) {
            Split s;
            s.name = name;
            s.label_stride = d.spec.label_stride();
            const std::size_t n = kv.get_u64("split." + name + ".count");
            if (n != expected) throw Error(ErrorKind::Format, "split " + name + " count disagrees with the spec");
            for (std::size_t i = 0; i < d.spec.n_modalities; ++i) {
                const std::string key = name + ".m" + std::to_string(i);
                s.inputs.emplace_back(Shape{n, dims[i]}, decode_f64(get_payload(kv, dir, key, {n, dims[i]}, "f64le")));
            }
            s.labels = decode_i32(get_payload(kv, dir, name + ".labels", {n, s.label_stride}, "i32le"));
            s.ids = decode_i32(get_payload(kv, dir, name + ".ids", {n}, "i32le"));
            for (auto l : s.labels) {
                if (l < 0 || static_cast<std::size_t>(l) >= d.spec.n_classes) {
                    throw Error(ErrorKind::Format, "split " + name + " has an out-of-range label");
                }
            }
            return s;
        };
        d.train = load_split("train", d.spec.n_train);
        d.val = load_split("val", d.spec.n_val);
        d.test = load_split("test", d.spec.n_test);
        return d;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw Error(ErrorKind::Format, "dataset manifest: " + std::string(e.what()));
        throw;
    }
}

// ---------------------------------------------------------------------------

BatchStream::BatchStream(const Split& split, std::size_t batch_size, std::uint64_t seed)
    : split_(&split), batch_size_(batch_size), rng_(seed) {
    if (batch_size == 0 || batch_size > split.size()) {
        throw Error(ErrorKind::Config, "batch size " + std::to_string(batch_size) + " invalid for split of " +
                                           std::to_string(split.size()));
    }
    order_.resize(split.size());
    reshuffle();
    epoch_ = 0;
}

void BatchStream::reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    ++epoch_;
}

Batch BatchStream::next() {
    if (cursor_ + batch_size_ > order_.size()) reshuffle();
    std::span<const std::size_t> rows(order_.data() + cursor_, batch_size_);
    cursor_ += batch_size_;
    return split_->batch(rows);
}

// ---------------------------------------------------------------------------

BayesGap bayes_gap(const SynthSpec& spec, std::size_t draws) {
    spec.validate();
    if (spec.task != TaskKind::Classification) {
        throw Error(ErrorKind::Config, "bayes_gap is defined for classification specs only");
    }
    const auto protos = class_prototypes(spec);
    const std::size_t C = spec.n_classes;

    // Accuracy of argmax_c -||x - snr * mu_c||^2 with x drawn from the model.
    auto accuracy = [&](std::size_t m) {
        auto rng = stream(spec.seed, kSaltBayes, m);
        std::uniform_int_distribution<std::size_t> label(0, C - 1);
        std::normal_distribution<double> noise(0.0, 1.0);
        const double a = spec.snr(m);
        const Tensor& mu = protos[m];
        const std::size_t d = mu.dim(1);
        std::vector<double> x(d);
        std::size_t correct = 0;
        for (std::size_t t = 0; t < draws; ++t) {
            const std::size_t y = label(rng);
            for (std::size_t k = 0; k < d; ++k) x[k] = a * mu.at(y, k) + noise(rng);
            std::size_t best = 0;
            double best_score = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double r = x[k] - a * mu.at(c, k);
                    s -= r * r;
                }
                if (s > best_score) {
                    best_score = s;
                    best = c;
                }
            }
            correct += best == y ? 1 : 0;
        }
        return static_cast<double>(correct) / static_cast<double>(draws);
    };

    BayesGap g;
    g.informative_accuracy = accuracy(spec.informative);
    for (std::size_t m = 0; m < spec.n_modalities; ++m) {
        if (m != spec.informative) g.others_accuracy = std::max(g.others_accuracy, accuracy(m));
    }
    g.gap = g.informative_accuracy - g.others_accuracy;
    return g;
}

}  // namespace mckd
