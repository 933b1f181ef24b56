// SPDX-License-Identifier: Apache-2.0

#include "mckd/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mckd/error.hpp"
#include "mckd/io.hpp"

namespace mckd {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, "model config: " + msg); };
    if (n_modalities < 2) fail("n_modalities must be at least 2");
    if (input_dims.size() != n_modalities) {
        fail("input_dims has " + std::to_string(input_dims.size()) + " entries for " +
             std::to_string(n_modalities) + " modalities");
    }
    for (auto d : input_dims)
        if (d == 0) fail("input dims must be positive");
    if (feature_dim == 0) fail("feature_dim must be positive");
    for (auto w : encoder_hidden)
        if (w == 0) fail("encoder widths must be positive");
    for (auto w : decoder_hidden)
        if (w == 0) fail("decoder widths must be positive");
    if (head.n_classes < 2) fail("n_classes must be at least 2");
    if (head.kind == HeadKind::Segmentation && (head.grid_h == 0 || head.grid_w == 0)) {
        fail("segmentation grid must be positive");
    }
    if (uses_adapters() && encoder_hidden.empty()) {
        fail("heterogeneous input dims need at least one encoder hidden layer for the adapters");
    }
}

bool ModelConfig::uses_adapters() const {
    return std::adjacent_find(input_dims.begin(), input_dims.end(), std::not_equal_to<>()) != input_dims.end();
}

std::size_t ModelConfig::output_size() const {
    return head.kind == HeadKind::Classification ? head.n_classes : cells() * head.n_classes;
}

// ---------------------------------------------------------------------------

std::vector<MckdModel::NamedTensor> MckdModel::named_parameters() {
    std::vector<NamedTensor> out;
    auto add = [&](const std::string& prefix, std::vector<Linear>& layers) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            out.push_back({prefix + std::to_string(i) + ".weight", &layers[i].weight});
            out.push_back({prefix + std::to_string(i) + ".bias", &layers[i].bias});
        }
    };
    add("theta.adapter", adapters);
    add("theta.encoder", encoder);
    add("zeta.decoder", decoder);
    return out;
}

std::vector<Tensor*> MckdModel::theta() {
    std::vector<Tensor*> out;
    for (auto* layers : {&adapters, &encoder})
        for (auto& l : *layers) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
    return out;
}

std::vector<Tensor*> MckdModel::zeta() {
    std::vector<Tensor*> out;
    for (auto& l : decoder) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

std::vector<Tensor*> MckdModel::parameters() {
    auto out = theta();
    auto z = zeta();
    out.insert(out.end(), z.begin(), z.end());
    return out;
}

std::size_t MckdModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto* layers : {&adapters, &encoder, &decoder})
        for (const auto& l : *layers) n += l.weight.numel() + l.bias.numel();
    return n;
}

namespace {

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w({in, out});
    for (auto& v : w.data()) v = dist(rng);
    return Linear{std::move(w), Tensor({out}, 0.0)};
}

std::vector<Linear> make_stack(std::size_t in, const std::vector<std::size_t>& widths, std::size_t out,
                               std::mt19937_64& rng) {
    std::vector<Linear> layers;
    std::size_t prev = in;
    for (auto w : widths) {
        layers.push_back(make_linear(prev, w, rng));
        prev = w;
    }
    layers.push_back(make_linear(prev, out, rng));
    return layers;
}

}  // namespace

MckdModel init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    MckdModel m;
    m.config = config;
    if (config.uses_adapters()) {
        const std::size_t width = config.encoder_hidden.front();
        for (auto in : config.input_dims) m.adapters.push_back(make_linear(in, width, rng));
        std::vector<std::size_t> rest(config.encoder_hidden.begin() + 1, config.encoder_hidden.end());
        m.encoder = make_stack(width, rest, config.feature_dim, rng);
    } else {
        m.encoder = make_stack(config.input_dims.front(), config.encoder_hidden, config.feature_dim, rng);
    }
    m.decoder = make_stack(config.n_modalities * config.feature_dim, config.decoder_hidden, config.output_size(), rng);
    return m;
}

// ---------------------------------------------------------------------------

void Batch::validate(const ModelConfig& config) const {
    const std::size_t N = config.n_modalities;
    if (inputs.size() != N) {
        throw Error(ErrorKind::Input,
                    "batch has " + std::to_string(inputs.size()) + " modalities, model expects " + std::to_string(N));
    }
    const std::size_t B = size();
    for (std::size_t i = 0; i < N; ++i) {
        const Shape want{B, config.input_dims[i]};
        if (inputs[i].shape() != want) {
            throw Error(ErrorKind::Input, "modality " + std::to_string(i) + " input " +
                                              shape_string(inputs[i].shape()) + ", expected " + shape_string(want));
        }
    }
    if (present.size() != B * N) throw Error(ErrorKind::Input, "presence mask does not match batch size");
    for (std::size_t b = 0; b < B; ++b) {
        bool any = false;
        for (std::size_t i = 0; i < N; ++i) any = any || is_present(b, i);
        if (!any) throw Error(ErrorKind::Input, "sample " + std::to_string(b) + " has no present modality");
    }
    const std::size_t want_labels = config.head.kind == HeadKind::Classification ? B : B * config.cells();
    if (labels.size() != want_labels) {
        throw Error(ErrorKind::Input, "batch has " + std::to_string(labels.size()) + " labels, expected " +
                                          std::to_string(want_labels));
    }
    for (auto l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= config.head.n_classes) {
            throw Error(ErrorKind::Input, "label " + std::to_string(l) + " out of range");
        }
    }
}

BoundModel bind(Tape& tape, MckdModel& model, Binding mode) {
    auto put = [&](Tensor& t) { return mode == Binding::Trainable ? tape.param(t) : tape.constant(t); };
    auto bind_stack = [&](std::vector<Linear>& layers) {
        std::vector<BoundLinear> out;
        out.reserve(layers.size());
        for (auto& l : layers) out.push_back({put(l.weight), put(l.bias)});
        return out;
    };
    BoundModel b;
    b.config = &model.config;
    b.adapters = bind_stack(model.adapters);
    b.encoder = bind_stack(model.encoder);
    b.decoder = bind_stack(model.decoder);
    return b;
}

namespace {

Var linear(const BoundLinear& l, Var x) { return add_bias(matmul(x, l.weight), l.bias); }

// Hidden layers use relu; the last layer is linear.
Var run_stack(std::span<const BoundLinear> layers, Var x) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        x = linear(layers[i], x);
        if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
}

}  // namespace

Encoded encode(const BoundModel& model, const Batch& batch) {
    const ModelConfig& cfg = *model.config;
    batch.validate(cfg);
    Tape& tape = *model.encoder.front().weight.tape();
    const std::size_t N = cfg.n_modalities;

    Encoded out;
    for (std::size_t i = 0; i < N; ++i) {
        Var x = tape.constant(batch.inputs[i]);
        if (!model.adapters.empty()) x = relu(linear(model.adapters[i], x));
        out.per_modality.push_back(run_stack(model.encoder, x));
    }
    out.features = impute_mean(out.per_modality, batch.present);
    out.imputed.resize(batch.present.size());
    std::transform(batch.present.begin(), batch.present.end(), out.imputed.begin(),
                   [](std::uint8_t p) -> std::uint8_t { return p == 0 ? 1 : 0; });
    return out;
}

Var decode(const BoundModel& model, Var features) {
    const ModelConfig& cfg = *model.config;
    const Shape& s = features.shape();
    if (s.size() != 3 || s[1] != cfg.n_modalities || s[2] != cfg.feature_dim) {
        throw Error(ErrorKind::Dimension, "decode: features " + shape_string(s) + " do not match [B x " +
                                              std::to_string(cfg.n_modalities) + " x " +
                                              std::to_string(cfg.feature_dim) + "]");
    }
    const std::size_t B = s[0];
    Var logits = run_stack(model.decoder, reshape(features, {B, cfg.n_modalities * cfg.feature_dim}));
    if (cfg.head.kind == HeadKind::Segmentation) {
        logits = reshape(logits, {B, cfg.head.grid_h, cfg.head.grid_w, cfg.head.n_classes});
    }
    return logits;
}

Var decode_scaled(const BoundModel& model, Var features, Var w_norm) {
    if (w_norm.value().numel() != model.config->n_modalities) {
        throw Error(ErrorKind::Dimension, "decode_scaled: " + std::to_string(w_norm.value().numel()) +
                                              " weights for " + std::to_string(model.config->n_modalities) +
                                              " modalities");
    }
    return decode(model, scale_blocks(features, w_norm));
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointManifest = "checkpoint.txt";

void write_model_config(KvFile& kv, const ModelConfig& c) {
    kv.set("model.n_modalities", static_cast<std::uint64_t>(c.n_modalities));
    kv.set("model.input_dims", format_sizes(c.input_dims));
    kv.set("model.feature_dim", static_cast<std::uint64_t>(c.feature_dim));
    kv.set("model.encoder_hidden", format_sizes(c.encoder_hidden));
    kv.set("model.decoder_hidden", format_sizes(c.decoder_hidden));
    kv.set("model.head", c.head.kind == HeadKind::Classification ? "classification" : "segmentation");
    kv.set("model.n_classes", static_cast<std::uint64_t>(c.head.n_classes));
    kv.set("model.grid_h", static_cast<std::uint64_t>(c.head.grid_h));
    kv.set("model.grid_w", static_cast<std::uint64_t>(c.head.grid_w));
}

ModelConfig read_model_config(const KvFile& kv) {
    ModelConfig c;
    c.n_modalities = kv.get_u64("model.n_modalities");
    c.input_dims = kv.get_sizes("model.input_dims");
    c.feature_dim = kv.get_u64("model.feature_dim");
    c.encoder_hidden = kv.get_sizes("model.encoder_hidden");
    c.decoder_hidden = kv.get_sizes("model.decoder_hidden");
    const std::string head = kv.get("model.head");
    if (head == "classification") {
        c.head.kind = HeadKind::Classification;
    } else if (head == "segmentation") {
        c.head.kind = HeadKind::Segmentation;
    } else {
        throw Error(ErrorKind::Format, "unknown head `" + head + "`");
    }
    c.head.n_classes = kv.get_u64("model.n_classes");
    c.head.grid_h = kv.get_u64("model.grid_h");
    c.head.grid_w = kv.get_u64("model.grid_w");
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const MckdModel& model, const CheckpointMeta& meta) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());

    KvFile kv;
    kv.set("format", "mckd-checkpoint");
    kv.set("version", 1);
    kv.set("seed", meta.seed);
    kv.set("iteration", meta.iteration);
    std::string raw;
    for (std::size_t i = 0; i < meta.iwv_raw.size(); ++i) {
        if (i != 0) raw += ',';
        raw += format_double(meta.iwv_raw[i]);
    }
    kv.set("iwv.raw", raw);
    for (const auto& [k, v] : meta.extra) kv.set("extra." + k, v);
    write_model_config(kv, model.config);

    std::vector<std::string> names;
    for (auto& p : const_cast<MckdModel&>(model).named_parameters()) {
        const std::string file = p.name + ".f64";
        const auto bytes = encode_f64(p.tensor->data());
        write_bytes(dir / file, bytes);
        kv.set("param." + p.name + ".shape", format_sizes(p.tensor->shape()));
        kv.set("param." + p.name + ".file", file);
        kv.set("param." + p.name + ".crc32", crc32_hex(crc32(bytes)));
        names.push_back(p.name);
    }
    std::string joined;
    for (std::size_t i = 0; i < names.size(); ++i) joined += (i ? "," : "") + names[i];
    kv.set("params", joined);
    kv.write(dir / kCheckpointManifest);
}

MckdModel load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta) {
    const auto manifest = dir / kCheckpointManifest;
    if (!std::filesystem::exists(manifest)) throw Error(ErrorKind::Io, "no checkpoint manifest at " + manifest.string());
    KvFile kv;
    try {
        kv = KvFile::read(manifest);
        if (kv.get("format") != "mckd-checkpoint") throw Error(ErrorKind::Format, "not a checkpoint manifest");
        if (kv.get_u64("version") != 1) throw Error(ErrorKind::Format, "unsupported checkpoint version");
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw Error(ErrorKind::Format, "checkpoint: " + std::string(e.what()));
        throw;
    }
    try {
        const ModelConfig config = read_model_config(kv);
        MckdModel model = init_params(config, 0);
        for (auto& p : model.named_parameters()) {
            const std::string prefix = "param." + p.name;
            if (kv.get_sizes(prefix + ".shape") != p.tensor->shape()) {
                throw Error(ErrorKind::Format, "checkpoint parameter " + p.name + " has the wrong shape");
            }
            const auto bytes = read_bytes(dir / kv.get(prefix + ".file"));
            if (crc32_hex(crc32(bytes)) != kv.get(prefix + ".crc32")) {
                throw Error(ErrorKind::Integrity, "checksum mismatch for parameter " + p.name);
            }
            auto values = decode_f64(bytes);
            if (values.size() != p.tensor->numel()) {
                throw Error(ErrorKind::Format, "parameter " + p.name + " payload has the wrong length");
            }
            std::copy(values.begin(), values.end(), p.tensor->data().begin());
        }
        if (meta != nullptr) {
            meta->seed = kv.get_u64("seed");
            meta->iteration = kv.get_u64("iteration");
            meta->iwv_raw = parse_doubles(kv.get_or("iwv.raw", ""));
            meta->extra.clear();
            for (const auto& [k, v] : kv.entries())
                if (k.rfind("extra.", 0) == 0) meta->extra[k.substr(6)] = v;
        }
        return model;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw Error(ErrorKind::Format, "checkpoint: " + std::string(e.what()));
        throw;
    }
}

}  // namespace mckd
