#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uasparse/binary_io.hpp"
#include "uasparse/embeddings.hpp"
#include "uasparse/errors.hpp"
#include "uasparse/numerics.hpp"
#include "uasparse/preprocess.hpp"
#include "uasparse/random.hpp"

namespace uasparse {

enum class TaskKind : std::uint8_t { OsName = 0, SoftwareName = 1, OsVersionIndex = 2, SoftwareVersionIndex = 3 };

inline constexpr TaskKind kAllTasks[] = {TaskKind::OsName, TaskKind::SoftwareName, TaskKind::OsVersionIndex,
                                         TaskKind::SoftwareVersionIndex};

inline bool is_name_task(TaskKind t) { return t == TaskKind::OsName || t == TaskKind::SoftwareName; }
inline bool is_os_task(TaskKind t) { return t == TaskKind::OsName || t == TaskKind::OsVersionIndex; }

inline std::string_view task_slug(TaskKind t) {
    switch (t) {
    case TaskKind::OsName: return "os-name";
    case TaskKind::SoftwareName: return "software-name";
    case TaskKind::OsVersionIndex: return "os-version";
    case TaskKind::SoftwareVersionIndex: return "software-version";
    }
    return "unknown";
}

inline std::optional<TaskKind> parse_task(std::string_view s) {
    for (auto t : kAllTasks)
        if (task_slug(t) == s) return t;
    return std::nullopt;
}

inline constexpr std::string_view kNotApplicable = "N/A";

/// Fixed class order per name task; N/A is always last.
inline const std::vector<std::string>& class_labels(TaskKind t) {
    static const std::vector<std::string> os = {"Android", "iOS", "iPad", "Linux", "Macintosh", "Windows", "N/A"};
    static const std::vector<std::string> software = {"Android WebView", "Chrome",  "Facebook App", "Instagram",
                                                      "Internet Explorer", "Opera", "N/A"};
    return is_os_task(t) ? os : software;
}

struct ModelConfig {
    std::uint32_t d_model = 40;
    std::uint32_t seq_len = 50;
    std::uint32_t num_heads = 2;
    std::uint32_t ff_dim = 128;
    std::vector<std::uint32_t> head_widths = {512, 256, 128};
    float dropout_p = 0.1f;
    std::uint32_t num_outputs = 7;
    std::uint64_t seed = 0;

    std::size_t flat_width() const { return static_cast<std::size_t>(seq_len) * d_model; }
    std::size_t d_k() const { return d_model / num_heads; }

    /// Full-size configuration for `task` (7 classes, or seq_len + 1 slots).
    static ModelConfig for_task(TaskKind task, std::uint64_t seed = 0) {
        ModelConfig c;
        c.num_outputs = is_name_task(task) ? 7 : c.seq_len + 1;
        c.seed = seed;
        return c;
    }

    void validate(TaskKind task) const {
        if (d_model < 2 || d_model % 2 != 0) throw Error("ModelConfig: d_model must be even and >= 2");
        if (seq_len < 1) throw Error("ModelConfig: seq_len must be >= 1");
        if (num_heads < 1 || d_model % num_heads != 0) throw Error("ModelConfig: d_model must be divisible by num_heads");
        if (ff_dim < 1) throw Error("ModelConfig: ff_dim must be >= 1");
        for (auto w : head_widths)
            if (w < 1) throw Error("ModelConfig: head widths must be positive");
        if (!(dropout_p >= 0.0f && dropout_p < 1.0f)) throw Error("ModelConfig: dropout_p must lie in [0, 1)");
        const std::uint32_t want = is_name_task(task) ? 7u : seq_len + 1;
        if (num_outputs != want) {
            throw ShapeMismatch("ModelConfig: task " + std::string(task_slug(task)) + " needs " + std::to_string(want) +
                                " outputs, got " + std::to_string(num_outputs));
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Sinusoidal encoding, row-major [seq_len, d_model], evaluated in double.
inline std::vector<double> positional_encoding(std::size_t seq_len, std::size_t d_model) {
    if (seq_len < 1 || d_model < 2 || d_model % 2 != 0) {
        throw Error("positional_encoding: need seq_len >= 1 and even d_model >= 2");
    }
    std::vector<double> pe(seq_len * d_model);
    for (std::size_t pos = 0; pos < seq_len; ++pos) {
        for (std::size_t i = 0; 2 * i < d_model; ++i) {
            const double angle =
                static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
            pe[pos * d_model + 2 * i] = std::sin(angle);
            pe[pos * d_model + 2 * i + 1] = std::cos(angle);
        }
    }
    return pe;
}

struct Prediction {
    TaskKind task = TaskKind::OsName;
    // name tasks
    std::string class_label;
    std::size_t class_index = 0;
    std::vector<float> probabilities;
    // version tasks; index == seq_len means the version is absent
    std::size_t index = 0;
    std::vector<float> raw_scores;
};

/// Lowest index wins ties.
template <class It>
std::size_t argmax(It first, It last) {
    return static_cast<std::size_t>(std::distance(first, std::max_element(first, last)));
}

/// One task network: positional encoding, a single multi-head encoder layer
/// (post-norm), flatten, then a dense head.
template <class T>
class BasicParserModel {
public:
    using TensorT = BasicTensor<T>;
    struct Named {
        std::string name;
        TensorT tensor;
    };

    BasicParserModel() = default;

    static BasicParserModel create(TaskKind task, const ModelConfig& config) {
        config.validate(task);
        BasicParserModel m;
        m.task_ = task;
        m.config_ = config;
        Rng rng(config.seed);
        const std::size_t d = config.d_model;
        // uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)): unit weight variance per input, as SeLU layers require
        auto dense = [&](const std::string& prefix, std::size_t in, std::size_t out) {
            const double bound = std::sqrt(3.0 / static_cast<double>(in));
            m.add_param(prefix + ".weight", {in, out}, rng, bound);
            m.add_param(prefix + ".bias", {out}, rng, bound);
        };
        dense("encoder.query", d, d);
        dense("encoder.key", d, d);
        dense("encoder.value", d, d);
        dense("encoder.attn_out", d, d);
        m.add_constant("encoder.norm1.gamma", {d}, T(1));
        m.add_constant("encoder.norm1.beta", {d}, T(0));
        dense("encoder.ff1", d, config.ff_dim);
        dense("encoder.ff2", config.ff_dim, d);
        m.add_constant("encoder.norm2.gamma", {d}, T(1));
        m.add_constant("encoder.norm2.beta", {d}, T(0));
        std::size_t in = config.flat_width();
        for (std::size_t i = 0; i < config.head_widths.size(); ++i) {
            dense("head." + std::to_string(i), in, config.head_widths[i]);
            in = config.head_widths[i];
        }
        dense("head.out", in, config.num_outputs);
        m.build_pe();
        return m;
    }

    TaskKind task() const { return task_; }
    const ModelConfig& config() const { return config_; }
    const std::vector<Named>& named_parameters() const { return params_; }
    std::vector<Named>& named_parameters() { return params_; }

    std::vector<TensorT> parameters() const {
        std::vector<TensorT> out;
        for (const auto& p : params_) out.push_back(p.tensor);
        return out;
    }

    const TensorT& param(std::string_view name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw Error("no parameter named '" + std::string(name) + "'");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    /// Encoder over a batch. `values` is [batch * seq_len * d_model] row-major,
    /// `mask` is [batch * seq_len]. Returns [batch, seq_len * d_model].
    TensorT encode(const TensorT& values, std::span<const std::uint8_t> mask, std::size_t batch,
                   std::vector<T>* attention_out = nullptr) const {
        const std::size_t s = config_.seq_len, d = config_.d_model;
        if (values.numel() != batch * s * d || mask.size() != batch * s) {
            throw ShapeMismatch("encode: input is " + shape_str(values.shape()) + ", expected " +
                                std::to_string(batch) + " x " + std::to_string(s) + " x " + std::to_string(d));
        }
        auto x = reshape(values, {batch * s, d});
        std::vector<T> pe(batch * s * d);
        for (std::size_t b = 0; b < batch; ++b) std::copy(pe_.begin(), pe_.end(), pe.begin() + static_cast<std::ptrdiff_t>(b * s * d));
        x = add(x, TensorT::from({batch * s, d}, std::move(pe)));

        auto q = linear(x, param("encoder.query.weight"), param("encoder.query.bias"));
        auto k = linear(x, param("encoder.key.weight"), param("encoder.key.bias"));
        auto v = linear(x, param("encoder.value.weight"), param("encoder.value.bias"));
        auto attn = masked_self_attention(q, k, v, mask, batch, s, config_.num_heads, attention_out);
        attn = linear(attn, param("encoder.attn_out.weight"), param("encoder.attn_out.bias"));
        auto h = layer_norm(add(x, attn), param("encoder.norm1.gamma"), param("encoder.norm1.beta"));

        auto ff = relu(linear(h, param("encoder.ff1.weight"), param("encoder.ff1.bias")));
        ff = linear(ff, param("encoder.ff2.weight"), param("encoder.ff2.bias"));
        auto out = layer_norm(add(h, ff), param("encoder.norm2.gamma"), param("encoder.norm2.beta"));
        return reshape(out, {batch, s * d});
    }

    /// Dense head: SeLU between layers, dropout after the first three hidden
    /// layers when training. Returns raw terminal scores [batch, num_outputs].
    TensorT head(const TensorT& features, bool training, Rng* dropout_rng) const {
        if (features.rank() != 2 || features.dim(1) != config_.flat_width()) {
            throw ShapeMismatch("head: features must be [batch, " + std::to_string(config_.flat_width()) + "]");
        }
        if (training && config_.dropout_p > 0.0f && !dropout_rng) throw Error("head: training requires a dropout rng");
        TensorT h = features;
        for (std::size_t i = 0; i < config_.head_widths.size(); ++i) {
            const std::string p = "head." + std::to_string(i);
            h = selu(linear(h, param(p + ".weight"), param(p + ".bias")));
            if (i < 3 && training && config_.dropout_p > 0.0f) h = dropout(h, config_.dropout_p, *dropout_rng, true);
        }
        return linear(h, param("head.out.weight"), param("head.out.bias"));
    }

    TensorT forward(const TensorT& values, std::span<const std::uint8_t> mask, std::size_t batch, bool training,
                    Rng* dropout_rng) const {
        return head(encode(values, mask, batch), training, dropout_rng);
    }

    /// Decision rule per task: softmax + argmax for names, raw argmax for versions.
    std::vector<Prediction> decide(const TensorT& scores) const {
        const std::size_t batch = scores.dim(0), n = scores.dim(1);
        std::vector<Prediction> out(batch);
        std::optional<TensorT> probs;
        if (is_name_task(task_)) probs = softmax(scores, 1);
        for (std::size_t b = 0; b < batch; ++b) {
            Prediction& p = out[b];
            p.task = task_;
            const auto* row = scores.data().data() + b * n;
            if (is_name_task(task_)) {
                const auto* pr = probs->data().data() + b * n;
                p.probabilities.assign(pr, pr + n);
                p.class_index = argmax(pr, pr + n);
                p.class_label = class_labels(task_)[p.class_index];
            } else {
                p.raw_scores.assign(row, row + n);
                p.index = argmax(row, row + n);
            }
        }
        return out;
    }

    template <class U>
    BasicParserModel<U> cast() const {
        BasicParserModel<U> m;
        m.task_ = task_;
        m.config_ = config_;
        for (const auto& p : params_) {
            std::vector<U> data(p.tensor.data().begin(), p.tensor.data().end());
            m.params_.push_back({p.name, BasicTensor<U>::from(p.tensor.shape(), std::move(data), true)});
        }
        m.build_pe();
        return m;
    }

    BasicParserModel clone() const { return cast<T>(); }

private:
    template <class>
    friend class BasicParserModel;

    void add_param(std::string name, Shape shape, Rng& rng, double bound) {
        std::vector<T> data(shape_numel(shape));
        for (auto& x : data) x = static_cast<T>(rng.uniform(-bound, bound));
        params_.push_back({std::move(name), TensorT::from(std::move(shape), std::move(data), true)});
    }

    void add_constant(std::string name, Shape shape, T value) {
        std::vector<T> data(shape_numel(shape), value);
        params_.push_back({std::move(name), TensorT::from(std::move(shape), std::move(data), true)});
    }

    void build_pe() {
        const auto pe = positional_encoding(config_.seq_len, config_.d_model);
        pe_.assign(pe.begin(), pe.end());
    }

    TaskKind task_ = TaskKind::OsName;
    ModelConfig config_;
    std::vector<Named> params_;
    std::vector<T> pe_;
};

using ParserModel = BasicParserModel<float>;

inline constexpr std::string_view kCheckpointMagic = "UASMDL1";

inline void save_checkpoint(const ParserModel& model, std::ostream& out) {
    const auto& c = model.config();
    binary::write_magic(out, kCheckpointMagic);
    binary::write_u8(out, static_cast<std::uint8_t>(model.task()));
    binary::write_u32(out, c.d_model);
    binary::write_u32(out, c.seq_len);
    binary::write_u32(out, c.num_heads);
    binary::write_u32(out, c.ff_dim);
    binary::write_u32(out, static_cast<std::uint32_t>(c.head_widths.size()));
    for (auto w : c.head_widths) binary::write_u32(out, w);
    binary::write_f32(out, c.dropout_p);
    binary::write_u32(out, c.num_outputs);
    binary::write_u64(out, c.seed);
    const auto& params = model.named_parameters();
    binary::write_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        binary::write_string(out, p.name);
        binary::write_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto d : p.tensor.shape()) binary::write_u32(out, static_cast<std::uint32_t>(d));
        binary::write_f32_array(out, p.tensor.data());
    }
}

inline void save_checkpoint(const ParserModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    save_checkpoint(model, out);
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline ParserModel load_checkpoint(std::istream& in) {
    binary::expect_magic(in, kCheckpointMagic);
    const auto tag = binary::read_u8(in);
    if (tag > 3) throw FormatError("checkpoint: unknown task tag " + std::to_string(tag));
    const auto task = static_cast<TaskKind>(tag);
    ModelConfig c;
    c.d_model = binary::read_u32(in);
    c.seq_len = binary::read_u32(in);
    c.num_heads = binary::read_u32(in);
    c.ff_dim = binary::read_u32(in);
    const auto layers = binary::read_u32(in);
    if (layers > 64) throw FormatError("checkpoint: implausible head depth");
    c.head_widths.assign(layers, 0);
    for (auto& w : c.head_widths) w = binary::read_u32(in);
    c.dropout_p = binary::read_f32(in);
    c.num_outputs = binary::read_u32(in);
    c.seed = binary::read_u64(in);
    try {
        c.validate(task);
    } catch (const Error& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    auto model = ParserModel::create(task, c);
    auto& params = model.named_parameters();
    if (binary::read_u32(in) != params.size()) throw FormatError("checkpoint: tensor count mismatch");
    for (auto& p : params) {
        if (binary::read_string(in) != p.name) throw FormatError("checkpoint: unexpected tensor '" + p.name + "'");
        const auto rank = binary::read_u32(in);
        Shape shape(rank);
        for (auto& d : shape) d = binary::read_u32(in);
        if (shape != p.tensor.shape()) {
            throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(shape) + ", expected " +
                              shape_str(p.tensor.shape()));
        }
        binary::read_f32_array(in, p.tensor.data());
    }
    return model;
}

inline ParserModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileNotFound("checkpoint '" + path + "' not found");
    return load_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Single-example entry points

/// Packs embedded UASs into one batch tensor plus a mask.
template <class T>
std::pair<BasicTensor<T>, std::vector<std::uint8_t>> pack_batch(std::span<const UasMatrix* const> items,
                                                                 std::size_t seq_len, std::size_t d_model) {
    std::vector<T> values(items.size() * seq_len * d_model);
    std::vector<std::uint8_t> mask(items.size() * seq_len);
    for (std::size_t b = 0; b < items.size(); ++b) {
        const UasMatrix& m = *items[b];
        if (m.seq_len != seq_len || m.dim != d_model) {
            throw ShapeMismatch("embedded UAS is " + std::to_string(m.seq_len) + "x" + std::to_string(m.dim) +
                                ", model expects " + std::to_string(seq_len) + "x" + std::to_string(d_model));
        }
        std::copy(m.values.begin(), m.values.end(), values.begin() + static_cast<std::ptrdiff_t>(b * seq_len * d_model));
        std::copy(m.mask.begin(), m.mask.end(), mask.begin() + static_cast<std::ptrdiff_t>(b * seq_len));
    }
    return {BasicTensor<T>::from({items.size() * seq_len, d_model}, std::move(values)), std::move(mask)};
}

/// Encoder output for one UAS, length seq_len * d_model.
template <class T>
std::vector<T> encoder_forward(const UasMatrix& x, const BasicParserModel<T>& model) {
    NoGradGuard no_grad;
    const UasMatrix* items[1] = {&x};
    auto [values, mask] = pack_batch<T>(items, model.config().seq_len, model.config().d_model);
    auto out = model.encode(values, mask, 1);
    return {out.data().begin(), out.data().end()};
}

template <class T>
Prediction head_forward(std::span<const T> features, const BasicParserModel<T>& model, bool training = false,
                        Rng* dropout_rng = nullptr) {
    NoGradGuard no_grad;
    auto f = BasicTensor<T>::from({1, features.size()}, std::vector<T>(features.begin(), features.end()));
    return model.decide(model.head(f, training, dropout_rng))[0];
}

inline std::vector<Prediction> predict_batch(const ParserModel& model, std::span<const UasMatrix* const> items) {
    if (items.empty()) return {};
    NoGradGuard no_grad;
    auto [values, mask] = pack_batch<float>(items, model.config().seq_len, model.config().d_model);
    return model.decide(model.forward(values, mask, items.size(), false, nullptr));
}

/// tokenize -> embed -> encode -> head, inference mode.
inline Prediction predict(const ParserModel& model, const EmbeddingModel& emb, const RawUas& raw,
                          const PreprocessConfig& pre = {}) {
    if (emb.dim() != model.config().d_model) {
        throw ShapeMismatch("embedding dim " + std::to_string(emb.dim()) + " does not match model d_model " +
                            std::to_string(model.config().d_model));
    }
    PreprocessConfig cfg = pre;
    cfg.max_tokens = std::min<std::size_t>(cfg.max_tokens, model.config().seq_len);
    const auto m = emb.embed_uas(tokenize(raw, cfg), model.config().seq_len);
    const UasMatrix* items[1] = {&m};
    return predict_batch(model, items)[0];
}

} // namespace uasparse
