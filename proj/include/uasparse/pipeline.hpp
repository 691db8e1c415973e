#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "uasparse/embeddings.hpp"
#include "uasparse/errors.hpp"
#include "uasparse/model.hpp"
#include "uasparse/numerics.hpp"
#include "uasparse/preprocess.hpp"
#include "uasparse/random.hpp"

namespace uasparse {

struct LabeledExample {
    RawUas raw;
    std::optional<std::string> os_name;
    std::optional<std::string> os_version;
    std::optional<std::string> software_name;
    std::optional<std::string> software_version;
    std::optional<std::string> source_cidr;
};

// ---------------------------------------------------------------------------
// Ingestion

struct IngestResult {
    std::vector<LabeledExample> examples;
    std::size_t skipped_count = 0;
};

namespace detail {

inline bool optional_string_field(const nlohmann::json& obj, const char* key, std::optional<std::string>& out) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return true;
    if (!it->is_string()) return false;
    out = it->get<std::string>();
    return true;
}

inline std::optional<LabeledExample> parse_example(const std::string& line) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    auto ua = j.find("ua");
    if (ua == j.end() || !ua->is_string()) return std::nullopt;
    LabeledExample ex;
    ex.raw.text = ua->get<std::string>();
    if (!optional_string_field(j, "os_name", ex.os_name) || !optional_string_field(j, "os_version", ex.os_version) ||
        !optional_string_field(j, "software_name", ex.software_name) ||
        !optional_string_field(j, "software_version", ex.software_version) ||
        !optional_string_field(j, "source_cidr", ex.source_cidr)) {
        return std::nullopt;
    }
    return ex;
}

} // namespace detail

/// Streams line-delimited JSON records. Blank lines are ignored; lines that
/// do not parse are counted in skipped_count.
inline IngestResult ingest(std::istream& in, const std::function<void(LabeledExample&&)>& sink = nullptr) {
    IngestResult result;
    std::string line;
    std::size_t parsed = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto ex = detail::parse_example(line);
        if (!ex) {
            ++result.skipped_count;
            continue;
        }
        ++parsed;
        if (sink) {
            sink(std::move(*ex));
        } else {
            result.examples.push_back(std::move(*ex));
        }
    }
    if (parsed == 0) throw FormatError("no parsable records (" + std::to_string(result.skipped_count) + " malformed)");
    return result;
}

inline IngestResult ingest(const std::string& path, const std::function<void(LabeledExample&&)>& sink = nullptr) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("input '" + path + "' not found");
    return ingest(in, sink);
}

inline nlohmann::json example_to_json(const LabeledExample& ex) {
    nlohmann::json j;
    j["ua"] = ex.raw.text;
    auto put = [&](const char* k, const std::optional<std::string>& v) {
        if (v) j[k] = *v;
    };
    put("os_name", ex.os_name);
    put("os_version", ex.os_version);
    put("software_name", ex.software_name);
    put("software_version", ex.software_version);
    put("source_cidr", ex.source_cidr);
    return j;
}

// ---------------------------------------------------------------------------
// Labels

struct ClassSpec {
    TaskKind task = TaskKind::OsName;
    std::vector<std::string> labels;

    static ClassSpec for_task(TaskKind t) { return {t, class_labels(t)}; }
    std::size_t size() const { return labels.size(); }
};

namespace detail {

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

} // namespace detail

/// Maps a free-form name label to its class index; unknown or absent -> N/A.
inline std::size_t class_index_for(TaskKind task, const std::optional<std::string>& raw) {
    const auto& labels = class_labels(task);
    const std::size_t na = labels.size() - 1;
    if (!raw) return na;
    const std::string key = detail::lower(*raw);
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (detail::lower(labels[i]) == key) return i;
    static const std::map<std::string, std::string> os_alias = {
        {"iphone os", "iOS"},        {"ipados", "iPad"},       {"mac os x", "Macintosh"},
        {"macos", "Macintosh"},      {"os x", "Macintosh"},    {"windows nt", "Windows"},
        {"windows phone", "Windows"}};
    static const std::map<std::string, std::string> sw_alias = {
        {"webview", "Android WebView"},  {"chrome mobile", "Chrome"}, {"facebook", "Facebook App"},
        {"iemobile", "Internet Explorer"}, {"ie", "Internet Explorer"}, {"opera mobile", "Opera"}};
    const auto& alias = is_os_task(task) ? os_alias : sw_alias;
    if (auto it = alias.find(key); it != alias.end()) {
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == it->second) return i;
    }
    return na;
}

inline std::size_t name_class_of(const LabeledExample& ex, TaskKind task) {
    return class_index_for(task, is_os_task(task) ? ex.os_name : ex.software_name);
}

inline const std::optional<std::string>& version_field(const LabeledExample& ex, TaskKind task) {
    return is_os_task(task) ? ex.os_version : ex.software_version;
}

/// Index of the first token equal to the (identically preprocessed) version
/// label; `seq_len` when absent, unmatched or beyond the sequence.
inline std::size_t build_version_label(const LabeledExample& ex, TaskKind task, const PreprocessConfig& config = {},
                                       std::size_t seq_len = kSeqLen) {
    if (is_name_task(task)) throw Error("build_version_label: not a version task");
    const auto& version = version_field(ex, task);
    if (!version) return seq_len;
    const std::string want = apply_substitutions(*version, config);
    if (want.empty()) return seq_len;
    const auto tok = tokenize(ex.raw, config);
    for (std::size_t i = 0; i < tok.tokens.size() && i < seq_len; ++i)
        if (tok.tokens[i] == want) return i;
    return seq_len;
}

// ---------------------------------------------------------------------------
// Balancing and split

enum class NameLoss { BinaryCrossEntropy, CrossEntropy };

struct TrainConfig {
    TaskKind task = TaskKind::OsName;
    std::size_t batch_size = 200;
    double learning_rate = 0.0005;
    double weight_decay = 1e-5;
    std::size_t epochs = 10;
    double split_fraction = 0.7;
    std::optional<std::size_t> per_class_quota;
    std::uint64_t seed = 0;
    NameLoss name_loss = NameLoss::BinaryCrossEntropy;

    static TrainConfig for_task(TaskKind task, std::uint64_t seed = 0) {
        TrainConfig c;
        c.task = task;
        c.learning_rate = is_name_task(task) ? 0.0005 : 0.005;
        c.seed = seed;
        return c;
    }

    void validate() const {
        if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate >= 0.0)) throw Error("TrainConfig: learning_rate must be non-negative");
        if (!(weight_decay >= 0.0)) throw Error("TrainConfig: weight_decay must be non-negative");
        if (epochs < 1) throw Error("TrainConfig: epochs must be >= 1");
        if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw Error("TrainConfig: split_fraction must lie in (0, 1)");
        if (per_class_quota && *per_class_quota < 1) throw Error("TrainConfig: per_class_quota must be >= 1");
    }
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Per-class seeded downsampling to the quota, then an independent
/// split_fraction split inside each class; both sets are shuffled.
inline SplitIndices balance_and_split_indices(const std::vector<LabeledExample>& data, const ClassSpec& spec,
                                              const TrainConfig& config) {
    config.validate();
    std::vector<std::vector<std::size_t>> by_class(spec.size());
    for (std::size_t i = 0; i < data.size(); ++i) by_class[name_class_of(data[i], spec.task)].push_back(i);
    for (std::size_t c = 0; c < spec.size(); ++c) {
        if (by_class[c].empty()) throw MissingClass("class '" + spec.labels[c] + "' has no examples");
    }
    Rng rng(config.seed);
    SplitIndices out;
    for (auto& members : by_class) {
        rng.shuffle(members);
        if (config.per_class_quota && members.size() > *config.per_class_quota) members.resize(*config.per_class_quota);
        const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(members.size()) * config.split_fraction));
        out.train.insert(out.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_train));
        out.validation.insert(out.validation.end(), members.begin() + static_cast<std::ptrdiff_t>(n_train), members.end());
    }
    rng.shuffle(out.train);
    rng.shuffle(out.validation);
    return out;
}

struct DataSplit {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> validation;
};

inline DataSplit balance_and_split(const std::vector<LabeledExample>& data, const ClassSpec& spec,
                                   const TrainConfig& config) {
    const auto idx = balance_and_split_indices(data, spec, config);
    DataSplit s;
    for (auto i : idx.train) s.train.push_back(data[i]);
    for (auto i : idx.validation) s.validation.push_back(data[i]);
    return s;
}

// ---------------------------------------------------------------------------
// Encoded examples

struct EncodedExample {
    TokenizedUas tokens;
    UasMatrix matrix;
    std::size_t target = 0;
};

inline std::size_t target_for(const LabeledExample& ex, TaskKind task, std::size_t seq_len,
                              const PreprocessConfig& pre = {}) {
    return is_name_task(task) ? name_class_of(ex, task) : build_version_label(ex, task, pre, seq_len);
}

inline std::vector<EncodedExample> encode_examples(const std::vector<LabeledExample>& data, TaskKind task,
                                                   const EmbeddingModel& emb, std::size_t seq_len,
                                                   const PreprocessConfig& pre = {}) {
    PreprocessConfig cfg = pre;
    cfg.max_tokens = std::min(cfg.max_tokens, seq_len);
    std::vector<EncodedExample> out;
    out.reserve(data.size());
    for (const auto& ex : data) {
        EncodedExample e;
        e.tokens = tokenize(ex.raw, cfg);
        e.matrix = emb.embed_uas(e.tokens, seq_len);
        e.target = target_for(ex, task, seq_len, cfg);
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    ParserModel model;
    std::vector<double> epoch_loss; ///< mean per-example loss, one entry per epoch
};

/// Mini-batch SGD over `data`. Name tasks minimise BCE over post-softmax
/// probabilities against one-hot targets (or CE when configured); version
/// tasks minimise CE over raw scores. Deterministic for fixed seeds.
/// Called after each epoch with the 1-based epoch, its mean loss and the
/// current weights; returning true ends training early.
using EpochHook = std::function<bool(std::size_t, double, const ParserModel&)>;

inline TrainResult train_with_hook(TaskKind task, const std::vector<LabeledExample>& data, const EmbeddingModel& emb,
                                   const ModelConfig& mconfig, const TrainConfig& tconfig, const EpochHook& hook,
                                   const ParserModel* initial = nullptr) {
    tconfig.validate();
    mconfig.validate(task);
    if (emb.dim() != mconfig.d_model) throw ShapeMismatch("train: embedding dim does not match d_model");
    if (data.empty()) throw Error("train: empty training set");

    TrainResult result{initial ? initial->clone() : ParserModel::create(task, mconfig), {}};
    ParserModel& model = result.model;
    const std::size_t seq_len = mconfig.seq_len, d = mconfig.d_model, n_out = mconfig.num_outputs;
    const auto encoded = encode_examples(data, task, emb, seq_len);

    auto params = model.parameters();
    const SgdConfig sgd{tconfig.learning_rate, tconfig.weight_decay};
    Rng order_rng(tconfig.seed);
    Rng dropout_rng(tconfig.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (std::size_t epoch = 0; epoch < tconfig.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < order.size(); start += tconfig.batch_size, ++batch_no) {
            const std::size_t end = std::min(order.size(), start + tconfig.batch_size);
            const std::size_t b = end - start;
            std::vector<const UasMatrix*> items;
            std::vector<std::size_t> targets;
            for (std::size_t i = start; i < end; ++i) {
                items.push_back(&encoded[order[i]].matrix);
                targets.push_back(encoded[order[i]].target);
            }
            auto [values, mask] = pack_batch<float>(items, seq_len, d);
            auto scores = model.forward(values, mask, b, true, &dropout_rng);
            Tensor loss;
            if (is_name_task(task) && tconfig.name_loss == NameLoss::BinaryCrossEntropy) {
                std::vector<float> onehot(b * n_out, 0.0f);
                for (std::size_t i = 0; i < b; ++i) onehot[i * n_out + targets[i]] = 1.0f;
                loss = binary_cross_entropy_loss(softmax(scores, 1), Tensor::from({b, n_out}, std::move(onehot)));
            } else {
                loss = cross_entropy_loss(scores, std::span<const std::size_t>(targets));
            }
            const double lv = loss.item();
            if (!std::isfinite(lv)) throw NonFiniteLoss(static_cast<int>(epoch + 1), static_cast<int>(batch_no + 1));
            loss.backward();
            sgd_step(params, sgd);
            loss_sum += lv * static_cast<double>(b);
        }
        const double mean_loss = loss_sum / static_cast<double>(order.size());
        result.epoch_loss.push_back(mean_loss);
        if (hook && hook(epoch + 1, mean_loss, model)) break;
    }
    return result;
}

inline TrainResult train(TaskKind task, const std::vector<LabeledExample>& data, const EmbeddingModel& emb,
                         const ModelConfig& mconfig, const TrainConfig& tconfig,
                         const std::function<void(std::size_t, double)>& on_epoch = nullptr,
                         const ParserModel* initial = nullptr) {
    EpochHook hook;
    if (on_epoch) hook = [&](std::size_t e, double l, const ParserModel&) {
        on_epoch(e, l);
        return false;
    };
    return train_with_hook(task, data, emb, mconfig, tconfig, hook, initial);
}

inline void write_loss_csv(const std::vector<double>& epoch_loss, std::ostream& out) {
    out << "epoch,mean_loss\n";
    for (std::size_t i = 0; i < epoch_loss.size(); ++i) {
        out << (i + 1) << ',' << std::setprecision(17) << epoch_loss[i] << '\n';
    }
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
    std::string label;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;

    bool operator==(const ClassMetrics&) const = default;
};

struct MetricsReport {
    TaskKind task = TaskKind::OsName;
    std::vector<ClassMetrics> per_class;
    std::vector<ClassMetrics> per_version; ///< version tasks only, keyed by labelled version string
    double overall_accuracy = 0.0;
    std::size_t total = 0;

    bool operator==(const MetricsReport&) const = default;
};

/// One-vs-rest metrics from a confusion matrix with rows = truth, cols = prediction.
inline std::vector<ClassMetrics> metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion,
                                                        const std::vector<std::string>& labels) {
    const std::size_t k = labels.size();
    if (confusion.size() != k) throw ShapeMismatch("confusion matrix size does not match labels");
    std::vector<ClassMetrics> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        if (confusion[c].size() != k) throw ShapeMismatch("confusion matrix must be square");
        std::size_t tp = confusion[c][c], row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += confusion[c][j];
            col += confusion[j][c];
        }
        auto& m = out[c];
        m.label = labels[c];
        m.support = row;
        m.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        m.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    }
    return out;
}

namespace detail {

/// Metrics over string-valued classes; classes appear in order of first sighting
/// in `truth`, then any predicted-only classes.
inline std::vector<ClassMetrics> string_class_metrics(const std::vector<std::string>& truth,
                                                      const std::vector<std::string>& pred) {
    std::vector<std::string> labels;
    std::map<std::string, std::size_t> index;
    auto intern = [&](const std::string& s) {
        if (index.emplace(s, labels.size()).second) labels.push_back(s);
    };
    for (const auto& s : truth) intern(s);
    for (const auto& s : pred) intern(s);
    std::vector<std::vector<std::size_t>> conf(labels.size(), std::vector<std::size_t>(labels.size(), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) ++conf[index[truth[i]]][index[pred[i]]];
    return metrics_from_confusion(conf, labels);
}

} // namespace detail

inline MetricsReport evaluate(const ParserModel& model, const EmbeddingModel& emb,
                              const std::vector<LabeledExample>& data, std::size_t batch_size = 256) {
    if (data.empty()) throw EmptyEvaluationSet("evaluate: no examples");
    const TaskKind task = model.task();
    const std::size_t seq_len = model.config().seq_len;
    const auto encoded = encode_examples(data, task, emb, seq_len);

    std::vector<std::size_t> predicted;
    predicted.reserve(encoded.size());
    for (std::size_t start = 0; start < encoded.size(); start += batch_size) {
        std::vector<const UasMatrix*> items;
        for (std::size_t i = start; i < std::min(encoded.size(), start + batch_size); ++i) items.push_back(&encoded[i].matrix);
        for (const auto& p : predict_batch(model, items)) predicted.push_back(is_name_task(task) ? p.class_index : p.index);
    }

    MetricsReport r;
    r.task = task;
    r.total = encoded.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < encoded.size(); ++i) correct += predicted[i] == encoded[i].target ? 1 : 0;
    r.overall_accuracy = static_cast<double>(correct) / static_cast<double>(r.total);

    if (is_name_task(task)) {
        const auto& labels = class_labels(task);
        std::vector<std::vector<std::size_t>> conf(labels.size(), std::vector<std::size_t>(labels.size(), 0));
        for (std::size_t i = 0; i < encoded.size(); ++i) ++conf[encoded[i].target][predicted[i]];
        r.per_class = metrics_from_confusion(conf, labels);
        return r;
    }

    const std::size_t slots = seq_len + 1;
    std::vector<std::string> labels(slots);
    for (std::size_t i = 0; i < seq_len; ++i) labels[i] = std::to_string(i);
    labels[seq_len] = "absent";
    std::vector<std::vector<std::size_t>> conf(slots, std::vector<std::size_t>(slots, 0));
    for (std::size_t i = 0; i < encoded.size(); ++i) ++conf[encoded[i].target][predicted[i]];
    std::vector<std::size_t> used;
    for (std::size_t c = 0; c < slots; ++c) {
        std::size_t row = 0, col = 0;
        for (std::size_t j = 0; j < slots; ++j) {
            row += conf[c][j];
            col += conf[j][c];
        }
        if (row || col) used.push_back(c);
    }
    const auto all = metrics_from_confusion(conf, labels);
    for (auto c : used) r.per_class.push_back(all[c]);

    std::vector<std::string> truth_s, pred_s;
    for (std::size_t i = 0; i < encoded.size(); ++i) {
        const auto& toks = encoded[i].tokens.tokens;
        const auto t = encoded[i].target;
        const auto p = predicted[i];
        truth_s.push_back(t < toks.size() ? toks[t] : std::string(kNotApplicable));
        pred_s.push_back(p < toks.size() ? toks[p] : std::string(kNotApplicable));
    }
    r.per_version = detail::string_class_metrics(truth_s, pred_s);
    std::stable_sort(r.per_version.begin(), r.per_version.end(),
                     [](const ClassMetrics& a, const ClassMetrics& b) { return a.support > b.support; });
    return r;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
    auto rows = [](const std::vector<ClassMetrics>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& m : v) {
            arr.push_back({{"class", m.label},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"f1", m.f1},
                           {"support", m.support}});
        }
        return arr;
    };
    nlohmann::json j;
    j["task"] = std::string(task_slug(r.task));
    j["total"] = r.total;
    j["overall_accuracy"] = r.overall_accuracy;
    j["per_class"] = rows(r.per_class);
    if (!is_name_task(r.task)) j["per_version"] = rows(r.per_version);
    return j;
}

inline void print_metrics_table(const MetricsReport& r, std::ostream& out) {
    auto table = [&out](const std::vector<ClassMetrics>& rows, const char* header) {
        out << std::left << std::setw(22) << header << std::right << std::setw(10) << "Precision" << std::setw(10)
            << "Recall" << std::setw(10) << "F1" << std::setw(10) << "Support" << '\n';
        for (const auto& m : rows) {
            out << std::left << std::setw(22) << m.label << std::right << std::fixed << std::setprecision(3)
                << std::setw(10) << m.precision << std::setw(10) << m.recall << std::setw(10) << m.f1 << std::setw(10)
                << m.support << '\n';
        }
        out.unsetf(std::ios::fixed);
    };
    out << "task: " << task_slug(r.task) << "  examples: " << r.total << "  accuracy: " << std::fixed
        << std::setprecision(4) << r.overall_accuracy << '\n';
    out.unsetf(std::ios::fixed);
    table(r.per_class, is_name_task(r.task) ? "Class" : "Index");
    if (!is_name_task(r.task)) table(r.per_version, "Version");
}

} // namespace uasparse
