#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uasparse/binary_io.hpp"
#include "uasparse/errors.hpp"
#include "uasparse/preprocess.hpp"
#include "uasparse/random.hpp"

namespace uasparse {

inline constexpr std::size_t kSeqLen = 50;
inline constexpr std::string_view kEmbeddingMagic = "UASEMB1";

struct EmbeddingConfig {
    std::uint32_t dim = 40;
    std::uint32_t ngram_min = 3;
    std::uint32_t ngram_max = 6;
    std::uint32_t window = 5;
    std::uint32_t epochs = 5;
    float learning_rate = 0.05f;
    std::uint32_t negative_samples = 5;
    std::uint32_t bucket_count = 1u << 20;
    std::uint32_t min_word_count = 2;
    float sampling_threshold = 0.0f; ///< frequent-token subsampling t; 0 keeps every token
    std::uint64_t seed = 0;

    void validate() const {
        if (dim < 1) throw Error("EmbeddingConfig: dim must be >= 1");
        if (ngram_min < 1 || ngram_min > ngram_max) throw Error("EmbeddingConfig: need 1 <= ngram_min <= ngram_max");
        if (window < 1) throw Error("EmbeddingConfig: window must be >= 1");
        if (epochs < 1) throw Error("EmbeddingConfig: epochs must be >= 1");
        if (!(learning_rate > 0.0f)) throw Error("EmbeddingConfig: learning_rate must be > 0");
        if (negative_samples < 1) throw Error("EmbeddingConfig: negative_samples must be >= 1");
        if (bucket_count < 1) throw Error("EmbeddingConfig: bucket_count must be >= 1");
        if (min_word_count < 1) throw Error("EmbeddingConfig: min_word_count must be >= 1");
        if (!(sampling_threshold >= 0.0f)) throw Error("EmbeddingConfig: sampling_threshold must be >= 0");
    }

    bool operator==(const EmbeddingConfig&) const = default;
};

/// Fixed-length embedded UAS: row-major seq_len x dim values, padding rows zero.
struct UasMatrix {
    std::size_t seq_len = 0;
    std::size_t dim = 0;
    std::vector<float> values;
    std::vector<std::uint8_t> mask; ///< 1 = real token, 0 = padding

    std::size_t token_count() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    }
};

/// 64-bit FNV-1a over the raw bytes.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Character n-grams of "<word>", counted in UTF-8 code points.
inline std::vector<std::string> char_ngrams(std::string_view word, std::uint32_t nmin, std::uint32_t nmax) {
    const std::string wrapped = "<" + std::string(word) + ">";
    std::vector<std::size_t> starts; // byte offset of each code point
    for (std::size_t i = 0; i < wrapped.size(); ++i) {
        if ((static_cast<unsigned char>(wrapped[i]) & 0xC0u) != 0x80u) starts.push_back(i);
    }
    const std::size_t chars = starts.size();
    std::vector<std::string> out;
    for (std::size_t begin = 0; begin < chars; ++begin) {
        for (std::size_t n = nmin; n <= nmax && begin + n <= chars; ++n) {
            const std::size_t b = starts[begin];
            const std::size_t e = begin + n < chars ? starts[begin + n] : wrapped.size();
            out.emplace_back(wrapped.substr(b, e - b));
        }
    }
    return out;
}

inline std::vector<std::uint32_t> ngram_buckets(std::string_view word, const EmbeddingConfig& config) {
    std::vector<std::uint32_t> ids;
    for (const auto& g : char_ngrams(word, config.ngram_min, config.ngram_max)) {
        ids.push_back(static_cast<std::uint32_t>(fnv1a64(g) % config.bucket_count));
    }
    return ids;
}

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Subword-augmented word vectors. Immutable once built.
class EmbeddingModel {
public:
    EmbeddingModel() = default;

    /// `words[i]` owns row i of `word_vectors`.
    EmbeddingModel(EmbeddingConfig config, std::vector<std::string> words, std::vector<float> word_vectors,
                   std::vector<float> ngram_vectors)
        : config_(config), words_(std::move(words)), word_vectors_(std::move(word_vectors)),
          ngram_vectors_(std::move(ngram_vectors)) {
        config_.validate();
        if (word_vectors_.size() != words_.size() * config_.dim) {
            throw ShapeMismatch("EmbeddingModel: word matrix size does not match vocabulary");
        }
        if (ngram_vectors_.size() != static_cast<std::size_t>(config_.bucket_count) * config_.dim) {
            throw ShapeMismatch("EmbeddingModel: n-gram matrix size does not match bucket_count");
        }
        for (std::size_t i = 0; i < words_.size(); ++i) {
            if (!vocab_.emplace(words_[i], static_cast<std::uint32_t>(i)).second) {
                throw FormatError("EmbeddingModel: duplicate vocabulary word '" + words_[i] + "'");
            }
        }
    }

    const EmbeddingConfig& config() const { return config_; }
    std::size_t dim() const { return config_.dim; }
    std::size_t vocab_size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }
    const std::vector<float>& word_vectors() const { return word_vectors_; }
    const std::vector<float>& ngram_vectors() const { return ngram_vectors_; }

    bool contains(std::string_view word) const { return vocab_.find(std::string(word)) != vocab_.end(); }

    /// Mean of the word's own row (when in vocabulary) and its n-gram bucket rows.
    std::vector<float> embed_word(std::string_view word) const {
        if (word.empty()) throw Error("embed_word: empty word");
        const std::size_t d = config_.dim;
        std::vector<double> acc(d, 0.0);
        std::size_t rows = 0;
        if (auto it = vocab_.find(std::string(word)); it != vocab_.end()) {
            const float* r = &word_vectors_[static_cast<std::size_t>(it->second) * d];
            for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
            ++rows;
        }
        for (std::uint32_t b : ngram_buckets(word, config_)) {
            const float* r = &ngram_vectors_[static_cast<std::size_t>(b) * d];
            for (std::size_t j = 0; j < d; ++j) acc[j] += r[j];
            ++rows;
        }
        std::vector<float> out(d, 0.0f);
        if (rows > 0) {
            for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(acc[j] / static_cast<double>(rows));
        }
        return out;
    }

    UasMatrix embed_uas(const TokenizedUas& uas, std::size_t seq_len = kSeqLen) const {
        if (uas.tokens.size() > seq_len) {
            throw ShapeMismatch("embed_uas: " + std::to_string(uas.tokens.size()) + " tokens exceed seq_len " +
                                std::to_string(seq_len));
        }
        UasMatrix m;
        m.seq_len = seq_len;
        m.dim = config_.dim;
        m.values.assign(seq_len * config_.dim, 0.0f);
        m.mask.assign(seq_len, 0);
        for (std::size_t i = 0; i < uas.tokens.size(); ++i) {
            const auto v = embed_word(uas.tokens[i]);
            std::copy(v.begin(), v.end(), m.values.begin() + static_cast<std::ptrdiff_t>(i * config_.dim));
            m.mask[i] = 1;
        }
        return m;
    }

    void save(std::ostream& out) const {
        binary::write_magic(out, kEmbeddingMagic);
        binary::write_u32(out, config_.dim);
        binary::write_u32(out, config_.ngram_min);
        binary::write_u32(out, config_.ngram_max);
        binary::write_u32(out, config_.window);
        binary::write_u32(out, config_.epochs);
        binary::write_f32(out, config_.learning_rate);
        binary::write_u32(out, config_.negative_samples);
        binary::write_u32(out, config_.bucket_count);
        binary::write_u32(out, config_.min_word_count);
        binary::write_f32(out, config_.sampling_threshold);
        binary::write_u64(out, config_.seed);
        binary::write_u32(out, static_cast<std::uint32_t>(words_.size()));
        for (std::size_t i = 0; i < words_.size(); ++i) {
            binary::write_string(out, words_[i]);
            binary::write_u32(out, static_cast<std::uint32_t>(i));
        }
        binary::write_f32_array(out, word_vectors_);
        binary::write_f32_array(out, ngram_vectors_);
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open '" + path + "' for writing");
        save(out);
        if (!out) throw IoError("write failed for '" + path + "'");
    }

    static EmbeddingModel load(std::istream& in) {
        binary::expect_magic(in, kEmbeddingMagic);
        EmbeddingConfig c;
        c.dim = binary::read_u32(in);
        c.ngram_min = binary::read_u32(in);
        c.ngram_max = binary::read_u32(in);
        c.window = binary::read_u32(in);
        c.epochs = binary::read_u32(in);
        c.learning_rate = binary::read_f32(in);
        c.negative_samples = binary::read_u32(in);
        c.bucket_count = binary::read_u32(in);
        c.min_word_count = binary::read_u32(in);
        c.sampling_threshold = binary::read_f32(in);
        c.seed = binary::read_u64(in);
        c.validate();
        const std::uint32_t n = binary::read_u32(in);
        std::vector<std::string> words(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            std::string w = binary::read_string(in);
            const std::uint32_t idx = binary::read_u32(in);
            if (idx >= n || !words[idx].empty() || w.empty()) throw FormatError("embedding file: bad vocabulary entry");
            words[idx] = std::move(w);
        }
        std::vector<float> wv(static_cast<std::size_t>(n) * c.dim);
        std::vector<float> nv(static_cast<std::size_t>(c.bucket_count) * c.dim);
        binary::read_f32_array(in, wv);
        binary::read_f32_array(in, nv);
        return EmbeddingModel(c, std::move(words), std::move(wv), std::move(nv));
    }

    static EmbeddingModel load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FileNotFound("embedding model '" + path + "' not found");
        return load(in);
    }

private:
    EmbeddingConfig config_;
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::uint32_t> vocab_;
    std::vector<float> word_vectors_;
    std::vector<float> ngram_vectors_;
};

struct EmbeddingTrainingReport {
    std::vector<double> epoch_mean_loss;
    std::size_t vocab_size = 0;
    std::size_t predictions = 0;
};

/// CBOW with negative sampling over subword-composed context vectors.
/// Single-threaded; identical inputs and seed give a bitwise-identical model.
inline EmbeddingModel train_embeddings(const std::vector<TokenizedUas>& corpus, const EmbeddingConfig& config,
                                       EmbeddingTrainingReport* report = nullptr) {
    config.validate();
    if (corpus.empty()) throw EmptyCorpus("train_embeddings: corpus is empty");

    std::unordered_map<std::string, std::uint64_t> counts;
    for (const auto& u : corpus)
        for (const auto& t : u.tokens) ++counts[t];

    std::vector<std::pair<std::string, std::uint64_t>> kept;
    for (auto& [w, c] : counts)
        if (c >= config.min_word_count) kept.emplace_back(w, c);
    if (kept.empty()) throw EmptyCorpus("train_embeddings: no word reaches min_word_count");
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });

    const std::size_t d = config.dim;
    const std::size_t vocab_n = kept.size();
    std::vector<std::string> words;
    std::unordered_map<std::string, std::uint32_t> index;
    words.reserve(vocab_n);
    for (std::size_t i = 0; i < vocab_n; ++i) {
        words.push_back(kept[i].first);
        index.emplace(kept[i].first, static_cast<std::uint32_t>(i));
    }

    Rng rng(config.seed);
    const float bound = 1.0f / static_cast<float>(d);
    std::vector<float> word_vecs(vocab_n * d);
    std::vector<float> ngram_vecs(static_cast<std::size_t>(config.bucket_count) * d);
    for (auto& x : word_vecs) x = static_cast<float>(rng.uniform(-bound, bound));
    for (auto& x : ngram_vecs) x = static_cast<float>(rng.uniform(-bound, bound));
    std::vector<float> output(vocab_n * d, 0.0f);

    // Input rows per word: its own row (id < vocab_n) then bucket rows (vocab_n + bucket).
    std::vector<std::vector<std::uint32_t>> subwords(vocab_n);
    for (std::size_t i = 0; i < vocab_n; ++i) {
        subwords[i].push_back(static_cast<std::uint32_t>(i));
        for (std::uint32_t b : ngram_buckets(words[i], config)) subwords[i].push_back(static_cast<std::uint32_t>(vocab_n) + b);
    }
    auto input_row = [&](std::uint32_t id) -> float* {
        return id < vocab_n ? &word_vecs[static_cast<std::size_t>(id) * d]
                            : &ngram_vecs[static_cast<std::size_t>(id - vocab_n) * d];
    };

    // Unigram^0.5 sampling table.
    std::vector<std::uint32_t> neg_table;
    {
        constexpr std::size_t kTableSize = 1'000'000;
        double z = 0.0;
        for (const auto& k : kept) z += std::sqrt(static_cast<double>(k.second));
        for (std::size_t i = 0; i < vocab_n; ++i) {
            const double share = std::sqrt(static_cast<double>(kept[i].second)) * kTableSize / z;
            const auto reps = std::max<std::size_t>(1, static_cast<std::size_t>(share));
            neg_table.insert(neg_table.end(), reps, static_cast<std::uint32_t>(i));
        }
    }

    std::vector<std::vector<std::uint32_t>> sentences;
    std::uint64_t total_tokens = 0;
    for (const auto& u : corpus) {
        std::vector<std::uint32_t> ids;
        for (const auto& t : u.tokens)
            if (auto it = index.find(t); it != index.end()) ids.push_back(it->second);
        total_tokens += ids.size();
        if (ids.size() >= 2) sentences.push_back(std::move(ids));
    }

    // Each epoch keeps token i with probability sqrt(t/f) + t/f, f its corpus frequency.
    std::vector<double> keep_prob(vocab_n, 1.0);
    if (config.sampling_threshold > 0.0f && total_tokens > 0) {
        for (std::size_t i = 0; i < vocab_n; ++i) {
            const double r = static_cast<double>(config.sampling_threshold) * static_cast<double>(total_tokens) /
                             static_cast<double>(kept[i].second);
            keep_prob[i] = std::sqrt(r) + r;
        }
    }

    std::vector<float> hidden(d), grad(d);
    std::vector<std::uint32_t> bag, sent;
    const double total_work = static_cast<double>(config.epochs) * static_cast<double>(std::max<std::uint64_t>(total_tokens, 1));
    std::uint64_t processed = 0;
    EmbeddingTrainingReport rep;
    rep.vocab_size = vocab_n;

    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::uint64_t loss_n = 0;
        for (const auto& full : sentences) {
            const float lr = config.learning_rate *
                             static_cast<float>(std::max(0.0, 1.0 - static_cast<double>(processed) / total_work));
            processed += full.size();
            sent.clear();
            for (std::uint32_t id : full)
                if (keep_prob[id] >= 1.0 || rng.uniform() < keep_prob[id]) sent.push_back(id);
            for (std::size_t w = 0; w < sent.size(); ++w) {
                const std::size_t span = 1 + rng.below(config.window);
                bag.clear();
                const std::size_t lo = w >= span ? w - span : 0;
                const std::size_t hi = std::min(sent.size() - 1, w + span);
                for (std::size_t c = lo; c <= hi; ++c) {
                    if (c == w) continue;
                    const auto& sw = subwords[sent[c]];
                    bag.insert(bag.end(), sw.begin(), sw.end());
                }
                if (bag.empty()) continue;

                std::fill(hidden.begin(), hidden.end(), 0.0f);
                for (std::uint32_t id : bag) {
                    const float* r = input_row(id);
                    for (std::size_t j = 0; j < d; ++j) hidden[j] += r[j];
                }
                const float inv = 1.0f / static_cast<float>(bag.size());
                for (auto& h : hidden) h *= inv;

                std::fill(grad.begin(), grad.end(), 0.0f);
                double loss = 0.0;
                for (std::uint32_t s = 0; s <= config.negative_samples; ++s) {
                    std::uint32_t target;
                    float label;
                    if (s == 0) {
                        target = sent[w];
                        label = 1.0f;
                    } else {
                        do {
                            target = neg_table[rng.below(neg_table.size())];
                        } while (target == sent[w] && vocab_n > 1);
                        label = 0.0f;
                    }
                    float* o = &output[static_cast<std::size_t>(target) * d];
                    float score = 0.0f;
                    for (std::size_t j = 0; j < d; ++j) score += o[j] * hidden[j];
                    const float p = 1.0f / (1.0f + std::exp(-score));
                    loss -= label > 0.5f ? std::log(std::max(p, 1e-7f)) : std::log(std::max(1.0f - p, 1e-7f));
                    const float g = lr * (label - p);
                    for (std::size_t j = 0; j < d; ++j) {
                        grad[j] += g * o[j];
                        o[j] += g * hidden[j];
                    }
                }
                for (auto& g : grad) g *= inv;
                for (std::uint32_t id : bag) {
                    float* r = input_row(id);
                    for (std::size_t j = 0; j < d; ++j) r[j] += grad[j];
                }
                if (!std::isfinite(loss)) throw Error("train_embeddings: non-finite loss");
                loss_sum += loss;
                ++loss_n;
                ++rep.predictions;
            }
        }
        rep.epoch_mean_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);
    }

    for (float x : word_vecs)
        if (!std::isfinite(x)) throw Error("train_embeddings: non-finite word vector");
    for (float x : ngram_vecs)
        if (!std::isfinite(x)) throw Error("train_embeddings: non-finite n-gram vector");

    if (report) *report = std::move(rep);
    return EmbeddingModel(config, std::move(words), std::move(word_vecs), std::move(ngram_vecs));
}

} // namespace uasparse
