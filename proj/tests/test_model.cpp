#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <tuple>

#include "gradcheck.hpp"
#include "uasparse/model.hpp"

using namespace uasparse;

namespace {

ModelConfig tiny_config(TaskKind task, std::uint64_t seed = 1) {
    ModelConfig c;
    c.d_model = 8;
    c.seq_len = 4;
    c.num_heads = 2;
    c.ff_dim = 6;
    c.head_widths = {16};
    c.num_outputs = is_name_task(task) ? 7 : c.seq_len + 1;
    c.seed = seed;
    return c;
}

UasMatrix random_matrix(std::size_t seq_len, std::size_t dim, std::size_t tokens, Rng& rng) {
    UasMatrix m;
    m.seq_len = seq_len;
    m.dim = dim;
    m.values.assign(seq_len * dim, 0.0f);
    m.mask.assign(seq_len, 0);
    for (std::size_t i = 0; i < tokens; ++i) {
        m.mask[i] = 1;
        for (std::size_t j = 0; j < dim; ++j) m.values[i * dim + j] = static_cast<float>(rng.uniform(-1, 1));
    }
    return m;
}

/// Tiny embedding table with a handful of words and few buckets.
EmbeddingModel tiny_embeddings(std::uint32_t dim) {
    EmbeddingConfig c;
    c.dim = dim;
    c.bucket_count = 64;
    Rng rng(4);
    std::vector<std::string> words = {"Mozilla", "Windows", "Chrome"};
    std::vector<float> wv(words.size() * dim), nv(64 * dim);
    for (auto& x : wv) x = static_cast<float>(rng.uniform(-1, 1));
    for (auto& x : nv) x = static_cast<float>(rng.uniform(-1, 1));
    return EmbeddingModel(c, words, wv, nv);
}

std::string checkpoint_bytes(const ParserModel& m) {
    std::ostringstream os(std::ios::binary);
    save_checkpoint(m, os);
    return os.str();
}

/// Tiny model plus a fixed three-row batch and its loss, at precision T.
template <class T>
struct GradProblem {
    BasicParserModel<T> model;
    BasicTensor<T> values, target;
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> targets = {1, 0, 2};
    bool bce;
    static constexpr std::size_t batch = 3;

    GradProblem(TaskKind task, std::uint64_t seed)
        : model(ParserModel::create(task, tiny_config(task, seed)).template cast<T>()), bce(is_name_task(task)) {
        const auto& c = model.config();
        Rng rng(seed + 100);
        std::vector<UasMatrix> ms = {random_matrix(c.seq_len, c.d_model, 4, rng),
                                     random_matrix(c.seq_len, c.d_model, 2, rng),
                                     random_matrix(c.seq_len, c.d_model, 0, rng)};
        std::vector<const UasMatrix*> items = {&ms[0], &ms[1], &ms[2]};
        std::tie(values, mask) = pack_batch<T>(items, c.seq_len, c.d_model);
        std::vector<T> onehot(batch * c.num_outputs, T(0));
        for (std::size_t b = 0; b < batch; ++b) onehot[b * c.num_outputs + targets[b]] = T(1);
        target = BasicTensor<T>::from({batch, c.num_outputs}, onehot);
    }
    GradProblem(const GradProblem&) = delete;

    std::vector<gradcheck::Named<T>> inputs() const {
        std::vector<gradcheck::Named<T>> out;
        for (const auto& p : model.named_parameters()) out.emplace_back(p.name, p.tensor);
        return out;
    }
    std::function<BasicTensor<T>()> loss() const {
        return [this] {
            Rng dropout_rng(5);
            auto scores = model.forward(values, mask, batch, true, &dropout_rng);
            return bce ? binary_cross_entropy_loss(softmax(scores, 1), target)
                       : cross_entropy_loss(scores, std::span<const std::size_t>(targets));
        };
    }
};

gradcheck::Report gradcheck_f64(TaskKind task, std::uint64_t seed) {
    const GradProblem<double> p(task, seed);
    return gradcheck::check<double>(p.inputs(), p.loss(), 1e-6, 1.0, 0, 1e-8);
}

/// f32 analytic gradients against differences of the f64 shadow.
gradcheck::Report gradcheck_f32(TaskKind task, std::uint64_t seed) {
    const GradProblem<float> p(task, seed);
    const GradProblem<double> shadow(task, seed);
    return gradcheck::check_shadow<float, double>(p.inputs(), p.loss(), shadow.inputs(), shadow.loss(), 1e-6, 1e-4);
}

} // namespace

// ---------------------------------------------------------------------------
// positional encoding

TEST(PositionalEncoding, KnownEntries) {
    const auto pe = positional_encoding(50, 40);
    ASSERT_EQ(pe.size(), 2000u);
    EXPECT_EQ(pe[0], 0.0);
    EXPECT_EQ(pe[1], 1.0);
    EXPECT_NEAR(pe[40 * 1 + 0], 0.841471, 1e-5);
    EXPECT_NEAR(pe[40 * 1 + 1], std::cos(1.0), 1e-12);
}

TEST(PositionalEncoding, MatchesLongDoubleOracle) {
    const auto pe = positional_encoding(50, 40);
    for (std::size_t pos = 0; pos < 50; ++pos)
        for (std::size_t j = 0; j < 40; ++j) {
            const long double i2 = static_cast<long double>(j - j % 2);
            const long double angle = static_cast<long double>(pos) / std::pow(10000.0L, i2 / 40.0L);
            const long double want = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
            ASSERT_NEAR(pe[pos * 40 + j], static_cast<double>(want), 1e-12) << pos << "," << j;
        }
}

TEST(PositionalEncoding, RejectsOddWidth) {
    EXPECT_THROW(positional_encoding(4, 3), Error);
    EXPECT_THROW(positional_encoding(0, 4), Error);
}

// ---------------------------------------------------------------------------
// configuration and construction

TEST(ModelConfig, FullSizes) {
    const auto name = ModelConfig::for_task(TaskKind::OsName);
    EXPECT_EQ(name.num_outputs, 7u);
    EXPECT_EQ(name.flat_width(), 2000u);
    EXPECT_EQ(name.d_k(), 20u);
    EXPECT_EQ(ModelConfig::for_task(TaskKind::SoftwareVersionIndex).num_outputs, 51u);
}

TEST(ModelConfig, Validation) {
    auto c = ModelConfig::for_task(TaskKind::OsName);
    c.num_heads = 3;
    EXPECT_THROW(c.validate(TaskKind::OsName), Error);
    c = ModelConfig::for_task(TaskKind::OsName);
    EXPECT_THROW(c.validate(TaskKind::OsVersionIndex), ShapeMismatch);
    c.dropout_p = 1.0f;
    EXPECT_THROW(c.validate(TaskKind::OsName), Error);
}

TEST(ClassLabels, FixedOrderWithNotApplicableLast) {
    const std::vector<std::string> os = {"Android", "iOS", "iPad", "Linux", "Macintosh", "Windows", "N/A"};
    const std::vector<std::string> sw = {"Android WebView", "Chrome", "Facebook App", "Instagram",
                                         "Internet Explorer", "Opera", "N/A"};
    EXPECT_EQ(class_labels(TaskKind::OsName), os);
    EXPECT_EQ(class_labels(TaskKind::SoftwareName), sw);
    EXPECT_EQ(class_labels(TaskKind::OsVersionIndex), os);
}

TEST(TaskSlug, RoundTrips) {
    for (auto t : kAllTasks) EXPECT_EQ(parse_task(task_slug(t)), t);
    EXPECT_FALSE(parse_task("nonsense").has_value());
}

TEST(ParserModel, ParameterShapesAndInitBounds) {
    const auto m = ParserModel::create(TaskKind::OsName, ModelConfig::for_task(TaskKind::OsName, 3));
    EXPECT_EQ(m.param("encoder.query.weight").shape(), (Shape{40, 40}));
    EXPECT_EQ(m.param("encoder.ff1.weight").shape(), (Shape{40, 128}));
    EXPECT_EQ(m.param("head.0.weight").shape(), (Shape{2000, 512}));
    EXPECT_EQ(m.param("head.2.weight").shape(), (Shape{256, 128}));
    EXPECT_EQ(m.param("head.out.weight").shape(), (Shape{128, 7}));
    for (const auto& p : m.named_parameters()) {
        if (p.name.find("norm") != std::string::npos) continue;
        const double fan_in = static_cast<double>(p.name.ends_with(".bias") ? m.param(p.name.substr(0, p.name.size() - 5) + ".weight").dim(0)
                                                                            : p.tensor.dim(0));
        const double bound = std::sqrt(3.0 / fan_in);
        for (float x : p.tensor.data()) ASSERT_LE(std::abs(x), bound) << p.name;
    }
    EXPECT_THROW(m.param("nope"), Error);
}

TEST(ParserModel, SeedDeterminesWeights) {
    const auto c = tiny_config(TaskKind::OsName, 8);
    EXPECT_EQ(checkpoint_bytes(ParserModel::create(TaskKind::OsName, c)),
              checkpoint_bytes(ParserModel::create(TaskKind::OsName, c)));
    EXPECT_NE(checkpoint_bytes(ParserModel::create(TaskKind::OsName, c)),
              checkpoint_bytes(ParserModel::create(TaskKind::OsName, tiny_config(TaskKind::OsName, 9))));
}

// ---------------------------------------------------------------------------
// forward passes

class FullModel : public ::testing::Test {
protected:
    ParserModel model = ParserModel::create(TaskKind::SoftwareName, ModelConfig::for_task(TaskKind::SoftwareName, 2));
    Rng rng{17};
};

TEST_F(FullModel, EncoderOutputWidth) {
    const auto m = random_matrix(50, 40, 12, rng);
    const auto out = encoder_forward(m, model);
    EXPECT_EQ(out.size(), 2000u);
    for (float x : out) EXPECT_TRUE(std::isfinite(x));
}

TEST_F(FullModel, AllPadInputIsFinite) {
    const auto m = random_matrix(50, 40, 0, rng);
    for (float x : encoder_forward(m, model)) ASSERT_TRUE(std::isfinite(x));
}

TEST_F(FullModel, NoAttentionMassOnPadding) {
    const auto m = random_matrix(50, 40, 7, rng);
    const UasMatrix* items[1] = {&m};
    auto [values, mask] = pack_batch<float>(items, 50, 40);
    std::vector<float> w;
    NoGradGuard guard;
    model.encode(values, mask, 1, &w);
    ASSERT_EQ(w.size(), 2u * 50 * 50);
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t i = 0; i < 7; ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < 50; ++j) {
                const float p = w[(h * 50 + i) * 50 + j];
                if (j >= 7) {
                    ASSERT_EQ(p, 0.0f);
                }
                total += p;
            }
            EXPECT_NEAR(total, 1.0, 1e-6);
        }
}

TEST_F(FullModel, SwappingTokensChangesOutput) {
    auto m = random_matrix(50, 40, 5, rng);
    const auto before = encoder_forward(m, model);
    for (std::size_t j = 0; j < 40; ++j) std::swap(m.values[0 * 40 + j], m.values[3 * 40 + j]);
    const auto after = encoder_forward(m, model);
    EXPECT_NE(before, after);
}

TEST_F(FullModel, InferenceIsPure) {
    const auto m = random_matrix(50, 40, 9, rng);
    const auto f1 = encoder_forward(m, model), f2 = encoder_forward(m, model);
    EXPECT_EQ(f1, f2);
    const auto p1 = head_forward<float>(f1, model), p2 = head_forward<float>(f1, model);
    EXPECT_EQ(p1.probabilities, p2.probabilities);
}

TEST_F(FullModel, NameHeadDecision) {
    const auto m = random_matrix(50, 40, 9, rng);
    const auto p = head_forward<float>(encoder_forward(m, model), model);
    ASSERT_EQ(p.probabilities.size(), 7u);
    double total = 0.0;
    for (float x : p.probabilities) total += x;
    EXPECT_NEAR(total, 1.0, 1e-6);
    const auto best = static_cast<std::size_t>(std::max_element(p.probabilities.begin(), p.probabilities.end()) -
                                               p.probabilities.begin());
    EXPECT_EQ(p.class_index, best);
    EXPECT_EQ(p.class_label, class_labels(TaskKind::SoftwareName)[best]);
}

TEST_F(FullModel, TrainingModeUsesDropout) {
    const auto m = random_matrix(50, 40, 9, rng);
    const auto f = encoder_forward(m, model);
    Rng d1(1), d2(2);
    const auto a = head_forward<float>(f, model, true, &d1), b = head_forward<float>(f, model, true, &d2);
    EXPECT_NE(a.probabilities, b.probabilities);
    EXPECT_THROW(head_forward<float>(f, model, true, nullptr), Error);
}

TEST(VersionHead, IndexIsRawArgmax) {
    const auto model = ParserModel::create(TaskKind::OsVersionIndex, ModelConfig::for_task(TaskKind::OsVersionIndex, 4));
    Rng rng(5);
    const auto m = random_matrix(50, 40, 10, rng);
    const auto p = head_forward<float>(encoder_forward(m, model), model);
    ASSERT_EQ(p.raw_scores.size(), 51u);
    EXPECT_EQ(p.index, static_cast<std::size_t>(std::max_element(p.raw_scores.begin(), p.raw_scores.end()) -
                                                p.raw_scores.begin()));
    EXPECT_TRUE(p.probabilities.empty());
}

TEST(Argmax, TiesGoToLowestIndex) {
    const std::vector<float> v = {1, 3, 3, 2};
    EXPECT_EQ(argmax(v.begin(), v.end()), 1u);
}

TEST(Predict, EmptyUasAndDimensionMismatch) {
    const auto model = ParserModel::create(TaskKind::OsName, tiny_config(TaskKind::OsName));
    const auto emb = tiny_embeddings(8);
    const auto p = predict(model, emb, RawUas{""});
    EXPECT_EQ(p.probabilities.size(), 7u);
    const auto q = predict(model, emb, RawUas{"Mozilla/5.0 (Windows NT 10.0) Chrome/1 extra tokens beyond four"});
    EXPECT_EQ(q.probabilities.size(), 7u);
    EXPECT_THROW(predict(model, tiny_embeddings(6), RawUas{"Mozilla"}), ShapeMismatch);
}

TEST(PackBatch, RejectsWrongShape) {
    Rng rng(1);
    const auto m = random_matrix(4, 6, 2, rng);
    const UasMatrix* items[1] = {&m};
    EXPECT_THROW(pack_batch<float>(items, 4, 8), ShapeMismatch);
}

// ---------------------------------------------------------------------------
// gradients through the whole network

TEST(ModelGradient, NameTaskBceFloat) {
    const auto r = gradcheck_f32(TaskKind::OsName, 1);
    EXPECT_LT(r.max_rel, 1e-2) << r.worst;
}

TEST(ModelGradient, NameTaskBceDouble) {
    const auto r = gradcheck_f64(TaskKind::SoftwareName, 2);
    EXPECT_LT(r.max_rel, 1e-5) << r.worst;
}

TEST(ModelGradient, VersionTaskCeFloat) {
    const auto r = gradcheck_f32(TaskKind::OsVersionIndex, 3);
    EXPECT_LT(r.max_rel, 1e-2) << r.worst;
}

TEST(ModelGradient, VersionTaskCeDouble) {
    const auto r = gradcheck_f64(TaskKind::SoftwareVersionIndex, 4);
    EXPECT_LT(r.max_rel, 1e-5) << r.worst;
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
    const auto m = ParserModel::create(TaskKind::SoftwareVersionIndex, tiny_config(TaskKind::SoftwareVersionIndex, 6));
    const auto bytes = checkpoint_bytes(m);
    EXPECT_EQ(bytes.substr(0, 7), "UASMDL1");
    std::istringstream in(bytes, std::ios::binary);
    const auto back = load_checkpoint(in);
    EXPECT_EQ(back.task(), TaskKind::SoftwareVersionIndex);
    EXPECT_EQ(back.config(), m.config());
    EXPECT_EQ(checkpoint_bytes(back), bytes);
}

TEST(Checkpoint, RejectsCorruption) {
    const auto bytes = checkpoint_bytes(ParserModel::create(TaskKind::OsName, tiny_config(TaskKind::OsName)));
    auto bad_magic = bytes;
    bad_magic[3] = '?';
    std::istringstream a(bad_magic, std::ios::binary);
    EXPECT_THROW(load_checkpoint(a), FormatError);

    auto bad_task = bytes;
    bad_task[7] = 9;
    std::istringstream b(bad_task, std::ios::binary);
    EXPECT_THROW(load_checkpoint(b), FormatError);

    auto wrong_outputs = bytes;
    wrong_outputs[7] = static_cast<char>(TaskKind::OsVersionIndex);
    std::istringstream c(wrong_outputs, std::ios::binary);
    EXPECT_THROW(load_checkpoint(c), FormatError);

    std::istringstream d(bytes.substr(0, bytes.size() / 2), std::ios::binary);
    EXPECT_THROW(load_checkpoint(d), FormatError);

    EXPECT_THROW(load_checkpoint(std::string("/nonexistent/x.ckpt")), FileNotFound);
}
