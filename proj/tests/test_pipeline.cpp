#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "uasparse/pipeline.hpp"
#include "uasparse/synthetic.hpp"

using namespace uasparse;

namespace {

LabeledExample example(std::string ua, std::optional<std::string> os = std::nullopt,
                       std::optional<std::string> sw = std::nullopt) {
    LabeledExample ex;
    ex.raw.text = std::move(ua);
    ex.os_name = std::move(os);
    ex.software_name = std::move(sw);
    return ex;
}

/// `per_class` examples for each of the 7 OS classes.
std::vector<LabeledExample> balanced_os_set(std::size_t per_class) {
    std::vector<LabeledExample> out;
    for (const auto& label : class_labels(TaskKind::OsName)) {
        for (std::size_t i = 0; i < per_class; ++i) out.push_back(example(label + " " + std::to_string(i), label));
    }
    return out;
}

const EmbeddingModel& corpus_embeddings() {
    static const EmbeddingModel m = [] {
        std::vector<TokenizedUas> toks;
        for (const auto& ex : synthetic::generate_corpus(600, 21)) toks.push_back(tokenize(ex.raw));
        EmbeddingConfig c;
        c.bucket_count = 4096;
        c.epochs = 2;
        c.seed = 2;
        return train_embeddings(toks, c);
    }();
    return m;
}

std::string checkpoint_bytes(const ParserModel& m) {
    std::ostringstream os(std::ios::binary);
    save_checkpoint(m, os);
    return os.str();
}

} // namespace

// ---------------------------------------------------------------------------
// ingestion

TEST(Ingest, ValidLines) {
    std::istringstream in(R"({"ua":"a","os_name":"Windows"}
{"ua":"b","software_name":"Chrome","software_version":"1.2"}

{"ua":"c","os_version":null}
)");
    const auto r = ingest(in);
    ASSERT_EQ(r.examples.size(), 3u);
    EXPECT_EQ(r.skipped_count, 0u);
    EXPECT_EQ(r.examples[0].os_name, "Windows");
    EXPECT_EQ(r.examples[1].software_version, "1.2");
    EXPECT_FALSE(r.examples[2].os_version.has_value());
}

TEST(Ingest, MalformedLinesAreCounted) {
    std::istringstream in("{\"ua\":\"a\"}\nnot json\n{\"ua\":\"b\"}\n{\"os_name\":\"x\"}\n{\"ua\":5}\n");
    const auto r = ingest(in);
    EXPECT_EQ(r.examples.size(), 2u);
    EXPECT_EQ(r.skipped_count, 3u);
}

TEST(Ingest, EmptyOrAllBadIsFormatError) {
    std::istringstream empty("");
    EXPECT_THROW(ingest(empty), FormatError);
    std::istringstream bad("garbage\n");
    EXPECT_THROW(ingest(bad), FormatError);
    EXPECT_THROW(ingest(std::string("/nonexistent/file.jsonl")), FileNotFound);
}

TEST(Ingest, StreamsIntoSink) {
    std::istringstream in("{\"ua\":\"a\"}\n{\"ua\":\"b\"}\n");
    std::vector<std::string> seen;
    const auto r = ingest(in, [&](LabeledExample&& ex) { seen.push_back(ex.raw.text); });
    EXPECT_TRUE(r.examples.empty());
    EXPECT_EQ(seen, (std::vector<std::string>{"a", "b"}));
}

TEST(Ingest, JsonRoundTrip) {
    auto ex = example("Mozilla/5.0", "iOS", "Instagram");
    ex.software_version = "250.0";
    ex.source_cidr = "1.2.3.0/24";
    std::istringstream in(example_to_json(ex).dump() + "\n");
    const auto back = ingest(in).examples.at(0);
    EXPECT_EQ(back.raw.text, ex.raw.text);
    EXPECT_EQ(back.os_name, ex.os_name);
    EXPECT_EQ(back.software_version, ex.software_version);
    EXPECT_EQ(back.source_cidr, ex.source_cidr);
    EXPECT_FALSE(back.os_version.has_value());
}

// ---------------------------------------------------------------------------
// labels

TEST(ClassIndex, KnownAliasesAndUnknown) {
    EXPECT_EQ(class_index_for(TaskKind::OsName, std::string("Windows")), 5u);
    EXPECT_EQ(class_index_for(TaskKind::OsName, std::string("windows")), 5u);
    EXPECT_EQ(class_index_for(TaskKind::OsName, std::string("Mac OS X")), 4u);
    EXPECT_EQ(class_index_for(TaskKind::OsName, std::string("BeOS")), 6u);
    EXPECT_EQ(class_index_for(TaskKind::OsName, std::nullopt), 6u);
    EXPECT_EQ(class_index_for(TaskKind::SoftwareName, std::string("Internet Explorer")), 4u);
    EXPECT_EQ(class_index_for(TaskKind::SoftwareName, std::string("Firefox")), 6u);
}

TEST(VersionLabel, FirstExactTokenMatch) {
    auto ex = example("Chrome/105.0.0.0 Mobile");
    ex.software_version = "105.0.0.0";
    EXPECT_EQ(build_version_label(ex, TaskKind::SoftwareVersionIndex), 1u);
}

TEST(VersionLabel, AbsentOrUnmatchedIsSentinel) {
    auto ex = example("Chrome/105.0.0.0 Mobile");
    EXPECT_EQ(build_version_label(ex, TaskKind::SoftwareVersionIndex), 50u);
    ex.software_version = "999";
    EXPECT_EQ(build_version_label(ex, TaskKind::SoftwareVersionIndex), 50u);
    EXPECT_THROW(build_version_label(ex, TaskKind::OsName), Error);
}

TEST(VersionLabel, LabelIsPreprocessedLikeTheUas) {
    auto ex = example("Mozilla/5.0 (iPhone; CPU iPhone OS 11_0 like Mac OS X)");
    ex.os_version = "11_0";
    // Mozilla 5.0 ( iPhone CPU iPhone OS 11.0 ...
    EXPECT_EQ(build_version_label(ex, TaskKind::OsVersionIndex), 7u);
}

TEST(VersionLabel, MatchBeyondSequenceIsSentinel) {
    std::string ua;
    for (int i = 0; i < 55; ++i) ua += "w" + std::to_string(i) + " ";
    auto ex = example(ua + "7.7");
    ex.os_version = "7.7";
    EXPECT_EQ(build_version_label(ex, TaskKind::OsVersionIndex), 50u);
    auto early = example("7.7 " + ua);
    early.os_version = "7.7";
    EXPECT_EQ(build_version_label(early, TaskKind::OsVersionIndex), 0u);
}

// ---------------------------------------------------------------------------
// balance and split

TEST(Split, SeventyThirtyPerClass) {
    const auto data = balanced_os_set(1000);
    auto cfg = TrainConfig::for_task(TaskKind::OsName, 3);
    const auto idx = balance_and_split_indices(data, ClassSpec::for_task(TaskKind::OsName), cfg);
    std::vector<std::size_t> train_per(7, 0), val_per(7, 0);
    for (auto i : idx.train) ++train_per[name_class_of(data[i], TaskKind::OsName)];
    for (auto i : idx.validation) ++val_per[name_class_of(data[i], TaskKind::OsName)];
    for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_NEAR(static_cast<double>(train_per[c]), 700.0, 1.0);
        EXPECT_EQ(train_per[c] + val_per[c], 1000u);
    }
}

TEST(Split, QuotaSamplesExactly) {
    const auto data = balanced_os_set(1000);
    auto cfg = TrainConfig::for_task(TaskKind::OsName, 4);
    cfg.per_class_quota = 100;
    const auto s = balance_and_split(data, ClassSpec::for_task(TaskKind::OsName), cfg);
    EXPECT_EQ(s.train.size(), 7u * 70);
    EXPECT_EQ(s.validation.size(), 7u * 30);
}

TEST(Split, DisjointExhaustiveAndSeeded) {
    const auto data = balanced_os_set(37);
    const auto spec = ClassSpec::for_task(TaskKind::OsName);
    auto cfg = TrainConfig::for_task(TaskKind::OsName, 5);
    const auto a = balance_and_split_indices(data, spec, cfg);
    std::set<std::size_t> all(a.train.begin(), a.train.end());
    for (auto i : a.validation) EXPECT_TRUE(all.insert(i).second);
    EXPECT_EQ(all.size(), data.size());
    const auto b = balance_and_split_indices(data, spec, cfg);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.validation, b.validation);
    cfg.seed = 6;
    EXPECT_NE(balance_and_split_indices(data, spec, cfg).train, a.train);
}

TEST(Split, MissingClassNamesTheClass) {
    auto data = balanced_os_set(5);
    std::erase_if(data, [](const LabeledExample& ex) { return ex.os_name == "Linux"; });
    try {
        balance_and_split(data, ClassSpec::for_task(TaskKind::OsName), TrainConfig::for_task(TaskKind::OsName));
        FAIL() << "expected MissingClass";
    } catch (const MissingClass& e) {
        EXPECT_NE(std::string(e.what()).find("Linux"), std::string::npos);
    }
}

TEST(TrainConfig, Validation) {
    auto c = TrainConfig::for_task(TaskKind::OsName);
    EXPECT_DOUBLE_EQ(c.learning_rate, 0.0005);
    EXPECT_DOUBLE_EQ(TrainConfig::for_task(TaskKind::OsVersionIndex).learning_rate, 0.005);
    EXPECT_EQ(c.batch_size, 200u);
    EXPECT_DOUBLE_EQ(c.weight_decay, 1e-5);
    c.split_fraction = 1.0;
    EXPECT_THROW(c.validate(), Error);
    c = TrainConfig::for_task(TaskKind::OsName);
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), Error);
}

// ---------------------------------------------------------------------------
// metrics

TEST(Metrics, HandComputedConfusion) {
    const auto m = metrics_from_confusion({{2, 1}, {0, 3}}, {"c0", "c1"});
    EXPECT_DOUBLE_EQ(m[0].precision, 1.0);
    EXPECT_DOUBLE_EQ(m[0].recall, 2.0 / 3.0);
    EXPECT_NEAR(m[0].f1, 0.8, 1e-12);
    EXPECT_EQ(m[0].support, 3u);
    EXPECT_DOUBLE_EQ(m[1].precision, 0.75);
    EXPECT_DOUBLE_EQ(m[1].recall, 1.0);
}

TEST(Metrics, PerfectAndEmptyColumns) {
    const auto m = metrics_from_confusion({{4, 0, 0}, {0, 2, 0}, {0, 0, 0}}, {"a", "b", "c"});
    EXPECT_DOUBLE_EQ(m[0].f1, 1.0);
    EXPECT_DOUBLE_EQ(m[1].f1, 1.0);
    EXPECT_DOUBLE_EQ(m[2].f1, 0.0);
    EXPECT_THROW(metrics_from_confusion({{1}}, {"a", "b"}), ShapeMismatch);
}

TEST(Evaluate, ConstantPredictor) {
    const auto& emb = corpus_embeddings();
    auto model = ParserModel::create(TaskKind::OsName, ModelConfig::for_task(TaskKind::OsName, 1));
    for (auto& p : model.named_parameters()) {
        if (p.name == "head.out.weight") std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
        if (p.name == "head.out.bias") {
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0f);
            p.tensor.data()[2] = 10.0f; // always iPad
        }
    }
    const auto data = balanced_os_set(10);
    const auto r = evaluate(model, emb, data);
    EXPECT_NEAR(r.overall_accuracy, 1.0 / 7.0, 1e-12);
    EXPECT_DOUBLE_EQ(r.per_class[2].recall, 1.0);
    EXPECT_NEAR(r.per_class[2].precision, 1.0 / 7.0, 1e-12);
    std::size_t support = 0;
    for (const auto& c : r.per_class) support += c.support;
    EXPECT_EQ(support, data.size());
    EXPECT_THROW(evaluate(model, emb, {}), EmptyEvaluationSet);
}

TEST(Evaluate, VersionReportHasPerVersionRows) {
    const auto& emb = corpus_embeddings();
    const auto model = ParserModel::create(TaskKind::SoftwareVersionIndex,
                                           ModelConfig::for_task(TaskKind::SoftwareVersionIndex, 1));
    const auto data = synthetic::generate_corpus(60, 8);
    const auto r = evaluate(model, emb, data);
    EXPECT_EQ(r.total, 60u);
    EXPECT_FALSE(r.per_version.empty());
    std::size_t support = 0, micro_tp = 0;
    for (const auto& c : r.per_class) {
        support += c.support;
        micro_tp += static_cast<std::size_t>(std::llround(c.recall * static_cast<double>(c.support)));
    }
    EXPECT_EQ(support, 60u);
    EXPECT_NEAR(static_cast<double>(micro_tp) / 60.0, r.overall_accuracy, 1e-12);
    const auto j = metrics_to_json(r);
    EXPECT_EQ(j["task"], "software-version");
    EXPECT_TRUE(j.contains("per_version"));
    std::ostringstream table;
    print_metrics_table(r, table);
    EXPECT_NE(table.str().find("Version"), std::string::npos);
}

// ---------------------------------------------------------------------------
// training

TEST(Train, LossDecreasesOnSyntheticData) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(200, 31);
    auto tc = TrainConfig::for_task(TaskKind::OsName, 1);
    tc.epochs = 30;
    std::size_t calls = 0;
    const auto r = train(TaskKind::OsName, data, emb, ModelConfig::for_task(TaskKind::OsName, 1), tc,
                         [&](std::size_t epoch, double loss) {
                             ++calls;
                             EXPECT_EQ(epoch, calls);
                             EXPECT_TRUE(std::isfinite(loss));
                         });
    ASSERT_EQ(r.epoch_loss.size(), 30u);
    EXPECT_EQ(calls, 30u);
    EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
    std::ostringstream csv;
    write_loss_csv(r.epoch_loss, csv);
    EXPECT_EQ(csv.str().substr(0, 15), "epoch,mean_loss");
}

TEST(Train, HookStopsEarly) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(60, 35);
    auto tc = TrainConfig::for_task(TaskKind::OsName, 2);
    tc.epochs = 5;
    std::vector<std::size_t> seen;
    const auto r = train_with_hook(TaskKind::OsName, data, emb, ModelConfig::for_task(TaskKind::OsName, 2), tc,
                                   [&](std::size_t epoch, double, const ParserModel&) {
                                       seen.push_back(epoch);
                                       return epoch == 2;
                                   });
    EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(r.epoch_loss.size(), 2u);
}

TEST(Train, ZeroLearningRateKeepsWeights) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(50, 32);
    auto tc = TrainConfig::for_task(TaskKind::SoftwareVersionIndex, 1);
    tc.epochs = 2;
    tc.learning_rate = 0.0;
    const auto mc = ModelConfig::for_task(TaskKind::SoftwareVersionIndex, 7);
    const auto r = train(TaskKind::SoftwareVersionIndex, data, emb, mc, tc);
    EXPECT_EQ(checkpoint_bytes(r.model), checkpoint_bytes(ParserModel::create(TaskKind::SoftwareVersionIndex, mc)));
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(120, 33);
    auto tc = TrainConfig::for_task(TaskKind::SoftwareName, 4);
    tc.epochs = 2;
    tc.batch_size = 50;
    const auto mc = ModelConfig::for_task(TaskKind::SoftwareName, 4);
    const auto a = train(TaskKind::SoftwareName, data, emb, mc, tc);
    const auto b = train(TaskKind::SoftwareName, data, emb, mc, tc);
    EXPECT_EQ(checkpoint_bytes(a.model), checkpoint_bytes(b.model));
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(Train, ContinuesFromInitialModel) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(40, 34);
    auto tc = TrainConfig::for_task(TaskKind::OsName, 4);
    tc.epochs = 1;
    tc.learning_rate = 0.0;
    const auto init = ParserModel::create(TaskKind::OsName, ModelConfig::for_task(TaskKind::OsName, 99));
    const auto r = train(TaskKind::OsName, data, emb, ModelConfig::for_task(TaskKind::OsName, 1), tc, nullptr, &init);
    EXPECT_EQ(checkpoint_bytes(r.model), checkpoint_bytes(init));
}

TEST(Train, RejectsMismatchedConfigs) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(10, 35);
    auto tc = TrainConfig::for_task(TaskKind::OsName);
    EXPECT_THROW(train(TaskKind::OsName, data, emb, ModelConfig::for_task(TaskKind::OsVersionIndex), tc), ShapeMismatch);
    EXPECT_THROW(train(TaskKind::OsName, {}, emb, ModelConfig::for_task(TaskKind::OsName), tc), Error);
}

TEST(Checkpoint, RoundTripGivesIdenticalMetrics) {
    const auto& emb = corpus_embeddings();
    const auto data = synthetic::generate_corpus(80, 36);
    auto tc = TrainConfig::for_task(TaskKind::OsName, 2);
    tc.epochs = 1;
    const auto r = train(TaskKind::OsName, data, emb, ModelConfig::for_task(TaskKind::OsName, 2), tc);
    const auto path = (std::filesystem::temp_directory_path() / "uasparse_test_roundtrip.ckpt").string();
    save_checkpoint(r.model, path);
    const auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    EXPECT_EQ(evaluate(r.model, emb, data), evaluate(back, emb, data));
}

// ---------------------------------------------------------------------------
// synthetic corpus

TEST(Synthetic, EveryClassPresentAndSeeded) {
    const auto a = synthetic::generate_corpus(1400, 1), b = synthetic::generate_corpus(1400, 1);
    ASSERT_EQ(a.size(), 1400u);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i].raw.text, b[i].raw.text);
    for (auto task : {TaskKind::OsName, TaskKind::SoftwareName}) {
        std::vector<std::size_t> counts(7, 0);
        for (const auto& ex : a) ++counts[name_class_of(ex, task)];
        for (auto c : counts) EXPECT_GE(c, 1400u / 14);
    }
}

TEST(Synthetic, VersionLabelsUsuallyResolve) {
    const auto data = synthetic::generate_corpus(500, 2, true);
    std::size_t found = 0, labelled = 0;
    for (const auto& ex : data) {
        ASSERT_TRUE(ex.source_cidr.has_value());
        if (!ex.software_version) continue;
        ++labelled;
        found += build_version_label(ex, TaskKind::SoftwareVersionIndex) < 50;
    }
    ASSERT_GT(labelled, 0u);
    EXPECT_EQ(found, labelled);
}
