// uasparse: command-line front end for the UAS parsing and vulnerability workflow.
//
// Exit codes: 0 success, 1 I/O failure, 2 usage or validation failure.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uasparse/uasparse.hpp"

namespace fs = std::filesystem;
using namespace uasparse;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    bool verbose = false;
};

Globals g;

void log(const std::string& msg) {
    if (g.verbose) std::cerr << msg << '\n';
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

/// "-" means stdin/stdout.
class Input {
public:
    explicit Input(const std::string& path) {
        if (path == "-") {
            stream_ = &std::cin;
            return;
        }
        if (!fs::exists(path)) throw FileNotFound("input '" + path + "' not found");
        file_.open(path);
        if (!file_) throw IoError("cannot open '" + path + "'");
        stream_ = &file_;
    }
    std::istream& get() { return *stream_; }

private:
    std::ifstream file_;
    std::istream* stream_ = nullptr;
};

class Output {
public:
    explicit Output(const std::string& path, bool binary = false) {
        if (path == "-") {
            stream_ = &std::cout;
            return;
        }
        file_.open(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
        if (!file_) throw IoError("cannot write '" + path + "'");
        stream_ = &file_;
    }
    std::ostream& get() { return *stream_; }
    void close() {
        stream_->flush();
        if (!*stream_) throw IoError("write failed");
    }

private:
    std::ofstream file_;
    std::ostream* stream_ = nullptr;
};

IngestResult ingest_path(const std::string& path) {
    Input in(path);
    auto r = ingest(in.get());
    if (r.skipped_count > 0) warn(std::to_string(r.skipped_count) + " malformed line(s) skipped in " + path);
    return r;
}

TaskKind require_task(const std::string& s) {
    auto t = parse_task(s);
    if (!t) throw CLI::ValidationError("--task", "unknown task '" + s + "' (os-name|software-name|os-version|software-version)");
    return *t;
}

// ---------------------------------------------------------------------------

struct PreprocessOpts {
    std::string input, output = "-";
};

int run_preprocess(const PreprocessOpts& o) {
    const auto r = ingest_path(o.input);
    Output out(o.output);
    std::size_t truncated = 0;
    for (const auto& ex : r.examples) {
        const auto tok = tokenize(ex.raw);
        truncated += tok.truncated ? 1 : 0;
        auto j = example_to_json(ex);
        j["tokens"] = tok.tokens;
        j["original_token_count"] = tok.original_token_count;
        j["truncated"] = tok.truncated;
        out.get() << j.dump() << '\n';
    }
    out.close();
    std::cerr << "records=" << r.examples.size() << " skipped_count=" << r.skipped_count << " truncated=" << truncated
              << '\n';
    return 0;
}

struct GenerateOpts {
    std::size_t count = 5000;
    std::string output = "-";
    bool with_cidr = false;
};

int run_generate(const GenerateOpts& o) {
    Output out(o.output);
    for (const auto& s : synthetic::generate_corpus(o.count, g.seed, o.with_cidr)) out.get() << example_to_json(s).dump() << '\n';
    out.close();
    log("generated " + std::to_string(o.count) + " examples");
    return 0;
}

struct EmbOpts {
    std::string input, output;
    EmbeddingConfig cfg;
};

int run_train_embeddings(EmbOpts o) {
    const auto r = ingest_path(o.input);
    std::vector<TokenizedUas> corpus;
    corpus.reserve(r.examples.size());
    for (const auto& ex : r.examples) corpus.push_back(tokenize(ex.raw));
    o.cfg.seed = g.seed;
    EmbeddingTrainingReport report;
    const auto model = train_embeddings(corpus, o.cfg, &report);
    for (std::size_t e = 0; e < report.epoch_mean_loss.size(); ++e)
        log("embedding epoch " + std::to_string(e + 1) + " loss " + std::to_string(report.epoch_mean_loss[e]));
    Output out(o.output, true);
    model.save(out.get());
    out.close();
    std::cerr << "vocab=" << model.vocab_size() << " dim=" << model.dim() << '\n';
    return 0;
}

struct TrainOpts {
    std::string task, data, embeddings, output, loss_csv, initial_output, validation_output;
    std::optional<std::size_t> epochs, batch_size, quota;
    std::optional<double> lr, weight_decay;
    std::string name_loss = "bce";
};

int run_train(const TrainOpts& o) {
    const TaskKind task = require_task(o.task);
    auto tcfg = TrainConfig::for_task(task, g.seed);
    if (o.epochs) tcfg.epochs = *o.epochs;
    if (o.batch_size) tcfg.batch_size = *o.batch_size;
    if (o.lr) tcfg.learning_rate = *o.lr;
    if (o.weight_decay) tcfg.weight_decay = *o.weight_decay;
    tcfg.per_class_quota = o.quota;
    tcfg.name_loss = o.name_loss == "ce" ? NameLoss::CrossEntropy : NameLoss::BinaryCrossEntropy;
    tcfg.validate();

    const auto emb = EmbeddingModel::load(o.embeddings);
    auto mcfg = ModelConfig::for_task(task, g.seed);
    mcfg.d_model = emb.dim();
    mcfg.validate(task);

    const auto r = ingest_path(o.data);
    const auto split = balance_and_split(r.examples, ClassSpec::for_task(task), tcfg);
    log("train=" + std::to_string(split.train.size()) + " validation=" + std::to_string(split.validation.size()));

    const auto initial = ParserModel::create(task, mcfg);
    if (!o.initial_output.empty()) save_checkpoint(initial, o.initial_output);
    auto result = train(task, split.train, emb, mcfg, tcfg,
                        [](std::size_t epoch, double loss) {
                            log("epoch " + std::to_string(epoch) + " mean_loss " + std::to_string(loss));
                        },
                        &initial);
    save_checkpoint(result.model, o.output);

    const std::string csv_path = o.loss_csv.empty() ? o.output + ".loss.csv" : o.loss_csv;
    Output csv(csv_path);
    write_loss_csv(result.epoch_loss, csv.get());
    csv.close();

    if (!o.validation_output.empty()) {
        Output vout(o.validation_output);
        for (const auto& ex : split.validation) vout.get() << example_to_json(ex).dump() << '\n';
        vout.close();
    }
    if (!split.validation.empty()) {
        const auto m = evaluate(result.model, emb, split.validation);
        std::cerr << "task=" << task_slug(task) << " validation_accuracy=" << m.overall_accuracy
                  << " final_loss=" << result.epoch_loss.back() << '\n';
    }
    return 0;
}

struct EvalOpts {
    std::string checkpoint, embeddings, data, report;
    bool table = false;
};

int run_eval(const EvalOpts& o) {
    const auto model = load_checkpoint(o.checkpoint);
    const auto emb = EmbeddingModel::load(o.embeddings);
    const auto r = ingest_path(o.data);
    const auto m = evaluate(model, emb, r.examples);
    Output out(o.report);
    out.get() << metrics_to_json(m).dump(2) << '\n';
    out.close();
    if (o.table) print_metrics_table(m, std::cout);
    std::cerr << "task=" << task_slug(m.task) << " accuracy=" << m.overall_accuracy << " total=" << m.total << '\n';
    return 0;
}

struct ParseOpts {
    std::string checkpoints, embeddings, input = "-", output = "-";
};

/// Token at the predicted index of the preprocessed UAS; the terminal slot or
/// an index past the last token means absent.
std::optional<std::string> resolve_version(const Prediction& p, const TokenizedUas& tok, std::size_t seq_len) {
    if (p.index >= seq_len || p.index >= tok.tokens.size()) return std::nullopt;
    return tok.tokens[p.index];
}

int run_parse(const ParseOpts& o) {
    const auto emb = EmbeddingModel::load(o.embeddings);
    std::vector<ParserModel> models;
    for (TaskKind t : kAllTasks) {
        const auto path = (fs::path(o.checkpoints) / (std::string(task_slug(t)) + ".ckpt")).string();
        models.push_back(load_checkpoint(path));
        if (models.back().task() != t) throw FormatError(path + " holds a " + std::string(task_slug(models.back().task())) + " model");
    }
    Input in(o.input);
    Output out(o.output);
    const bool streaming = o.input == "-";
    std::string line;
    std::size_t parsed = 0, skipped = 0;
    while (std::getline(in.get(), line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto ex = detail::parse_example(line);
        if (!ex) {
            ++skipped;
            continue;
        }
        std::array<Prediction, 4> pred;
        TokenizedUas tok;
        for (std::size_t i = 0; i < 4; ++i) {
            PreprocessConfig pre;
            pre.max_tokens = models[i].config().seq_len;
            tok = tokenize(ex->raw, pre);
            pred[i] = predict(models[i], emb, ex->raw);
        }
        ParsedUas p;
        p.os_name = pred[0].class_label;
        p.software_name = pred[1].class_label;
        p.os_version = resolve_version(pred[2], tok, models[2].config().seq_len);
        p.software_version = resolve_version(pred[3], tok, models[3].config().seq_len);
        p.source_cidr = ex->source_cidr;
        out.get() << parsed_to_json(p, ex->raw.text).dump() << '\n';
        if (streaming) out.get().flush();
        ++parsed;
    }
    out.close();
    std::cerr << "parsed=" << parsed << " skipped_count=" << skipped << '\n';
    return 0;
}

struct ScoreOpts {
    std::string input, aliases, fixture, cache, output = "-";
    bool live = false;
    std::optional<std::size_t> max_requests;
    std::optional<std::int64_t> rate_window_ms;
    std::string base_url;
};

int run_score(const ScoreOpts& o) {
    if (!o.fixture.empty() && o.live) throw CLI::ValidationError("--fixture and --live are mutually exclusive");
    if (o.fixture.empty() && !o.live) throw CLI::ValidationError("one of --fixture or --live is required");
    const AliasTable aliases = o.aliases.empty() ? AliasTable::defaults() : AliasTable::load(o.aliases);

    NvdClientConfig cfg = nvd_config_from_env();
    cfg.cache_path = o.cache;
    if (o.max_requests) cfg.max_requests_per_window = *o.max_requests;
    if (o.rate_window_ms) cfg.rate_window = std::chrono::milliseconds(*o.rate_window_ms);
    if (!o.base_url.empty()) cfg.base_url = o.base_url;

    std::unique_ptr<CveSource> backend;
    if (!o.fixture.empty()) {
        cfg.offline_fixture = o.fixture;
        backend = std::make_unique<FixtureSource>(FixtureSource::load(o.fixture));
    } else {
        if (!cfg.api_key) warn("NVD_API_KEY not set; using the keyless rate limit of " +
                               std::to_string(cfg.effective_rate_limit()) + " requests per window");
        backend = std::make_unique<NvdClient>(cfg);
    }
    CveCache cache(cfg.cache_path);
    CachingSource source(*backend, cache);

    Input in(o.input);
    Output out(o.output);
    std::string line;
    std::size_t scored = 0, unscored = 0, skipped = 0;
    std::vector<std::string> unmapped;
    while (std::getline(in.get(), line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            ++skipped;
            continue;
        }
        ParsedUas p;
        try {
            p = parsed_from_json(j);
        } catch (const FormatError&) {
            ++skipped;
            continue;
        }
        UasVulnerability v;
        try {
            v = score_uas(p, source, aliases, &unmapped);
        } catch (const EmptyTuple&) {
            ++skipped;
            continue;
        }
        (v.scored() ? scored : unscored) += 1;
        vulnerability_to_json(v, j);
        out.get() << j.dump() << '\n';
    }
    out.close();
    if (skipped) warn(std::to_string(skipped) + " record(s) skipped (malformed or empty tuple)");
    if (!unmapped.empty()) warn(std::to_string(unmapped.size()) + " name(s) had no alias entry");
    std::cerr << "scored=" << scored << " unscored=" << unscored << " cache_hits=" << source.hits()
              << " cache_misses=" << source.misses() << '\n';
    return 0;
}

struct AggregateOpts {
    std::string input, format = "csv", geo, output = "-";
};

int run_aggregate(const AggregateOpts& o) {
    if (o.format == "geojson" && o.geo.empty()) throw MissingGeoTable("--format geojson requires --geo");
    std::optional<GeoTable> geo;
    if (!o.geo.empty()) geo = load_geo_table(o.geo);

    Input in(o.input);
    std::vector<std::pair<ParsedUas, UasVulnerability>> rows;
    std::string line;
    std::size_t skipped = 0;
    while (std::getline(in.get(), line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            ++skipped;
            continue;
        }
        try {
            rows.emplace_back(parsed_from_json(j), vulnerability_from_json(j));
        } catch (const FormatError&) {
            ++skipped;
        }
    }
    if (skipped) warn(std::to_string(skipped) + " malformed line(s) skipped");
    const auto aggs = aggregate_cidr(rows);

    Output out(o.output);
    if (o.format == "csv") {
        write_report_csv(aggs, out.get());
    } else {
        const auto r = build_geojson(aggs, geo ? &*geo : nullptr);
        if (r.skipped) warn(std::to_string(r.skipped) + " CIDR(s) missing from the geo table were skipped");
        out.get() << r.collection.dump(2) << '\n';
    }
    out.close();
    std::cerr << "cidrs=" << aggs.size() << '\n';
    return 0;
}

int exit_code_for(const Error& e) {
    if (dynamic_cast<const FileNotFound*>(&e) || dynamic_cast<const IoError*>(&e) ||
        dynamic_cast<const NetworkError*>(&e) || dynamic_cast<const RateLimited*>(&e) ||
        dynamic_cast<const MalformedResponse*>(&e)) {
        return 1;
    }
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    retain_large_allocations();
    CLI::App app{"User-agent string parsing and vulnerability scoring"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file; flags override it");
    app.add_option("--seed", g.seed, "RNG seed for every stochastic step")->capture_default_str();
    app.add_flag("--verbose,-v", g.verbose, "Progress diagnostics on stderr");

    PreprocessOpts pre;
    auto* c_pre = app.add_subcommand("preprocess", "Tokenize a JSONL corpus");
    c_pre->add_option("--input", pre.input, "JSONL with a 'ua' field per line")->required();
    c_pre->add_option("--output", pre.output, "Tokenized JSONL ('-' for stdout)")->capture_default_str();

    GenerateOpts gen;
    auto* c_gen = app.add_subcommand("generate-corpus", "Write a labeled synthetic UAS corpus");
    c_gen->add_option("--count", gen.count, "Number of UASs")->capture_default_str()->check(CLI::PositiveNumber);
    c_gen->add_option("--output", gen.output, "JSONL destination")->capture_default_str();
    c_gen->add_flag("--with-cidr", gen.with_cidr, "Attach a source_cidr to each record");

    EmbOpts emb;
    auto* c_emb = app.add_subcommand("train-embeddings", "Train subword CBOW embeddings");
    c_emb->add_option("--input", emb.input, "JSONL corpus")->required();
    c_emb->add_option("--output", emb.output, "Embedding model file")->required();
    c_emb->add_option("--dim", emb.cfg.dim)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--epochs", emb.cfg.epochs)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--window", emb.cfg.window)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--negatives", emb.cfg.negative_samples)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--lr", emb.cfg.learning_rate)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--min-count", emb.cfg.min_word_count)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--sample", emb.cfg.sampling_threshold, "Frequent-token subsampling threshold (0 disables)")->capture_default_str()->check(CLI::NonNegativeNumber);
    c_emb->add_option("--buckets", emb.cfg.bucket_count)->capture_default_str()->check(CLI::PositiveNumber);
    c_emb->add_option("--ngram-min", emb.cfg.ngram_min)->capture_default_str();
    c_emb->add_option("--ngram-max", emb.cfg.ngram_max)->capture_default_str();

    TrainOpts tr;
    auto* c_tr = app.add_subcommand("train", "Train one parser network");
    c_tr->add_option("--task", tr.task, "os-name|software-name|os-version|software-version")->required();
    c_tr->add_option("--data", tr.data, "Labeled JSONL")->required();
    c_tr->add_option("--embeddings", tr.embeddings, "Embedding model file")->required();
    c_tr->add_option("--output", tr.output, "Checkpoint destination")->required();
    c_tr->add_option("--epochs", tr.epochs, "Default 10");
    c_tr->add_option("--lr", tr.lr, "Default 0.0005 for name tasks, 0.005 for version tasks");
    c_tr->add_option("--batch-size", tr.batch_size, "Default 200");
    c_tr->add_option("--weight-decay", tr.weight_decay, "Default 1e-5");
    c_tr->add_option("--quota", tr.quota, "Per-class example cap before the split");
    c_tr->add_option("--name-loss", tr.name_loss, "bce|ce for name tasks")->check(CLI::IsMember({"bce", "ce"}))->capture_default_str();
    c_tr->add_option("--loss-csv", tr.loss_csv, "Per-epoch loss log (default <output>.loss.csv)");
    c_tr->add_option("--initial-output", tr.initial_output, "Also save the untrained initial checkpoint");
    c_tr->add_option("--validation-output", tr.validation_output, "Write the held-out split as JSONL");

    EvalOpts ev;
    auto* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint on labeled JSONL");
    c_ev->add_option("--checkpoint", ev.checkpoint)->required();
    c_ev->add_option("--embeddings", ev.embeddings)->required();
    c_ev->add_option("--data", ev.data)->required();
    c_ev->add_option("--report", ev.report, "Metrics JSON destination")->required();
    c_ev->add_flag("--table", ev.table, "Also print a metrics table to stdout");

    ParseOpts pa;
    auto* c_pa = app.add_subcommand("parse", "Extract the four-tuple from each UAS");
    c_pa->add_option("--checkpoints", pa.checkpoints, "Directory with <task>.ckpt for all four tasks")->required();
    c_pa->add_option("--embeddings", pa.embeddings)->required();
    c_pa->add_option("--input", pa.input, "JSONL or '-' for stdin")->capture_default_str();
    c_pa->add_option("--output", pa.output, "JSONL or '-' for stdout")->capture_default_str();

    ScoreOpts sc;
    auto* c_sc = app.add_subcommand("score", "Attach mean CVSS scores to parsed UASs");
    c_sc->add_option("--input", sc.input, "Parsed JSONL")->required();
    c_sc->add_option("--aliases", sc.aliases, "Alias table (default: built-in)");
    c_sc->add_option("--fixture", sc.fixture, "Offline CPE -> CVE fixture JSON");
    c_sc->add_flag("--live", sc.live, "Query the NVD API");
    c_sc->add_option("--cache", sc.cache, "Persistent CVE cache (JSONL)");
    c_sc->add_option("--max-requests", sc.max_requests, "Requests per rate window (default 5, 50 with key)");
    c_sc->add_option("--rate-window-ms", sc.rate_window_ms, "Rate window length (default 30000)");
    c_sc->add_option("--base-url", sc.base_url, "NVD CVE endpoint override");
    c_sc->add_option("--output", sc.output)->capture_default_str();

    AggregateOpts ag;
    auto* c_ag = app.add_subcommand("aggregate", "Aggregate scored UASs per CIDR range");
    c_ag->add_option("--input", ag.input, "Scored JSONL")->required();
    c_ag->add_option("--format", ag.format)->check(CLI::IsMember({"csv", "geojson"}))->capture_default_str();
    c_ag->add_option("--geo", ag.geo, "CSV cidr,lat,lon");
    c_ag->add_option("--output", ag.output)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*c_pre) return run_preprocess(pre);
        if (*c_gen) return run_generate(gen);
        if (*c_emb) return run_train_embeddings(emb);
        if (*c_tr) return run_train(tr);
        if (*c_ev) return run_eval(ev);
        if (*c_pa) return run_parse(pa);
        if (*c_sc) return run_score(sc);
        if (*c_ag) return run_aggregate(ag);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n' << app.help();
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
