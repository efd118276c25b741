#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bidiseq/analysis.hpp"
#include "bidiseq/checkpoint.hpp"
#include "bidiseq/core.hpp"
#include "bidiseq/decoder.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/kernels.hpp"
#include "bidiseq/model.hpp"
#include "bidiseq/selftest.hpp"
#include "bidiseq/training.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bidiseq::cli {
namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Bad flags, config files or inputs: exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
    if (!out) throw Error("failed writing " + path.string());
}

std::string format_double(double x) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, r.ptr);
}

std::vector<std::string> split_tabs(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return out;
}

// Options of `app` left unset on the command line are filled from a JSON
// object whose keys are the long flag names with '-' written as '_'.
void apply_config(CLI::App& app, const std::string& path) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw UsageError("config " + path + ": " + e.what());
    }
    if (!doc.is_object()) throw UsageError("config " + path + " must hold a JSON object");
    for (const auto& [key, value] : doc.items()) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = nullptr;
        try {
            if (key != "config") opt = app.get_option(flag);
        } catch (const CLI::OptionNotFound&) {
        }
        if (!opt) throw UsageError("unknown config key '" + key + "'");
        if (opt->count() > 0 || value.is_null()) continue;
        std::string text;
        if (value.is_string()) {
            text = value.get<std::string>();
        } else if (value.is_boolean()) {
            text = value.get<bool>() ? "true" : "false";
        } else if (value.is_number()) {
            text = value.dump();
        } else {
            throw UsageError("config key '" + key + "' must be a string, number or boolean");
        }
        opt->add_result(text);
        opt->run_callback();
    }
}

void write_config(const fs::path& output, const json& config) {
    write_file(fs::path(output.string() + ".config.json"), config.dump(2) + "\n");
}

template <class T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

UnkMode parse_unk_mode(std::string_view name) {
    if (name == "simple") return UnkMode::simple;
    if (name == "indexed") return UnkMode::indexed;
    throw UsageError("unknown UNK mode '" + std::string(name) + "' (expected simple or indexed)");
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    std::string train;
    std::string dev;
    std::string output;
    std::string log;
    std::string objective = "xh";
    std::string context_mode = "full";
    std::string preset = "S";
    std::optional<std::size_t> embed_dim;
    std::optional<std::size_t> ffn_dim;
    std::optional<std::size_t> layers;
    std::optional<std::size_t> heads;
    std::optional<double> learning_rate;
    std::optional<double> dropout;
    std::size_t max_len = 64;
    std::size_t batch_size = 800;
    std::size_t max_steps = 100000;
    std::size_t warmup_steps = 4000;
    double initial_lr = 1e-7;
    std::size_t eval_every = 500;
    std::size_t patience = 7500;
    std::optional<double> stop_at_accuracy;
    std::size_t eval_width = 5;
    std::size_t max_len_margin = 10;
    std::size_t dev_limit = 0;
    bool temper = true;
    double temper_warmup = 4000.0;
    double temper_tau0 = 50.0;
    double temper_exponent = 2.0;
    std::string columns = "lemma,tags,form";
    std::string unk_mode = "simple";
    std::uint64_t unk_threshold = 100;
    std::size_t indexed_unks = kDefaultIndexedUnks;
    bool layered = false;
    std::uint64_t seed = 1;
};

void register_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--config", a.config, "JSON file with any of the options below");
    app.add_option("--train", a.train, "training TSV");
    app.add_option("--dev", a.dev, "development TSV");
    app.add_option("--output", a.output, "checkpoint path");
    app.add_option("--log", a.log, "JSON-lines log (default <output>.log.jsonl)");
    app.add_option("--objective", a.objective, "xh, xh-rand or mml");
    app.add_option("--context-mode", a.context_mode, "cross-entropy contexts: full or strict");
    app.add_option("--preset", a.preset, "model size: S, M, L or custom");
    app.add_option("--embed-dim", a.embed_dim);
    app.add_option("--ffn-dim", a.ffn_dim);
    app.add_option("--layers", a.layers);
    app.add_option("--heads", a.heads);
    app.add_option("--learning-rate", a.learning_rate, "peak learning rate");
    app.add_option("--dropout", a.dropout);
    app.add_option("--max-len", a.max_len, "longest source and output the model accepts");
    app.add_option("--batch-size", a.batch_size);
    app.add_option("--max-steps", a.max_steps);
    app.add_option("--warmup-steps", a.warmup_steps);
    app.add_option("--initial-lr", a.initial_lr);
    app.add_option("--eval-every", a.eval_every);
    app.add_option("--patience", a.patience, "steps without dev improvement before stopping");
    app.add_option("--stop-at-accuracy", a.stop_at_accuracy);
    app.add_option("--eval-width", a.eval_width, "beam width for dev evaluation");
    app.add_option("--max-len-margin", a.max_len_margin, "decode at most |lemma| + margin tokens");
    app.add_option("--dev-limit", a.dev_limit, "evaluate on the first N dev rows (0: all)");
    app.add_flag("--temper,!--no-temper", a.temper, "order temperature warmup (mml)");
    app.add_option("--temper-warmup", a.temper_warmup);
    app.add_option("--temper-tau0", a.temper_tau0);
    app.add_option("--temper-exponent", a.temper_exponent);
    app.add_option("--columns", a.columns, "column order of the TSV files");
    app.add_option("--unk-mode", a.unk_mode, "simple or indexed");
    app.add_option("--unk-threshold", a.unk_threshold, "indexed mode: characters rarer than this become UNK_k");
    app.add_option("--indexed-unks", a.indexed_unks);
    app.add_flag("--layered", a.layered, "split parentheses in tags into their own tokens");
    app.add_option("--seed", a.seed);
}

json train_config_json(const TrainArgs& a, const model::ModelConfig& m) {
    json j;
    j["train"] = a.train;
    j["dev"] = a.dev;
    j["output"] = a.output;
    j["log"] = a.log;
    j["objective"] = a.objective;
    j["context_mode"] = a.context_mode;
    j["preset"] = a.preset;
    j["embed_dim"] = m.embed_dim;
    j["ffn_dim"] = m.ffn_dim;
    j["layers"] = m.n_layers;
    j["heads"] = m.n_heads;
    j["learning_rate"] = m.learning_rate;
    j["dropout"] = m.dropout;
    j["max_len"] = m.max_len;
    j["batch_size"] = a.batch_size;
    j["max_steps"] = a.max_steps;
    j["warmup_steps"] = a.warmup_steps;
    j["initial_lr"] = a.initial_lr;
    j["eval_every"] = a.eval_every;
    j["patience"] = a.patience;
    j["stop_at_accuracy"] = optional_json(a.stop_at_accuracy);
    j["eval_width"] = a.eval_width;
    j["max_len_margin"] = a.max_len_margin;
    j["dev_limit"] = a.dev_limit;
    j["temper"] = a.temper;
    j["temper_warmup"] = a.temper_warmup;
    j["temper_tau0"] = a.temper_tau0;
    j["temper_exponent"] = a.temper_exponent;
    j["columns"] = a.columns;
    j["unk_mode"] = a.unk_mode;
    j["unk_threshold"] = a.unk_threshold;
    j["indexed_unks"] = a.indexed_unks;
    j["layered"] = a.layered;
    j["seed"] = a.seed;
    return j;
}

std::vector<Example> encode_all(std::span<const RawExample> raw, const Vocabulary& vocab, const UnkPolicy& policy,
                                bool layered) {
    std::vector<Example> out;
    out.reserve(raw.size());
    for (const auto& r : raw) out.push_back(apply_unk_policy(r, vocab, policy, layered).example);
    return out;
}

int cmd_train(CLI::App& app, TrainArgs& a, std::ostream& out) {
    if (!a.config.empty()) apply_config(app, a.config);
    if (a.train.empty() || a.dev.empty() || a.output.empty()) {
        throw UsageError("train needs --train, --dev and --output");
    }
    if (a.log.empty()) a.log = a.output + ".log.jsonl";

    training::TrainOptions opts;
    model::ModelConfig mc;
    ColumnOrder columns{};
    UnkPolicy policy;
    try {
        opts.objective = losses::parse_objective(a.objective);
        opts.context_mode = losses::parse_context_mode(a.context_mode);
        mc = model::ModelConfig::from_preset(model::parse_preset(a.preset));
        if (a.embed_dim) mc.embed_dim = *a.embed_dim;
        if (a.ffn_dim) mc.ffn_dim = *a.ffn_dim;
        if (a.layers) mc.n_layers = *a.layers;
        if (a.heads) mc.n_heads = *a.heads;
        if (a.learning_rate) mc.learning_rate = *a.learning_rate;
        if (a.dropout) mc.dropout = *a.dropout;
        mc.max_len = a.max_len;
        mc.validate();
        columns = parse_column_order(a.columns);
        policy.mode = parse_unk_mode(a.unk_mode);
        policy.freq_threshold = a.unk_threshold;
        opts.temper = a.temper;
        opts.temper_schedule = {a.temper_warmup, a.temper_tau0, a.temper_exponent};
        opts.temper_schedule.validate();
        training::LrSchedule{a.initial_lr, mc.learning_rate, a.warmup_steps}.validate();
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    opts.batch_size = a.batch_size;
    opts.max_steps = a.max_steps;
    opts.warmup_steps = a.warmup_steps;
    opts.initial_lr = a.initial_lr;
    opts.eval_every = a.eval_every;
    opts.patience = a.patience;
    opts.stop_at_accuracy = a.stop_at_accuracy;
    opts.eval_width = a.eval_width;
    opts.max_len_margin = a.max_len_margin;
    opts.dev_limit = a.dev_limit;
    opts.seed = a.seed;

    std::vector<RawExample> train_raw, dev_raw;
    try {
        train_raw = load_tsv(a.train, columns, true);
        dev_raw = load_tsv(a.dev, columns, true);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    const Vocabulary vocab = build_vocab(train_raw, a.layered, a.indexed_unks);
    const auto train_set = encode_all(train_raw, vocab, policy, a.layered);
    const auto dev_set = encode_all(dev_raw, vocab, policy, a.layered);

    write_config(a.output, train_config_json(a, mc));
    std::ofstream log(a.log, std::ios::binary);
    if (!log) throw Error("cannot write " + a.log);

    model::Transformer<float> init(mc, vocab.size(), a.seed);
    auto result = training::train(std::move(init), vocab, train_set, dev_set, opts, [&](const training::EvalPoint& p) {
        json line;
        line["step"] = p.step;
        line["train_loss"] = p.train_loss;
        line["dev_accuracy"] = p.dev_accuracy;
        line["lr"] = p.lr;
        line["seconds"] = p.seconds;
        log << line.dump() << "\n" << std::flush;
    });

    auto& meta = result.best.metadata;
    meta["objective"] = a.objective;
    meta["context_mode"] = a.context_mode;
    meta["columns"] = format_column_order(columns);
    meta["unk_mode"] = a.unk_mode;
    meta["unk_threshold"] = std::to_string(a.unk_threshold);
    meta["layered"] = a.layered ? "true" : "false";
    model::save_checkpoint(result.best, a.output);

    json done;
    done["event"] = "done";
    done["steps"] = result.steps;
    done["best_step"] = result.best_step;
    done["best_dev_accuracy"] = result.best_accuracy;
    log << done.dump() << "\n";
    out << "trained " << result.steps << " steps; best dev accuracy " << result.best_accuracy << " at step "
        << result.best_step << "; wrote " << a.output << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// decode

struct DecodeArgs {
    std::string config;
    std::string checkpoint;
    std::string input;
    std::string output;
    std::size_t width = 5;
    std::string rerank = "none";
    std::string force = "none";
    std::string order_head = "auto";
    std::string columns;
    std::size_t max_len_margin = 10;
};

void register_decode(CLI::App& app, DecodeArgs& a) {
    app.add_option("--config", a.config, "JSON file with any of the options below");
    app.add_option("--checkpoint", a.checkpoint);
    app.add_option("--input", a.input, "TSV of lemma and tags (a form column is ignored)");
    app.add_option("--output", a.output, "predictions TSV (default stdout)");
    app.add_option("--width", a.width, "beam width");
    app.add_option("--rerank", a.rerank, "none or marginal");
    app.add_option("--force", a.force, "none, l2r or r2l");
    app.add_option("--order-head", a.order_head, "auto, learned or uniform");
    app.add_option("--columns", a.columns, "input column order (default: the training order)");
    app.add_option("--max-len-margin", a.max_len_margin, "decode at most |lemma| + margin tokens");
}

const char* const kPredictionHeader = "lemma\ttags\tprediction\tlog_joint\tlog_marginal\tordering\tstatus";

struct DecodedRow {
    std::string prediction;
    std::string log_joint = "-";
    std::string log_marginal = "-";
    std::string ordering = "-";
    std::string status = "ok";
};

std::string meta_or(const model::Checkpoint& c, const std::string& key, const std::string& fallback) {
    const auto it = c.metadata.find(key);
    return it == c.metadata.end() ? fallback : it->second;
}

int cmd_decode(CLI::App& app, DecodeArgs& a, std::ostream& out) {
    if (!a.config.empty()) apply_config(app, a.config);
    if (a.checkpoint.empty() || a.input.empty()) throw UsageError("decode needs --checkpoint and --input");
    if (a.width == 0) throw UsageError("--width must be positive");
    if (a.rerank != "none" && a.rerank != "marginal") throw UsageError("--rerank must be none or marginal");
    if (a.force != "none" && a.force != "l2r" && a.force != "r2l") throw UsageError("--force must be none, l2r or r2l");
    if (a.order_head != "auto" && a.order_head != "learned" && a.order_head != "uniform") {
        throw UsageError("--order-head must be auto, learned or uniform");
    }

    model::Checkpoint ckpt;
    std::vector<RawExample> rows;
    UnkPolicy policy;
    bool layered = false;
    model::OrderHead head{};
    try {
        ckpt = model::load_checkpoint(a.checkpoint);
        if (a.columns.empty()) a.columns = meta_or(ckpt, "columns", "lemma,tags,form");
        rows = load_tsv(a.input, parse_column_order(a.columns), false);
        policy.mode = parse_unk_mode(meta_or(ckpt, "unk_mode", "simple"));
        policy.freq_threshold = std::stoull(meta_or(ckpt, "unk_threshold", "100"));
        layered = meta_or(ckpt, "layered", "false") == "true";
        if (a.order_head == "auto") {
            head = model::default_order_head(losses::parse_objective(meta_or(ckpt, "objective", "xh")));
        } else {
            head = a.order_head == "learned" ? model::OrderHead::learned : model::OrderHead::uniform;
        }
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
    if (!a.output.empty()) {
        json cfg;
        cfg["checkpoint"] = a.checkpoint;
        cfg["input"] = a.input;
        cfg["output"] = a.output;
        cfg["width"] = a.width;
        cfg["rerank"] = a.rerank;
        cfg["force"] = a.force;
        cfg["order_head"] = a.order_head;
        cfg["columns"] = a.columns;
        cfg["max_len_margin"] = a.max_len_margin;
        write_config(a.output, cfg);
    }

    const auto model = ckpt.model();
    std::vector<DecodedRow> decoded(rows.size());
    auto run_row = [&](std::size_t r) {
        auto& row = decoded[r];
        try {
            const auto encoded = apply_unk_policy(rows[r], ckpt.vocab, policy, layered);
            const auto& ex = encoded.example;
            model::ModelScorer<float> base(model, ex.source(), head);
            std::optional<ForcedOrderScorer> forced;
            if (a.force != "none") forced.emplace(base, a.force == "l2r" ? Direction::L2R : Direction::R2L);
            const Scorer& scorer = forced ? static_cast<const Scorer&>(*forced) : base;
            auto result = decoder::beam_search(scorer, a.width, decoder::default_max_len(ex.lemma_tokens.size(),
                                                                                          a.max_len_margin));
            if (a.rerank == "marginal") result = decoder::rerank_marginal(scorer, std::move(result));
            decoder::render_surfaces(result, ckpt.vocab, encoded.unk_map);
            const auto& top = result.candidates.front();
            row.prediction = top.surface;
            row.log_joint = format_double(top.log_joint);
            if (top.log_marginal) row.log_marginal = format_double(*top.log_marginal);
            row.ordering = format_ordering(top.ordering);
        } catch (const std::exception& e) {
            row = DecodedRow{};
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), '\t', ' ');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            row.status = "error: " + msg;
        }
    };
    const int threads = kernels::thread_count();
#ifdef _OPENMP
    const auto n = static_cast<std::ptrdiff_t>(rows.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads) if (threads > 1)
    for (std::ptrdiff_t r = 0; r < n; ++r) run_row(static_cast<std::size_t>(r));
#else
    (void)threads;
    for (std::size_t r = 0; r < rows.size(); ++r) run_row(r);
#endif

    std::ostringstream text;
    text << kPredictionHeader << "\n";
    std::size_t failed = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& d = decoded[r];
        if (d.status != "ok") ++failed;
        text << rows[r].lemma << '\t' << rows[r].tags << '\t' << d.prediction << '\t' << d.log_joint << '\t'
             << d.log_marginal << '\t' << d.ordering << '\t' << d.status << '\n';
    }
    if (a.output.empty()) {
        out << text.str();
    } else {
        write_file(a.output, text.str());
    }
    return !rows.empty() && failed == rows.size() ? kExitFailure : kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate / analyze

struct PredictionRow {
    std::string lemma;
    std::string tags;
    std::string prediction;
    dp::OrderingPath ordering;
};

// Accepts decode output or any TSV whose first three columns are lemma, tags
// and prediction; a fourth+ column layout must follow decode's header.
std::vector<PredictionRow> load_predictions(const std::string& path) {
    const auto text = read_file(path);
    std::vector<PredictionRow> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (lineno == 1 && line == kPredictionHeader) continue;
        const auto fields = split_tabs(line);
        if (fields.size() < 3) throw UsageError(path + ":" + std::to_string(lineno) + ": expected at least 3 columns");
        PredictionRow row{fields[0], fields[1], fields[2], {}};
        if (fields.size() >= 6 && fields[5] != "-" && !fields[5].empty()) {
            try {
                row.ordering = parse_ordering(fields[5]);
            } catch (const Error& e) {
                throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        out.push_back(std::move(row));
    }
    return out;
}

std::vector<RawExample> load_gold(const std::string& path, const std::string& columns) {
    try {
        return load_tsv(path, parse_column_order(columns), true);
    } catch (const Error& e) {
        throw UsageError(e.what());
    }
}

std::vector<analysis::ResultRow> join_rows(const std::vector<PredictionRow>& preds,
                                           const std::vector<RawExample>& gold, const std::string& what) {
    if (preds.size() != gold.size()) {
        throw UsageError(what + " has " + std::to_string(preds.size()) + " rows but the gold file has " +
                         std::to_string(gold.size()));
    }
    std::vector<analysis::ResultRow> out;
    for (std::size_t r = 0; r < preds.size(); ++r) {
        if (preds[r].lemma != gold[r].lemma || preds[r].tags != gold[r].tags) {
            throw UsageError(what + " row " + std::to_string(r + 1) + " does not match the gold lemma and tags");
        }
        out.push_back({gold[r].lemma, gold[r].tags, gold[r].form, preds[r].prediction, preds[r].ordering});
    }
    return out;
}

struct EvaluateArgs {
    std::string config;
    std::string predictions;
    std::string gold;
    std::string baseline;
    std::string output;
    std::string length_csv;
    std::string tag_csv;
    std::string columns = "lemma,tags,form";
    double alpha = 0.05;
    std::size_t resamples = 10000;
    std::uint64_t seed = 1;
    std::size_t min_stem = 3;
    std::size_t length_overflow = 16;
};

void register_evaluate(CLI::App& app, EvaluateArgs& a) {
    app.add_option("--config", a.config, "JSON file with any of the options below");
    app.add_option("--predictions", a.predictions, "decode output");
    app.add_option("--gold", a.gold, "gold TSV");
    app.add_option("--baseline", a.baseline, "predictions of a system to compare against");
    app.add_option("--output", a.output, "report JSON (default stdout)");
    app.add_option("--length-csv", a.length_csv, "per-length accuracy CSV");
    app.add_option("--tag-csv", a.tag_csv, "per-tag accuracy CSV");
    app.add_option("--columns", a.columns, "gold column order");
    app.add_option("--alpha", a.alpha, "significance level");
    app.add_option("--resamples", a.resamples, "Monte Carlo permutations when exact enumeration is too large");
    app.add_option("--seed", a.seed);
    app.add_option("--min-stem", a.min_stem, "shortest stem the morphology classifier accepts");
    app.add_option("--length-overflow", a.length_overflow, "pool gold lengths at or above this");
}

int cmd_evaluate(CLI::App& app, EvaluateArgs& a, std::ostream& out) {
    if (!a.config.empty()) apply_config(app, a.config);
    if (a.predictions.empty() || a.gold.empty()) throw UsageError("evaluate needs --predictions and --gold");
    if (!(a.alpha > 0.0 && a.alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");
    if (a.resamples == 0) throw UsageError("--resamples must be positive");
    const auto gold = load_gold(a.gold, a.columns);
    const auto results = join_rows(load_predictions(a.predictions), gold, "predictions");
    if (results.empty()) throw UsageError("no rows to evaluate");
    std::optional<std::vector<bool>> baseline_correct;
    if (!a.baseline.empty()) {
        const auto base = join_rows(load_predictions(a.baseline), gold, "baseline");
        baseline_correct.emplace();
        for (const auto& r : base) baseline_correct->push_back(r.correct());
    }
    analysis::EvalOptions opts;
    opts.min_stem = a.min_stem;
    opts.length_overflow = a.length_overflow;
    opts.alpha = a.alpha;
    opts.resamples = a.resamples;
    opts.seed = a.seed;

    if (!a.output.empty()) {
        json cfg;
        cfg["predictions"] = a.predictions;
        cfg["gold"] = a.gold;
        cfg["baseline"] = a.baseline;
        cfg["output"] = a.output;
        cfg["length_csv"] = a.length_csv;
        cfg["tag_csv"] = a.tag_csv;
        cfg["columns"] = a.columns;
        cfg["alpha"] = a.alpha;
        cfg["resamples"] = a.resamples;
        cfg["seed"] = a.seed;
        cfg["min_stem"] = a.min_stem;
        cfg["length_overflow"] = a.length_overflow;
        write_config(a.output, cfg);
    }

    // std::vector<bool> has no contiguous storage to span over.
    std::unique_ptr<bool[]> flags;
    std::optional<std::span<const bool>> baseline_span;
    if (baseline_correct) {
        flags = std::make_unique<bool[]>(baseline_correct->size());
        std::copy(baseline_correct->begin(), baseline_correct->end(), flags.get());
        baseline_span = std::span<const bool>(flags.get(), baseline_correct->size());
    }
    const auto report = analysis::evaluate(results, opts, baseline_span);
    const auto text = analysis::report_json(report);
    if (a.output.empty()) {
        out << text << "\n";
    } else {
        write_file(a.output, text + "\n");
    }
    if (!a.length_csv.empty()) write_file(a.length_csv, analysis::buckets_csv(report.length_buckets));
    if (!a.tag_csv.empty()) write_file(a.tag_csv, analysis::buckets_csv(report.tag_buckets));
    return kExitOk;
}

struct AnalyzeArgs {
    std::string config;
    std::string input;
    std::string predictions;
    std::string output;
    std::string summary;
    std::string columns = "lemma,tags,form";
    std::size_t min_stem = 3;
};

void register_analyze(CLI::App& app, AnalyzeArgs& a) {
    app.add_option("--config", a.config, "JSON file with any of the options below");
    app.add_option("--input", a.input, "gold TSV");
    app.add_option("--predictions", a.predictions, "decode output to judge against the morphology");
    app.add_option("--output", a.output, "per-row TSV (default stdout)");
    app.add_option("--summary", a.summary, "summary JSON (default stderr)");
    app.add_option("--columns", a.columns, "gold column order");
    app.add_option("--min-stem", a.min_stem, "shortest stem the classifier accepts");
}

int cmd_analyze(CLI::App& app, AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
    if (!a.config.empty()) apply_config(app, a.config);
    if (a.input.empty()) throw UsageError("analyze needs --input");
    const auto gold = load_gold(a.input, a.columns);
    std::vector<analysis::ResultRow> results;
    const bool judged = !a.predictions.empty();
    if (judged) results = join_rows(load_predictions(a.predictions), gold, "predictions");
    if (!a.output.empty()) {
        json cfg;
        cfg["input"] = a.input;
        cfg["predictions"] = a.predictions;
        cfg["output"] = a.output;
        cfg["summary"] = a.summary;
        cfg["columns"] = a.columns;
        cfg["min_stem"] = a.min_stem;
        write_config(a.output, cfg);
    }

    std::ostringstream rows;
    rows << "lemma\ttags\tform\tclass\tstem_begin\tstem_end";
    if (judged) rows << "\tprediction\tordering\tanalysis";
    rows << "\n";
    std::size_t classes[3] = {0, 0, 0};
    for (std::size_t r = 0; r < gold.size(); ++r) {
        const auto& g = gold[r];
        const auto morph = analysis::classify_morphology(g.lemma, g.form, a.min_stem);
        ++classes[static_cast<int>(morph.label)];
        rows << g.lemma << '\t' << g.tags << '\t' << g.form << '\t' << analysis::morph_label_name(morph.label) << '\t'
             << morph.stem_begin << '\t' << morph.stem_end;
        if (judged) {
            const auto& p = results[r];
            std::string label = "unjudged";
            try {
                label = std::string(analysis::analysis_label_name(
                    analysis::correct_analysis(p.prediction, p.ordering, p.gold, morph)));
            } catch (const Error&) {
            }
            rows << '\t' << p.prediction << '\t' << (p.ordering.empty() ? "-" : format_ordering(p.ordering)) << '\t'
                 << label;
        }
        rows << '\n';
    }

    json summary;
    summary["count"] = gold.size();
    json cls;
    for (auto label : {analysis::MorphLabel::prefix_only, analysis::MorphLabel::suffix_only,
                       analysis::MorphLabel::neither}) {
        cls[std::string(analysis::morph_label_name(label))] = classes[static_cast<int>(label)];
    }
    summary["classes"] = cls;
    if (judged) {
        const auto b = analysis::morph_breakdown(results, a.min_stem);
        json bj;
        bj["correct_agree"] = b.correct_agree;
        bj["correct_disagree"] = b.correct_disagree;
        bj["incorrect"] = b.incorrect;
        bj["unjudged"] = b.unjudged;
        bj["agree_among_correct"] = b.correct_agree + b.correct_disagree > 0 ? json(b.agree_among_correct())
                                                                             : json(nullptr);
        summary["breakdown"] = bj;
    }
    if (a.output.empty()) {
        out << rows.str();
    } else {
        write_file(a.output, rows.str());
    }
    if (a.summary.empty()) {
        err << summary.dump(2) << "\n";
    } else {
        write_file(a.summary, summary.dump(2) + "\n");
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// selftest

int cmd_selftest(std::uint64_t seed, std::ostream& out, std::ostream& err) {
    const auto checks = selftest::run_all(seed);
    out << std::left << std::setw(18) << "property" << std::setw(6) << "ok" << std::setw(10) << "seconds"
        << "detail\n";
    std::vector<std::string> failed;
    for (const auto& c : checks) {
        std::ostringstream secs;
        secs << std::fixed << std::setprecision(2) << c.seconds;
        out << std::left << std::setw(18) << c.name << std::setw(6) << (c.passed ? "PASS" : "FAIL") << std::setw(10)
            << secs.str() << c.detail << "\n";
        if (!c.passed) failed.push_back(c.name);
    }
    if (failed.empty()) return kExitOk;
    err << "selftest failed:";
    for (const auto& f : failed) err << ' ' << f;
    err << "\n";
    return kExitFailure;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
    kernels::tune_allocator();
    CLI::App app{"Outside-in sequence decoding: training, decoding and evaluation"};
    app.name("bidiseq");
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: BIDISEQ_THREADS, else all cores)")
        ->check(CLI::PositiveNumber);

    TrainArgs train_args;
    DecodeArgs decode_args;
    EvaluateArgs evaluate_args;
    AnalyzeArgs analyze_args;
    std::uint64_t selftest_seed = 1;
    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    register_train(*train, train_args);
    auto* decode = app.add_subcommand("decode", "beam-search predictions for a TSV");
    register_decode(*decode, decode_args);
    auto* evaluate = app.add_subcommand("evaluate", "accuracy, breakdowns and significance of predictions");
    register_evaluate(*evaluate, evaluate_args);
    auto* analyze = app.add_subcommand("analyze", "stem/affix classes and agreement of orderings with them");
    register_analyze(*analyze, analyze_args);
    auto* self = app.add_subcommand("selftest", "run the built-in correctness checks");
    self->add_option("--seed", selftest_seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }
    if (threads > 0) kernels::set_thread_count(threads);

    try {
        if (train->parsed()) return cmd_train(*train, train_args, out);
        if (decode->parsed()) return cmd_decode(*decode, decode_args, out);
        if (evaluate->parsed()) return cmd_evaluate(*evaluate, evaluate_args, out);
        if (analyze->parsed()) return cmd_analyze(*analyze, analyze_args, out, err);
        if (self->parsed()) return cmd_selftest(selftest_seed, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const CLI::Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace bidiseq::cli
