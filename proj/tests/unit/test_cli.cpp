#include "doctest.h"

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
    int code = -1;
    std::string out;
};

// Runs the CLI with stdout captured and stderr discarded.
Result cli(const std::string& args) {
    const std::string command = std::string("BIDISEQ_THREADS=1 '") + BIDISEQ_CLI_PATH + "' " + args + " 2>/dev/null";
    Result r;
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

std::vector<std::vector<std::string>> tsv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> fields;
        std::size_t start = 0, tab;
        while ((tab = line.find('\t', start)) != std::string::npos) {
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        fields.push_back(line.substr(start));
        rows.push_back(std::move(fields));
    }
    return rows;
}

// A scratch directory with a small suffix-language corpus and one trained model.
struct Workspace {
    fs::path dir;
    fs::path train, dev, model;

    Workspace() {
        dir = fs::temp_directory_path() / ("bidiseq_cli_" + std::to_string(getpid()));
        fs::create_directories(dir);
        std::mt19937_64 rng(5);
        auto write = [&](const fs::path& p, std::size_t n) {
            std::string text;
            for (const auto& r : fixtures::suffix_language(rng, n)) text += r.lemma + "\t" + r.tags + "\t" + r.form + "\n";
            spit(p, text);
        };
        train = dir / "train.tsv";
        dev = dir / "dev.tsv";
        model = dir / "model.ckpt";
        write(train, 30);
        write(dev, 6);
    }
    ~Workspace() { fs::remove_all(dir); }

    std::string train_args(const fs::path& output) const {
        return "train --train '" + train.string() + "' --dev '" + dev.string() + "' --output '" + output.string() +
               "' --objective mml --preset custom --embed-dim 16 --ffn-dim 16 --layers 1 --heads 2"
               " --batch-size 8 --max-steps 12 --warmup-steps 4 --eval-every 6 --dev-limit 3 --max-len 24 --seed 3";
    }
};

Workspace& workspace() {
    static Workspace w;
    static const bool trained = [] {
        const auto r = cli(w.train_args(w.model));
        return r.code == 0;
    }();
    REQUIRE(trained);
    return w;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
    CHECK(cli("--help").code == 0);
    CHECK(cli("").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("train --bogus-flag 1").code == 2);
    CHECK(cli("train").code == 2);
    CHECK(cli("decode --checkpoint /nonexistent.ckpt --input /nonexistent.tsv").code == 2);
    auto& w = workspace();
    const std::string files = " --train '" + w.train.string() + "' --dev '" + w.dev.string() + "' --output '" +
                              (w.dir / "x.ckpt").string() + "'";
    CHECK(cli("train" + files + " --objective xent").code == 2);
    CHECK(cli("train" + files + " --preset S --embed-dim 16").code == 2);
    CHECK(cli("train" + files + " --unk-mode fancy").code == 2);
    CHECK(cli("train --train /nonexistent.tsv --dev /nonexistent.tsv --output '" + (w.dir / "x.ckpt").string() + "'")
              .code == 2);
    CHECK_FALSE(fs::exists(w.dir / "x.ckpt"));
}

TEST_CASE("train writes a checkpoint, a resolved config and a log") {
    auto& w = workspace();
    CHECK(fs::exists(w.model));
    const auto config = nlohmann::json::parse(slurp(w.model.string() + ".config.json"));
    CHECK(config["objective"] == "mml");
    CHECK(config["embed_dim"] == 16);
    CHECK(config["batch_size"] == 8);
    CHECK(config["stop_at_accuracy"].is_null());

    std::istringstream log(slurp(w.model.string() + ".log.jsonl"));
    std::vector<nlohmann::json> lines;
    for (std::string line; std::getline(log, line);) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 3);
    CHECK(lines[0]["step"] == 6);
    CHECK(lines[1]["step"] == 12);
    for (const char* key : {"train_loss", "dev_accuracy", "lr", "seconds"}) CHECK(lines[0].contains(key));
    CHECK(lines[2]["event"] == "done");
    CHECK(lines[2]["steps"] == 12);
}

TEST_CASE("the resolved config reproduces the run") {
    auto& w = workspace();
    const auto again = w.dir / "again.ckpt";
    const auto r = cli("train --config '" + w.model.string() + ".config.json' --output '" + again.string() +
                       "' --log '" + (w.dir / "again.log").string() + "'");
    REQUIRE(r.code == 0);
    CHECK(slurp(again) == slurp(w.model));
}

TEST_CASE("config files reject unknown keys") {
    auto& w = workspace();
    const auto bad = w.dir / "bad.json";
    spit(bad, R"({"train": "a.tsv", "bach_size": 3})");
    CHECK(cli("train --config '" + bad.string() + "'").code == 2);
    spit(bad, R"({"config": "other.json"})");
    CHECK(cli("train --config '" + bad.string() + "'").code == 2);
    spit(bad, "[1, 2]");
    CHECK(cli("train --config '" + bad.string() + "'").code == 2);
    CHECK(cli("train --config '" + (w.dir / "missing.json").string() + "'").code == 2);
}

TEST_CASE("decode output") {
    auto& w = workspace();
    const auto r = cli("decode --checkpoint '" + w.model.string() + "' --input '" + w.dev.string() + "' --width 3");
    REQUIRE(r.code == 0);
    const auto rows = tsv(r.out);
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == std::vector<std::string>{"lemma", "tags", "prediction", "log_joint", "log_marginal", "ordering",
                                              "status"});
    const auto gold = tsv(slurp(w.dev));
    for (std::size_t k = 1; k < rows.size(); ++k) {
        REQUIRE(rows[k].size() == 7);
        CHECK(rows[k][0] == gold[k - 1][0]);
        CHECK(rows[k][4] == "-");
        CHECK(rows[k][6] == "ok");
        CHECK(std::stod(rows[k][3]) <= 0.0);
        // UNK with nothing to copy renders as nothing, so the surface may be shorter.
        CHECK(!rows[k][5].empty());
        CHECK(rows[k][5].find_first_not_of("LR") == std::string::npos);
        CHECK(rows[k][5].size() >= rows[k][2].size());
    }

    const auto forced = tsv(cli("decode --checkpoint '" + w.model.string() + "' --input '" + w.dev.string() +
                                "' --force r2l --rerank marginal")
                                .out);
    for (std::size_t k = 1; k < forced.size(); ++k) {
        CHECK(forced[k][5].find('L') == std::string::npos);
        CHECK(forced[k][4] != "-");
    }

    const auto out = w.dir / "pred.tsv";
    CHECK(cli("decode --checkpoint '" + w.model.string() + "' --input '" + w.dev.string() + "' --output '" +
              out.string() + "'")
              .code == 0);
    CHECK(tsv(slurp(out)).size() == 7);
    CHECK(fs::exists(out.string() + ".config.json"));
    CHECK(cli("decode --checkpoint '" + w.model.string() + "' --input '" + w.dev.string() + "' --rerank best")
              .code == 2);
}

TEST_CASE("decode reports failing rows") {
    auto& w = workspace();
    const auto input = w.dir / "long.tsv";
    const std::string long_lemma(40, 'a');
    spit(input, "abc\tA\n" + long_lemma + "\tB\n");
    const auto r = cli("decode --checkpoint '" + w.model.string() + "' --input '" + input.string() + "'");
    CHECK(r.code == 0);
    const auto rows = tsv(r.out);
    REQUIRE(rows.size() == 3);
    CHECK(rows[1][6] == "ok");
    CHECK(rows[2][6].rfind("error: ", 0) == 0);
    CHECK(rows[2][2].empty());

    spit(input, long_lemma + "\tB\n");
    CHECK(cli("decode --checkpoint '" + w.model.string() + "' --input '" + input.string() + "'").code == 1);
}

TEST_CASE("evaluate") {
    auto& w = workspace();
    const auto gold = w.dir / "gold.tsv";
    const auto pred = w.dir / "eval_pred.tsv";
    spit(gold,
         "walk\tV;PST\twalked\nhappy\tADJ;NEG\tunhappy\njump\tV;PST\tjumped\ngo\tV;PST\twent\nplay\tV;PST\tplayed\n");
    spit(pred,
         "lemma\ttags\tprediction\tlog_joint\tlog_marginal\tordering\tstatus\n"
         "walk\tV;PST\twalked\t-1\t-\tLLLLRR\tok\n"
         "happy\tADJ;NEG\tunhappy\t-1\t-\tLLRRRRR\tok\n"
         "jump\tV;PST\tjumpd\t-1\t-\tLLLLL\tok\n"
         "go\tV;PST\twend\t-1\t-\tLLLL\tok\n"
         "play\tV;PST\tplayed\t-1\t-\tLLLRRR\tok\n");
    const auto csv = w.dir / "lengths.csv";
    auto r = cli("evaluate --predictions '" + pred.string() + "' --gold '" + gold.string() + "' --length-csv '" +
                 csv.string() + "'");
    REQUIRE(r.code == 0);
    auto report = nlohmann::json::parse(r.out);
    CHECK(report["count"] == 5);
    CHECK(report["accuracy"] == 0.6);
    CHECK(report["morphology"]["correct_agree"] == 2);
    CHECK(report["morphology"]["correct_disagree"] == 1);
    CHECK(report["significance"].is_null());
    CHECK(slurp(csv).rfind("bucket,count,correct,accuracy\n", 0) == 0);

    r = cli("evaluate --predictions '" + pred.string() + "' --gold '" + gold.string() + "' --baseline '" +
            pred.string() + "'");
    REQUIRE(r.code == 0);
    report = nlohmann::json::parse(r.out);
    CHECK(report["significance"]["p_value"] == 1.0);
    CHECK(report["significance"]["verdict"] == "indistinguishable");

    spit(w.dir / "short.tsv", "walk\tV;PST\twalked\n");
    CHECK(cli("evaluate --predictions '" + (w.dir / "short.tsv").string() + "' --gold '" + gold.string() + "'").code ==
          2);
}

TEST_CASE("analyze") {
    auto& w = workspace();
    const auto gold = w.dir / "an_gold.tsv";
    spit(gold, "walk\tV;PST\twalked\nhappy\tADJ;NEG\tunhappy\ngo\tV;PST\twent\n");
    const auto summary = w.dir / "summary.json";
    const auto r = cli("analyze --input '" + gold.string() + "' --summary '" + summary.string() + "'");
    REQUIRE(r.code == 0);
    const auto rows = tsv(r.out);
    REQUIRE(rows.size() == 4);
    CHECK(rows[1][3] == "suffix_only");
    CHECK(rows[2][3] == "prefix_only");
    CHECK(rows[3][3] == "neither");
    const auto s = nlohmann::json::parse(slurp(summary));
    CHECK(s["count"] == 3);
}
