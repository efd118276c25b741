// Acceptance harness: one PASS/FAIL line per criterion. With arguments, runs
// only the listed criterion numbers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "bidiseq/analysis.hpp"
#include "bidiseq/checkpoint.hpp"
#include "bidiseq/decoder.hpp"
#include "bidiseq/dp.hpp"
#include "bidiseq/kernels.hpp"
#include "bidiseq/losses.hpp"
#include "bidiseq/model.hpp"
#include "bidiseq/training.hpp"
#include "fixtures.hpp"

namespace {

using namespace bidiseq;
using Clock = std::chrono::steady_clock;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
    return buf;
}

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// ---------------------------------------------------------------------------

Outcome dp_matches_brute_force() {
    const auto start = Clock::now();
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> length(1, 8);
    double worst_library = 0.0, worst_story = 0.0;
    constexpr int kFixtures = 250;
    for (int f = 0; f < kFixtures; ++f) {
        const std::size_t vocab = 2 + static_cast<std::size_t>(f % 5);
        const auto form = fixtures::random_tokens(rng, vocab, f < 8 ? static_cast<std::size_t>(f + 1) : length(rng));
        const auto scorer = fixtures::scorer_for_form(rng, vocab, form);
        const double dp = dp::marginal_log_likelihood(scorer, form);
        worst_library = std::max(worst_library, std::abs(dp - dp::brute_force_log_likelihood(scorer, form)));
        worst_story = std::max(worst_story, std::abs(dp - fixtures::story_marginal(scorer, form)));
    }
    const double secs = since(start);
    return {worst_library <= 1e-9 && worst_story <= 1e-9 && secs < 30.0,
            fmt("250 fixtures, max |dp - brute force| %.2e, max |dp - story enumeration| %.2e, %.2f s", worst_library,
                worst_story, secs)};
}

Outcome map_matches_exhaustive() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> length(1, 8);
    double worst_value = 0.0, worst_replay = 0.0;
    for (int f = 0; f < 250; ++f) {
        const std::size_t vocab = 2 + static_cast<std::size_t>(f % 5);
        const auto form = fixtures::random_tokens(rng, vocab, f < 8 ? static_cast<std::size_t>(f + 1) : length(rng));
        const auto scorer = fixtures::scorer_for_form(rng, vocab, form);
        const auto map = dp::map_ordering(scorer, form);
        double best = -INFINITY;
        for (std::size_t mask = 0; mask < (std::size_t{1} << form.size()); ++mask) {
            best = std::max(best,
                            fixtures::story_log_prob(scorer, form, fixtures::ordering_from_mask(mask, form.size())));
        }
        worst_value = std::max(worst_value, std::abs(map.log_prob - best));
        worst_replay = std::max(worst_replay, std::abs(map.log_prob - dp::joint_log_prob(scorer, form, map.path)));
    }
    return {worst_value <= 1e-9 && worst_replay <= 1e-12,
            fmt("250 fixtures, max |map - exhaustive max| %.2e, max |map - replay| %.2e", worst_value, worst_replay)};
}

Outcome gradients_match_finite_differences() {
    const auto start = Clock::now();
    // One-character outputs keep 2 x 238k forward passes inside the time limit;
    // the lemmas still give the encoder several rows.
    const std::vector<RawExample> raw{{"abc", "A", "d"}, {"ca", "B", "e"}};
    const auto vocab = build_vocab(raw, false);
    const auto batch = fixtures::encode(raw, vocab);
    const model::Transformer<double> net(model::ModelConfig::from_preset(model::SizePreset::S), vocab.size(), 11);

    std::vector<model::BatchObjective> objectives(3);
    objectives[0].objective = losses::Objective::xh;
    objectives[1].objective = losses::Objective::xh_rand;
    objectives[2].objective = losses::Objective::mml;
    objectives[2].order_head = model::OrderHead::learned;
    // Below this magnitude central differences at h = 1e-5 carry rounding noise
    // near 1e-10, so the comparison becomes absolute (tolerance 1e-9).
    constexpr double kFloor = 1e-5;
    const auto report = fixtures::gradient_check(net, batch, objectives, 1e-5, kFloor, 5);
    const double secs = since(start);
    return {report.max_rel_error <= 1e-4 && secs < 300.0,
            fmt("%.0f params x 3 objectives, max rel err %.2e (floor %.0e), %.1f s",
                static_cast<double>(report.parameters), report.max_rel_error, kFloor, secs) +
                " (worst " + report.worst + ")"};
}

Outcome beam_matches_argmax() {
    std::mt19937_64 rng(202);
    int mismatches = 0;
    constexpr int kFixtures = 60;
    for (int f = 0; f < kFixtures; ++f) {
        const std::size_t vocab = f % 3 == 0 ? 2 : 3;
        const std::size_t max_len = 1 + static_cast<std::size_t>(f % 3);
        const auto scorer = fixtures::scorer_for_all_states(rng, vocab, max_len);
        const auto truth = fixtures::story_argmax(scorer, max_len);
        // Wider than the number of (string, ordering) pairs, so nothing is pruned.
        const auto result = decoder::beam_search(scorer, 4096, max_len);
        const auto& top = result.candidates.front();
        if (top.tokens != truth.tokens || top.ordering != truth.ordering) ++mismatches;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches over " + std::to_string(kFixtures) +
                                 " scorers (vocab 2-3, max_len 1-3)"};
}

Outcome tempering_schedule() {
    const losses::TemperSchedule schedule{4000.0, 50.0, 2.0};
    bool decreasing = true;
    for (int s = 0; s < 4000; ++s) decreasing = decreasing && schedule.tau(s + 1.0) < schedule.tau(s);
    const bool ends = schedule.tau(0.0) == 50.0 && schedule.tau(4000.0) == 1.0;
    return {ends && decreasing,
            fmt("tau(0) = %.17g, tau(4000) = %.17g, strictly decreasing: ", schedule.tau(0.0), schedule.tau(4000.0)) +
                (decreasing ? "yes" : "no")};
}

struct Trained {
    training::TrainResult result;
    Vocabulary vocab;
    std::vector<Example> dev;
    std::vector<RawExample> dev_raw;
    double seconds = 0.0;
};

training::TrainOptions small_recipe(losses::Objective objective) {
    training::TrainOptions o;
    o.objective = objective;
    o.batch_size = 16;
    o.max_steps = 3000;
    o.warmup_steps = 200;
    o.eval_every = 250;
    o.patience = 3000;
    o.eval_width = 5;
    o.seed = 3;
    return o;
}

Trained train_on(const std::vector<RawExample>& train_raw, const std::vector<RawExample>& dev_raw,
                 const training::TrainOptions& options, const model::ModelConfig& config) {
    Trained t;
    const auto start = Clock::now();
    t.vocab = build_vocab(train_raw, false);
    const auto train_set = fixtures::encode(train_raw, t.vocab);
    t.dev = fixtures::encode(dev_raw, t.vocab);
    t.dev_raw = dev_raw;
    model::Transformer<float> init(config, t.vocab.size(), options.seed);
    t.result = training::train(std::move(init), t.vocab, train_set, t.dev, options, [](const training::EvalPoint& p) {
        std::fprintf(stderr, "    step %zu loss %.4f dev %.3f (%.0f s)\n", p.step, p.train_loss, p.dev_accuracy,
                     p.seconds);
    });
    t.seconds = since(start);
    return t;
}

Outcome suffix_language_learned() {
    const int previous_threads = kernels::thread_count();
    kernels::set_thread_count(1);
    std::mt19937_64 rng(66);
    auto raw = fixtures::suffix_language(rng, 2200);
    const std::vector<RawExample> train_raw(raw.begin(), raw.begin() + 2000);
    const std::vector<RawExample> dev_raw(raw.begin() + 2000, raw.end());
    auto options = small_recipe(losses::Objective::xh);
    options.stop_at_accuracy = 0.95;
    const auto t = train_on(train_raw, dev_raw, options, model::ModelConfig::from_preset(model::SizePreset::S));
    const auto net = t.result.best.model();
    const double acc = training::dev_accuracy(net, losses::Objective::xh, t.dev, 5, 10);
    kernels::set_thread_count(previous_threads);
    return {acc >= 0.95 && t.result.best_step <= 3000 && t.seconds < 600.0,
            fmt("dev exact match %.3f at step %.0f of %.0f, %.0f s single-threaded", acc,
                static_cast<double>(t.result.best_step), static_cast<double>(t.result.steps), t.seconds)};
}

struct Judged {
    double accuracy = 0.0;
    analysis::MorphBreakdown breakdown;
};

Judged judge(const Trained& t, losses::Objective objective) {
    const auto net = t.result.best.model();
    const auto head = model::default_order_head(objective);
    std::vector<analysis::ResultRow> rows;
    std::size_t correct = 0;
    for (std::size_t e = 0; e < t.dev.size(); ++e) {
        const auto& ex = t.dev[e];
        model::ModelScorer<float> scorer(net, ex.source(), head);
        auto result = decoder::beam_search(scorer, 5, decoder::default_max_len(ex.lemma_tokens.size()));
        decoder::render_surfaces(result, t.vocab, {});
        const auto& top = result.candidates.front();
        rows.push_back({t.dev_raw[e].lemma, t.dev_raw[e].tags, t.dev_raw[e].form, top.surface, top.ordering});
        correct += rows.back().correct();
    }
    return {static_cast<double>(correct) / static_cast<double>(rows.size()), analysis::morph_breakdown(rows)};
}

Outcome mml_prefers_morpheme_boundaries() {
    std::mt19937_64 rng(77);
    auto raw = fixtures::affix_language(rng, 2200);
    const std::vector<RawExample> train_raw(raw.begin(), raw.begin() + 2000);
    const std::vector<RawExample> dev_raw(raw.begin() + 2000, raw.end());
    const auto config = model::ModelConfig::from_preset(model::SizePreset::S);

    auto xh_options = small_recipe(losses::Objective::xh);
    xh_options.stop_at_accuracy = 0.97;
    const auto xh = train_on(train_raw, dev_raw, xh_options, config);
    // Marginal likelihood converges more slowly and keeps the default
    // 4000-step temperature warmup, so it gets a longer budget.
    auto mml_options = small_recipe(losses::Objective::mml);
    mml_options.max_steps = 8000;
    mml_options.stop_at_accuracy = 0.97;
    const auto mml = train_on(train_raw, dev_raw, mml_options, config);

    const auto a = judge(xh, losses::Objective::xh);
    const auto b = judge(mml, losses::Objective::mml);
    const double gap = b.breakdown.agree_among_correct() - a.breakdown.agree_among_correct();
    return {a.accuracy >= 0.85 && b.accuracy >= 0.85 && gap >= 0.20,
            fmt("xH acc %.3f agree %.3f; MML acc %.3f agree %.3f", a.accuracy, a.breakdown.agree_among_correct(),
                b.accuracy, b.breakdown.agree_among_correct()) +
                fmt("; gap %.1f points (%.0f s)", 100.0 * gap, xh.seconds + mml.seconds)};
}

Outcome unidirectional_reduction() {
    std::mt19937_64 rng(303);
    std::uniform_int_distribution<std::size_t> length(1, 6);
    int inexact = 0, wrong_order = 0;
    constexpr int kFixtures = 100;
    for (int f = 0; f < kFixtures; ++f) {
        const std::size_t vocab = 2 + static_cast<std::size_t>(f % 2);
        const std::size_t n = length(rng);
        const auto base = fixtures::join_at_end_scorer(rng, vocab, n);
        const auto form = fixtures::random_tokens(rng, vocab, n);
        for (auto dir : {Direction::L2R, Direction::R2L}) {
            const ForcedOrderScorer forced(base, dir);
            // Product of the one-sided conditionals, accumulated in generation order.
            double product = 0.0;
            DecodeState st;
            for (std::size_t k = 0; k < n; ++k) {
                const auto s = base.score(st);
                if (dir == Direction::L2R) {
                    product += s.left_token_logp[static_cast<std::size_t>(form[k])];
                    st.prefix.push_back(form[k]);
                } else {
                    const TokenId t = form[n - 1 - k];
                    product += s.right_token_logp[static_cast<std::size_t>(t)];
                    st.suffix.insert(st.suffix.begin(), t);
                }
            }
            if (dp::marginal_log_likelihood(forced, form) != product) ++inexact;
            const auto result = decoder::beam_search(forced, 5, n + 2);
            const Side want = dir == Direction::L2R ? Side::L : Side::R;
            for (const auto& c : result.candidates) {
                if (std::isfinite(c.log_joint) &&
                    !std::all_of(c.ordering.begin(), c.ordering.end(), [&](Side s) { return s == want; })) {
                    ++wrong_order;
                }
            }
            if (result.candidates.front().ordering != std::vector<Side>(n, want)) ++wrong_order;
        }
    }
    return {inexact == 0 && wrong_order == 0, std::to_string(2 * kFixtures) + " forced decodes: " +
                                                  std::to_string(inexact) + " inexact marginals, " +
                                                  std::to_string(wrong_order) + " mixed orderings"};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome reproducible_pipeline() {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / ("bidiseq_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    std::mt19937_64 rng(909);
    const auto raw = fixtures::affix_language(rng, 260);
    auto write_tsv = [&](const fs::path& p, std::size_t from, std::size_t to) {
        std::ofstream out(p);
        for (std::size_t k = from; k < to; ++k) out << raw[k].lemma << '\t' << raw[k].tags << '\t' << raw[k].form << '\n';
    };
    write_tsv(dir / "train.tsv", 0, 200);
    write_tsv(dir / "dev.tsv", 200, 230);
    write_tsv(dir / "test.tsv", 230, 260);

    std::vector<std::string> outputs;
    bool commands_ok = true;
    for (int run = 0; run < 2; ++run) {
        const auto tag = std::to_string(run);
        const std::string ckpt = (dir / ("model" + tag + ".ckpt")).string();
        const std::string preds = (dir / ("preds" + tag + ".tsv")).string();
        const std::string train = std::string("BIDISEQ_THREADS=1 ") + BIDISEQ_CLI_PATH + " train --train " +
                                  (dir / "train.tsv").string() + " --dev " + (dir / "dev.tsv").string() +
                                  " --output " + ckpt +
                                  " --objective mml --batch-size 8 --max-steps 40 --warmup-steps 10 --eval-every 20"
                                  " --seed 42 > /dev/null";
        const std::string decode = std::string("BIDISEQ_THREADS=1 ") + BIDISEQ_CLI_PATH + " decode --checkpoint " +
                                   ckpt + " --input " + (dir / "test.tsv").string() + " --output " + preds +
                                   " --rerank marginal";
        commands_ok = commands_ok && std::system(train.c_str()) == 0 && std::system(decode.c_str()) == 0;
        outputs.push_back(slurp(ckpt));
        outputs.push_back(slurp(preds));
    }
    const bool same_ckpt = !outputs[0].empty() && outputs[0] == outputs[2];
    const bool same_preds = !outputs[1].empty() && outputs[1] == outputs[3];

    // Round trip through the checkpoint format: scores on 100 states must be bitwise equal.
    std::size_t differing = 0;
    try {
        const auto original = model::parse_checkpoint(outputs[0]);
        const auto net = original.model();
        const auto reloaded = model::parse_checkpoint(model::serialize_checkpoint(original)).model();
        const auto dev = fixtures::encode(std::vector<RawExample>(raw.begin() + 230, raw.end()), original.vocab);
        std::size_t states = 0;
        for (std::size_t e = 0; states < 100; e = (e + 1) % dev.size()) {
            const auto& ex = dev[e];
            model::ModelScorer<float> a(net, ex.source(), model::OrderHead::learned);
            model::ModelScorer<float> b(reloaded, ex.source(), model::OrderHead::learned);
            const std::size_t n = ex.form_tokens.size();
            const std::size_t i = states % (n + 1);
            const std::size_t j = (states / 3) % (n + 1 - i);
            const auto st = lattice_state(ex.form_tokens, i, j);
            const auto x = a.score(st), y = b.score(st);
            auto same = [](const std::vector<double>& u, const std::vector<double>& v) {
                return u.size() == v.size() && std::memcmp(u.data(), v.data(), u.size() * sizeof(double)) == 0;
            };
            const double xs[4] = {x.order_logp_left, x.order_logp_right, x.join_logp, x.not_join_logp};
            const double ys[4] = {y.order_logp_left, y.order_logp_right, y.join_logp, y.not_join_logp};
            if (!same(x.left_token_logp, y.left_token_logp) || !same(x.right_token_logp, y.right_token_logp) ||
                std::memcmp(xs, ys, sizeof xs) != 0) {
                ++differing;
            }
            ++states;
        }
    } catch (const std::exception& e) {
        fs::remove_all(dir);
        return {false, std::string("checkpoint round trip failed: ") + e.what()};
    }
    fs::remove_all(dir);
    return {commands_ok && same_ckpt && same_preds && differing == 0,
            std::string("commands ") + (commands_ok ? "ok" : "FAILED") + ", checkpoints " +
                (same_ckpt ? "identical" : "DIFFER") + ", predictions " + (same_preds ? "identical" : "DIFFER") +
                ", " + std::to_string(differing) + "/100 round-trip states differ"};
}

// Two-sided exact p-value of m disagreements with the given net count, by the binomial law.
double binomial_p(int m, int observed) {
    double total = 0.0;
    for (int k = 0; k <= m; ++k) {
        if (std::abs(2 * k - m) >= std::abs(observed)) total += std::exp(std::lgamma(m + 1.0) - std::lgamma(k + 1.0) -
                                                                         std::lgamma(m - k + 1.0) - m * std::log(2.0));
    }
    return total;
}

Outcome permutation_test() {
    const std::vector<bool> ten_a(10, true), ten_b(10, false);
    bool a10[10], b10[10];
    std::copy(ten_a.begin(), ten_a.end(), a10);
    std::copy(ten_b.begin(), ten_b.end(), b10);
    const auto exact = analysis::paired_permutation_test(a10, b10);

    // 30 disagreements: 20 favour the first system, 10 the second, plus 20 agreeing pairs.
    bool a50[50], b50[50];
    for (int k = 0; k < 50; ++k) {
        a50[k] = k < 20 || k >= 40;
        b50[k] = (k >= 20 && k < 30) || k >= 40;
    }
    const auto mc = analysis::paired_permutation_test(a50, b50, 0.05, 10000, 12345);
    const double truth = binomial_p(30, 10);
    return {exact.exact && exact.p_value == 2.0 / 1024.0 && !mc.exact && std::abs(mc.p_value - truth) <= 0.01,
            fmt("exact p = %.10g (want %.10g); Monte Carlo p = %.4f vs exact %.4f", exact.p_value, 2.0 / 1024.0,
                mc.p_value, truth)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria{
        {1, "dp_matches_brute_force", dp_matches_brute_force},
        {2, "map_matches_exhaustive", map_matches_exhaustive},
        {3, "gradients_match_finite_differences", gradients_match_finite_differences},
        {4, "beam_matches_argmax", beam_matches_argmax},
        {5, "tempering_schedule", tempering_schedule},
        {6, "suffix_language_learned", suffix_language_learned},
        {7, "mml_prefers_morpheme_boundaries", mml_prefers_morpheme_boundaries},
        {8, "unidirectional_reduction", unidirectional_reduction},
        {9, "reproducible_pipeline", reproducible_pipeline},
        {10, "permutation_test", permutation_test},
    };
    std::set<int> selected;
    for (int k = 1; k < argc; ++k) selected.insert(std::atoi(argv[k]));

    int failures = 0;
    for (const auto& c : criteria) {
        if (!selected.empty() && !selected.contains(c.id)) continue;
        const auto start = Clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        std::printf("%s %2d %-36s %7.1fs  %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, since(start),
                    o.detail.c_str());
        std::fflush(stdout);
        failures += !o.pass;
    }
    std::printf("%d failed\n", failures);
    return failures == 0 ? 0 : 1;
}
