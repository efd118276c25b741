#include "bidiseq/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include <json.hpp>

#include "bidiseq/error.hpp"
#include "bidiseq/unicode.hpp"

namespace bidiseq::analysis {
namespace {

using Grid = std::vector<std::vector<std::size_t>>;

// Unit-cost edit distance of a[0,i) to b[0,j).
Grid prefix_distances(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    Grid d(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
        }
    }
    return d;
}

// Unit-cost edit distance of a[i,n) to b[j,m).
Grid suffix_distances(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const std::size_t n = a.size(), m = b.size();
    Grid d(n + 1, std::vector<std::size_t>(m + 1, 0));
    for (std::size_t i = 0; i <= n; ++i) d[i][m] = n - i;
    for (std::size_t j = 0; j <= m; ++j) d[n][j] = m - j;
    for (std::size_t i = n; i-- > 0;) {
        for (std::size_t j = m; j-- > 0;) {
            const std::size_t sub = d[i + 1][j + 1] + (a[i] == b[j] ? 0 : 1);
            d[i][j] = std::min({sub, d[i + 1][j] + 1, d[i][j + 1] + 1});
        }
    }
    return d;
}

double share(std::size_t part, std::size_t whole) {
    return whole == 0 ? 0.0 : static_cast<double>(part) / static_cast<double>(whole);
}

}  // namespace

std::string_view morph_label_name(MorphLabel label) {
    switch (label) {
        case MorphLabel::prefix_only: return "prefix_only";
        case MorphLabel::suffix_only: return "suffix_only";
        case MorphLabel::neither: return "neither";
    }
    return "?";
}

std::size_t MorphClass::boundary() const {
    switch (label) {
        case MorphLabel::suffix_only: return stem_end;
        case MorphLabel::prefix_only: return stem_begin;
        case MorphLabel::neither: break;
    }
    throw Error("no morpheme boundary for class neither");
}

MorphClass classify_morphology(std::string_view lemma, std::string_view form, std::size_t min_stem) {
    if (lemma.empty() || form.empty()) throw Error("classify_morphology needs non-empty strings");
    if (min_stem == 0) throw Error("min_stem must be at least 1");
    const auto a = utf8::split_chars(lemma);
    const auto b = utf8::split_chars(form);
    const Grid before = prefix_distances(a, b);
    const Grid after = suffix_distances(a, b);
    const std::size_t total = before[a.size()][b.size()];

    std::size_t best_len = 0, best_j = 0;
    for (std::size_t j = 0; j < b.size(); ++j) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            std::size_t len = 0;
            while (i + len < a.size() && j + len < b.size() && a[i + len] == b[j + len] &&
                   before[i][j] + after[i + len + 1][j + len + 1] == total) {
                ++len;
            }
            if (len > best_len) {
                best_len = len;
                best_j = j;
            }
        }
    }

    MorphClass out;
    if (best_len < min_stem) return out;
    out.stem_begin = best_j;
    out.stem_end = best_j + best_len;
    if (out.stem_begin == 0) {
        out.label = MorphLabel::suffix_only;
    } else if (out.stem_end == b.size()) {
        out.label = MorphLabel::prefix_only;
    }
    return out;
}

std::string_view analysis_label_name(AnalysisLabel label) {
    switch (label) {
        case AnalysisLabel::correct_agree: return "correct_agree";
        case AnalysisLabel::correct_disagree: return "correct_disagree";
        case AnalysisLabel::incorrect: return "incorrect";
    }
    return "?";
}

AnalysisLabel correct_analysis(std::string_view prediction, std::span<const Side> ordering, std::string_view gold,
                               const MorphClass& morph) {
    if (ordering.size() != utf8::length(prediction)) {
        throw Error("ordering length " + std::to_string(ordering.size()) + " does not match the prediction length " +
                    std::to_string(utf8::length(prediction)));
    }
    if (prediction != gold) return AnalysisLabel::incorrect;
    const auto lefts = static_cast<std::size_t>(std::count(ordering.begin(), ordering.end(), Side::L));
    return lefts == morph.boundary() ? AnalysisLabel::correct_agree : AnalysisLabel::correct_disagree;
}

std::vector<Bucket> accuracy_buckets(std::span<const ResultRow> results, Bucketing bucketing, std::size_t overflow) {
    if (bucketing == Bucketing::length && overflow == 0) throw Error("overflow bucket must be at least 1");
    std::map<std::size_t, Bucket> by_length;
    std::map<std::string, Bucket> by_tag;
    for (const auto& r : results) {
        Bucket* b = nullptr;
        if (bucketing == Bucketing::length) {
            const std::size_t len = std::min(utf8::length(r.gold), overflow);
            b = &by_length[len];
            if (b->key.empty()) b->key = len == overflow ? std::to_string(overflow) + "+" : std::to_string(len);
        } else {
            b = &by_tag[r.tags];
            b->key = r.tags;
        }
        ++b->count;
        if (r.correct()) ++b->correct;
    }
    std::vector<Bucket> out;
    auto finish = [&](Bucket b) {
        b.accuracy = share(b.correct, b.count);
        out.push_back(std::move(b));
    };
    for (auto& [k, b] : by_length) finish(std::move(b));
    for (auto& [k, b] : by_tag) finish(std::move(b));
    return out;
}

OrderingShares ordering_shares(std::span<const std::vector<Side>> orderings) {
    if (orderings.empty()) throw Error("no results");
    std::size_t l2r = 0, r2l = 0, mixed = 0;
    for (const auto& o : orderings) {
        if (o.empty()) throw Error("empty ordering");
        const auto lefts = static_cast<std::size_t>(std::count(o.begin(), o.end(), Side::L));
        if (lefts == o.size()) {
            ++l2r;
        } else if (lefts == 0) {
            ++r2l;
        } else {
            ++mixed;
        }
    }
    const std::size_t n = orderings.size();
    return {share(l2r, n), share(r2l, n), share(mixed, n)};
}

std::string_view verdict_name(Verdict verdict) {
    switch (verdict) {
        case Verdict::better: return "better";
        case Verdict::worse: return "worse";
        case Verdict::indistinguishable: return "indistinguishable";
    }
    return "?";
}

PermutationResult paired_permutation_test(std::span<const bool> a, std::span<const bool> b, double alpha,
                                          std::size_t resamples, std::uint64_t seed) {
    if (a.size() != b.size()) throw Error("paired test needs equal-length vectors");
    if (a.empty()) throw Error("paired test needs at least one pair");
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("alpha must lie in (0, 1)");
    if (resamples == 0) throw Error("resamples must be positive");

    PermutationResult r;
    // Only disagreeing pairs change under a swap; each contributes +1 or -1.
    long observed = 0;
    std::size_t a_hits = 0, b_hits = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        a_hits += a[k];
        b_hits += b[k];
        if (a[k] != b[k]) {
            ++r.disagreements;
            observed += a[k] ? 1 : -1;
        }
    }
    r.mean_difference = (static_cast<double>(a_hits) - static_cast<double>(b_hits)) / static_cast<double>(a.size());
    const long target = std::labs(observed);
    const std::size_t m = r.disagreements;

    if (m <= kExactPermutationLimit) {
        r.exact = true;
        std::uint64_t hits = 0;
        const std::uint64_t patterns = std::uint64_t{1} << m;
        for (std::uint64_t s = 0; s < patterns; ++s) {
            const long plus = std::popcount(s);
            const long sum = 2 * plus - static_cast<long>(m);
            if (std::labs(sum) >= target) ++hits;
        }
        r.p_value = static_cast<double>(hits) / static_cast<double>(patterns);
    } else {
        r.exact = false;
        std::mt19937_64 rng(seed);
        std::uint64_t hits = 0;
        for (std::size_t t = 0; t < resamples; ++t) {
            long plus = 0;
            std::size_t left = m;
            while (left > 0) {
                const std::size_t take = std::min<std::size_t>(left, 64);
                std::uint64_t bits = rng();
                if (take < 64) bits &= (std::uint64_t{1} << take) - 1;
                plus += std::popcount(bits);
                left -= take;
            }
            const long sum = 2 * plus - static_cast<long>(m);
            if (std::labs(sum) >= target) ++hits;
        }
        r.p_value = static_cast<double>(hits + 1) / static_cast<double>(resamples + 1);
    }
    if (r.p_value < alpha) {
        r.verdict = a_hits > b_hits ? Verdict::better : Verdict::worse;
    }
    return r;
}

double MorphBreakdown::agree_among_correct() const { return share(correct_agree, correct_agree + correct_disagree); }

MorphBreakdown morph_breakdown(std::span<const ResultRow> results, std::size_t min_stem) {
    MorphBreakdown out;
    for (const auto& r : results) {
        if (r.ordering.empty() || r.ordering.size() != utf8::length(r.prediction)) {
            ++out.unjudged;
            continue;
        }
        const auto morph = classify_morphology(r.lemma, r.gold, min_stem);
        if (morph.label == MorphLabel::neither) {
            ++out.unjudged;
            continue;
        }
        switch (correct_analysis(r.prediction, r.ordering, r.gold, morph)) {
            case AnalysisLabel::correct_agree: ++out.correct_agree; break;
            case AnalysisLabel::correct_disagree: ++out.correct_disagree; break;
            case AnalysisLabel::incorrect: ++out.incorrect; break;
        }
    }
    return out;
}

EvalReport evaluate(std::span<const ResultRow> results, const EvalOptions& options,
                    std::optional<std::span<const bool>> baseline) {
    if (results.empty()) throw Error("no results");
    EvalReport report;
    report.count = results.size();
    std::vector<bool> correct;
    for (const auto& r : results) correct.push_back(r.correct());
    report.accuracy = share(static_cast<std::size_t>(std::count(correct.begin(), correct.end(), true)), results.size());
    report.length_buckets = accuracy_buckets(results, Bucketing::length, options.length_overflow);
    report.tag_buckets = accuracy_buckets(results, Bucketing::tag);
    report.morph = morph_breakdown(results, options.min_stem);
    const bool all_ordered = std::all_of(results.begin(), results.end(), [](const ResultRow& r) { return !r.ordering.empty(); });
    if (all_ordered) {
        std::vector<std::vector<Side>> orderings;
        for (const auto& r : results) orderings.push_back(r.ordering);
        report.ordering = ordering_shares(orderings);
    }
    if (baseline) {
        if (baseline->size() != results.size()) throw Error("baseline has a different number of rows");
        const std::unique_ptr<bool[]> a(new bool[correct.size()]);
        for (std::size_t k = 0; k < correct.size(); ++k) a[k] = correct[k];
        report.significance = paired_permutation_test(std::span<const bool>(a.get(), correct.size()), *baseline,
                                                      options.alpha, options.resamples, options.seed);
    }
    return report;
}

std::string report_json(const EvalReport& report) {
    using nlohmann::ordered_json;
    auto buckets = [](const std::vector<Bucket>& bs) {
        ordered_json arr = ordered_json::array();
        for (const auto& b : bs) {
            arr.push_back({{"key", b.key}, {"count", b.count}, {"correct", b.correct}, {"accuracy", b.accuracy}});
        }
        return arr;
    };
    ordered_json j;
    j["count"] = report.count;
    j["accuracy"] = report.accuracy;
    j["length_buckets"] = buckets(report.length_buckets);
    j["tag_buckets"] = buckets(report.tag_buckets);
    const auto& m = report.morph;
    const std::size_t judged = m.judged();
    j["morphology"] = {{"correct_agree", m.correct_agree},
                       {"correct_disagree", m.correct_disagree},
                       {"incorrect", m.incorrect},
                       {"unjudged", m.unjudged},
                       {"shares",
                        {{"correct_agree", share(m.correct_agree, judged)},
                         {"correct_disagree", share(m.correct_disagree, judged)},
                         {"incorrect", share(m.incorrect, judged)}}},
                       {"agree_among_correct", m.agree_among_correct()}};
    if (report.ordering) {
        j["ordering"] = {{"fully_l2r", report.ordering->fully_l2r},
                         {"fully_r2l", report.ordering->fully_r2l},
                         {"mixed", report.ordering->mixed}};
    } else {
        j["ordering"] = nullptr;
    }
    if (report.significance) {
        const auto& s = *report.significance;
        j["significance"] = {{"p_value", s.p_value},
                             {"verdict", std::string(verdict_name(s.verdict))},
                             {"disagreements", s.disagreements},
                             {"exact", s.exact},
                             {"mean_difference", s.mean_difference}};
    } else {
        j["significance"] = nullptr;
    }
    return j.dump(2) + "\n";
}

std::string buckets_csv(std::span<const Bucket> buckets) {
    std::ostringstream out;
    out << "bucket,count,correct,accuracy\n";
    for (const auto& b : buckets) {
        std::string key = b.key;
        if (key.find_first_of(",\"\n") != std::string::npos) {
            std::string quoted = "\"";
            for (char c : key) {
                if (c == '"') quoted += '"';
                quoted += c;
            }
            key = quoted + "\"";
        }
        out << key << ',' << b.count << ',' << b.correct << ',' << b.accuracy << '\n';
    }
    return out.str();
}

}  // namespace bidiseq::analysis
