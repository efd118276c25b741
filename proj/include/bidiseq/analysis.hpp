#pragma once

// Evaluation toolkit: stem/affix classification of lemma-form pairs, whether a
// correct prediction's final prefix/suffix split matches the morpheme boundary,
// accuracy breakdowns, ordering statistics and paired permutation tests.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bidiseq/dp.hpp"

namespace bidiseq::analysis {

enum class MorphLabel { prefix_only, suffix_only, neither };

std::string_view morph_label_name(MorphLabel label);

struct MorphClass {
    MorphLabel label = MorphLabel::neither;
    // Stem position in the form, in characters. Empty for `neither` without a stem.
    std::size_t stem_begin = 0;
    std::size_t stem_end = 0;

    // Prefix length at which a prediction splits stem from affix.
    std::size_t boundary() const;
};

// The stem is the longest run of matched characters (at least min_stem long)
// lying on some minimum-cost unit-weight Levenshtein alignment; ties go to the
// leftmost run in the form. The form is suffix_only when the stem starts it
// (including a form equal to its stem), prefix_only when the stem ends it.
MorphClass classify_morphology(std::string_view lemma, std::string_view form, std::size_t min_stem = 3);

enum class AnalysisLabel { correct_agree, correct_disagree, incorrect };

std::string_view analysis_label_name(AnalysisLabel label);

// Incorrect when prediction != gold. Otherwise agreement means the number of
// L decisions equals morph.boundary(). Throws when the ordering length differs
// from the prediction's character count, or when a correct prediction is
// judged against a `neither` class.
AnalysisLabel correct_analysis(std::string_view prediction, std::span<const Side> ordering, std::string_view gold,
                               const MorphClass& morph);

// One decoded example.
struct ResultRow {
    std::string lemma;
    std::string tags;
    std::string gold;
    std::string prediction;
    dp::OrderingPath ordering;  // empty when unknown

    bool correct() const { return prediction == gold; }
};

enum class Bucketing { length, tag };

struct Bucket {
    std::string key;
    std::size_t count = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
};

// Length buckets are gold-form character counts, with every length at or
// above `overflow` pooled into one "<overflow>+" bucket, in increasing order.
// Tag buckets are the raw tag strings in lexicographic order.
std::vector<Bucket> accuracy_buckets(std::span<const ResultRow> results, Bucketing bucketing,
                                     std::size_t overflow = 16);

struct OrderingShares {
    double fully_l2r = 0.0;
    double fully_r2l = 0.0;
    double mixed = 0.0;
};

OrderingShares ordering_shares(std::span<const std::vector<Side>> orderings);

enum class Verdict { better, worse, indistinguishable };

std::string_view verdict_name(Verdict verdict);

struct PermutationResult {
    double p_value = 1.0;
    Verdict verdict = Verdict::indistinguishable;
    std::size_t disagreements = 0;
    bool exact = true;
    double mean_difference = 0.0;  // mean(a) - mean(b)
};

inline constexpr std::size_t kExactPermutationLimit = 20;

// Two-sided test of the mean difference of paired 0/1 outcomes. Exact over all
// sign flips when at most kExactPermutationLimit pairs disagree, otherwise
// Monte Carlo with (hits + 1) / (resamples + 1).
PermutationResult paired_permutation_test(std::span<const bool> a, std::span<const bool> b, double alpha = 0.05,
                                          std::size_t resamples = 10000, std::uint64_t seed = 1);

struct MorphBreakdown {
    std::size_t correct_agree = 0;
    std::size_t correct_disagree = 0;
    std::size_t incorrect = 0;
    // Examples classified `neither`, or without an ordering.
    std::size_t unjudged = 0;

    std::size_t judged() const { return correct_agree + correct_disagree + incorrect; }
    // Share of correct_agree among correct judged predictions.
    double agree_among_correct() const;
};

MorphBreakdown morph_breakdown(std::span<const ResultRow> results, std::size_t min_stem = 3);

struct EvalReport {
    std::size_t count = 0;
    double accuracy = 0.0;
    std::vector<Bucket> length_buckets;
    std::vector<Bucket> tag_buckets;
    MorphBreakdown morph;
    std::optional<OrderingShares> ordering;
    std::optional<PermutationResult> significance;
};

struct EvalOptions {
    std::size_t min_stem = 3;
    std::size_t length_overflow = 16;
    double alpha = 0.05;
    std::size_t resamples = 10000;
    std::uint64_t seed = 1;
};

// `baseline`, when given, holds per-example correctness of the system compared against.
EvalReport evaluate(std::span<const ResultRow> results, const EvalOptions& options = {},
                    std::optional<std::span<const bool>> baseline = std::nullopt);

// JSON with a fixed key order.
std::string report_json(const EvalReport& report);
std::string buckets_csv(std::span<const Bucket> buckets);

}  // namespace bidiseq::analysis
