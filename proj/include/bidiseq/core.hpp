#pragma once

// Vocabulary, tokenization, TSV ingestion and unknown-character handling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bidiseq {

using TokenId = std::int32_t;

// Reserved ids, always the lowest in every vocabulary and always in this order.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;  // rendered "$": the empty-prefix anchor
inline constexpr TokenId kEos = 2;  // rendered "#": the empty-suffix anchor
inline constexpr TokenId kSep = 3;  // separates lemma from tags in the source
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kFirstIndexedUnk = 5;
inline constexpr std::size_t kDefaultIndexedUnks = 4;

class Vocabulary {
public:
    explicit Vocabulary(std::size_t indexed_unks = kDefaultIndexedUnks);

    // Adds a token if absent and returns its id. Occurrence counts are bumped
    // on every call.
    TokenId add(std::string_view token);

    std::optional<TokenId> find(std::string_view token) const;
    // Id of the token, or kUnk when it is not in the vocabulary.
    TokenId lookup(std::string_view token) const;
    const std::string& token(TokenId id) const;

    std::size_t size() const { return tokens_.size(); }
    std::size_t indexed_unk_count() const { return indexed_unks_; }
    // k is 1-based: UNK_1 .. UNK_m.
    TokenId indexed_unk(std::size_t k) const;
    bool is_indexed_unk(TokenId id) const;
    bool is_reserved(TokenId id) const;
    std::size_t reserved_count() const { return kFirstIndexedUnk + indexed_unks_; }

    std::uint64_t count(TokenId id) const { return counts_.at(static_cast<std::size_t>(id)); }
    void set_count(TokenId id, std::uint64_t c) { counts_.at(static_cast<std::size_t>(id)) = c; }

    const std::vector<std::string>& tokens() const { return tokens_; }
    // Newline-separated token list; byte-identical for identical vocabularies.
    std::string serialize() const;
    // FNV-1a over serialize().
    std::uint64_t hash() const;

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::size_t indexed_unks_;
    std::vector<std::string> tokens_;
    std::vector<std::uint64_t> counts_;
    std::unordered_map<std::string, TokenId> index_;
};

// One line of a shared-task file, before tokenization.
struct RawExample {
    std::string lemma;
    std::string tags;
    std::string form;
};

struct Example {
    std::vector<TokenId> lemma_tokens;
    std::vector<TokenId> tag_tokens;
    std::vector<TokenId> form_tokens;  // gold output, no BOS/EOS
    std::string raw_lemma;
    std::string raw_tags;
    std::string raw_form;

    // lemma tokens, SEP, tag tokens: the encoder input.
    std::vector<TokenId> source() const;
};

enum class UnkMode { simple, indexed };

struct UnkPolicy {
    UnkMode mode = UnkMode::simple;
    std::uint64_t freq_threshold = 100;  // indexed mode only
};

// How UNK tokens of one example map back to surface characters.
struct UnkMap {
    std::vector<std::string> indexed;              // UNK_k -> indexed[k-1]
    std::vector<std::string> unknown_lemma_chars;  // leftmost first
};

struct EncodedExample {
    Example example;
    UnkMap unk_map;
};

// Lemma characters, SEP, then tags split on ';'. With layered=true every '('
// and ')' inside the tag string is its own token.
std::vector<std::string> tokenize_source(std::string_view lemma, std::string_view tags, bool layered);
std::vector<std::string> tokenize_tags(std::string_view tags, bool layered);

std::string_view reserved_token_name(TokenId id);

// Reserved tokens first, then lemma/tag/form tokens in first-seen order.
Vocabulary build_vocab(std::span<const RawExample> corpus, bool layered,
                       std::size_t indexed_unks = kDefaultIndexedUnks);

// Tokenizes an example against a vocabulary, substituting UNKs per policy.
// Throws when indexed mode needs more than the vocabulary's UNK_k slots.
EncodedExample apply_unk_policy(const RawExample& raw, const Vocabulary& vocab, const UnkPolicy& policy,
                                bool layered);

std::string resolve_unk_in_output(std::span<const TokenId> predicted, const Vocabulary& vocab,
                                  const UnkMap& mapping);

enum class Column { lemma, tags, form };
using ColumnOrder = std::array<Column, 3>;

inline constexpr ColumnOrder kDefaultColumns{Column::lemma, Column::tags, Column::form};

// Parses "lemma,tags,form" (any permutation).
ColumnOrder parse_column_order(std::string_view spec);
std::string format_column_order(const ColumnOrder& order);

// When require_form is false, two-column lines (form missing) are accepted.
std::vector<RawExample> load_tsv(const std::filesystem::path& path, const ColumnOrder& order = kDefaultColumns,
                                 bool require_form = true);
std::vector<RawExample> parse_tsv(std::string_view text, const ColumnOrder& order = kDefaultColumns,
                                  bool require_form = true);

}  // namespace bidiseq
