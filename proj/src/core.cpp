#include "bidiseq/core.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "bidiseq/error.hpp"
#include "bidiseq/unicode.hpp"

namespace bidiseq {
namespace {

constexpr std::array<std::string_view, 5> kReservedNames{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};

std::string indexed_unk_name(std::size_t k) { return "<unk" + std::to_string(k) + ">"; }

}  // namespace

std::string_view reserved_token_name(TokenId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= kReservedNames.size()) throw Error("not a fixed reserved id");
    return kReservedNames[static_cast<std::size_t>(id)];
}

Vocabulary::Vocabulary(std::size_t indexed_unks) : indexed_unks_(indexed_unks) {
    for (auto name : kReservedNames) {
        index_.emplace(std::string(name), static_cast<TokenId>(tokens_.size()));
        tokens_.emplace_back(name);
    }
    for (std::size_t k = 1; k <= indexed_unks; ++k) {
        index_.emplace(indexed_unk_name(k), static_cast<TokenId>(tokens_.size()));
        tokens_.push_back(indexed_unk_name(k));
    }
    counts_.assign(tokens_.size(), 0);
}

TokenId Vocabulary::add(std::string_view token) {
    std::string key(token);
    auto it = index_.find(key);
    if (it != index_.end()) {
        ++counts_[static_cast<std::size_t>(it->second)];
        return it->second;
    }
    const auto id = static_cast<TokenId>(tokens_.size());
    index_.emplace(key, id);
    tokens_.push_back(std::move(key));
    counts_.push_back(1);
    return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenId Vocabulary::lookup(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw Error("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::indexed_unk(std::size_t k) const {
    if (k == 0 || k > indexed_unks_) throw Error("indexed UNK slot out of range");
    return kFirstIndexedUnk + static_cast<TokenId>(k - 1);
}

bool Vocabulary::is_indexed_unk(TokenId id) const {
    return id >= kFirstIndexedUnk && id < kFirstIndexedUnk + static_cast<TokenId>(indexed_unks_);
}

bool Vocabulary::is_reserved(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < reserved_count();
}

std::string Vocabulary::serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
        out += t;
        out += '\n';
    }
    return out;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : serialize()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::vector<TokenId> Example::source() const {
    std::vector<TokenId> out(lemma_tokens);
    out.push_back(kSep);
    out.insert(out.end(), tag_tokens.begin(), tag_tokens.end());
    return out;
}

std::vector<std::string> tokenize_tags(std::string_view tags, bool layered) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
    };
    for (char c : tags) {
        if (c == ';') {
            flush();
        } else if (layered && (c == '(' || c == ')')) {
            flush();
            out.emplace_back(1, c);
        } else {
            current += c;
        }
    }
    flush();
    return out;
}

std::vector<std::string> tokenize_source(std::string_view lemma, std::string_view tags, bool layered) {
    auto out = utf8::split_chars(lemma);
    out.emplace_back(reserved_token_name(kSep));
    for (auto& t : tokenize_tags(tags, layered)) out.push_back(std::move(t));
    return out;
}

Vocabulary build_vocab(std::span<const RawExample> corpus, bool layered, std::size_t indexed_unks) {
    if (corpus.empty()) throw Error("cannot build a vocabulary from an empty corpus");
    Vocabulary vocab(indexed_unks);
    for (const auto& ex : corpus) {
        for (const auto& c : utf8::split_chars(ex.lemma)) vocab.add(c);
        for (const auto& t : tokenize_tags(ex.tags, layered)) vocab.add(t);
        for (const auto& c : utf8::split_chars(ex.form)) vocab.add(c);
    }
    return vocab;
}

EncodedExample apply_unk_policy(const RawExample& raw, const Vocabulary& vocab, const UnkPolicy& policy,
                                bool layered) {
    if (policy.freq_threshold < 1) throw Error("UNK frequency threshold must be >= 1");
    EncodedExample out;
    Example& ex = out.example;
    ex.raw_lemma = raw.lemma;
    ex.raw_tags = raw.tags;
    ex.raw_form = raw.form;

    const auto lemma_chars = utf8::split_chars(raw.lemma);
    auto is_unknown = [&](const std::string& c) {
        auto id = vocab.find(c);
        if (!id || vocab.is_reserved(*id)) return true;
        return policy.mode == UnkMode::indexed && vocab.count(*id) < policy.freq_threshold;
    };

    for (const auto& c : lemma_chars) {
        if (!is_unknown(c)) {
            ex.lemma_tokens.push_back(*vocab.find(c));
            continue;
        }
        if (std::find(out.unk_map.unknown_lemma_chars.begin(), out.unk_map.unknown_lemma_chars.end(), c) ==
            out.unk_map.unknown_lemma_chars.end()) {
            out.unk_map.unknown_lemma_chars.push_back(c);
        }
        if (policy.mode == UnkMode::simple) {
            ex.lemma_tokens.push_back(kUnk);
            continue;
        }
        auto& slots = out.unk_map.indexed;
        auto it = std::find(slots.begin(), slots.end(), c);
        std::size_t k = static_cast<std::size_t>(it - slots.begin()) + 1;
        if (it == slots.end()) {
            if (slots.size() >= vocab.indexed_unk_count()) {
                throw Error("example '" + raw.lemma + "' has more than " +
                            std::to_string(vocab.indexed_unk_count()) + " distinct unknown characters");
            }
            slots.push_back(c);
            k = slots.size();
        }
        ex.lemma_tokens.push_back(vocab.indexed_unk(k));
    }

    for (const auto& t : tokenize_tags(raw.tags, layered)) {
        auto id = vocab.find(t);
        ex.tag_tokens.push_back(id && !vocab.is_reserved(*id) ? *id : kUnk);
    }

    for (const auto& c : utf8::split_chars(raw.form)) {
        const auto& slots = out.unk_map.indexed;
        auto it = std::find(slots.begin(), slots.end(), c);
        if (policy.mode == UnkMode::indexed && it != slots.end()) {
            ex.form_tokens.push_back(vocab.indexed_unk(static_cast<std::size_t>(it - slots.begin()) + 1));
        } else {
            auto id = vocab.find(c);
            ex.form_tokens.push_back(id && !vocab.is_reserved(*id) ? *id : kUnk);
        }
    }
    return out;
}

std::string resolve_unk_in_output(std::span<const TokenId> predicted, const Vocabulary& vocab,
                                  const UnkMap& mapping) {
    std::string out;
    for (TokenId id : predicted) {
        if (vocab.is_indexed_unk(id)) {
            const auto k = static_cast<std::size_t>(id - kFirstIndexedUnk);
            if (k < mapping.indexed.size()) out += mapping.indexed[k];
        } else if (id == kUnk) {
            if (!mapping.unknown_lemma_chars.empty()) out += mapping.unknown_lemma_chars.front();
        } else if (!vocab.is_reserved(id)) {
            out += vocab.token(id);
        }
    }
    return out;
}

ColumnOrder parse_column_order(std::string_view spec) {
    ColumnOrder order{};
    std::size_t n = 0;
    std::string item;
    std::stringstream ss{std::string(spec)};
    while (std::getline(ss, item, ',')) {
        if (n >= 3) throw Error("column order needs exactly 3 names: " + std::string(spec));
        if (item == "lemma") {
            order[n] = Column::lemma;
        } else if (item == "tags") {
            order[n] = Column::tags;
        } else if (item == "form") {
            order[n] = Column::form;
        } else {
            throw Error("unknown column name '" + item + "'");
        }
        ++n;
    }
    if (n != 3) throw Error("column order needs exactly 3 names: " + std::string(spec));
    for (auto c : {Column::lemma, Column::tags, Column::form}) {
        if (std::count(order.begin(), order.end(), c) != 1) throw Error("column order must be a permutation");
    }
    return order;
}

std::string format_column_order(const ColumnOrder& order) {
    std::string out;
    for (std::size_t k = 0; k < 3; ++k) {
        if (k) out += ',';
        out += order[k] == Column::lemma ? "lemma" : order[k] == Column::tags ? "tags" : "form";
    }
    return out;
}

std::vector<RawExample> parse_tsv(std::string_view text, const ColumnOrder& order, bool require_form) {
    std::vector<RawExample> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;

        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            fields.emplace_back(line.substr(start, tab == std::string_view::npos ? line.npos : tab - start));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        const bool form_missing_ok = !require_form && fields.size() == 2 && order[2] == Column::form;
        if (fields.size() != 3 && !form_missing_ok) {
            throw Error("line " + std::to_string(line_no) + ": expected 3 fields, got " +
                        std::to_string(fields.size()));
        }
        RawExample ex;
        for (std::size_t k = 0; k < fields.size(); ++k) {
            switch (order[k]) {
                case Column::lemma: ex.lemma = fields[k]; break;
                case Column::tags: ex.tags = fields[k]; break;
                case Column::form: ex.form = fields[k]; break;
            }
        }
        if (ex.lemma.empty()) throw Error("line " + std::to_string(line_no) + ": empty lemma");
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<RawExample> load_tsv(const std::filesystem::path& path, const ColumnOrder& order, bool require_form) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_tsv(buffer.str(), order, require_form);
}

}  // namespace bidiseq
