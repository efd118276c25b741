#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "bidiseq/core.hpp"
#include "bidiseq/error.hpp"
#include "bidiseq/unicode.hpp"

using namespace bidiseq;

TEST_CASE("reserved ids come first and in a fixed order") {
    Vocabulary v(3);
    CHECK(v.size() == 8);
    CHECK(v.token(kPad) == "<pad>");
    CHECK(v.token(kBos) == "<bos>");
    CHECK(v.token(kEos) == "<eos>");
    CHECK(v.token(kSep) == "<sep>");
    CHECK(v.token(kUnk) == "<unk>");
    CHECK(v.indexed_unk(1) == kFirstIndexedUnk);
    CHECK(v.indexed_unk(3) == kFirstIndexedUnk + 2);
    CHECK_THROWS_AS(v.indexed_unk(0), Error);
    CHECK_THROWS_AS(v.indexed_unk(4), Error);
    CHECK(v.is_reserved(7));
    CHECK_FALSE(v.is_reserved(8));
    CHECK(v.is_indexed_unk(5));
    CHECK_FALSE(v.is_indexed_unk(kUnk));
}

TEST_CASE("vocabulary add, lookup and counts") {
    Vocabulary v(0);
    const TokenId a = v.add("a");
    CHECK(v.add("b") == a + 1);
    CHECK(v.add("a") == a);
    CHECK(v.count(a) == 2);
    CHECK(v.lookup("zz") == kUnk);
    CHECK_FALSE(v.find("zz").has_value());
    CHECK_THROWS_AS(v.token(99), Error);
}

TEST_CASE("build_vocab is deterministic and first-seen ordered") {
    const std::vector<RawExample> corpus{{"ab", "V;PST", "abc"}, {"ba", "N", "bad"}};
    const auto v1 = build_vocab(corpus, false);
    const auto v2 = build_vocab(corpus, false);
    CHECK(v1 == v2);
    CHECK(v1.serialize() == v2.serialize());
    CHECK(v1.hash() == v2.hash());
    const std::size_t base = v1.reserved_count();
    CHECK(v1.token(static_cast<TokenId>(base)) == "a");
    CHECK(v1.token(static_cast<TokenId>(base + 1)) == "b");
    CHECK(v1.token(static_cast<TokenId>(base + 2)) == "V");
    CHECK(v1.token(static_cast<TokenId>(base + 3)) == "PST");
    CHECK(v1.token(static_cast<TokenId>(base + 4)) == "c");

    const std::vector<RawExample> other{{"ba", "N", "bad"}, {"ab", "V;PST", "abc"}};
    CHECK(build_vocab(other, false).hash() != v1.hash());
    CHECK_THROWS_AS(build_vocab(std::vector<RawExample>{}, false), Error);
}

TEST_CASE("tag tokenization, flat and layered") {
    CHECK(tokenize_tags("V;PST;3", false) == std::vector<std::string>{"V", "PST", "3"});
    CHECK(tokenize_tags("V;POSS(1;SG)", false) == std::vector<std::string>{"V", "POSS(1", "SG)"});
    CHECK(tokenize_tags("V;POSS(1;SG)", true) == std::vector<std::string>{"V", "POSS", "(", "1", "SG", ")"});
    CHECK(tokenize_source("ab", "N", false) == std::vector<std::string>{"a", "b", "<sep>", "N"});
}

TEST_CASE("utf8 splitting") {
    CHECK(utf8::split_chars("añö") == std::vector<std::string>{"a", "ñ", "ö"});
    CHECK(utf8::length("日本") == 2);
    CHECK(utf8::reverse("añb") == "bña");
    CHECK_THROWS_AS(utf8::split_chars(std::string("\xC3")), Error);
    CHECK_THROWS_AS(utf8::split_chars(std::string("\xFF" "a")), Error);
}

TEST_CASE("simple unknown policy maps unseen characters and tags to UNK") {
    const std::vector<RawExample> corpus{{"ab", "V", "abc"}};
    const auto vocab = build_vocab(corpus, false);
    const auto enc = apply_unk_policy({"axb", "V;Q", "axbc"}, vocab, {}, false);
    const auto& ex = enc.example;
    REQUIRE(ex.lemma_tokens.size() == 3);
    CHECK(ex.lemma_tokens[1] == kUnk);
    CHECK(ex.tag_tokens[1] == kUnk);
    CHECK(ex.form_tokens[1] == kUnk);
    CHECK(enc.unk_map.unknown_lemma_chars == std::vector<std::string>{"x"});
    CHECK(ex.source().size() == 3 + 1 + 2);
    CHECK(ex.source()[3] == kSep);
    CHECK(resolve_unk_in_output(ex.form_tokens, vocab, enc.unk_map) == "axbc");
}

TEST_CASE("reserved names in the data never alias reserved ids") {
    const std::vector<RawExample> corpus{{"ab", "V", "ab"}};
    const auto vocab = build_vocab(corpus, false);
    const auto enc = apply_unk_policy({"a", "<sep>;<unk1>", "a"}, vocab, {}, false);
    CHECK(enc.example.tag_tokens == std::vector<TokenId>{kUnk, kUnk});
}

TEST_CASE("indexed unknown policy") {
    std::vector<RawExample> corpus;
    for (int k = 0; k < 5; ++k) corpus.push_back({"aab", "V", "aabc"});
    corpus.push_back({"r", "V", "r"});
    const auto vocab = build_vocab(corpus, false, 2);
    const UnkPolicy policy{UnkMode::indexed, 3};

    // 'r' is seen twice (below the threshold); 'z' never.
    const auto enc = apply_unk_policy({"rzr", "V", "zrr"}, vocab, policy, false);
    const auto& ex = enc.example;
    CHECK(ex.lemma_tokens == std::vector<TokenId>{vocab.indexed_unk(1), vocab.indexed_unk(2), vocab.indexed_unk(1)});
    CHECK(ex.form_tokens == std::vector<TokenId>{vocab.indexed_unk(2), vocab.indexed_unk(1), vocab.indexed_unk(1)});
    CHECK(enc.unk_map.indexed == std::vector<std::string>{"r", "z"});
    CHECK(resolve_unk_in_output(ex.form_tokens, vocab, enc.unk_map) == "zrr");

    // Frequent characters stay themselves.
    const auto frequent = apply_unk_policy({"ab", "V", "ab"}, vocab, policy, false);
    CHECK(frequent.example.lemma_tokens == std::vector<TokenId>{*vocab.find("a"), *vocab.find("b")});

    CHECK_THROWS_AS(apply_unk_policy({"rzq", "V", "x"}, vocab, policy, false), Error);
    CHECK_THROWS_AS(apply_unk_policy({"a", "V", "a"}, vocab, UnkPolicy{UnkMode::indexed, 0}, false), Error);
}

TEST_CASE("column orders") {
    const auto order = parse_column_order("form,lemma,tags");
    CHECK(order == ColumnOrder{Column::form, Column::lemma, Column::tags});
    CHECK(format_column_order(order) == "form,lemma,tags");
    CHECK(format_column_order(kDefaultColumns) == "lemma,tags,form");
    CHECK_THROWS_AS(parse_column_order("lemma,tags"), Error);
    CHECK_THROWS_AS(parse_column_order("lemma,tags,form,form"), Error);
    CHECK_THROWS_AS(parse_column_order("lemma,lemma,form"), Error);
    CHECK_THROWS_AS(parse_column_order("lemma,tag,form"), Error);
}

TEST_CASE("TSV parsing") {
    const auto rows = parse_tsv("walk\tV;PST\twalked\r\n\nrun\tV;PST\tran\n");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].lemma == "walk");
    CHECK(rows[0].tags == "V;PST");
    CHECK(rows[0].form == "walked");
    CHECK(rows[1].form == "ran");

    const auto swapped = parse_tsv("walked\twalk\tV;PST", parse_column_order("form,lemma,tags"));
    CHECK(swapped[0].lemma == "walk");
    CHECK(swapped[0].form == "walked");

    CHECK_THROWS_AS(parse_tsv("walk\tV;PST\n"), Error);
    const auto test_rows = parse_tsv("walk\tV;PST\n", kDefaultColumns, false);
    CHECK(test_rows[0].form.empty());
    CHECK_THROWS_AS(parse_tsv("a\tb\tc\td\n"), Error);
    CHECK_THROWS_AS(parse_tsv("\tV\tx\n"), Error);
}

TEST_CASE("TSV loading from disk") {
    const auto path = std::filesystem::temp_directory_path() / "bidiseq_core_test.tsv";
    {
        std::ofstream out(path, std::ios::binary);
        out << "sing\tV;PST\tsang\n";
    }
    const auto rows = load_tsv(path);
    CHECK(rows.size() == 1);
    CHECK(rows[0].form == "sang");
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_tsv(path), Error);
}
