#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <fstream>
#include <string>
#include <vector>

#include "logitlens/rng.hpp"
#include "logitlens/tokenizer.hpp"
#include "testutil.hpp"

using namespace logitlens;

namespace {

const Tokenizer& tok() { return *testutil::Fixture::get().tokenizer; }

/// Random valid UTF-8 built from a codepoint pool that stresses every
/// pre-tokenizer class: ASCII, whitespace runs, accents, CJK, emoji.
std::string random_utf8(Rng& rng) {
    static const std::vector<std::uint32_t> pool = {
        'a', 'b', 'z', 'A', 'Q', '0', '7', '9', ' ', ' ', ' ', '\n', '\t',
        '.', ',', '!', '-', '_', '\'', '"', '(', ')', 0xE9, 0xFC, 0xC5,
        0x416, 0x43F, 0x5317, 0x4EAC, 0x1F44D, 0x1F680, 0x20AC, 0x2014};
    const int len = static_cast<int>(uniform_below(rng, 40));
    std::string out;
    for (int i = 0; i < len; ++i) {
        out += unicode::encode_utf8(pool[uniform_below(rng, pool.size())]);
    }
    return out;
}

}  // namespace

TEST_CASE("tokenizer matches the reference implementation on committed cases") {
    std::ifstream in(testutil::fixture_path("tokenizer/cases.json"));
    REQUIRE(in.good());
    nlohmann::json cases;
    in >> cases;
    REQUIRE(cases.size() > 10);
    for (const auto& c : cases) {
        const std::string text = c.at("text").get<std::string>();
        const auto expected = c.at("ids").get<std::vector<TokenId>>();
        INFO("text: " << text);
        CHECK(tok().encode(text) == expected);
        CHECK(tok().decode(expected) == text);
    }
}

TEST_CASE("empty input gives an empty sequence") {
    CHECK(tok().encode("").empty());
    CHECK(tok().decode({}).empty());
}

TEST_CASE("single ASCII letters are single tokens that round-trip") {
    for (char c = 'a'; c <= 'z'; ++c) {
        const std::string s(1, c);
        const auto ids = tok().encode(s);
        REQUIRE(ids.size() == 1);
        CHECK(tok().decode(ids) == s);
    }
    for (char c = 'A'; c <= 'Z'; ++c) {
        REQUIRE(tok().encode(std::string(1, c)).size() == 1);
    }
}

TEST_CASE("round trip on random UTF-8 strings") {
    Rng rng(424242);
    for (int trial = 0; trial < 500; ++trial) {
        const std::string s = random_utf8(rng);
        INFO("trial " << trial);
        REQUIRE(tok().decode(tok().encode(s)) == s);
    }
}

TEST_CASE("round trip across all byte values") {
    // every single byte, as latin-1-ish payload wrapped into valid UTF-8
    for (int cp = 1; cp < 256; ++cp) {
        const std::string s = unicode::encode_utf8(static_cast<std::uint32_t>(cp));
        REQUIRE(tok().decode(tok().encode(s)) == s);
    }
}

TEST_CASE("end-of-text token is mapped to its reserved id") {
    REQUIRE(tok().eot_id().has_value());
    const auto ids = tok().encode("<|endoftext|>");
    REQUIRE(ids.size() == 1);
    CHECK(ids[0] == *tok().eot_id());

    const auto mixed = tok().encode("ab<|endoftext|>cd");
    REQUIRE(mixed.size() >= 3);
    CHECK(std::count(mixed.begin(), mixed.end(), *tok().eot_id()) == 1);
    CHECK(tok().decode(mixed) == "ab<|endoftext|>cd");
}

TEST_CASE("tokenization is deterministic") {
    const std::string s = "The capital of Freland is Tarvik, isn't it?  \n Yes.";
    CHECK(tok().encode(s) == tok().encode(s));
}

TEST_CASE("pre-tokenizer split behavior") {
    using V = std::vector<std::string>;
    CHECK(Tokenizer::pre_tokenize("a b") == V{"a", " b"});
    CHECK(Tokenizer::pre_tokenize("a  b") == V{"a", " ", " b"});
    CHECK(Tokenizer::pre_tokenize("a   b") == V{"a", "  ", " b"});
    CHECK(Tokenizer::pre_tokenize("don't") == V{"don", "'t"});
    CHECK(Tokenizer::pre_tokenize("we're I'll") == V{"we", "'re", " I", "'ll"});
    CHECK(Tokenizer::pre_tokenize("x2 34") == V{"x", "2", " 34"});
    CHECK(Tokenizer::pre_tokenize("hi!!") == V{"hi", "!!"});
    CHECK(Tokenizer::pre_tokenize(" hi") == V{" hi"});
    CHECK(Tokenizer::pre_tokenize("hi ") == V{"hi", " "});
    CHECK(Tokenizer::pre_tokenize("a\nb") == V{"a", "\n", "b"});
    CHECK(Tokenizer::pre_tokenize("    ") == V{"    "});
}

TEST_CASE("token display strings") {
    const auto ids = tok().encode(" in");
    REQUIRE(ids.size() == 1);
    // the byte-to-unicode symbol form marks the leading space
    CHECK(tok().token_string(ids[0]) == "Ġin");
    CHECK(tok().token_text(ids[0]) == " in");
    CHECK_THROWS_AS(tok().token_string(static_cast<TokenId>(tok().vocab_size() + 7)),
                    IndexError);
}

TEST_CASE("newline detection for generation stopping") {
    const auto ids = tok().encode("\n");
    REQUIRE_FALSE(ids.empty());
    CHECK(tok().is_newline_token(ids[0]));
    const auto word = tok().encode("hello");
    CHECK_FALSE(tok().is_newline_token(word[0]));
}

TEST_CASE("tokenizer load failures") {
    CHECK_THROWS_AS(Tokenizer("/nonexistent/vocab.json",
                              testutil::fixture_path("model/merges.txt")),
                    LoadError);
    CHECK_THROWS_AS(Tokenizer(testutil::fixture_path("model/vocab.json"),
                              "/nonexistent/merges.txt"),
                    LoadError);
}
