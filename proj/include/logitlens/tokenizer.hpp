#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "logitlens/errors.hpp"
#include "logitlens/tensor.hpp"

namespace logitlens {

// Byte-level BPE tokenizer in the GPT-2 format: a vocab.json mapping token
// string -> id and a merges.txt with one merge per line. Tokenization is the
// reference GPT-2 pipeline: pre-tokenize with the GPT-2 split pattern, map
// bytes through the byte<->unicode table, then apply ranked BPE merges.
// Decoding inverts the byte table, so decode(encode(s)) == s for any UTF-8 s.

namespace unicode {

struct Codepoint {
    std::uint32_t cp;
    std::size_t len;
};

inline Codepoint decode_utf8(const std::string& s, std::size_t i) {
    const auto c = static_cast<unsigned char>(s[i]);
    if ((c & 0x80) == 0) return {c, 1};
    if ((c & 0xE0) == 0xC0 && i + 1 < s.size()) {
        return {static_cast<std::uint32_t>((c & 0x1F) << 6 |
                                           (static_cast<unsigned char>(s[i + 1]) & 0x3F)),
                2};
    }
    if ((c & 0xF0) == 0xE0 && i + 2 < s.size()) {
        return {static_cast<std::uint32_t>((c & 0x0F) << 12 |
                                           (static_cast<unsigned char>(s[i + 1]) & 0x3F) << 6 |
                                           (static_cast<unsigned char>(s[i + 2]) & 0x3F)),
                3};
    }
    if ((c & 0xF8) == 0xF0 && i + 3 < s.size()) {
        return {static_cast<std::uint32_t>((c & 0x07) << 18 |
                                           (static_cast<unsigned char>(s[i + 1]) & 0x3F) << 12 |
                                           (static_cast<unsigned char>(s[i + 2]) & 0x3F) << 6 |
                                           (static_cast<unsigned char>(s[i + 3]) & 0x3F)),
                4};
    }
    return {c, 1};  // invalid byte: treat as a single unit
}

inline std::string encode_utf8(std::uint32_t cp) {
    std::string out;
    if (cp < 0x80) {
        out += static_cast<char>(cp);
    } else if (cp < 0x800) {
        out += static_cast<char>(0xC0 | (cp >> 6));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else if (cp < 0x10000) {
        out += static_cast<char>(0xE0 | (cp >> 12));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    } else {
        out += static_cast<char>(0xF0 | (cp >> 18));
        out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        out += static_cast<char>(0x80 | (cp & 0x3F));
    }
    return out;
}

inline bool is_whitespace(std::uint32_t cp) {
    switch (cp) {
        case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return cp >= 0x2000 && cp <= 0x200A;
    }
}

// \p{L} over the ranges that matter in practice; anything outside these is
// treated as "other", which is also what the GPT-2 pattern does for symbols.
inline bool is_letter(std::uint32_t cp) {
    if (cp < 128) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
    if (cp == 0xAA || cp == 0xB5 || cp == 0xBA) return true;
    if (cp >= 0xC0 && cp <= 0x2AF && cp != 0xD7 && cp != 0xF7) return true;  // Latin ext, IPA
    if (cp >= 0x370 && cp <= 0x3FF && cp != 0x375 && cp != 0x384 && cp != 0x385 && cp != 0x387)
        return true;                                     // Greek
    if (cp >= 0x400 && cp <= 0x52F) return true;         // Cyrillic
    if (cp >= 0x531 && cp <= 0x58F) return true;         // Armenian
    if (cp >= 0x5D0 && cp <= 0x5EA) return true;         // Hebrew
    if (cp >= 0x620 && cp <= 0x64A) return true;         // Arabic
    if (cp >= 0x904 && cp <= 0x939) return true;         // Devanagari
    if (cp >= 0xE01 && cp <= 0xE2E) return true;         // Thai
    if (cp >= 0x1E00 && cp <= 0x1FFF) return true;       // Latin/Greek extended
    if (cp >= 0x3041 && cp <= 0x30FF && cp != 0x3097 && cp != 0x3098) return true;  // Kana
    if (cp >= 0x3400 && cp <= 0x4DBF) return true;       // CJK ext A
    if (cp >= 0x4E00 && cp <= 0x9FFF) return true;       // CJK
    if (cp >= 0xAC00 && cp <= 0xD7A3) return true;       // Hangul
    if (cp >= 0xF900 && cp <= 0xFAD9) return true;       // CJK compat
    return false;
}

inline bool is_number(std::uint32_t cp) {
    if (cp < 128) return cp >= '0' && cp <= '9';
    if (cp >= 0x660 && cp <= 0x669) return true;    // Arabic-Indic
    if (cp >= 0x6F0 && cp <= 0x6F9) return true;
    if (cp >= 0x966 && cp <= 0x96F) return true;    // Devanagari
    if (cp >= 0xFF10 && cp <= 0xFF19) return true;  // fullwidth
    return false;
}

}  // namespace unicode

class Tokenizer {
public:
    Tokenizer(const std::string& vocab_path, const std::string& merges_path) {
        load_vocab(vocab_path);
        load_merges(merges_path);
        build_byte_tables();
        auto it = vocab_.find("<|endoftext|>");
        if (it != vocab_.end()) eot_id_ = it->second;
    }

    std::size_t vocab_size() const { return vocab_.size(); }
    std::optional<TokenId> eot_id() const { return eot_id_; }

    std::vector<TokenId> encode(const std::string& text) const {
        std::vector<TokenId> ids;
        // exact matches of special tokens bypass BPE
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t next_special = std::string::npos;
            if (eot_id_) next_special = text.find("<|endoftext|>", pos);
            const std::size_t end = next_special == std::string::npos ? text.size() : next_special;
            encode_span(text.substr(pos, end - pos), ids);
            if (next_special != std::string::npos) {
                ids.push_back(*eot_id_);
                pos = next_special + 13;
            } else {
                pos = text.size();
            }
        }
        return ids;
    }

    std::string decode(const std::vector<TokenId>& ids) const {
        std::string symbols;
        for (const TokenId id : ids) symbols += token_string(id);
        return symbols_to_bytes(symbols);
    }

    /// The vocab entry for one id, in byte-to-unicode symbol form (spaces
    /// appear as the usual G-with-dot marker). Used for heatmap cell labels.
    std::string token_string(TokenId id) const {
        const auto it = id_to_token_.find(id);
        if (it == id_to_token_.end()) {
            throw IndexError("token id out of vocabulary: " + std::to_string(id));
        }
        return it->second;
    }

    /// The raw text a single token decodes to.
    std::string token_text(TokenId id) const { return symbols_to_bytes(token_string(id)); }

    /// True if the token's text contains a line break (QA generation stop rule).
    bool is_newline_token(TokenId id) const {
        const std::string text = token_text(id);
        return text.find('\n') != std::string::npos || text.find('\r') != std::string::npos;
    }

    /// GPT-2 split pattern: contractions, optionally space-prefixed letter /
    /// number / symbol runs, then whitespace (a trailing run keeps its last
    /// character only when nothing printable follows).
    static std::vector<std::string> pre_tokenize(const std::string& text) {
        using namespace unicode;
        std::vector<Codepoint> cps;
        std::vector<std::size_t> starts;
        for (std::size_t i = 0; i < text.size();) {
            const Codepoint c = decode_utf8(text, i);
            cps.push_back(c);
            starts.push_back(i);
            i += c.len;
        }
        starts.push_back(text.size());

        std::vector<std::string> out;
        const std::size_t n = cps.size();
        std::size_t i = 0;
        auto emit = [&](std::size_t from, std::size_t to) {
            out.push_back(text.substr(starts[from], starts[to] - starts[from]));
        };
        auto run_while = [&](std::size_t from, bool (*pred)(std::uint32_t)) {
            std::size_t j = from;
            while (j < n && pred(cps[j].cp)) ++j;
            return j;
        };
        while (i < n) {
            if (cps[i].cp == '\'' && i + 1 < n) {
                // 's 't 're 've 'm 'll 'd
                const std::uint32_t a = cps[i + 1].cp;
                const std::uint32_t b = i + 2 < n ? cps[i + 2].cp : 0;
                if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) {
                    emit(i, i + 3);
                    i += 3;
                    continue;
                }
                if (a == 's' || a == 't' || a == 'm' || a == 'd') {
                    emit(i, i + 2);
                    i += 2;
                    continue;
                }
            }
            const bool space_prefix = cps[i].cp == ' ' && i + 1 < n;
            const std::size_t head = space_prefix ? i + 1 : i;
            if (head < n && is_letter(cps[head].cp)) {
                const std::size_t j = run_while(head, is_letter);
                emit(i, j);
                i = j;
                continue;
            }
            if (head < n && is_number(cps[head].cp)) {
                const std::size_t j = run_while(head, is_number);
                emit(i, j);
                i = j;
                continue;
            }
            const auto is_other = [](std::uint32_t cp) {
                return !is_whitespace(cp) && !is_letter(cp) && !is_number(cp);
            };
            if (head < n && is_other(cps[head].cp)) {
                std::size_t j = head;
                while (j < n && is_other(cps[j].cp)) ++j;
                emit(i, j);
                i = j;
                continue;
            }
            // whitespace run
            std::size_t j = run_while(i, is_whitespace);
            if (j < n && j - i > 1) {
                emit(i, j - 1);  // \s+(?!\S): all but the char that joins the next token
                i = j - 1;
            } else {
                emit(i, j);
                i = j;
            }
        }
        return out;
    }

private:
    void load_vocab(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open vocab file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("bad vocab JSON in " + path + ": " + e.what());
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            const TokenId id = it.value().get<TokenId>();
            vocab_[it.key()] = id;
            id_to_token_[id] = it.key();
        }
        if (vocab_.empty()) throw LoadError("empty vocabulary: " + path);
    }

    void load_merges(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw LoadError("cannot open merges file: " + path);
        std::string line;
        int rank = 0;
        bool first = true;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (first && line.rfind("#version", 0) == 0) {
                first = false;
                continue;
            }
            first = false;
            if (line.empty()) continue;
            const std::size_t sp = line.find(' ');
            if (sp == std::string::npos) {
                throw LoadError("bad merge line in " + path + ": " + line);
            }
            merge_ranks_[line] = rank++;
        }
    }

    void build_byte_tables() {
        // the GPT-2 byte<->unicode bijection
        std::vector<int> bs;
        for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
        for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
        for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
        std::vector<int> cs = bs;
        int extra = 0;
        for (int b = 0; b < 256; ++b) {
            if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
                bs.push_back(b);
                cs.push_back(256 + extra++);
            }
        }
        for (std::size_t i = 0; i < bs.size(); ++i) {
            const std::string sym = unicode::encode_utf8(static_cast<std::uint32_t>(cs[i]));
            byte_to_symbol_[static_cast<unsigned char>(bs[i])] = sym;
            symbol_to_byte_[sym] = static_cast<unsigned char>(bs[i]);
        }
    }

    void encode_span(const std::string& text, std::vector<TokenId>& out) const {
        for (const std::string& word : pre_tokenize(text)) {
            std::vector<std::string> parts;
            parts.reserve(word.size());
            for (const unsigned char b : word) parts.push_back(byte_to_symbol_[b]);
            bpe(parts);
            for (const std::string& sym : parts) {
                const auto it = vocab_.find(sym);
                if (it == vocab_.end()) {
                    throw Error("symbol not in vocabulary: '" + sym + "'");
                }
                out.push_back(it->second);
            }
        }
    }

    void bpe(std::vector<std::string>& parts) const {
        if (parts.size() < 2) return;
        while (parts.size() > 1) {
            int best_rank = std::numeric_limits<int>::max();
            std::size_t best = 0;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                const auto it = merge_ranks_.find(parts[i] + " " + parts[i + 1]);
                if (it != merge_ranks_.end() && it->second < best_rank) {
                    best_rank = it->second;
                    best = i;
                }
            }
            if (best_rank == std::numeric_limits<int>::max()) break;
            // merge every occurrence of the winning pair, left to right
            const std::string a = parts[best];
            const std::string b = parts[best + 1];
            std::vector<std::string> next;
            next.reserve(parts.size());
            for (std::size_t i = 0; i < parts.size();) {
                if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
                    next.push_back(a + b);
                    i += 2;
                } else {
                    next.push_back(parts[i]);
                    ++i;
                }
            }
            parts = std::move(next);
        }
    }

    std::string symbols_to_bytes(const std::string& symbols) const {
        std::string out;
        out.reserve(symbols.size());
        for (std::size_t i = 0; i < symbols.size();) {
            const auto c = unicode::decode_utf8(symbols, i);
            const auto it = symbol_to_byte_.find(symbols.substr(i, c.len));
            if (it != symbol_to_byte_.end()) {
                out += static_cast<char>(it->second);
            } else {
                out += symbols.substr(i, c.len);  // special tokens decode as-is
            }
            i += c.len;
        }
        return out;
    }

    std::unordered_map<std::string, TokenId> vocab_;
    std::unordered_map<TokenId, std::string> id_to_token_;
    std::unordered_map<std::string, int> merge_ranks_;
    std::string byte_to_symbol_[256];
    std::unordered_map<std::string, unsigned char> symbol_to_byte_;
    std::optional<TokenId> eot_id_;
};

}  // namespace logitlens
