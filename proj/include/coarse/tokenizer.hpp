#pragma once

// WordPiece-style subword vocabulary with IR special tokens. Vocabularies are
// trained by greedy pair-frequency merging and stored in BERT vocab.txt form.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace coarse {

enum SpecialToken : int {
    kPad = 0,
    kUnk = 1,
    kCls = 2,
    kSep = 3,
    kMask = 4,
    kQuery = 5,
    kDoc = 6,
};
inline constexpr int kNumSpecial = 7;
inline constexpr std::array<std::string_view, kNumSpecial> kSpecialStrings = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[Q]", "[D]"};
inline constexpr std::string_view kContinuation = "##";
inline constexpr std::size_t kMaxWordChars = 100;

inline bool is_special_id(int id) { return id >= 0 && id < kNumSpecial; }
inline bool is_continuation(std::string_view piece) { return piece.starts_with(kContinuation); }

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes a word of its own.
inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
    };
    for (char raw : text) {
        const auto c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            words.emplace_back(1, raw);
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return words;
}

class Vocabulary {
public:
    Vocabulary() {
        for (auto s : kSpecialStrings) push(std::string(s));
    }

    /// Builds from a full token list; ids 0..6 must be the special tokens.
    static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
        if (tokens.size() < kNumSpecial) throw DataError("vocabulary shorter than the special-token block");
        for (int i = 0; i < kNumSpecial; ++i) {
            if (tokens[i] != kSpecialStrings[i]) {
                throw DataError("vocabulary id " + std::to_string(i) + " must be " +
                                std::string(kSpecialStrings[i]) + ", found '" + tokens[i] + "'");
            }
        }
        Vocabulary v;
        for (std::size_t i = kNumSpecial; i < tokens.size(); ++i) {
            const auto& t = tokens[i];
            if (t.empty()) throw DataError("empty token at id " + std::to_string(i));
            if (std::find(kSpecialStrings.begin(), kSpecialStrings.end(), t) != kSpecialStrings.end() ||
                v.contains(t)) {
                throw DataError("duplicate token '" + t + "' at id " + std::to_string(i));
            }
            v.push(t);
        }
        return v;
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    bool contains(std::string_view token) const { return ids_.find(std::string(token)) != ids_.end(); }
    int id(std::string_view token) const {
        auto it = ids_.find(std::string(token));
        return it == ids_.end() ? kUnk : it->second;
    }
    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
        }
        return tokens_[static_cast<std::size_t>(id)];
    }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    /// Appends a token if absent; returns its id.
    int add(const std::string& token) {
        if (auto it = ids_.find(token); it != ids_.end()) return it->second;
        return push(token);
    }

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    int push(std::string token) {
        const int id = static_cast<int>(tokens_.size());
        ids_.emplace(token, id);
        tokens_.push_back(std::move(token));
        return id;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// ---- vocabulary training ---------------------------------------------------

struct VocabOptions {
    std::size_t target_size = 8192;
    std::size_t min_freq = 2;
};

namespace detail {

inline std::string merge_pieces(const std::string& left, const std::string& right) {
    return left + right.substr(kContinuation.size());
}

}  // namespace detail

/// Trains a vocabulary on `texts`. The base alphabet holds every character
/// seen word-initially (plain) and word-internally ("##c"). Merges pick the
/// most frequent adjacent pair, ties broken by the lexicographically smallest
/// (left, right), until target_size is reached or the best pair count falls
/// below min_freq.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, const VocabOptions& opt) {
    std::map<std::string, std::size_t> word_freq;
    for (const auto& t : texts)
        for (auto& w : split_words(t)) ++word_freq[std::move(w)];
    if (word_freq.empty()) throw DataError("cannot build a vocabulary from an empty corpus");

    struct Word {
        std::vector<std::string> pieces;
        std::size_t freq;
    };
    std::vector<Word> words;
    std::vector<std::string> alphabet;
    {
        std::map<std::string, bool> seen;
        for (const auto& [w, f] : word_freq) {
            Word entry{{}, f};
            for (std::size_t i = 0; i < w.size(); ++i) {
                std::string piece = i == 0 ? std::string(1, w[i]) : std::string(kContinuation) + w[i];
                seen[piece] = true;
                entry.pieces.push_back(std::move(piece));
            }
            words.push_back(std::move(entry));
        }
        for (const auto& [p, _] : seen) alphabet.push_back(p);
    }
    if (opt.target_size <= kNumSpecial + alphabet.size()) {
        throw UsageError("vocabulary target size " + std::to_string(opt.target_size) +
                         " must exceed specials + base characters (" +
                         std::to_string(kNumSpecial + alphabet.size()) + ")");
    }

    Vocabulary vocab;
    for (const auto& p : alphabet) vocab.add(p);

    while (vocab.size() < opt.target_size) {
        std::map<std::pair<std::string, std::string>, std::size_t> pairs;
        for (const auto& w : words)
            for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i) pairs[{w.pieces[i], w.pieces[i + 1]}] += w.freq;
        if (pairs.empty()) break;
        // std::map iterates keys in lexicographic order, so the first maximum
        // found is the tie-break winner.
        auto best = pairs.begin();
        for (auto it = pairs.begin(); it != pairs.end(); ++it)
            if (it->second > best->second) best = it;
        if (best->second < std::max<std::size_t>(opt.min_freq, 1)) break;

        const auto [left, right] = best->first;
        const std::string merged = detail::merge_pieces(left, right);
        for (auto& w : words) {
            std::vector<std::string> next;
            next.reserve(w.pieces.size());
            for (std::size_t i = 0; i < w.pieces.size(); ++i) {
                if (i + 1 < w.pieces.size() && w.pieces[i] == left && w.pieces[i + 1] == right) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(w.pieces[i]);
                }
            }
            w.pieces = std::move(next);
        }
        vocab.add(merged);
    }
    return vocab;
}

// ---- encode / decode -------------------------------------------------------

/// Greedy longest-match-first WordPiece split of one normalized word. A word
/// with any unmatched remainder maps to a single [UNK].
inline void wordpiece(std::string_view word, const Vocabulary& vocab, std::vector<int>& out) {
    if (word.size() > kMaxWordChars) {
        out.push_back(kUnk);
        return;
    }
    std::vector<int> pieces;
    std::size_t start = 0;
    std::string candidate;
    while (start < word.size()) {
        std::size_t end = word.size();
        int found = -1;
        while (end > start) {
            candidate.assign(start == 0 ? "" : kContinuation);
            candidate.append(word.substr(start, end - start));
            if (vocab.contains(candidate)) {
                found = vocab.id(candidate);
                break;
            }
            --end;
        }
        if (found < 0) {
            out.push_back(kUnk);
            return;
        }
        pieces.push_back(found);
        start = end;
    }
    out.insert(out.end(), pieces.begin(), pieces.end());
}

inline std::vector<int> encode(std::string_view text, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) wordpiece(w, vocab, ids);
    return ids;
}

inline std::string decode(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int id : ids) {
        const std::string& tok = vocab.token(id);
        if (is_continuation(tok) && !out.empty()) {
            out.append(tok, kContinuation.size());
        } else {
            if (!out.empty()) out.push_back(' ');
            out.append(tok);
        }
    }
    return out;
}

// ---- vocab.txt -------------------------------------------------------------

inline void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write vocabulary file " + path.string());
    for (const auto& t : vocab.tokens()) os << t << '\n';
    if (!os) throw DataError("failed writing vocabulary file " + path.string());
}

inline Vocabulary read_vocab(std::istream& is) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return Vocabulary::from_tokens(tokens);
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read vocabulary file " + path.string());
    return read_vocab(is);
}

}  // namespace coarse
