#pragma once

// First-stage retrieval: a word-level inverted index scored with Okapi BM25.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

namespace coarse {

struct Posting {
    std::uint32_t doc;  // index into InvertedIndex::docids()
    std::uint32_t tf;

    friend bool operator==(const Posting&, const Posting&) = default;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct ScoredDoc {
    std::string docid;
    double score;
};

class InvertedIndex {
public:
    /// Indexes every document of the store. Documents are numbered in
    /// lexicographic docid order, so posting order equals docid order.
    static InvertedIndex build(const DocStore& store) {
        if (store.empty()) throw DataError("cannot index an empty document store");
        InvertedIndex idx;
        idx.docids_ = store.ids();
        std::sort(idx.docids_.begin(), idx.docids_.end());
        idx.lengths_.resize(idx.docids_.size());
        for (std::uint32_t d = 0; d < idx.docids_.size(); ++d) {
            std::map<std::string, std::uint32_t> tf;
            const auto words = split_words(store.text(idx.docids_[d]));
            for (const auto& w : words) ++tf[w];
            idx.lengths_[d] = static_cast<std::uint32_t>(words.size());
            for (auto& [term, count] : tf) idx.postings_[term].push_back({d, count});
        }
        idx.finish();
        return idx;
    }

    std::size_t num_docs() const noexcept { return docids_.size(); }
    double avg_length() const noexcept { return avg_length_; }
    const std::vector<std::string>& docids() const noexcept { return docids_; }
    std::uint32_t length(std::uint32_t doc) const { return lengths_.at(doc); }
    std::size_t df(const std::string& term) const {
        auto it = postings_.find(term);
        return it == postings_.end() ? 0 : it->second.size();
    }
    const std::vector<Posting>& postings(const std::string& term) const {
        static const std::vector<Posting> kNone;
        auto it = postings_.find(term);
        return it == postings_.end() ? kNone : it->second;
    }
    const std::map<std::string, std::vector<Posting>>& terms() const noexcept { return postings_; }

    std::uint32_t doc_number(const std::string& docid) const {
        auto it = std::lower_bound(docids_.begin(), docids_.end(), docid);
        if (it == docids_.end() || *it != docid) throw DataError("docid '" + docid + "' not in index");
        return static_cast<std::uint32_t>(it - docids_.begin());
    }

    std::uint32_t term_frequency(const std::string& term, std::uint32_t doc) const {
        const auto& p = postings(term);
        auto it = std::lower_bound(p.begin(), p.end(), doc, [](const Posting& x, std::uint32_t d) { return x.doc < d; });
        return it != p.end() && it->doc == doc ? it->tf : 0;
    }

    friend bool operator==(const InvertedIndex& a, const InvertedIndex& b) {
        return a.docids_ == b.docids_ && a.lengths_ == b.lengths_ && a.postings_ == b.postings_ &&
               a.avg_length_ == b.avg_length_;
    }

    std::string serialize() const;
    static InvertedIndex deserialize(const std::string& bytes);

private:
    void finish() {
        double total = 0.0;
        for (auto l : lengths_) total += l;
        avg_length_ = docids_.empty() ? 0.0 : total / static_cast<double>(docids_.size());
    }

    std::vector<std::string> docids_;
    std::vector<std::uint32_t> lengths_;
    std::map<std::string, std::vector<Posting>> postings_;
    double avg_length_ = 0.0;
};

/// idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)); never negative.
inline double bm25_idf(std::size_t n_docs, std::size_t df) {
    const double n = static_cast<double>(n_docs);
    const double d = static_cast<double>(df);
    return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

inline double bm25_term_weight(double idf, std::uint32_t tf, std::uint32_t len, double avg_len, const Bm25Params& p) {
    const double norm = avg_len > 0.0 ? static_cast<double>(len) / avg_len : 1.0;
    const double f = static_cast<double>(tf);
    return idf * (f * (p.k1 + 1.0)) / (f + p.k1 * (1.0 - p.b + p.b * norm));
}

/// BM25 of one document; each query term instance contributes separately.
inline double bm25_score(const std::vector<std::string>& query_terms, const std::string& docid,
                         const InvertedIndex& index, const Bm25Params& params = {}) {
    const std::uint32_t doc = index.doc_number(docid);
    double score = 0.0;
    for (const auto& t : query_terms) {
        const std::uint32_t tf = index.term_frequency(t, doc);
        if (tf == 0) continue;
        score += bm25_term_weight(bm25_idf(index.num_docs(), index.df(t)), tf, index.length(doc), index.avg_length(),
                                  params);
    }
    return score;
}

/// Top-k documents by BM25, descending score, ties by ascending docid.
/// Documents matching no query term are not returned.
inline std::vector<ScoredDoc> search(const std::string& query, const InvertedIndex& index, std::size_t k,
                                     const Bm25Params& params = {}) {
    if (k < 1) throw UsageError("search depth k must be at least 1");
    std::vector<double> acc(index.num_docs(), 0.0);
    std::vector<std::uint8_t> touched(index.num_docs(), 0);
    for (const auto& t : split_words(query)) {
        const auto& plist = index.postings(t);
        if (plist.empty()) continue;
        const double idf = bm25_idf(index.num_docs(), plist.size());
        for (const auto& p : plist) {
            acc[p.doc] += bm25_term_weight(idf, p.tf, index.length(p.doc), index.avg_length(), params);
            touched[p.doc] = 1;
        }
    }
    std::vector<std::uint32_t> hits;
    for (std::uint32_t d = 0; d < acc.size(); ++d)
        if (touched[d] && acc[d] > 0.0) hits.push_back(d);
    // Doc numbers follow docid order, so the number is the tie-breaker.
    auto better = [&](std::uint32_t a, std::uint32_t b) { return acc[a] != acc[b] ? acc[a] > acc[b] : a < b; };
    const std::size_t n = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n), hits.end(), better);
    std::vector<ScoredDoc> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({index.docids()[hits[i]], acc[hits[i]]});
    return out;
}

// ---- index file ------------------------------------------------------------
//
// "CTIX" | u32 version | u64 header length | JSON header | postings
// Postings per term are (doc delta, tf) varint pairs; the header maps each
// term to its df, byte offset and byte length.

inline constexpr char kIndexMagic[4] = {'C', 'T', 'I', 'X'};
inline constexpr std::uint32_t kIndexVersion = 1;

namespace detail {

inline void put_varint(std::string& out, std::uint64_t v) {
    while (v >= 0x80) {
        out.push_back(static_cast<char>((v & 0x7f) | 0x80));
        v >>= 7;
    }
    out.push_back(static_cast<char>(v));
}

inline std::uint64_t get_varint(const std::string& in, std::size_t& pos, std::size_t end) {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
        if (pos >= end) throw DataError("truncated varint in index postings");
        const auto byte = static_cast<std::uint8_t>(in[pos++]);
        v |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
        if (!(byte & 0x80)) return v;
    }
    throw DataError("overlong varint in index postings");
}

}  // namespace detail

inline std::string InvertedIndex::serialize() const {
    nlohmann::json header;
    header["num_docs"] = docids_.size();
    header["avg_length"] = avg_length_;
    header["docids"] = docids_;
    header["lengths"] = lengths_;
    nlohmann::json terms = nlohmann::json::array();
    std::string data;
    for (const auto& [term, plist] : postings_) {
        const std::size_t offset = data.size();
        std::uint32_t prev = 0;
        for (const auto& p : plist) {
            detail::put_varint(data, p.doc - prev);
            detail::put_varint(data, p.tf);
            prev = p.doc;
        }
        terms.push_back({{"term", term}, {"df", plist.size()}, {"offset", offset}, {"bytes", data.size() - offset}});
    }
    header["terms"] = std::move(terms);
    const std::string hs = header.dump();
    std::string out(kIndexMagic, 4);
    detail::put_le<std::uint32_t>(out, kIndexVersion);
    detail::put_le<std::uint64_t>(out, hs.size());
    out += hs;
    out += data;
    return out;
}

inline InvertedIndex InvertedIndex::deserialize(const std::string& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kIndexMagic, 4) != 0) {
        throw DataError("not an index file (bad magic bytes)");
    }
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos, "index header");
    if (version != kIndexVersion) throw DataError("unsupported index version " + std::to_string(version));
    const auto header_len = detail::get_le<std::uint64_t>(bytes, pos, "index header");
    if (header_len > bytes.size() - pos) throw DataError("truncated index header");
    InvertedIndex idx;
    try {
        const auto header = nlohmann::json::parse(bytes.substr(pos, header_len));
        pos += header_len;
        const std::size_t data_begin = pos;
        idx.docids_ = header.at("docids").get<std::vector<std::string>>();
        idx.lengths_ = header.at("lengths").get<std::vector<std::uint32_t>>();
        if (idx.docids_.size() != header.at("num_docs").get<std::size_t>() || idx.lengths_.size() != idx.docids_.size()) {
            throw DataError("index document table inconsistent with num_docs");
        }
        for (const auto& t : header.at("terms")) {
            const auto begin = data_begin + t.at("offset").get<std::size_t>();
            const auto end = begin + t.at("bytes").get<std::size_t>();
            if (end > bytes.size()) throw DataError("truncated index postings");
            std::vector<Posting> plist;
            std::size_t p = begin;
            std::uint64_t doc = 0;
            while (p < end) {
                doc += detail::get_varint(bytes, p, end);
                const auto tf = detail::get_varint(bytes, p, end);
                if (doc >= idx.docids_.size()) throw DataError("posting refers to unknown document");
                plist.push_back({static_cast<std::uint32_t>(doc), static_cast<std::uint32_t>(tf)});
            }
            if (plist.size() != t.at("df").get<std::size_t>()) throw DataError("posting count differs from df");
            idx.postings_.emplace(t.at("term").get<std::string>(), std::move(plist));
        }
        idx.finish();
        if (idx.avg_length_ != header.at("avg_length").get<double>()) {
            throw DataError("stored average length disagrees with document lengths");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed index header: ") + e.what());
    }
    return idx;
}

inline void save_index(const InvertedIndex& idx, const std::filesystem::path& path) {
    detail::write_file(path, idx.serialize());
}

inline InvertedIndex load_index(const std::filesystem::path& path) {
    return InvertedIndex::deserialize(detail::read_file(path));
}

}  // namespace coarse
