#pragma once

// Corpus, click-log, query and qrels ingestion plus construction of encoder
// training instances (masked-token targets, pair labels, relevance labels).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "rng.hpp"
#include "sequence.hpp"
#include "tokenizer.hpp"

namespace coarse {

// ---- documents -------------------------------------------------------------

class DocStore {
public:
    void add(std::string docid, std::string text) {
        if (docid.empty()) throw DataError("empty docid");
        if (texts_.contains(docid)) throw DataError("duplicate docid '" + docid + "'");
        ids_.push_back(docid);
        texts_.emplace(std::move(docid), std::move(text));
    }

    bool contains(const std::string& docid) const { return texts_.contains(docid); }
    const std::string& text(const std::string& docid) const {
        auto it = texts_.find(docid);
        if (it == texts_.end()) throw DataError("unknown docid '" + docid + "'");
        return it->second;
    }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    std::size_t size() const noexcept { return ids_.size(); }
    bool empty() const noexcept { return ids_.empty(); }

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        out.reserve(ids_.size());
        for (const auto& id : ids_) out.push_back(texts_.at(id));
        return out;
    }

private:
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::string> texts_;
};

namespace detail {

inline std::ifstream open_input(const std::filesystem::path& path, const char* what) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError(std::string("cannot read ") + what + " file " + path.string());
    return is;
}

inline std::ofstream open_output(const std::filesystem::path& path, const char* what) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError(std::string("cannot write ") + what + " file " + path.string());
    return os;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
    }
    return fields;
}

inline void chomp(std::string& line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
}

inline std::string location(const std::filesystem::path& path, std::size_t line_no) {
    return path.string() + ":" + std::to_string(line_no);
}

}  // namespace detail

/// JSON-lines, one {"docid": ..., "text": ...} object per line.
inline DocStore load_docstore(const std::filesystem::path& path) {
    auto is = detail::open_input(path, "document");
    DocStore store;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        detail::chomp(line);
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            store.add(j.at("docid").get<std::string>(), j.at("text").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError(detail::location(path, line_no) + ": malformed document line: " + e.what());
        } catch (const DataError& e) {
            throw DataError(detail::location(path, line_no) + ": " + e.what());
        }
    }
    return store;
}

inline void save_docstore(const DocStore& store, const std::filesystem::path& path) {
    auto os = detail::open_output(path, "document");
    for (const auto& id : store.ids()) os << nlohmann::json{{"docid", id}, {"text", store.text(id)}}.dump() << '\n';
}

// ---- click log -------------------------------------------------------------

struct ClickLogEntry {
    std::string qid;
    std::string query;
    std::string docid;

    friend bool operator==(const ClickLogEntry&, const ClickLogEntry&) = default;
};

struct ClickLogLoad {
    std::vector<ClickLogEntry> entries;
    std::size_t lines = 0;            // data lines read
    std::size_t sampled = 0;          // lines kept by the sampling draw
    std::size_t dropped_unknown = 0;  // sampled lines whose docid is not in the store
};

/// Reads `qid<TAB>query<TAB>docid[<TAB>url]`. Each line is kept with
/// probability sample_rate; one uniform draw is consumed per line so the kept
/// set is a function of (file, seed, rate). Unresolvable docids are dropped
/// and counted.
inline ClickLogLoad load_clicklog(const std::filesystem::path& path, const DocStore& store, double sample_rate,
                                  std::uint64_t seed) {
    if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw UsageError("click-log sample rate must lie in (0, 1]");
    auto is = detail::open_input(path, "click-log");
    Rng rng = derive_rng(seed, {stream::kSampling});
    ClickLogLoad out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        detail::chomp(line);
        if (line.empty()) continue;
        auto f = detail::split_tabs(line);
        if (f.size() < 3 || f.size() > 4 || f[0].empty() || f[2].empty()) {
            throw DataError(detail::location(path, line_no) + ": expected qid<TAB>query<TAB>docid[<TAB>url]");
        }
        ++out.lines;
        if (uniform01(rng) >= sample_rate) continue;
        ++out.sampled;
        if (!store.contains(f[2])) {
            ++out.dropped_unknown;
            continue;
        }
        out.entries.push_back({std::move(f[0]), std::move(f[1]), std::move(f[2])});
    }
    return out;
}

inline void save_clicklog(const std::vector<ClickLogEntry>& entries, const std::filesystem::path& path) {
    auto os = detail::open_output(path, "click-log");
    for (const auto& e : entries) os << e.qid << '\t' << e.query << '\t' << e.docid << '\n';
}

// ---- queries ---------------------------------------------------------------

using QueryMap = std::map<std::string, std::string>;

inline QueryMap load_queries(const std::filesystem::path& path) {
    auto is = detail::open_input(path, "query");
    QueryMap out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        detail::chomp(line);
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) {
            throw DataError(detail::location(path, line_no) + ": expected qid<TAB>query text");
        }
        if (!out.emplace(line.substr(0, tab), line.substr(tab + 1)).second) {
            throw DataError(detail::location(path, line_no) + ": duplicate qid");
        }
    }
    return out;
}

inline void save_queries(const QueryMap& queries, const std::filesystem::path& path) {
    auto os = detail::open_output(path, "query");
    for (const auto& [qid, text] : queries) os << qid << '\t' << text << '\n';
}

// ---- qrels -----------------------------------------------------------------

struct Judgment {
    int grade = 0;           // collapsed: 0 or 1
    int original_grade = 0;  // as read: 0, 1 or 2
};

/// Graded judgments with "highly relevant" (2) collapsed into relevant (1).
class Qrels {
public:
    void add(const std::string& qid, const std::string& docid, int grade) {
        if (grade < 0 || grade > 2) throw DataError("relevance grade " + std::to_string(grade) + " outside {0,1,2}");
        judgments_[qid][docid] = Judgment{grade > 0 ? 1 : 0, grade};
    }

    /// Collapsed grade; unjudged documents are non-relevant.
    int grade(const std::string& qid, const std::string& docid) const {
        auto q = judgments_.find(qid);
        if (q == judgments_.end()) return 0;
        auto d = q->second.find(docid);
        return d == q->second.end() ? 0 : d->second.grade;
    }

    bool has_query(const std::string& qid) const { return judgments_.contains(qid); }

    std::size_t num_relevant(const std::string& qid) const {
        auto q = judgments_.find(qid);
        if (q == judgments_.end()) return 0;
        return static_cast<std::size_t>(std::count_if(q->second.begin(), q->second.end(),
                                                      [](const auto& kv) { return kv.second.grade > 0; }));
    }

    const std::map<std::string, Judgment>& judgments(const std::string& qid) const {
        static const std::map<std::string, Judgment> kEmpty;
        auto q = judgments_.find(qid);
        return q == judgments_.end() ? kEmpty : q->second;
    }

    std::vector<std::string> qids() const {
        std::vector<std::string> out;
        for (const auto& [q, _] : judgments_) out.push_back(q);
        return out;
    }

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [_, m] : judgments_) n += m.size();
        return n;
    }

    /// Judgments restricted to the given queries.
    Qrels subset(const std::vector<std::string>& qids) const {
        Qrels out;
        for (const auto& q : qids)
            if (auto it = judgments_.find(q); it != judgments_.end()) out.judgments_[q] = it->second;
        return out;
    }

private:
    std::map<std::string, std::map<std::string, Judgment>> judgments_;
};

/// TREC qrels: `qid 0 docid grade`, whitespace separated.
inline Qrels load_qrels(const std::filesystem::path& path) {
    auto is = detail::open_input(path, "qrels");
    Qrels q;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string qid, iter, docid, grade_s, extra;
        if (!(ls >> qid)) continue;
        if (!(ls >> iter >> docid >> grade_s) || (ls >> extra)) {
            throw DataError(detail::location(path, line_no) + ": expected `qid 0 docid grade`");
        }
        int grade = 0;
        try {
            std::size_t used = 0;
            grade = std::stoi(grade_s, &used);
            if (used != grade_s.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw DataError(detail::location(path, line_no) + ": grade '" + grade_s + "' is not an integer");
        }
        try {
            q.add(qid, docid, grade);
        } catch (const DataError& e) {
            throw DataError(detail::location(path, line_no) + ": " + e.what());
        }
    }
    return q;
}

inline void save_qrels(const Qrels& qrels, const std::filesystem::path& path) {
    auto os = detail::open_output(path, "qrels");
    for (const auto& qid : qrels.qids())
        for (const auto& [docid, j] : qrels.judgments(qid)) os << qid << " 0 " << docid << ' ' << j.original_grade << '\n';
}

// ---- sequence construction -------------------------------------------------

struct SequenceLimits {
    int max_len = 256;
    int max_query_tokens = 64;
};

/// [CLS] [Q] [SEP] [D] [SEP]
inline constexpr std::size_t kPairSpecials = 5;

/// Lays out `[CLS] [Q] q... [SEP] [D] d... [SEP]` padded to max_len. Document
/// tokens are truncated to fit; the query is never truncated.
inline InputSequence build_pair_sequence(const std::vector<int>& query_ids, const std::vector<int>& doc_ids,
                                         int max_len) {
    const std::size_t limit = static_cast<std::size_t>(max_len);
    if (kPairSpecials + query_ids.size() > limit) {
        throw DataError("query of " + std::to_string(query_ids.size()) + " tokens does not fit in max_len " +
                        std::to_string(max_len));
    }
    const std::size_t doc_kept = std::min(doc_ids.size(), limit - kPairSpecials - query_ids.size());
    InputSequence s;
    s.token_ids.reserve(limit);
    s.token_ids.push_back(kCls);
    s.token_ids.push_back(kQuery);
    s.query_begin = 2;
    s.token_ids.insert(s.token_ids.end(), query_ids.begin(), query_ids.end());
    s.query_end = s.token_ids.size();
    s.token_ids.push_back(kSep);
    const std::size_t first_doc_side = s.token_ids.size();
    s.token_ids.push_back(kDoc);
    s.doc_begin = s.token_ids.size();
    s.token_ids.insert(s.token_ids.end(), doc_ids.begin(), doc_ids.begin() + static_cast<std::ptrdiff_t>(doc_kept));
    s.doc_end = s.token_ids.size();
    s.token_ids.push_back(kSep);
    const std::size_t len = s.token_ids.size();

    s.token_ids.resize(limit, kPad);
    s.attention_mask.assign(limit, 0);
    std::fill_n(s.attention_mask.begin(), len, 1);
    s.segment_ids.assign(limit, 0);
    std::fill(s.segment_ids.begin() + static_cast<std::ptrdiff_t>(first_doc_side),
              s.segment_ids.begin() + static_cast<std::ptrdiff_t>(len), 1);
    s.mlm_targets.assign(limit, kIgnoreIndex);
    return s;
}

inline InputSequence build_sequence(const std::string& query, const std::string& doc, const Vocabulary& vocab,
                                    const SequenceLimits& limits) {
    auto q = encode(query, vocab);
    if (q.empty()) throw DataError("query '" + query + "' is empty after tokenization");
    if (q.size() > static_cast<std::size_t>(limits.max_query_tokens)) {
        throw DataError("query of " + std::to_string(q.size()) + " tokens exceeds max_query_tokens " +
                        std::to_string(limits.max_query_tokens));
    }
    return build_pair_sequence(q, encode(doc, vocab), limits.max_len);
}

/// `[CLS] d... [SEP]` padded to max_len, all segment 0.
inline InputSequence build_document_sequence(const std::vector<int>& doc_ids, int max_len) {
    if (doc_ids.empty()) throw DataError("document is empty after tokenization");
    const std::size_t limit = static_cast<std::size_t>(max_len);
    const std::size_t kept = std::min(doc_ids.size(), limit - 2);
    InputSequence s;
    s.token_ids.push_back(kCls);
    s.doc_begin = 1;
    s.token_ids.insert(s.token_ids.end(), doc_ids.begin(), doc_ids.begin() + static_cast<std::ptrdiff_t>(kept));
    s.doc_end = s.token_ids.size();
    s.token_ids.push_back(kSep);
    const std::size_t len = s.token_ids.size();
    s.token_ids.resize(limit, kPad);
    s.attention_mask.assign(limit, 0);
    std::fill_n(s.attention_mask.begin(), len, 1);
    s.segment_ids.assign(limit, 0);
    s.mlm_targets.assign(limit, kIgnoreIndex);
    return s;
}

enum class MaskScope { AllTokens, QueryOnly };

inline std::vector<std::size_t> mask_eligible_positions(const InputSequence& s, MaskScope scope) {
    std::vector<std::size_t> pos;
    for (std::size_t i = s.query_begin; i < s.query_end; ++i) pos.push_back(i);
    if (scope == MaskScope::AllTokens)
        for (std::size_t i = s.doc_begin; i < s.doc_end; ++i) pos.push_back(i);
    std::erase_if(pos, [&](std::size_t i) { return is_special_id(s.token_ids[i]); });
    return pos;
}

/// Replaces each eligible token with [MASK] independently with probability
/// `rate`, recording the original id as its target. A draw that masks
/// nothing is repeated.
inline InputSequence apply_mlm_mask(const InputSequence& seq, double rate, MaskScope scope, Rng& rng) {
    if (!(rate > 0.0 && rate < 1.0)) throw UsageError("mask rate must lie in (0, 1)");
    const auto eligible = mask_eligible_positions(seq, scope);
    if (eligible.empty()) throw DataError("no maskable positions in sequence");
    InputSequence s = seq;
    std::vector<std::size_t> chosen;
    while (chosen.empty()) {
        for (std::size_t i : eligible)
            if (uniform01(rng) < rate) chosen.push_back(i);
    }
    for (std::size_t i : chosen) {
        s.mlm_targets[i] = s.token_ids[i];
        s.token_ids[i] = kMask;
    }
    return s;
}

// ---- pair prediction instances ---------------------------------------------

/// Draws IsPair/NotPair documents for click-log entries. NotPair documents
/// are uniform over the store excluding every document clicked for the qid.
class QdppSampler {
public:
    struct Draw {
        std::string docid;
        PairLabel label;
    };

    QdppSampler(const DocStore& store, const std::vector<ClickLogEntry>& clicks) : store_(&store) {
        if (store.size() < 2) throw DataError("pair sampling needs at least two documents");
        for (const auto& e : clicks) clicked_[e.qid].insert(e.docid);
    }

    const std::unordered_set<std::string>& clicked(const std::string& qid) const {
        static const std::unordered_set<std::string> kNone;
        auto it = clicked_.find(qid);
        return it == clicked_.end() ? kNone : it->second;
    }

    Draw draw(const ClickLogEntry& entry, double p_ispair, Rng& rng) const {
        if (uniform01(rng) < p_ispair) return {entry.docid, PairLabel::IsPair};
        const auto& excluded = clicked(entry.qid);
        std::size_t blocked = store_->contains(entry.docid) && !excluded.contains(entry.docid) ? 1 : 0;
        for (const auto& d : excluded) blocked += store_->contains(d) ? 1 : 0;
        if (blocked >= store_->size()) throw DataError("no eligible negative document for qid '" + entry.qid + "'");
        while (true) {
            const auto& candidate = store_->ids()[uniform_index(rng, store_->size())];
            if (!excluded.contains(candidate) && candidate != entry.docid) return {candidate, PairLabel::NotPair};
        }
    }

private:
    const DocStore* store_;
    std::unordered_map<std::string, std::unordered_set<std::string>> clicked_;
};

inline InputSequence make_qdpp_instance(const ClickLogEntry& entry, const DocStore& store, const QdppSampler& sampler,
                                        const Vocabulary& vocab, const SequenceLimits& limits, double p_ispair,
                                        Rng& rng) {
    auto d = sampler.draw(entry, p_ispair, rng);
    InputSequence s = build_sequence(entry.query, store.text(d.docid), vocab, limits);
    s.pair_label = d.label;
    s.qid = entry.qid;
    s.docid = d.docid;
    return s;
}

// ---- fine-tuning instances -------------------------------------------------

struct FinetuneSet {
    std::vector<InputSequence> instances;
    std::vector<std::string> skipped;  // one message per unresolvable judgment
};

/// One relevance-labelled sequence per resolvable judgment, ordered by
/// (qid, docid). Epoch shuffling is left to the trainer.
inline FinetuneSet make_finetune_instances(const Qrels& qrels, const QueryMap& queries, const DocStore& store,
                                           const Vocabulary& vocab, const SequenceLimits& limits) {
    FinetuneSet out;
    for (const auto& qid : qrels.qids()) {
        auto q = queries.find(qid);
        for (const auto& [docid, j] : qrels.judgments(qid)) {
            if (q == queries.end()) {
                out.skipped.push_back("qid '" + qid + "' has no query text");
                continue;
            }
            if (!store.contains(docid)) {
                out.skipped.push_back("docid '" + docid + "' (qid '" + qid + "') not in document store");
                continue;
            }
            InputSequence s = build_sequence(q->second, store.text(docid), vocab, limits);
            s.relevance_label = j.grade;
            s.qid = qid;
            s.docid = docid;
            out.instances.push_back(std::move(s));
        }
    }
    return out;
}

// ---- cross-validation ------------------------------------------------------

/// Sorts qids and deals them round-robin into k folds.
inline std::vector<std::vector<std::string>> fold_split(std::vector<std::string> qids, std::size_t k) {
    if (k < 2) throw UsageError("cross-validation needs at least two folds");
    std::sort(qids.begin(), qids.end());
    qids.erase(std::unique(qids.begin(), qids.end()), qids.end());
    if (qids.size() < k) {
        throw UsageError("cannot split " + std::to_string(qids.size()) + " queries into " + std::to_string(k) +
                         " folds");
    }
    std::vector<std::vector<std::string>> folds(k);
    for (std::size_t i = 0; i < qids.size(); ++i) folds[i % k].push_back(qids[i]);
    return folds;
}

}  // namespace coarse
