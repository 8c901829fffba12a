#pragma once

// Ranked runs in TREC format, binary-relevance ranking metrics, the paired
// two-sided t-test, significance-marked reports, and neural re-ranking.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "retrieval.hpp"

namespace coarse {

// ---- runs ------------------------------------------------------------------

struct RunEntry {
    std::string docid;
    double score = 0.0;
    int rank = 0;

    friend bool operator==(const RunEntry&, const RunEntry&) = default;
};

class RankedRun {
public:
    RankedRun() = default;
    explicit RankedRun(std::string tag) : tag_(std::move(tag)) {}

    const std::string& tag() const noexcept { return tag_; }
    void set_tag(std::string tag) { tag_ = std::move(tag); }

    /// Stores a query's list sorted by descending score, ties by ascending
    /// docid, ranks 1..n.
    void set(const std::string& qid, std::vector<ScoredDoc> docs) {
        std::sort(docs.begin(), docs.end(), [](const ScoredDoc& a, const ScoredDoc& b) {
            return a.score != b.score ? a.score > b.score : a.docid < b.docid;
        });
        std::vector<RunEntry> entries;
        entries.reserve(docs.size());
        std::set<std::string> seen;
        for (std::size_t i = 0; i < docs.size(); ++i) {
            if (!seen.insert(docs[i].docid).second) {
                throw DataError("docid '" + docs[i].docid + "' appears twice for qid '" + qid + "'");
            }
            entries.push_back({std::move(docs[i].docid), docs[i].score, static_cast<int>(i + 1)});
        }
        queries_[qid] = std::move(entries);
    }

    /// Stores entries exactly as given after checking the run invariants.
    void set_entries(const std::string& qid, std::vector<RunEntry> entries) {
        std::set<std::string> seen;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].rank != static_cast<int>(i + 1)) {
                throw DataError("ranks for qid '" + qid + "' are not contiguous from 1");
            }
            if (i > 0 && entries[i].score > entries[i - 1].score) {
                throw DataError("scores for qid '" + qid + "' increase with rank");
            }
            if (!seen.insert(entries[i].docid).second) {
                throw DataError("docid '" + entries[i].docid + "' appears twice for qid '" + qid + "'");
            }
        }
        queries_[qid] = std::move(entries);
    }

    bool has(const std::string& qid) const { return queries_.contains(qid); }
    const std::vector<RunEntry>& at(const std::string& qid) const {
        auto it = queries_.find(qid);
        if (it == queries_.end()) throw DataError("run has no results for qid '" + qid + "'");
        return it->second;
    }
    const std::map<std::string, std::vector<RunEntry>>& queries() const noexcept { return queries_; }
    std::vector<std::string> qids() const {
        std::vector<std::string> out;
        for (const auto& [q, _] : queries_) out.push_back(q);
        return out;
    }

    /// Adds every query of `other` (which must not overlap).
    void merge(const RankedRun& other) {
        for (const auto& [q, e] : other.queries_) {
            if (queries_.contains(q)) throw DataError("merging runs with overlapping qid '" + q + "'");
            queries_[q] = e;
        }
    }

    RankedRun subset(const std::vector<std::string>& qids) const {
        RankedRun out(tag_);
        for (const auto& q : qids)
            if (auto it = queries_.find(q); it != queries_.end()) out.queries_[q] = it->second;
        return out;
    }

    friend bool operator==(const RankedRun&, const RankedRun&) = default;

private:
    std::string tag_ = "run";
    std::map<std::string, std::vector<RunEntry>> queries_;
};

/// `qid Q0 docid rank score tag`, one line per entry, qids in sorted order.
/// Scores are printed with 17 significant digits so they read back exactly.
inline std::string format_trec_run(const RankedRun& run) {
    std::string out;
    char buf[64];
    for (const auto& [qid, entries] : run.queries()) {
        for (const auto& e : entries) {
            std::snprintf(buf, sizeof buf, "%.17g", e.score);
            out += qid + " Q0 " + e.docid + " " + std::to_string(e.rank) + " " + buf + " " + run.tag() + "\n";
        }
    }
    return out;
}

inline void save_trec_run(const RankedRun& run, const std::filesystem::path& path) {
    detail::write_file(path, format_trec_run(run));
}

inline RankedRun parse_trec_run(std::istream& is, const std::string& source = "run") {
    std::map<std::string, std::vector<RunEntry>> grouped;
    std::string tag;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        std::string qid, q0, docid, rank_s, score_s, t, extra;
        if (!(ls >> qid)) continue;
        if (!(ls >> q0 >> docid >> rank_s >> score_s >> t) || (ls >> extra)) {
            throw DataError(source + ":" + std::to_string(line_no) + ": expected `qid Q0 docid rank score tag`");
        }
        RunEntry e;
        e.docid = docid;
        try {
            e.rank = std::stoi(rank_s);
            e.score = std::stod(score_s);
        } catch (const std::exception&) {
            throw DataError(source + ":" + std::to_string(line_no) + ": non-numeric rank or score");
        }
        if (tag.empty()) tag = t;
        grouped[qid].push_back(std::move(e));
    }
    RankedRun run(tag.empty() ? "run" : tag);
    for (auto& [qid, entries] : grouped) {
        std::stable_sort(entries.begin(), entries.end(), [](const RunEntry& a, const RunEntry& b) { return a.rank < b.rank; });
        run.set_entries(qid, std::move(entries));
    }
    return run;
}

inline RankedRun load_trec_run(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read run file " + path.string());
    return parse_trec_run(is, path.string());
}

// ---- metrics ---------------------------------------------------------------

/// 1 / rank of the first relevant document; 0 if none is retrieved.
inline double reciprocal_rank(const std::vector<RunEntry>& ranking, const Qrels& qrels, const std::string& qid) {
    for (std::size_t i = 0; i < ranking.size(); ++i)
        if (qrels.grade(qid, ranking[i].docid) > 0) return 1.0 / static_cast<double>(i + 1);
    return 0.0;
}

/// Precision at each relevant rank, summed and divided by the number of
/// relevant documents in qrels (unretrieved ones count as zero).
inline double average_precision(const std::vector<RunEntry>& ranking, const Qrels& qrels, const std::string& qid) {
    const std::size_t total = qrels.num_relevant(qid);
    if (total == 0) return 0.0;
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (qrels.grade(qid, ranking[i].docid) > 0) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(total);
}

/// Binary-gain nDCG truncated at k with a log2(rank + 1) discount.
inline double ndcg_at(const std::vector<RunEntry>& ranking, const Qrels& qrels, const std::string& qid, std::size_t k) {
    const std::size_t total = qrels.num_relevant(qid);
    if (total == 0) return 0.0;
    double dcg = 0.0;
    for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
        if (qrels.grade(qid, ranking[i].docid) > 0) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
    double ideal = 0.0;
    for (std::size_t i = 0; i < std::min(k, total); ++i) ideal += 1.0 / std::log2(static_cast<double>(i + 2));
    return dcg / ideal;
}

// ---- significance ----------------------------------------------------------

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
inline double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    // Continued fraction converges fast for x < (a + 1) / (a + b + 2); use
    // the symmetry I_x(a, b) = 1 - I_{1-x}(b, a) otherwise.
    if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    constexpr double kTiny = 1e-300;
    constexpr double kEps = 1e-16;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double f = d;
    for (int m = 1; m <= 10000; ++m) {
        const double m2 = 2.0 * m;
        double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + num / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        f *= d * c;
        num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + num / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double delta = d * c;
        f *= delta;
        if (std::abs(delta - 1.0) < kEps) break;
    }
    return std::exp(log_front) * f / a;
}

/// Two-sided p-value of Student's t with df degrees of freedom.
inline double student_t_two_sided_p(double t, double df) {
    if (!std::isfinite(t)) return 0.0;
    return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
    double t = 0.0;
    int df = 0;
    double p = 1.0;
    double mean_diff = 0.0;
    // False when the differences have zero variance; t is then 0 (all
    // differences zero) or +-inf, and p is reported as 1 by convention.
    bool defined = true;
};

/// Paired two-sided t-test on a[i] - b[i].
inline TTestResult paired_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw UsageError("paired t-test needs equally long samples");
    if (a.size() < 2) throw UsageError("paired t-test needs at least two pairs");
    const std::size_t n = a.size();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i] - mean;
        ss += d * d;
    }
    TTestResult r;
    r.df = static_cast<int>(n - 1);
    r.mean_diff = mean;
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    if (sd == 0.0) {
        r.defined = false;
        r.t = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
        r.p = 1.0;
        return r;
    }
    r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.p = student_t_two_sided_p(r.t, r.df);
    return r;
}

inline constexpr double kSignificanceLevels[] = {0.01, 0.05, 0.10};

/// "*" p<0.01, "†" p<0.05, "‡" p<0.10, else "".
inline std::string significance_mark(const TTestResult& r) {
    if (!r.defined) return "";
    if (r.p < kSignificanceLevels[0]) return "*";
    if (r.p < kSignificanceLevels[1]) return "†";
    if (r.p < kSignificanceLevels[2]) return "‡";
    return "";
}

// ---- reports ---------------------------------------------------------------

inline const std::vector<std::size_t>& default_cutoffs() {
    static const std::vector<std::size_t> kCutoffs = {5, 15, 30};
    return kCutoffs;
}

inline std::vector<std::string> metric_names(const std::vector<std::size_t>& cutoffs) {
    std::vector<std::string> names = {"MRR"};
    for (auto k : cutoffs) names.push_back("nDCG@" + std::to_string(k));
    names.push_back("MAP");
    return names;
}

struct MetricsReport {
    std::string run_tag;
    std::string baseline_tag;  // empty without a baseline
    std::vector<std::string> metrics;
    std::vector<std::string> qids;  // evaluated queries (at least one relevant judgment)
    std::vector<std::string> excluded_qids;  // queries in the run without relevant judgments
    std::map<std::string, std::vector<double>> per_query;  // metric -> value per evaluated qid
    std::map<std::string, double> mean;
    std::map<std::string, std::vector<double>> baseline_per_query;
    std::map<std::string, double> baseline_mean;
    std::map<std::string, TTestResult> vs_baseline;
};

/// Per-query metrics for every run query that has a relevant judgment.
inline MetricsReport evaluate_run(const RankedRun& run, const Qrels& qrels,
                                  const std::vector<std::size_t>& cutoffs = default_cutoffs()) {
    MetricsReport r;
    r.run_tag = run.tag();
    r.metrics = metric_names(cutoffs);
    for (const auto& [qid, ranking] : run.queries()) {
        if (qrels.num_relevant(qid) == 0) {
            r.excluded_qids.push_back(qid);
            continue;
        }
        r.qids.push_back(qid);
        r.per_query["MRR"].push_back(reciprocal_rank(ranking, qrels, qid));
        for (auto k : cutoffs) r.per_query["nDCG@" + std::to_string(k)].push_back(ndcg_at(ranking, qrels, qid, k));
        r.per_query["MAP"].push_back(average_precision(ranking, qrels, qid));
    }
    for (const auto& m : r.metrics) {
        const auto& v = r.per_query[m];
        r.mean[m] = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
    return r;
}

/// Attaches baseline per-query values and paired t-tests. Both reports must
/// cover the same evaluated queries.
inline void attach_baseline(MetricsReport& report, const MetricsReport& baseline) {
    if (report.qids != baseline.qids || report.metrics != baseline.metrics) {
        throw DataError("run '" + report.run_tag + "' and baseline '" + baseline.run_tag +
                        "' do not cover the same queries");
    }
    report.baseline_tag = baseline.run_tag;
    report.baseline_per_query = baseline.per_query;
    report.baseline_mean = baseline.mean;
    for (const auto& m : report.metrics) {
        if (report.qids.size() >= 2) {
            report.vs_baseline[m] = paired_ttest(report.per_query.at(m), baseline.per_query.at(m));
        } else {
            report.vs_baseline[m] = TTestResult{0.0, 0, 1.0, report.mean.at(m) - baseline.mean.at(m), false};
        }
    }
}

inline MetricsReport evaluate(const RankedRun& run, const RankedRun& baseline, const Qrels& qrels,
                              const std::vector<std::size_t>& cutoffs = default_cutoffs()) {
    if (run.qids() != baseline.qids()) {
        throw DataError("run '" + run.tag() + "' and baseline '" + baseline.tag() + "' cover different qid sets");
    }
    MetricsReport r = evaluate_run(run, qrels, cutoffs);
    attach_baseline(r, evaluate_run(baseline, qrels, cutoffs));
    return r;
}

namespace detail {

inline std::string fixed3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::size_t display_width(const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;  // count UTF-8 code points
    return w;
}

inline std::string pad_right(const std::string& s, std::size_t w) {
    return s + std::string(w > display_width(s) ? w - display_width(s) : 0, ' ');
}

inline std::string pad_left(const std::string& s, std::size_t w) {
    return std::string(w > display_width(s) ? w - display_width(s) : 0, ' ') + s;
}

inline nlohmann::json ttest_json(const TTestResult& t) {
    nlohmann::json j = {{"df", t.df}, {"mean_diff", t.mean_diff}, {"defined", t.defined}};
    j["t"] = std::isfinite(t.t) ? nlohmann::json(t.t) : nlohmann::json(nullptr);
    j["p"] = t.defined ? nlohmann::json(t.p) : nlohmann::json(nullptr);
    return j;
}

}  // namespace detail

/// Table of mean metrics, one row per labelled report. Rows carrying a
/// baseline get significance marks against it.
inline std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
    if (rows.empty()) return "";
    const auto& metrics = rows.front().second.metrics;
    std::size_t label_w = 0;
    for (const auto& [label, _] : rows) label_w = std::max(label_w, detail::display_width(label));
    const std::size_t col_w = 10;
    std::string out = detail::pad_right("", label_w);
    for (const auto& m : metrics) out += " " + detail::pad_left(m, col_w);
    out += "\n" + std::string(label_w + (col_w + 1) * metrics.size(), '-') + "\n";
    for (const auto& [label, r] : rows) {
        out += detail::pad_right(label, label_w);
        for (const auto& m : metrics) {
            std::string cell = detail::fixed3(r.mean.at(m));
            if (auto it = r.vs_baseline.find(m); it != r.vs_baseline.end()) cell += significance_mark(it->second);
            out += " " + detail::pad_left(cell, col_w);
        }
        out += "\n";
    }
    return out;
}

/// Baseline row followed by the run row, Table-1 style, with a legend.
inline std::string format_report(const MetricsReport& r) {
    std::vector<std::pair<std::string, MetricsReport>> rows;
    if (!r.baseline_tag.empty()) {
        MetricsReport base;
        base.metrics = r.metrics;
        base.mean = r.baseline_mean;
        rows.emplace_back(r.baseline_tag + " (baseline)", std::move(base));
    }
    rows.emplace_back(r.run_tag, r);
    std::string out = format_table(rows);
    out += "queries evaluated: " + std::to_string(r.qids.size()) +
           ", excluded (no relevant judgments): " + std::to_string(r.excluded_qids.size()) + "\n";
    if (!r.baseline_tag.empty()) {
        out += "significance vs baseline (paired two-sided t-test): * p<0.01, † p<0.05, ‡ p<0.10\n";
        for (const auto& m : r.metrics) {
            const auto& t = r.vs_baseline.at(m);
            char buf[160];
            if (t.defined) {
                std::snprintf(buf, sizeof buf, "  %-8s delta %+.4f  t %+.4f  df %d  p %.4g\n", m.c_str(), t.mean_diff,
                              t.t, t.df, t.p);
            } else {
                std::snprintf(buf, sizeof buf, "  %-8s delta %+.4f  p undefined (zero-variance differences)\n",
                              m.c_str(), t.mean_diff);
            }
            out += buf;
        }
    }
    return out;
}

inline nlohmann::json report_json(const MetricsReport& r) {
    nlohmann::json j;
    j["run"] = r.run_tag;
    j["metrics"] = r.metrics;
    j["qids"] = r.qids;
    j["excluded_qids"] = r.excluded_qids;
    j["mean"] = r.mean;
    j["per_query"] = r.per_query;
    if (!r.baseline_tag.empty()) {
        j["baseline"] = r.baseline_tag;
        j["baseline_mean"] = r.baseline_mean;
        nlohmann::json tests;
        for (const auto& [m, t] : r.vs_baseline) {
            auto tj = detail::ttest_json(t);
            tj["mark"] = significance_mark(t);
            tests[m] = std::move(tj);
        }
        j["vs_baseline"] = std::move(tests);
    }
    return j;
}

// ---- re-ranking ------------------------------------------------------------

/// Scores every candidate with the relevance head (probability of the
/// relevant class) and re-sorts. The candidate set is unchanged.
inline RankedRun rerank(const Model& model, const QueryMap& queries, const RankedRun& candidates, const DocStore& store,
                        const Vocabulary& vocab, const SequenceLimits& limits, const std::string& tag) {
    if (static_cast<std::size_t>(model.config.vocab) != vocab.size()) {
        throw DataError("model vocabulary size " + std::to_string(model.config.vocab) + " differs from vocabulary (" +
                        std::to_string(vocab.size()) + ")");
    }
    std::unordered_map<std::string, std::vector<int>> doc_cache;
    RankedRun out(tag);
    for (const auto& [qid, entries] : candidates.queries()) {
        auto q = queries.find(qid);
        if (q == queries.end()) throw DataError("no query text for qid '" + qid + "'");
        auto qids = encode(q->second, vocab);
        if (qids.empty()) throw DataError("query '" + qid + "' is empty after tokenization");
        if (qids.size() > static_cast<std::size_t>(limits.max_query_tokens)) {
            throw DataError("query '" + qid + "' exceeds max_query_tokens");
        }
        std::vector<ScoredDoc> scored;
        scored.reserve(entries.size());
        for (const auto& e : entries) {
            auto it = doc_cache.find(e.docid);
            if (it == doc_cache.end()) it = doc_cache.emplace(e.docid, encode(store.text(e.docid), vocab)).first;
            const InputSequence seq = build_pair_sequence(qids, it->second, limits.max_len);
            scored.push_back({e.docid, relevance_score(model.config, model.weights, seq)});
        }
        out.set(qid, std::move(scored));
    }
    return out;
}

/// BM25 candidates for the given queries.
inline RankedRun bm25_run(const InvertedIndex& index, const QueryMap& queries, const std::vector<std::string>& qids,
                          std::size_t depth, const Bm25Params& params, const std::string& tag = "bm25") {
    RankedRun run(tag);
    for (const auto& qid : qids) {
        auto q = queries.find(qid);
        if (q == queries.end()) throw DataError("no query text for qid '" + qid + "'");
        auto hits = search(q->second, index, depth, params);
        if (!hits.empty()) run.set(qid, std::move(hits));
    }
    return run;
}

}  // namespace coarse
