#pragma once

// Planted synthetic corpus: topic-structured pseudo-word documents, queries
// drawn from the salient words of a source document, a click log pairing
// queries with their source documents, and qrels with same-topic distractors.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace coarse {

struct SynthConfig {
    int n_docs = 2000;
    int n_queries = 250;     // judged queries (qrels + queries file)
    int n_clicks = 6250;     // click-log lines; about 500 survive 8% sampling
    int vocab_words = 2000;  // distinct word types: topic words + background words
    int n_topics = 20;
    double topic_share = 0.8;  // fraction of the vocabulary reserved for topic words
    int doc_len_min = 30;
    int doc_len_max = 60;
    int key_words = 4;         // salient words planted per document
    double topic_rate = 0.4;   // filler tokens drawn from the topic instead of the background
    int distractors = 9;       // grade-0 judgments per query
    std::uint64_t seed = 7;

    void validate() const {
        if (n_docs < 2 || n_queries < 1 || n_clicks < 1 || n_topics < 1 || vocab_words < 2 * n_topics) {
            throw UsageError("synthetic corpus parameters must be positive");
        }
        if (n_queries >= n_docs) throw UsageError("judged queries need distinct source documents");
        if (doc_len_min < key_words * 2 || doc_len_max < doc_len_min) throw UsageError("invalid document length range");
        if (key_words < 2) throw UsageError("documents need at least two key words");
        if (!(topic_share > 0.0 && topic_share < 1.0) || !(topic_rate >= 0.0 && topic_rate <= 1.0)) {
            throw UsageError("topic shares must lie in (0, 1)");
        }
        const int per_topic = static_cast<int>(vocab_words * topic_share) / n_topics;
        if (per_topic < key_words) throw UsageError("too few words per topic");
    }
};

struct SynthDoc {
    int topic = 0;
    std::vector<std::string> key_words;
};

struct SyntheticCorpus {
    DocStore store;
    std::vector<ClickLogEntry> clicks;
    QueryMap queries;
    Qrels qrels;
    std::vector<SynthDoc> docs;                // parallel to store.ids()
    std::vector<std::string> judged_sources;   // source docid per judged query, by qid order
};

namespace detail {

/// Distinct pseudo-words built from consonant-vowel syllables.
inline std::vector<std::string> pseudo_words(int n, Rng& rng) {
    static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "pl"};
    static const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < n) {
        const std::size_t syllables = 2 + uniform_index(rng, 3);
        std::string w;
        for (std::size_t s = 0; s < syllables; ++s) {
            w += kOnsets[uniform_index(rng, std::size(kOnsets))];
            w += kVowels[uniform_index(rng, std::size(kVowels))];
        }
        if (uniform01(rng) < 0.3) w += "n";
        if (seen.insert(w).second) out.push_back(w);
    }
    return out;
}

/// Zipf(1) sampler over ranks 0..n-1.
class ZipfSampler {
public:
    explicit ZipfSampler(std::size_t n) : cdf_(n) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) cdf_[i] = total += 1.0 / static_cast<double>(i + 1);
        for (double& c : cdf_) c /= total;
    }
    std::size_t operator()(Rng& rng) const {
        const double u = uniform01(rng);
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return std::min(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
    }

private:
    std::vector<double> cdf_;
};

inline std::string numbered(const char* prefix, int i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
    return buf;
}

/// 2..min(4, key words) of the document's key words in random order.
inline std::string make_query(const SynthDoc& d, Rng& rng) {
    std::vector<std::string> keys = d.key_words;
    shuffle_in_place(keys, rng);
    const std::size_t hi = std::min<std::size_t>(4, keys.size());
    const std::size_t n = 2 + uniform_index(rng, hi - 1);
    std::string q;
    for (std::size_t i = 0; i < n; ++i) q += (i ? " " : "") + keys[i];
    return q;
}

}  // namespace detail

inline SyntheticCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng = derive_rng(cfg.seed, {stream::kSampling, 0x5e});
    const auto words = detail::pseudo_words(cfg.vocab_words, rng);
    const int per_topic = static_cast<int>(cfg.vocab_words * cfg.topic_share) / cfg.n_topics;
    const std::size_t n_background = words.size() - static_cast<std::size_t>(per_topic * cfg.n_topics);
    auto topic_word = [&](int topic, std::size_t i) { return words[static_cast<std::size_t>(topic * per_topic) + i]; };
    auto background_word = [&](std::size_t r) { return words[static_cast<std::size_t>(per_topic * cfg.n_topics) + r]; };
    const detail::ZipfSampler background(n_background);

    SyntheticCorpus out;
    const int width = static_cast<int>(std::to_string(cfg.n_docs).size());
    for (int i = 0; i < cfg.n_docs; ++i) {
        SynthDoc d;
        d.topic = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.n_topics)));
        std::vector<std::size_t> pool(static_cast<std::size_t>(per_topic));
        for (std::size_t j = 0; j < pool.size(); ++j) pool[j] = j;
        shuffle_in_place(pool, rng);
        const int len = cfg.doc_len_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(cfg.doc_len_max - cfg.doc_len_min + 1)));
        std::vector<std::string> tokens;
        for (int k = 0; k < cfg.key_words; ++k) {
            d.key_words.push_back(topic_word(d.topic, pool[static_cast<std::size_t>(k)]));
            const int reps = 2 + static_cast<int>(uniform_index(rng, 2));
            for (int r = 0; r < reps; ++r) tokens.push_back(d.key_words.back());
        }
        while (static_cast<int>(tokens.size()) < len) {
            if (uniform01(rng) < cfg.topic_rate) {
                tokens.push_back(topic_word(d.topic, uniform_index(rng, static_cast<std::size_t>(per_topic))));
            } else {
                tokens.push_back(background_word(background(rng)));
            }
        }
        shuffle_in_place(tokens, rng);
        std::string text;
        for (std::size_t t = 0; t < tokens.size(); ++t) text += (t ? " " : "") + tokens[t];
        text += " .";
        out.store.add(detail::numbered("d", i, width), std::move(text));
        out.docs.push_back(std::move(d));
    }
    const auto& ids = out.store.ids();

    // Judged queries come from their own source documents; click-log queries
    // come from the remaining documents, so no judged query-document pair is
    // ever seen in the click log.
    std::vector<std::size_t> order(ids.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_in_place(order, rng);
    const std::vector<std::size_t> judged(order.begin(), order.begin() + cfg.n_queries);
    const std::vector<std::size_t> clickable(order.begin() + cfg.n_queries, order.end());

    std::vector<std::vector<std::size_t>> by_topic(static_cast<std::size_t>(cfg.n_topics));
    for (std::size_t i = 0; i < out.docs.size(); ++i) by_topic[static_cast<std::size_t>(out.docs[i].topic)].push_back(i);

    const int qwidth = static_cast<int>(std::to_string(cfg.n_queries).size());
    for (int q = 0; q < cfg.n_queries; ++q) {
        const std::size_t src = judged[static_cast<std::size_t>(q)];
        const std::string qid = detail::numbered("q", q, qwidth);
        const std::string text = detail::make_query(out.docs[src], rng);
        out.queries[qid] = text;
        out.qrels.add(qid, ids[src], 1);
        out.judged_sources.push_back(ids[src]);

        // Distractors: same-topic documents, half of them the ones sharing
        // the most query words (pool-style hard negatives), half random.
        const auto qwords = split_words(text);
        std::vector<std::pair<int, std::size_t>> overlap;
        for (std::size_t cand : by_topic[static_cast<std::size_t>(out.docs[src].topic)]) {
            if (cand == src) continue;
            const auto body = split_words(out.store.text(ids[cand]));
            const std::set<std::string> present(body.begin(), body.end());
            int hits = 0;
            for (const auto& w : qwords) hits += present.contains(w);
            overlap.push_back({-hits, cand});
        }
        std::sort(overlap.begin(), overlap.end());
        std::set<std::size_t> chosen;
        const std::size_t hard = std::min<std::size_t>(static_cast<std::size_t>(cfg.distractors + 1) / 2, overlap.size());
        for (std::size_t i = 0; i < hard; ++i) chosen.insert(overlap[i].second);
        std::vector<std::size_t> rest;
        for (std::size_t i = hard; i < overlap.size(); ++i) rest.push_back(overlap[i].second);
        shuffle_in_place(rest, rng);
        for (std::size_t i = 0; chosen.size() < static_cast<std::size_t>(cfg.distractors) && i < rest.size(); ++i) {
            chosen.insert(rest[i]);
        }
        for (std::size_t c : chosen) out.qrels.add(qid, ids[c], 0);
    }

    const int cwidth = static_cast<int>(std::to_string(cfg.n_clicks).size());
    for (int c = 0; c < cfg.n_clicks; ++c) {
        const std::size_t src = clickable[uniform_index(rng, clickable.size())];
        out.clicks.push_back({detail::numbered("c", c, cwidth), detail::make_query(out.docs[src], rng), ids[src]});
    }
    return out;
}

/// Writes docs.jsonl, clicks.tsv, queries.tsv and qrels.txt into `dir`.
inline void save_synthetic_corpus(const SyntheticCorpus& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_docstore(c.store, dir / "docs.jsonl");
    save_clicklog(c.clicks, dir / "clicks.tsv");
    save_queries(c.queries, dir / "queries.tsv");
    save_qrels(c.qrels, dir / "qrels.txt");
}

}  // namespace coarse
