#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include <coarse/data.hpp>
#include <coarse/retrieval.hpp>
#include <coarse/synth.hpp>

using namespace coarse;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
    auto p = fs::temp_directory_path() / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
}

DocStore small_store(int n) {
    DocStore s;
    for (int i = 0; i < n; ++i) s.add("d" + std::to_string(i), "document number " + std::to_string(i));
    return s;
}

Vocabulary word_vocab(std::initializer_list<const char*> words) {
    Vocabulary v;
    for (const char* w : words) v.add(w);
    return v;
}

}  // namespace

TEST(DocStore, RejectsDuplicatesAndReadsJsonLines) {
    DocStore s;
    s.add("a", "x");
    EXPECT_THROW(s.add("a", "y"), DataError);
    auto p = temp_file("coarse_docs.jsonl", "{\"docid\":\"d1\",\"text\":\"hello\"}\r\n\n{\"docid\":\"d2\",\"text\":\"w\"}\n");
    auto loaded = load_docstore(p);
    EXPECT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded.text("d1"), "hello");
    temp_file("coarse_docs.jsonl", "{\"docid\":\"d1\"}\n");
    EXPECT_THROW(load_docstore(p), DataError);
    fs::remove(p);
    EXPECT_THROW(load_docstore(p), DataError);
}

TEST(ClickLog, FullRateKeepsEveryResolvableLine) {
    const auto store = small_store(3);
    auto p = temp_file("coarse_clicks.tsv", "q1\tfoo\td0\nq1\tfoo\td1\turl\nq2\tbar\tmissing\n");
    auto r = load_clicklog(p, store, 1.0, 1);
    EXPECT_EQ(r.lines, 3u);
    EXPECT_EQ(r.sampled, 3u);
    EXPECT_EQ(r.dropped_unknown, 1u);
    ASSERT_EQ(r.entries.size(), 2u);
    EXPECT_EQ(r.entries[1], (ClickLogEntry{"q1", "foo", "d1"}));
    EXPECT_THROW(load_clicklog(p, store, 0.0, 1), UsageError);
    temp_file("coarse_clicks.tsv", "q1\tfoo\n");
    EXPECT_THROW(load_clicklog(p, store, 1.0, 1), DataError);
    fs::remove(p);
}

TEST(ClickLog, SamplingCountIsBinomial) {
    const auto store = small_store(1);
    std::string text;
    for (int i = 0; i < 10000; ++i) text += "q" + std::to_string(i) + "\tquery\td0\n";
    auto p = temp_file("coarse_clicks_big.tsv", text);
    const double n = 10000, rate = 0.08;
    const double mean = n * rate, sd = std::sqrt(n * rate * (1 - rate));
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto r = load_clicklog(p, store, rate, seed);
        EXPECT_LT(std::abs(static_cast<double>(r.sampled) - mean), 3 * sd) << "seed " << seed;
        EXPECT_EQ(r.entries, load_clicklog(p, store, rate, seed).entries);
    }
    fs::remove(p);
}

TEST(Queries, RoundTripAndRejectDuplicates) {
    const QueryMap q = {{"q1", "first query"}, {"q2", "second"}};
    auto p = fs::temp_directory_path() / "coarse_queries.tsv";
    save_queries(q, p);
    EXPECT_EQ(load_queries(p), q);
    temp_file("coarse_queries.tsv", "q1\ta\nq1\tb\n");
    EXPECT_THROW(load_queries(p), DataError);
    fs::remove(p);
}

TEST(Qrels, CollapsesHighlyRelevant) {
    Qrels r;
    r.add("q", "a", 2);
    r.add("q", "b", 1);
    r.add("q", "c", 0);
    EXPECT_EQ(r.grade("q", "a"), 1);
    EXPECT_EQ(r.judgments("q").at("a").original_grade, 2);
    EXPECT_EQ(r.grade("q", "zzz"), 0);
    EXPECT_EQ(r.num_relevant("q"), 2u);
    EXPECT_THROW(r.add("q", "d", 3), DataError);

    auto p = fs::temp_directory_path() / "coarse_qrels.txt";
    save_qrels(r, p);
    const auto back = load_qrels(p);
    EXPECT_EQ(back.size(), 3u);
    EXPECT_EQ(back.judgments("q").at("a").original_grade, 2);
    fs::remove(p);
}

TEST(Sequence, LayoutAndSegments) {
    const auto s = build_pair_sequence({10, 11}, {20, 21, 22}, 12);
    EXPECT_EQ(s.token_ids, (std::vector<int>{kCls, kQuery, 10, 11, kSep, kDoc, 20, 21, 22, kSep, kPad, kPad}));
    EXPECT_EQ(s.segment_ids, (std::vector<int>{0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0}));
    EXPECT_EQ(s.length(), 10u);
    EXPECT_EQ(s.query_begin, 2u);
    EXPECT_EQ(s.doc_end, 9u);
    EXPECT_NO_THROW(s.validate());
}

TEST(Sequence, LongDocumentIsTruncatedAndEndsWithSep) {
    std::vector<int> doc(10000, 30);
    const std::vector<int> query = {10, 11, 12};
    const auto s = build_pair_sequence(query, doc, 256);
    ASSERT_EQ(s.size(), 256u);
    EXPECT_EQ(s.length(), 256u);
    EXPECT_EQ(s.token_ids.back(), kSep);
    EXPECT_EQ(kPairSpecials + query.size() + (s.doc_end - s.doc_begin), s.length());
}

TEST(Sequence, TokenCountIdentityOnText) {
    const auto v = word_vocab({"cheap", "flights", "to", "rome", "book", "now"});
    const SequenceLimits lim{32, 8};
    const auto s = build_sequence("cheap flights", "book flights to rome now", v, lim);
    EXPECT_EQ(s.length(), kPairSpecials + 2u + 5u);
    EXPECT_THROW(build_sequence("", "book", v, lim), DataError);
    EXPECT_THROW(build_sequence("to to to to to to to to to", "book", v, lim), DataError);
    EXPECT_THROW(build_pair_sequence(std::vector<int>(29, 10), {}, 32), DataError);
}

TEST(Sequence, DocumentOnlyLayout) {
    const auto s = build_document_sequence({20, 21}, 6);
    EXPECT_EQ(s.token_ids, (std::vector<int>{kCls, 20, 21, kSep, kPad, kPad}));
    EXPECT_THROW(build_document_sequence({}, 6), DataError);
}

TEST(Masking, QueryOnlyScopeLeavesDocumentUntouched) {
    const auto s = build_pair_sequence({10, 11, 12}, {20, 21, 22, 23}, 16);
    Rng rng = derive_rng(4);
    for (int i = 0; i < 50; ++i) {
        const auto m = apply_mlm_mask(s, 0.5, MaskScope::QueryOnly, rng);
        for (std::size_t p = m.doc_begin; p < m.doc_end; ++p) {
            EXPECT_EQ(m.mlm_targets[p], kIgnoreIndex);
            EXPECT_EQ(m.token_ids[p], s.token_ids[p]);
        }
        EXPECT_FALSE(m.masked_positions().empty());
    }
}

TEST(Masking, TargetsHoldOriginalIdsAndSpecialsAreNeverMasked) {
    const auto s = build_pair_sequence({10, 11}, {20, 21, 22}, 12);
    Rng rng = derive_rng(6);
    const auto m = apply_mlm_mask(s, 0.9, MaskScope::AllTokens, rng);
    for (std::size_t p = 0; p < m.size(); ++p) {
        if (m.mlm_targets[p] == kIgnoreIndex) {
            EXPECT_EQ(m.token_ids[p], s.token_ids[p]);
        } else {
            EXPECT_EQ(m.token_ids[p], kMask);
            EXPECT_EQ(m.mlm_targets[p], s.token_ids[p]);
            EXPECT_FALSE(is_special_id(s.token_ids[p]));
        }
    }
    EXPECT_THROW(apply_mlm_mask(s, 1.0, MaskScope::AllTokens, rng), UsageError);
}

TEST(Masking, RateIsRespectedOnAverage) {
    const auto s = build_pair_sequence(std::vector<int>(20, 10), std::vector<int>(200, 20), 256);
    Rng rng = derive_rng(8);
    std::size_t masked = 0, eligible = 0;
    for (int i = 0; i < 200; ++i) {
        masked += apply_mlm_mask(s, 0.15, MaskScope::AllTokens, rng).masked_positions().size();
        eligible += 220;
    }
    EXPECT_NEAR(static_cast<double>(masked) / static_cast<double>(eligible), 0.15, 0.01);
}

TEST(PairSampling, AlwaysIsPairAtRateOne) {
    const auto store = small_store(10);
    const std::vector<ClickLogEntry> clicks = {{"q", "x", "d1"}, {"q", "x", "d2"}};
    QdppSampler sampler(store, clicks);
    Rng rng = derive_rng(2);
    for (int i = 0; i < 100; ++i) {
        auto d = sampler.draw(clicks[0], 1.0, rng);
        EXPECT_EQ(d.label, PairLabel::IsPair);
        EXPECT_EQ(d.docid, "d1");
    }
}

TEST(PairSampling, NegativesAvoidEveryClickedDocument) {
    const auto store = small_store(5);
    const std::vector<ClickLogEntry> clicks = {{"q", "x", "d1"}, {"q", "x", "d2"}, {"q", "x", "d3"}};
    QdppSampler sampler(store, clicks);
    Rng rng = derive_rng(3);
    std::set<std::string> seen;
    for (int i = 0; i < 200; ++i) {
        auto d = sampler.draw(clicks[0], 0.0, rng);
        EXPECT_EQ(d.label, PairLabel::NotPair);
        seen.insert(d.docid);
    }
    EXPECT_EQ(seen, (std::set<std::string>{"d0", "d4"}));

    const auto tiny = small_store(2);
    QdppSampler full(tiny, {{"q", "x", "d0"}, {"q", "x", "d1"}});
    EXPECT_THROW(full.draw({"q", "x", "d0"}, 0.0, rng), DataError);
}

TEST(PairSampling, InstanceCarriesLabelAndIds) {
    DocStore store;
    store.add("a", "red apple");
    store.add("b", "green pear");
    const auto v = word_vocab({"red", "apple", "green", "pear", "fruit"});
    const std::vector<ClickLogEntry> clicks = {{"q1", "fruit", "a"}};
    QdppSampler sampler(store, clicks);
    Rng rng = derive_rng(1);
    auto s = make_qdpp_instance(clicks[0], store, sampler, v, {16, 8}, 0.0, rng);
    EXPECT_EQ(s.pair_label, PairLabel::NotPair);
    EXPECT_EQ(s.docid, "b");
    EXPECT_EQ(s.qid, "q1");
}

TEST(Finetune, GradesMapToBinaryLabels) {
    DocStore store;
    store.add("a", "red apple");
    store.add("b", "green pear");
    const auto v = word_vocab({"red", "apple", "green", "pear", "fruit"});
    Qrels qrels;
    qrels.add("q1", "a", 2);
    qrels.add("q1", "b", 0);
    qrels.add("q1", "gone", 1);
    qrels.add("q9", "a", 1);
    const QueryMap queries = {{"q1", "fruit"}};
    auto set = make_finetune_instances(qrels, queries, store, v, {16, 8});
    ASSERT_EQ(set.instances.size(), 2u);
    EXPECT_EQ(set.skipped.size(), 2u);
    EXPECT_EQ(set.instances[0].docid, "a");
    EXPECT_EQ(set.instances[0].relevance_label, 1);
    EXPECT_EQ(set.instances[1].relevance_label, 0);
}

TEST(FoldSplit, RoundRobinOverSortedIds) {
    const auto f = fold_split({"d", "b", "c", "a"}, 2);
    EXPECT_EQ(f[0], (std::vector<std::string>{"a", "c"}));
    EXPECT_EQ(f[1], (std::vector<std::string>{"b", "d"}));
    EXPECT_THROW(fold_split({"a"}, 2), UsageError);
    EXPECT_THROW(fold_split({"a", "b"}, 1), UsageError);
}

TEST(FoldSplit, SizesAreBalancedAndPartitionTheInput) {
    std::vector<std::string> qids;
    for (int i = 0; i < 250; ++i) qids.push_back("q" + std::to_string(i));
    const auto f = fold_split(qids, 4);
    std::vector<std::size_t> sizes;
    std::set<std::string> all;
    std::size_t total = 0;
    for (const auto& fold : f) {
        sizes.push_back(fold.size());
        total += fold.size();
        all.insert(fold.begin(), fold.end());
    }
    EXPECT_EQ(sizes, (std::vector<std::size_t>{63, 63, 62, 62}));
    EXPECT_EQ(total, 250u);
    EXPECT_EQ(all, std::set<std::string>(qids.begin(), qids.end()));
}

// ---- synthetic corpus ------------------------------------------------------

namespace {

const SyntheticCorpus& corpus() {
    static const SyntheticCorpus c = [] {
        SynthConfig cfg;
        cfg.n_clicks = 500;
        return generate_synthetic_corpus(cfg);
    }();
    return c;
}

}  // namespace

TEST(Synthetic, ClickedDocumentsShareAQueryWord) {
    const auto& c = corpus();
    ASSERT_EQ(c.store.size(), 2000u);
    ASSERT_EQ(c.clicks.size(), 500u);
    for (const auto& e : c.clicks) {
        const auto qw = split_words(e.query);
        const auto dw = split_words(c.store.text(e.docid));
        const std::set<std::string> doc_words(dw.begin(), dw.end());
        EXPECT_TRUE(std::any_of(qw.begin(), qw.end(), [&](const auto& w) { return doc_words.contains(w); }))
            << e.qid;
    }
}

TEST(Synthetic, SameSeedSameCorpus) {
    SynthConfig cfg;
    cfg.n_docs = 300;
    cfg.n_queries = 40;
    cfg.n_clicks = 200;
    const auto a = generate_synthetic_corpus(cfg);
    const auto b = generate_synthetic_corpus(cfg);
    EXPECT_EQ(a.store.ids(), b.store.ids());
    EXPECT_EQ(a.store.texts(), b.store.texts());
    EXPECT_EQ(a.clicks, b.clicks);
    EXPECT_EQ(a.queries, b.queries);
    cfg.seed += 1;
    EXPECT_NE(generate_synthetic_corpus(cfg).store.texts(), a.store.texts());
}

TEST(Synthetic, JudgedSourceRanksHighUnderBm25) {
    const auto& c = corpus();
    const auto index = InvertedIndex::build(c.store);
    const auto qids = c.qrels.qids();
    ASSERT_EQ(qids.size(), c.judged_sources.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < qids.size(); ++i) {
        for (const auto& d : search(c.queries.at(qids[i]), index, 10))
            if (d.docid == c.judged_sources[i]) {
                ++hits;
                break;
            }
    }
    EXPECT_GE(static_cast<double>(hits), 0.8 * static_cast<double>(qids.size()));
}
