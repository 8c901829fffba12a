#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include <coarse/probe.hpp>

using namespace coarse;

namespace {

Vocabulary small_vocab() {
    Vocabulary v;
    for (int i = 0; i < 20; ++i) v.add("w" + std::to_string(i));
    v.add("##s");
    return v;
}

Model small_model(const Vocabulary& v, std::uint64_t seed = 3) {
    ModelConfig c;
    c.layers = 1;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.vocab = static_cast<int>(v.size());
    c.max_len = 32;
    c.dropout = 0.0;
    c.init_std = 0.5;
    return Model::fresh(c, seed);
}

// Full-vocabulary softmax at the mask slots, computed in long double from the
// raw MLM logits of an explicitly built masked sequence.
std::vector<std::vector<long double>> reference_probs(const Model& m, const std::vector<int>& doc, int n_masks) {
    const std::vector<int> masks(static_cast<std::size_t>(n_masks), kMask);
    const auto seq = build_pair_sequence(masks, doc, m.config.max_len).trimmed();
    std::vector<int> pos;
    for (int i = 0; i < n_masks; ++i) pos.push_back(2 + i);
    Graph g;
    const Var h = encode(g, m.config, m.weights, seq);
    const auto logits = g.value(mlm_logits(g, m.config, m.weights, h, pos));
    const auto V = static_cast<std::size_t>(m.config.vocab);
    std::vector<std::vector<long double>> out;
    for (int p = 0; p < n_masks; ++p) {
        std::vector<long double> row(V);
        long double z = 0.0L;
        for (std::size_t j = 0; j < V; ++j) z += row[j] = std::exp(static_cast<long double>(logits[p * V + j]));
        for (auto& x : row) x /= z;
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace

TEST(Probe, DefaultsAreThreeMasksAndTopFive) {
    const auto v = small_vocab();
    const auto r = predict_query(small_model(v), "w1 w2 w3 w4", v);
    ASSERT_EQ(r.positions.size(), 3u);
    for (const auto& p : r.positions) EXPECT_EQ(p.size(), 5u);
}

TEST(Probe, ProbabilitiesMatchSoftmaxAtTheQuerySlot) {
    const auto v = small_vocab();
    const Model m = small_model(v);
    const auto doc = encode("w5 w6 w7 w8 w9", v);
    const auto r = predict_query(m, "w5 w6 w7 w8 w9", v, 4, 7);
    const auto ref = reference_probs(m, doc, 4);
    ASSERT_EQ(r.positions.size(), 4u);
    for (std::size_t p = 0; p < 4; ++p) {
        EXPECT_NEAR(r.mass[p], 1.0, 1e-9);
        std::vector<int> ids(ref[p].size());
        for (std::size_t j = 0; j < ids.size(); ++j) ids[j] = static_cast<int>(j);
        std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return ref[p][a] > ref[p][b]; });
        ASSERT_EQ(r.positions[p].size(), 7u);
        for (std::size_t j = 0; j < 7; ++j) {
            EXPECT_EQ(r.positions[p][j].id, ids[j]);
            EXPECT_EQ(r.positions[p][j].token, v.token(ids[j]));
            EXPECT_NEAR(r.positions[p][j].prob, static_cast<double>(ref[p][ids[j]]), 1e-12);
            EXPECT_LE(r.positions[p][j].prob, 1.0);
            if (j) EXPECT_GE(r.positions[p][j - 1].prob, r.positions[p][j].prob);
        }
    }
}

TEST(Probe, TopKIsCappedByVocabularySize) {
    const auto v = small_vocab();
    const auto r = predict_query(small_model(v), "w1", v, 1, 1000);
    ASSERT_EQ(r.positions.size(), 1u);
    EXPECT_EQ(r.positions[0].size(), v.size());
    double total = 0.0;
    for (const auto& t : r.positions[0]) total += t.prob;
    EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(Probe, ReadOnlyAndDeterministic) {
    const auto v = small_vocab();
    const Model m = small_model(v);
    const auto before = serialize_checkpoint(m);
    const auto a = predict_query(m, "w3 w4 w5", v);
    const auto b = predict_query(m, "w3 w4 w5", v);
    EXPECT_EQ(serialize_checkpoint(m), before);
    EXPECT_EQ(a, b);
    for (std::size_t p = 0; p < a.positions.size(); ++p)
        for (std::size_t j = 0; j < a.positions[p].size(); ++j) EXPECT_EQ(a.positions[p][j].prob, b.positions[p][j].prob);
}

TEST(Probe, LongDocumentIsTruncatedToTheWindow) {
    const auto v = small_vocab();
    std::string text;
    for (int i = 0; i < 200; ++i) text += "w" + std::to_string(i % 20) + " ";
    const Model m = small_model(v);
    const auto r = predict_query(m, text, v, 3, 5);
    const auto ref = reference_probs(m, encode(text, v), 3);
    EXPECT_NEAR(r.positions[0][0].prob, static_cast<double>(ref[0][r.positions[0][0].id]), 1e-12);
}

TEST(Probe, Errors) {
    const auto v = small_vocab();
    const Model m = small_model(v);
    EXPECT_THROW(predict_query(m, "   ", v), DataError);
    EXPECT_THROW(predict_query(m, "w1", v, 0), UsageError);
    EXPECT_THROW(predict_query(m, "w1", v, 3, 0), UsageError);
    Vocabulary bigger = small_vocab();
    bigger.add("extra");
    EXPECT_THROW(predict_query(m, "w1", bigger), DataError);
}

TEST(ProbeDiagnostics, HitAndContinuationAnomaly) {
    ProbeResult r;
    r.positions = {{{"##s", 25, 0.6}, {"w1", 6, 0.3}}, {{"w2", 7, 0.9}}};
    EXPECT_TRUE(first_slot_continuation(r));
    EXPECT_TRUE(probe_hit(r, {7}));
    EXPECT_TRUE(probe_hit(r, {6, 99}));
    EXPECT_FALSE(probe_hit(r, {8, 9}));
    std::swap(r.positions[0][0], r.positions[0][1]);
    EXPECT_FALSE(first_slot_continuation(r));
    EXPECT_FALSE(first_slot_continuation(ProbeResult{}));
}

TEST(ProbeReport, SingleCheckpointTableLayout) {
    ProbeResult r;
    r.positions = {{{"##s", 25, 0.6}, {"w1", 6, 0.3}}, {{"w2", 7, 0.9}, {"w3", 8, 0.05}}};
    const auto table = probe_table({{"pretrained", r}});
    EXPECT_EQ(table,
              "      | pretrained\n"
              "      | q1   q2\n"
              "Top1  | ##s  w2\n"
              "Top2  | w1   w3\n");
    EXPECT_EQ(probe_table({}), "");
}

TEST(ProbeReport, SideBySideGroupsAndMismatch) {
    const auto v = small_vocab();
    const auto a = predict_query(small_model(v, 1), "w1 w2", v);
    const auto b = predict_query(small_model(v, 2), "w1 w2", v);
    const auto table = probe_table({{"pretrained", a}, {"coarse", b}});
    std::size_t lines = std::count(table.begin(), table.end(), '\n');
    EXPECT_EQ(lines, 2u + 5u);
    EXPECT_NE(table.find("pretrained"), std::string::npos);
    EXPECT_NE(table.find("coarse"), std::string::npos);
    const auto one = predict_query(small_model(v, 2), "w1 w2", v, 1, 5);
    EXPECT_THROW(probe_table({{"a", a}, {"b", one}}), DataError);
}

TEST(ProbeReport, JsonTwinRoundTrips) {
    const auto v = small_vocab();
    const auto a = predict_query(small_model(v, 1), "w1 w2 ##s", v);
    const auto b = predict_query(small_model(v, 2), "w4 w2", v);
    const auto j = probe_report_json({{"pretrained", a}, {"coarse", b}});
    const auto back = parse_probe_report_json(nlohmann::json::parse(j.dump()));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].first, "pretrained");
    EXPECT_EQ(back[1].first, "coarse");
    EXPECT_EQ(back[0].second, a);
    EXPECT_EQ(back[1].second, b);
    EXPECT_EQ(parse_probe_json(probe_json(a)), a);
    EXPECT_THROW(parse_probe_json(nlohmann::json{{"positions", {{{"token", "x"}}}}}), DataError);
}
