#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include <coarse/data.hpp>
#include <coarse/model.hpp>

#include "model_gradcheck.hpp"

using namespace coarse;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.layers = 2;
    c.hidden = 8;
    c.heads = 2;
    c.ffn = 16;
    c.vocab = 40;
    c.max_len = 24;
    return c;
}

InputSequence pair_seq(int max_len = 24) {
    return build_pair_sequence({10, 11, 12}, {20, 21, 22, 23, 24, 25}, max_len);
}

std::vector<double> values(const Graph& g, Var v) {
    auto s = g.value(v);
    return {s.begin(), s.end()};
}

std::filesystem::path temp_file(const char* name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Config, Validation) {
    ModelConfig c = small_config();
    EXPECT_NO_THROW(c.validate());
    c.heads = 3;
    EXPECT_THROW(c.validate(), UsageError);
    c = small_config();
    c.vocab = 7;
    EXPECT_THROW(c.validate(), UsageError);
    EXPECT_EQ(ModelConfig::tiny(100).hidden, 128);
    EXPECT_EQ(ModelConfig::tiny(100).layers, 2);
}

TEST(Weights, ManifestMatchesEnumeration) {
    const ModelConfig c = small_config();
    Model m = Model::fresh(c, 1);
    const auto expect = expected_manifest(c);
    const auto named = m.weights.named();
    ASSERT_EQ(named.size(), 3u + 16u * 2u + 5u + 4u);
    ASSERT_EQ(named.size(), expect.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        EXPECT_EQ(named[i].first, expect[i].first);
        EXPECT_EQ(named[i].second->shape(), expect[i].second);
    }
}

TEST(Weights, InitIsTruncatedNormalWithZeroBiases) {
    ModelConfig c = small_config();
    Model m = Model::fresh(c, 2);
    for (const auto& [name, t] : std::as_const(m.weights).named()) {
        for (double v : t->values()) {
            if (t->shape().size() == 2) {
                EXPECT_LE(std::abs(v), 2 * c.init_std) << name;
            } else {
                EXPECT_EQ(v, name.ends_with("norm.gain") ? 1.0 : 0.0) << name;
            }
        }
    }
    EXPECT_EQ(Model::fresh(c, 2).weights, m.weights);
    EXPECT_FALSE(Model::fresh(c, 3).weights == m.weights);
}

TEST(Encoder, OutputShape) {
    Model m = Model::fresh(small_config(), 1);
    Graph g;
    const InputSequence s = pair_seq();
    Var h = encode(g, m.config, m.weights, s);
    EXPECT_EQ(g.shape(h), (Shape{24, 8}));
}

TEST(Encoder, RejectsBadInput) {
    Model m = Model::fresh(small_config(), 1);
    Graph g;
    EXPECT_THROW(encode(g, m.config, m.weights, pair_seq(30)), DataError);
    InputSequence s = pair_seq();
    s.token_ids[3] = 40;
    EXPECT_THROW(encode(g, m.config, m.weights, s), DataError);
}

TEST(Encoder, PaddingDoesNotChangeRealPositions) {
    Model m = Model::fresh(small_config(), 4);
    const InputSequence padded = pair_seq();
    const InputSequence trimmed = padded.trimmed();
    Graph g1, g2;
    auto a = values(g1, encode(g1, m.config, m.weights, padded));
    auto b = values(g2, encode(g2, m.config, m.weights, trimmed));
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Encoder, SwappingPadPositionsLeavesOutputs) {
    // Pads share one token id, so permuting two of them is observable only
    // through their position embeddings; scramble those to make it count.
    Model m = Model::fresh(small_config(), 6);
    const InputSequence s = pair_seq();
    const std::size_t n = s.length();
    Graph g1;
    auto base = values(g1, encode(g1, m.config, m.weights, s));
    for (std::size_t c = 0; c < 8; ++c) std::swap(m.weights.position_emb.at(n, c), m.weights.position_emb.at(23, c));
    Graph g2;
    auto swapped = values(g2, encode(g2, m.config, m.weights, s));
    for (std::size_t i = 0; i < n * 8; ++i) EXPECT_NEAR(base[i], swapped[i], 1e-12);
}

TEST(Encoder, ZeroWeightsGiveConstantRows) {
    Model m = Model::fresh(small_config(), 1);
    for (const auto& [name, t] : m.weights.named())
        for (double& v : t->values()) v = name.ends_with("norm.gain") ? 1.0 : 0.0;
    Graph g;
    auto h = values(g, encode(g, m.config, m.weights, pair_seq()));
    for (std::size_t i = 8; i < h.size(); ++i) EXPECT_EQ(h[i], h[i % 8]);
}

TEST(Encoder, AttentionRowsSumToOne) {
    Model m = Model::fresh(small_config(), 7);
    const InputSequence s = pair_seq();
    std::vector<Tensor> att;
    ForwardOptions opt;
    opt.attention = &att;
    Graph g;
    encode(g, m.config, m.weights, s, opt);
    ASSERT_EQ(att.size(), 4u);
    for (const Tensor& a : att) {
        for (std::size_t r = 0; r < s.length(); ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < a.cols(); ++c) {
                sum += a.at(r, c);
                if (!s.attention_mask[c]) {
                    EXPECT_EQ(a.at(r, c), 0.0);
                }
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(Encoder, InferenceIsDeterministicAndTrainingNeedsRng) {
    Model m = Model::fresh(small_config(), 8);
    const InputSequence s = pair_seq();
    Graph g1, g2;
    EXPECT_EQ(values(g1, encode(g1, m.config, m.weights, s)), values(g2, encode(g2, m.config, m.weights, s)));
    ForwardOptions train;
    train.train = true;
    Graph g3;
    EXPECT_THROW(encode(g3, m.config, m.weights, s, train), UsageError);
}

TEST(Heads, MlmLogitsShapeAndEmptyCase) {
    Model m = Model::fresh(small_config(), 1);
    Graph g;
    Var h = encode(g, m.config, m.weights, pair_seq());
    const int three[] = {2, 3, 4};
    EXPECT_EQ(g.shape(mlm_logits(g, m.config, m.weights, h, three)), (Shape{3, 40}));
    EXPECT_EQ(g.shape(mlm_logits(g, m.config, m.weights, h, {})), (Shape{0, 40}));
    const int bad[] = {24};
    EXPECT_THROW(mlm_logits(g, m.config, m.weights, h, bad), DataError);
}

TEST(Heads, MlmProjectionIsTiedToTokenEmbeddings) {
    Model m = Model::fresh(small_config(), 9);
    const InputSequence s = pair_seq();
    const int pos[] = {2, 5};
    Graph g1;
    auto before = values(g1, mlm_logits(g1, m.config, m.weights, encode(g1, m.config, m.weights, s), pos));
    // Row 33 never appears in the input, so only logit column 33 may move.
    for (std::size_t c = 0; c < 8; ++c) m.weights.token_emb.at(33, c) += 0.5;
    Graph g2;
    auto after = values(g2, mlm_logits(g2, m.config, m.weights, encode(g2, m.config, m.weights, s), pos));
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t v = 0; v < 40; ++v) {
            if (v == 33) {
                EXPECT_NE(before[r * 40 + v], after[r * 40 + v]);
            } else {
                EXPECT_EQ(before[r * 40 + v], after[r * 40 + v]);
            }
        }
    }
}

TEST(Heads, ZeroHeadsGiveEvenOdds) {
    Model m = Model::fresh(small_config(), 1);
    m.weights.qdpp_w = Tensor({8, 2});
    m.weights.rel_w = Tensor({8, 2});
    Graph g;
    Var h = encode(g, m.config, m.weights, pair_seq());
    EXPECT_EQ(values(g, qdpp_logits(g, m.weights, h)), (std::vector<double>{0, 0}));
    EXPECT_DOUBLE_EQ(relevance_score(m.config, m.weights, pair_seq()), 0.5);
}

TEST(Heads, ScoreIsMonotoneInLogitGap) {
    EXPECT_LT(positive_probability(std::vector<double>{0.0, 0.1}), positive_probability(std::vector<double>{0.0, 0.2}));
    EXPECT_NEAR(positive_probability(std::vector<double>{1.0, 1.0}), 0.5, 1e-15);
}

TEST(Heads, IdenticalSequencesScoreIdentically) {
    Model m = Model::fresh(small_config(), 10);
    EXPECT_EQ(relevance_score(m.config, m.weights, pair_seq()), relevance_score(m.config, m.weights, pair_seq()));
}

TEST(Heads, QdppGradientReachesEmbeddings) {
    Model m = Model::fresh(small_config(), 11);
    Graph g;
    Var h = encode(g, m.config, m.weights, pair_seq().trimmed());
    const int target[] = {1};
    g.backward(g.softmax_cross_entropy(qdpp_logits(g, m.weights, h), target));
    double norm = 0.0;
    for (double v : g.grad_of(m.weights.token_emb)) norm += v * v;
    EXPECT_GT(norm, 0.0);
    EXPECT_TRUE(g.grad_of(m.weights.rel_w).empty());
}

TEST(Heads, TrunkIsShared) {
    Model m = Model::fresh(small_config(), 12);
    const InputSequence s = pair_seq();
    const int pos[] = {3};
    auto outputs = [&] {
        Graph g;
        Var h = encode(g, m.config, m.weights, s);
        auto a = values(g, mlm_logits(g, m.config, m.weights, h, pos));
        auto b = values(g, qdpp_logits(g, m.weights, h));
        auto c = values(g, relevance_logits(g, m.weights, h));
        return std::tuple{a, b, c};
    };
    auto [a0, b0, c0] = outputs();
    m.weights.layers[1].ffn_out_w.at(0, 0) += 0.3;
    auto [a1, b1, c1] = outputs();
    EXPECT_NE(a0, a1);
    EXPECT_NE(b0, b1);
    EXPECT_NE(c0, c1);
}

TEST(Heads, RelevanceHeadInitOptions) {
    Model m = Model::fresh(small_config(), 13);
    copy_qdpp_to_relevance(m.weights);
    EXPECT_EQ(m.weights.rel_w, m.weights.qdpp_w);
    EXPECT_EQ(m.weights.rel_b, m.weights.qdpp_b);
    reinit_relevance_head(m.weights, m.config, 77);
    EXPECT_FALSE(m.weights.rel_w == m.weights.qdpp_w);
    Model other = Model::fresh(small_config(), 13);
    reinit_relevance_head(other.weights, other.config, 77);
    EXPECT_EQ(other.weights.rel_w, m.weights.rel_w);
}

TEST(GradientCheck, AllLossesAtToySize) {
    for (auto loss : {gradcheck::Loss::Mlm, gradcheck::Loss::Qdpp, gradcheck::Loss::Relevance}) {
        const auto r = gradcheck::check_model(loss);
        EXPECT_LT(r.max_rel_error, 1e-4) << gradcheck::loss_name(loss) << " worst " << r.worst;
        EXPECT_GT(r.checked, 1000u);
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Model m = Model::fresh(small_config(), 14);
    m.meta.stage = Stage::Coarse;
    m.meta.seed_lineage = {14, 15};
    m.meta.epoch = 3;
    m.meta.fingerprint = "abc";
    const auto path = temp_file("coarse_test_model.ckpt");
    save_checkpoint(m, path);
    const Model back = load_checkpoint(path);
    EXPECT_EQ(back.config, m.config);
    EXPECT_EQ(back.meta, m.meta);
    EXPECT_EQ(back.weights, m.weights);
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsRejected) {
    const std::string good = serialize_checkpoint(Model::fresh(small_config(), 1));
    std::string bad = good;
    bad[0] = 'X';
    EXPECT_THROW(deserialize_checkpoint(bad), DataError);
    bad = good;
    bad[4] = 9;
    EXPECT_THROW(deserialize_checkpoint(bad), DataError);
    EXPECT_THROW(deserialize_checkpoint(good.substr(0, good.size() - 8)), DataError);
    EXPECT_THROW(deserialize_checkpoint(good + "x"), DataError);
    EXPECT_THROW(deserialize_checkpoint(good.substr(0, 10)), DataError);
}

TEST(Checkpoint, VocabularySizeMustMatch) {
    const auto path = temp_file("coarse_test_vocab_mismatch.ckpt");
    save_checkpoint(Model::fresh(small_config(), 1), path);
    Vocabulary v;
    EXPECT_THROW(load_checkpoint(path, v), DataError);
    for (int i = 0; i < 33; ++i) v.add("t" + std::to_string(i));
    EXPECT_NO_THROW(load_checkpoint(path, v));
    std::filesystem::remove(path);
}

TEST(Checkpoint, StageNames) {
    for (Stage s : {Stage::Random, Stage::Pretrained, Stage::Coarse, Stage::Finetuned, Stage::ContPre})
        EXPECT_EQ(parse_stage(stage_name(s)), s);
    EXPECT_THROW(parse_stage("bogus"), DataError);
}
