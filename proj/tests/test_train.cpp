#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include <coarse/train.hpp>

using namespace coarse;

namespace {

// 20 words w0..w19 after the specials.
Vocabulary cyclic_vocab() {
    Vocabulary v;
    for (int i = 0; i < 20; ++i) v.add("w" + std::to_string(i));
    return v;
}

ModelConfig small_config(int vocab) {
    ModelConfig c;
    c.layers = 1;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.vocab = vocab;
    c.max_len = 32;
    c.dropout = 0.0;
    c.init_std = 0.1;
    return c;
}

// Document i walks the word cycle from i mod 20, so every masked word is
// fixed by its neighbours.
std::vector<std::vector<int>> cyclic_docs(int n, int len) {
    std::vector<std::vector<int>> docs;
    for (int i = 0; i < n; ++i) {
        std::vector<int> d;
        for (int k = 0; k < len; ++k) d.push_back(kNumSpecial + (i + k) % 20);
        docs.push_back(d);
    }
    return docs;
}

bool same_weights(const EncoderWeights& a, const EncoderWeights& b) {
    auto pa = const_cast<EncoderWeights&>(a).parameters();
    auto pb = const_cast<EncoderWeights&>(b).parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto x = pa[i]->values();
        auto y = pb[i]->values();
        if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
    }
    return true;
}

struct ClickFixture {
    DocStore store;
    std::vector<ClickLogEntry> clicks;
    Vocabulary vocab = cyclic_vocab();

    ClickFixture() {
        for (int i = 0; i < 20; ++i) {
            std::string text;
            for (int k = 0; k < 6; ++k) text += "w" + std::to_string((i + k) % 20) + " ";
            store.add("d" + std::to_string(i), text);
        }
        for (int i = 0; i < 12; ++i)
            clicks.push_back({"q" + std::to_string(i), "w" + std::to_string(i), "d" + std::to_string(i)});
    }
};

}  // namespace

// ---- AdamW -----------------------------------------------------------------

TEST(AdamW, FirstStepMatchesHandValue) {
    Tensor theta({1}, 1.0);
    theta.grad()[0] = 1.0;
    AdamW opt;  // lr 1e-3, betas (0.9, 0.999), eps 1e-8, wd 0.01
    opt.step({&theta});
    const double expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.01 * 1.0;
    EXPECT_NEAR(theta[0], expect, 1e-12);
    EXPECT_NEAR(theta[0], 0.99899, 1e-8);
    EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParameters) {
    Tensor theta({3}, std::vector<double>{0.5, -2.0, 3.0});
    theta.grad();  // allocated, all zero
    AdamW opt({1e-3, 0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 3; ++i) opt.step({&theta});
    EXPECT_EQ(theta[0], 0.5);
    EXPECT_EQ(theta[1], -2.0);
    EXPECT_EQ(theta[2], 3.0);
}

TEST(AdamW, StepsAreDeterministic) {
    auto run = [] {
        Tensor a({2}, std::vector<double>{1.0, 2.0});
        AdamW opt;
        for (int i = 0; i < 5; ++i) {
            a.grad()[0] = 0.3 * i;
            a.grad()[1] = -0.7;
            opt.step({&a});
        }
        return std::vector<double>(a.values().begin(), a.values().end());
    };
    EXPECT_EQ(run(), run());
}

TEST(AdamW, ParametersWithoutGradientAreSkipped) {
    Tensor used({1}, 1.0), unused({1}, 1.0);
    used.grad()[0] = 1.0;
    AdamW opt;
    opt.step({&used, &unused});
    EXPECT_EQ(unused[0], 1.0);
    EXPECT_EQ(opt.second_moments()[1][0], 0.0);
    EXPECT_LT(used[0], 1.0);
}

TEST(AdamW, NonFiniteGradientAbortsTheStep) {
    Tensor a({1}, 1.0), b({1}, 1.0);
    a.grad()[0] = 1.0;
    b.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamW opt;
    EXPECT_THROW(opt.step({&a, &b}), NumericError);
    EXPECT_EQ(a[0], 1.0);
    EXPECT_EQ(opt.steps(), 0);
}

TEST(AdamW, RejectsBadHyperparameters) {
    EXPECT_THROW(AdamW({0.0}), UsageError);
    EXPECT_THROW(AdamW({1e-3, 1.0}), UsageError);
    EXPECT_THROW(AdamW({1e-3, 0.9, 0.999, 1e-8, -1.0}), UsageError);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
    Tensor a({2}), b({1});
    a.grad()[0] = 3.0;
    a.grad()[1] = 0.0;
    b.grad()[0] = 4.0;
    EXPECT_DOUBLE_EQ(clip_grad_norm({&a, &b}, 1.0), 5.0);
    EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
    EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
    EXPECT_NEAR(clip_grad_norm({&a, &b}, 2.0), 1.0, 1e-15);
    EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
}

// ---- plans -----------------------------------------------------------------

TEST(TrainPlan, StageDefaults) {
    const auto c = TrainPlan::defaults(PlanStage::Coarse);
    EXPECT_EQ(c.epochs, 4);
    EXPECT_EQ(c.batch, 80);
    EXPECT_EQ(c.adamw.lr, 1e-3);
    EXPECT_EQ(c.w_mlm, 1.0);
    EXPECT_EQ(c.w_qdpp, 1.0);
    const auto f = TrainPlan::defaults(PlanStage::Finetune);
    EXPECT_EQ(f.epochs, 3);
    EXPECT_EQ(f.batch, 128);
    EXPECT_EQ(TrainPlan::defaults(PlanStage::ContPre).epochs, 4);
}

TEST(TrainPlan, Validation) {
    auto p = TrainPlan::defaults(PlanStage::Coarse);
    p.w_mlm = 0.0;
    p.w_qdpp = 0.0;
    EXPECT_THROW(p.validate(), UsageError);
    p.w_qdpp = 1.0;
    EXPECT_NO_THROW(p.validate());
    p.epochs = 0;
    EXPECT_THROW(p.validate(), UsageError);
    p.epochs = 1;
    p.batch = 0;
    EXPECT_THROW(p.validate(), UsageError);
}

TEST(EpochMetrics, JsonCarriesEveryField) {
    EpochMetrics m;
    m.stage = "coarse";
    m.epoch = 2;
    m.mlm_loss = 1.5;
    const auto j = to_json(m);
    for (const char* k : {"stage", "epoch", "mlm_loss", "qdpp_loss", "qdpp_acc", "cls_loss", "wall_s"})
        EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_TRUE(j["qdpp_loss"].is_null());
}

// ---- procedures ------------------------------------------------------------

TEST(CoarseTune, StagePreconditions) {
    ClickFixture f;
    Model m = Model::fresh(small_config(static_cast<int>(f.vocab.size())), 1);
    m.meta.stage = Stage::Finetuned;
    auto plan = TrainPlan::defaults(PlanStage::Coarse);
    EXPECT_THROW(coarse_tune(m, f.clicks, f.store, f.vocab, {32, 8}, plan), UsageError);
    m.meta.stage = Stage::Pretrained;
    EXPECT_THROW(coarse_tune(m, {}, f.store, f.vocab, {32, 8}, plan), DataError);
    EXPECT_THROW(coarse_tune(m, f.clicks, f.store, f.vocab, {32, 8}, TrainPlan::defaults(PlanStage::Finetune)),
                 UsageError);
    Model r = Model::fresh(small_config(static_cast<int>(f.vocab.size())), 1);
    auto cp = TrainPlan::defaults(PlanStage::ContPre);
    EXPECT_THROW(pretrain_mlm(r, cyclic_docs(4, 6), {32, 8}, cp), UsageError);
}

TEST(CoarseTune, EmitsMetricsAndTagsStage) {
    ClickFixture f;
    Model m = Model::fresh(small_config(static_cast<int>(f.vocab.size())), 1);
    auto plan = TrainPlan::defaults(PlanStage::Coarse);
    plan.epochs = 2;
    plan.batch = 5;
    int hook_calls = 0;
    auto r = coarse_tune(m, f.clicks, f.store, f.vocab, {32, 8}, plan,
                         [&](const EpochMetrics& e, const Model& mm) {
                             ++hook_calls;
                             EXPECT_EQ(mm.meta.epoch, e.epoch);
                         });
    EXPECT_EQ(hook_calls, 2);
    ASSERT_EQ(r.epochs.size(), 2u);
    EXPECT_EQ(r.batch_losses.size(), 2u * 3u);  // 12 clicks in batches of 5, partial batch kept
    EXPECT_TRUE(r.epochs[0].mlm_loss && r.epochs[0].qdpp_loss && r.epochs[0].qdpp_acc);
    EXPECT_FALSE(r.epochs[0].cls_loss);
    EXPECT_EQ(r.epochs[0].stage, "coarse");
    EXPECT_EQ(m.meta.stage, Stage::Coarse);
    EXPECT_EQ(m.meta.seed_lineage.back(), plan.seed);
}

TEST(CoarseTune, BitIdenticalAcrossRuns) {
    ClickFixture f;
    auto cfg = small_config(static_cast<int>(f.vocab.size()));
    cfg.dropout = 0.1;
    auto plan = TrainPlan::defaults(PlanStage::Coarse);
    plan.epochs = 2;
    plan.batch = 4;
    Model a = Model::fresh(cfg, 5), b = Model::fresh(cfg, 5);
    auto ra = coarse_tune(a, f.clicks, f.store, f.vocab, {32, 8}, plan);
    auto rb = coarse_tune(b, f.clicks, f.store, f.vocab, {32, 8}, plan);
    EXPECT_EQ(ra.batch_losses, rb.batch_losses);
    EXPECT_TRUE(same_weights(a.weights, b.weights));
    EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
}

TEST(CoarseTune, ZeroPairWeightKeepsSequencesAndFreezesPairHead) {
    ClickFixture f;
    const auto cfg = small_config(static_cast<int>(f.vocab.size()));
    auto plan = TrainPlan::defaults(PlanStage::Coarse);
    plan.epochs = 1;
    plan.batch = 12;  // one step: epoch-1 metrics are measured before any update
    Model joint = Model::fresh(cfg, 2), mlm_only = Model::fresh(cfg, 2);
    const Tensor qdpp_before = mlm_only.weights.qdpp_w;
    auto rj = coarse_tune(joint, f.clicks, f.store, f.vocab, {32, 8}, plan);
    plan.w_qdpp = 0.0;
    auto rm = coarse_tune(mlm_only, f.clicks, f.store, f.vocab, {32, 8}, plan);
    EXPECT_EQ(*rj.epochs[0].mlm_loss, *rm.epochs[0].mlm_loss);
    EXPECT_EQ(*rj.epochs[0].qdpp_loss, *rm.epochs[0].qdpp_loss);
    auto a = qdpp_before.values();
    auto b = mlm_only.weights.qdpp_w.values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
}

TEST(Pretrain, MlmLossFallsBelowUniformAndLearnsTheCycle) {
    const auto vocab = cyclic_vocab();
    const int V = static_cast<int>(vocab.size());
    Model m = Model::fresh(small_config(V), 3);
    const auto docs = cyclic_docs(100, 10);
    auto plan = TrainPlan::defaults(PlanStage::Pretrain);
    plan.epochs = 100;  // tiny encoders sit on the unigram plateau for a few hundred steps
    plan.batch = 5;
    plan.adamw.lr = 3e-3;
    auto r = pretrain_mlm(m, docs, {32, 8}, plan);
    EXPECT_EQ(m.meta.stage, Stage::Pretrained);
    EXPECT_LT(*r.epochs.back().mlm_loss, std::log(static_cast<double>(V)));

    std::vector<InputSequence> eval;
    Rng rng = derive_rng(77);
    for (const auto& d : docs) eval.push_back(apply_mlm_mask(build_document_sequence(d, 32), 0.15, MaskScope::AllTokens, rng));
    const auto e = evaluate_mlm(m, eval);
    EXPECT_LT(e.loss, std::log(static_cast<double>(V)));
    EXPECT_GT(e.accuracy, 0.5);
}

TEST(Finetune, SmallStepDecreasesTheBatchLoss) {
    const auto vocab = cyclic_vocab();
    Model m = Model::fresh(small_config(static_cast<int>(vocab.size())), 4);
    std::vector<InputSequence> inst;
    for (int i = 0; i < 8; ++i) {
        auto s = build_pair_sequence({kNumSpecial + i}, {kNumSpecial + i, kNumSpecial + 10 + i}, 32);
        s.relevance_label = i % 2;
        inst.push_back(s);
    }
    auto plan = TrainPlan::defaults(PlanStage::Finetune);
    plan.epochs = 2;
    plan.batch = 8;
    plan.adamw.lr = 1e-5;
    auto r = fine_tune(m, inst, plan);
    ASSERT_EQ(r.batch_losses.size(), 2u);
    EXPECT_LT(r.batch_losses[1], r.batch_losses[0]);
    EXPECT_EQ(m.meta.stage, Stage::Finetuned);
}

TEST(Finetune, InvertedLabelsInvertTheRanking) {
    // Relevant documents carry w0; relevance is readable from the document alone.
    const auto vocab = cyclic_vocab();
    const int w0 = kNumSpecial;
    auto make = [&](int i, bool relevant) {
        std::vector<int> d = {kNumSpecial + 1 + i % 19, kNumSpecial + 1 + (i * 7) % 19};
        if (relevant) d.insert(d.begin() + i % 2, w0);
        return build_pair_sequence({kNumSpecial + 5}, d, 32);
    };
    std::vector<InputSequence> train;
    for (int i = 0; i < 40; ++i) {
        auto s = make(i, i % 2 == 0);
        s.relevance_label = i % 2 == 0 ? 1 : 0;
        train.push_back(s);
    }
    const auto held_rel = make(101, true), held_non = make(101, false);

    auto plan = TrainPlan::defaults(PlanStage::Finetune);
    plan.epochs = 20;
    plan.batch = 8;
    plan.adamw.lr = 3e-3;
    const auto cfg = small_config(static_cast<int>(vocab.size()));
    Model straight = Model::fresh(cfg, 6);
    fine_tune(straight, train, plan);
    for (auto& s : train) s.relevance_label = 1 - *s.relevance_label;
    Model inverted = Model::fresh(cfg, 6);
    fine_tune(inverted, train, plan);

    EXPECT_GT(relevance_score(cfg, straight.weights, held_rel), relevance_score(cfg, straight.weights, held_non));
    EXPECT_LT(relevance_score(cfg, inverted.weights, held_rel), relevance_score(cfg, inverted.weights, held_non));
}

TEST(Finetune, SingleClassWarnsButTrains) {
    const auto vocab = cyclic_vocab();
    Model m = Model::fresh(small_config(static_cast<int>(vocab.size())), 4);
    auto s = build_pair_sequence({kNumSpecial}, {kNumSpecial + 1}, 32);
    s.relevance_label = 1;
    auto plan = TrainPlan::defaults(PlanStage::Finetune);
    plan.epochs = 1;
    auto r = fine_tune(m, {s, s}, plan);
    EXPECT_EQ(r.warnings.size(), 1u);
    auto unlabeled = s;
    unlabeled.relevance_label.reset();
    EXPECT_THROW(fine_tune(m, {unlabeled}, plan), DataError);
    EXPECT_THROW(fine_tune(m, {}, plan), DataError);
}

TEST(Finetune, ReinitializesRelevanceHeadUnlessAsked) {
    const auto vocab = cyclic_vocab();
    const auto cfg = small_config(static_cast<int>(vocab.size()));
    auto s = build_pair_sequence({kNumSpecial}, {kNumSpecial + 1}, 32);
    s.relevance_label = 1;
    auto plan = TrainPlan::defaults(PlanStage::Finetune);
    plan.epochs = 1;
    plan.adamw.lr = 1e-12;

    Model a = Model::fresh(cfg, 8);
    copy_qdpp_to_relevance(a.weights);
    plan.reinit_relevance_head = false;
    fine_tune(a, {s}, plan);
    EXPECT_NEAR(a.weights.rel_w[0], a.weights.qdpp_w[0], 1e-9);

    Model b = Model::fresh(cfg, 8);
    copy_qdpp_to_relevance(b.weights);
    plan.reinit_relevance_head = true;
    fine_tune(b, {s}, plan);
    EXPECT_GT(std::abs(b.weights.rel_w[0] - b.weights.qdpp_w[0]), 1e-9);
}
