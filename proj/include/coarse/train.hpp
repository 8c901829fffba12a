#pragma once

// AdamW and the training procedures: MLM pre-training (initial and
// continual), coarse-tuning (MLM + query-document pair prediction) and
// relevance fine-tuning.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "sequence.hpp"
#include "tokenizer.hpp"

namespace coarse {

// ---- optimizer -------------------------------------------------------------

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;

    void validate() const {
        if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw UsageError("AdamW betas must lie in [0, 1)");
        }
        if (!(eps > 0.0)) throw UsageError("AdamW eps must be positive");
        if (weight_decay < 0.0) throw UsageError("weight decay must be non-negative");
    }

    friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

    const AdamWConfig& config() const noexcept { return cfg_; }
    long steps() const noexcept { return step_; }
    const std::vector<Tensor>& first_moments() const noexcept { return m_; }
    const std::vector<Tensor>& second_moments() const noexcept { return v_; }

    /// One decoupled-weight-decay step over the parameters' accumulated
    /// gradients:
    ///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
    /// Parameters that received no gradient are left untouched and their
    /// moments do not advance. The parameter list must be the same (in order
    /// and shape) on every call.
    void step(const std::vector<Tensor*>& params) {
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.emplace_back(p->shape());
                v_.emplace_back(p->shape());
            }
        }
        if (m_.size() != params.size()) throw ShapeError("optimizer parameter list changed between steps");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (params[i]->shape() != m_[i].shape()) throw ShapeError("optimizer parameter shape changed");
            if (!params[i]->has_grad()) continue;
            for (double g : std::as_const(*params[i]).grad()) {
                if (!std::isfinite(g)) throw NumericError("non-finite gradient; optimizer step aborted");
            }
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            if (!p.has_grad() || p.size() == 0) continue;
            auto theta = p.values();
            auto grad = std::as_const(p).grad();
            auto m = m_[i].values();
            auto v = v_[i].values();
            for (std::size_t j = 0; j < theta.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
                const double m_hat = m[j] / bc1;
                const double v_hat = v[j] / bc2;
                theta[j] = theta[j] - cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps)) -
                           cfg_.lr * cfg_.weight_decay * theta[j];
            }
        }
    }

private:
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    long step_ = 0;
};

/// Scales accumulated gradients so their global L2 norm is at most
/// max_norm. Returns the norm before clipping.
inline double clip_grad_norm(const std::vector<Tensor*>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor* p : params)
        for (double g : p->grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Tensor* p : params)
            if (p->has_grad())
                for (double& g : p->grad()) g *= s;
    }
    return norm;
}

// ---- plans and metrics -----------------------------------------------------

enum class PlanStage { Pretrain, Coarse, ContPre, Finetune };

inline std::string plan_stage_name(PlanStage s) {
    switch (s) {
        case PlanStage::Pretrain: return "pretrain";
        case PlanStage::Coarse: return "coarse";
        case PlanStage::ContPre: return "cont-pre";
        case PlanStage::Finetune: return "finetune";
    }
    return "pretrain";
}

struct TrainPlan {
    PlanStage stage = PlanStage::Coarse;
    int epochs = 4;
    int batch = 80;
    std::uint64_t seed = 42;
    double w_mlm = 1.0;
    double w_qdpp = 1.0;
    double mask_rate = 0.15;
    MaskScope mask_scope = MaskScope::AllTokens;
    double p_ispair = 0.5;
    bool mlm_on_notpair = true;
    double clip_norm = 1.0;  // 0 disables clipping
    bool reinit_relevance_head = true;  // fine-tuning starts from a fresh classifier
    AdamWConfig adamw;

    /// Defaults of each stage: coarse 4 epochs / batch 80, fine-tuning
    /// 3 epochs / batch 128; MLM stages reuse the coarse batch size.
    static TrainPlan defaults(PlanStage stage) {
        TrainPlan p;
        p.stage = stage;
        switch (stage) {
            case PlanStage::Coarse: p.epochs = 4; p.batch = 80; break;
            case PlanStage::Finetune: p.epochs = 3; p.batch = 128; break;
            case PlanStage::ContPre: p.epochs = 4; p.batch = 80; break;
            case PlanStage::Pretrain: p.epochs = 4; p.batch = 80; break;
        }
        return p;
    }

    void validate() const {
        if (epochs < 1) throw UsageError("epochs must be at least 1");
        if (batch < 1) throw UsageError("batch size must be at least 1");
        if (w_mlm < 0.0 || w_qdpp < 0.0) throw UsageError("loss weights must be non-negative");
        if (stage == PlanStage::Coarse && w_mlm == 0.0 && w_qdpp == 0.0) {
            throw UsageError("coarse-tuning needs a positive MLM or pair-prediction weight");
        }
        if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw UsageError("mask rate must lie in (0, 1)");
        if (!(p_ispair >= 0.0 && p_ispair <= 1.0)) throw UsageError("IsPair probability must lie in [0, 1]");
        if (clip_norm < 0.0) throw UsageError("clip norm must be non-negative");
        adamw.validate();
    }
};

struct EpochMetrics {
    std::string stage;
    int epoch = 0;
    std::optional<double> mlm_loss;   // mean NLL per masked token
    std::optional<double> qdpp_loss;  // mean cross-entropy per pair
    std::optional<double> qdpp_acc;
    std::optional<double> cls_loss;   // mean relevance cross-entropy
    double wall_s = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"stage", m.stage},          {"epoch", m.epoch},       {"mlm_loss", opt(m.mlm_loss)},
            {"qdpp_loss", opt(m.qdpp_loss)}, {"qdpp_acc", opt(m.qdpp_acc)}, {"cls_loss", opt(m.cls_loss)},
            {"wall_s", m.wall_s}};
}

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    std::vector<double> batch_losses;  // in step order
    std::vector<std::string> warnings;
};

/// Called after each epoch with that epoch's metrics and the updated model.
using EpochHook = std::function<void(const EpochMetrics&, const Model&)>;

/// Hook writing one JSON line per epoch.
inline EpochHook jsonl_logger(std::ostream& os) {
    return [&os](const EpochMetrics& m, const Model&) { os << to_json(m).dump() << '\n' << std::flush; };
}

// ---- shared loop -----------------------------------------------------------

namespace detail {

/// Per-sequence loss terms of one training instance, already scaled so that
/// summing over a batch gives the batch loss.
struct InstanceLoss {
    double mlm_nll = 0.0;  // summed NLL over masked tokens (unscaled)
    std::size_t mlm_count = 0;
    std::optional<double> pair_ce;
    std::optional<bool> pair_correct;
    std::optional<double> cls_ce;
};

struct EpochAccumulator {
    double mlm_nll = 0.0;
    std::size_t mlm_count = 0;
    double pair_ce = 0.0;
    std::size_t pair_count = 0;
    std::size_t pair_correct = 0;
    double cls_ce = 0.0;
    std::size_t cls_count = 0;

    void add(const InstanceLoss& l) {
        mlm_nll += l.mlm_nll;
        mlm_count += l.mlm_count;
        if (l.pair_ce) {
            pair_ce += *l.pair_ce;
            ++pair_count;
            pair_correct += *l.pair_correct ? 1 : 0;
        }
        if (l.cls_ce) {
            cls_ce += *l.cls_ce;
            ++cls_count;
        }
    }

    EpochMetrics finish(const std::string& stage, int epoch, double wall) const {
        EpochMetrics m;
        m.stage = stage;
        m.epoch = epoch;
        if (mlm_count) m.mlm_loss = mlm_nll / static_cast<double>(mlm_count);
        if (pair_count) {
            m.qdpp_loss = pair_ce / static_cast<double>(pair_count);
            m.qdpp_acc = static_cast<double>(pair_correct) / static_cast<double>(pair_count);
        }
        if (cls_count) m.cls_loss = cls_ce / static_cast<double>(cls_count);
        m.wall_s = wall;
        return m;
    }
};

/// Forward + backward of one instance, accumulating parameter gradients.
/// `mlm_scale` multiplies the instance's mean masked-token NLL and
/// `cls_scale` its [CLS] cross-entropy.
inline InstanceLoss train_instance(Model& model, const InputSequence& full, bool use_mlm, double mlm_scale,
                                   double pair_scale, double cls_scale, Rng& dropout_rng) {
    const InputSequence seq = full.trimmed();
    Graph g;
    ForwardOptions opt;
    opt.train = true;
    opt.rng = &dropout_rng;
    const Var h = encode(g, model.config, model.weights, seq, opt);
    InstanceLoss out;
    std::optional<Var> loss;
    auto add_term = [&](Var term) { loss = loss ? g.add(*loss, term) : term; };

    const auto positions = seq.masked_positions();
    if (use_mlm && !positions.empty()) {
        const Var logits = mlm_logits(g, model.config, model.weights, h, positions);
        const Var ce = g.softmax_cross_entropy(logits, seq.masked_targets());
        out.mlm_count = positions.size();
        out.mlm_nll = g.scalar(ce) * static_cast<double>(positions.size());
        if (mlm_scale > 0.0) add_term(g.scale(ce, mlm_scale));
    }
    if (seq.pair_label) {
        const Var logits = qdpp_logits(g, model.weights, h);
        const int target[] = {static_cast<int>(*seq.pair_label)};
        const Var ce = g.softmax_cross_entropy(logits, target);
        out.pair_ce = g.scalar(ce);
        const auto v = g.value(logits);
        out.pair_correct = (v[1] > v[0]) == (*seq.pair_label == PairLabel::IsPair);
        if (pair_scale > 0.0) add_term(g.scale(ce, pair_scale));
    }
    if (seq.relevance_label) {
        const Var logits = relevance_logits(g, model.weights, h);
        const int target[] = {*seq.relevance_label};
        const Var ce = g.softmax_cross_entropy(logits, target);
        out.cls_ce = g.scalar(ce);
        if (cls_scale > 0.0) add_term(g.scale(ce, cls_scale));
    }
    if (loss) {
        g.backward(*loss);
        for (Tensor* p : model.weights.parameters()) g.accumulate_into(*p);
    }
    return out;
}

/// Generic epoch loop. `make` builds the training instance for position
/// `idx` of the epoch's (shuffled) order given that instance's RNG.
template <typename Make>
TrainResult run_epochs(Model& model, const TrainPlan& plan, std::size_t n_items, Make&& make, bool use_mlm,
                       const EpochHook& hook) {
    TrainResult result;
    AdamW opt(plan.adamw);
    const auto params = model.weights.parameters();
    const std::string stage = plan_stage_name(plan.stage);
    for (int epoch = 1; epoch <= plan.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n_items);
        for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
        Rng shuffle_rng = derive_rng(plan.seed, {stream::kShuffle, static_cast<std::uint64_t>(epoch)});
        shuffle_in_place(order, shuffle_rng);

        EpochAccumulator acc;
        const auto batch = static_cast<std::size_t>(plan.batch);
        for (std::size_t start = 0; start < n_items; start += batch) {
            const std::size_t end = std::min(n_items, start + batch);
            std::vector<InputSequence> items;
            items.reserve(end - start);
            for (std::size_t pos = start; pos < end; ++pos) {
                Rng inst_rng = derive_rng(plan.seed, {stream::kInstance, static_cast<std::uint64_t>(epoch), order[pos]});
                items.push_back(make(order[pos], inst_rng));
            }
            std::size_t n_mask = 0;
            std::size_t n_pair = 0;
            std::size_t n_cls = 0;
            for (const auto& s : items) {
                if (use_mlm) n_mask += s.masked_positions().size();
                n_pair += s.pair_label.has_value();
                n_cls += s.relevance_label.has_value();
            }
            model.weights.clear_grads();
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < items.size(); ++i) {
                const std::size_t n_i = use_mlm ? items[i].masked_positions().size() : 0;
                const double mlm_scale = n_mask ? plan.w_mlm * static_cast<double>(n_i) / static_cast<double>(n_mask) : 0.0;
                const double pair_scale = n_pair ? plan.w_qdpp / static_cast<double>(n_pair) : 0.0;
                const double cls_scale = n_cls ? 1.0 / static_cast<double>(n_cls) : 0.0;
                Rng drop_rng = derive_rng(plan.seed, {stream::kDropout, static_cast<std::uint64_t>(epoch), order[start + i]});
                const InstanceLoss l = train_instance(model, items[i], use_mlm, mlm_scale, pair_scale, cls_scale, drop_rng);
                acc.add(l);
                if (n_mask && l.mlm_count) batch_loss += plan.w_mlm * l.mlm_nll / static_cast<double>(n_mask);
                if (l.pair_ce) batch_loss += plan.w_qdpp * *l.pair_ce / static_cast<double>(n_pair);
                if (l.cls_ce) batch_loss += *l.cls_ce / static_cast<double>(n_cls);
            }
            if (plan.clip_norm > 0.0) clip_grad_norm(params, plan.clip_norm);
            opt.step(params);
            result.batch_losses.push_back(batch_loss);
        }
        model.weights.clear_grads();
        if (!model.weights.all_finite()) throw NumericError("weights became non-finite in epoch " + std::to_string(epoch));
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        EpochMetrics m = acc.finish(stage, epoch, wall);
        model.meta.epoch = epoch;
        result.epochs.push_back(m);
        if (hook) hook(m, model);
    }
    return result;
}

inline void begin_stage(Model& model, Stage stage, std::uint64_t seed) {
    model.meta.stage = stage;
    model.meta.seed_lineage.push_back(seed);
    model.meta.epoch = 0;
    model.meta.fingerprint.clear();
}

}  // namespace detail

// ---- procedures ------------------------------------------------------------

/// Joint MLM + pair-prediction training on click-log pairs. Instance i of
/// epoch e draws its pair and its masks from stream (seed, e, i), whatever
/// the loss weights, so w_qdpp = 0 reproduces MLM-only training on the same
/// sequences.
inline TrainResult coarse_tune(Model& model, const std::vector<ClickLogEntry>& clicks, const DocStore& store,
                               const Vocabulary& vocab, const SequenceLimits& limits, const TrainPlan& plan,
                               const EpochHook& hook = {}) {
    plan.validate();
    if (plan.stage != PlanStage::Coarse) throw UsageError("coarse_tune needs a coarse plan");
    if (model.meta.stage != Stage::Pretrained && model.meta.stage != Stage::Random) {
        throw UsageError("coarse-tuning starts from a pre-trained or randomly initialised model, not '" +
                         stage_name(model.meta.stage) + "'");
    }
    if (clicks.empty()) throw DataError("click log is empty after sampling");
    if (static_cast<std::size_t>(model.config.vocab) != vocab.size()) throw DataError("model and vocabulary sizes differ");
    const QdppSampler sampler(store, clicks);
    detail::begin_stage(model, Stage::Coarse, plan.seed);
    auto make = [&](std::size_t idx, Rng& rng) {
        InputSequence s = make_qdpp_instance(clicks[idx], store, sampler, vocab, limits, plan.p_ispair, rng);
        InputSequence masked = apply_mlm_mask(s, plan.mask_rate, plan.mask_scope, rng);
        if (!plan.mlm_on_notpair && masked.pair_label == PairLabel::NotPair) return s;
        return masked;
    };
    return detail::run_epochs(model, plan, clicks.size(), make, plan.w_mlm > 0.0, hook);
}

/// MLM-only training over single-document sequences. A Pretrain plan marks
/// the result as pre-trained; a ContPre plan continues a pre-trained model.
inline TrainResult pretrain_mlm(Model& model, const std::vector<std::vector<int>>& docs, const SequenceLimits& limits,
                                const TrainPlan& plan, const EpochHook& hook = {}) {
    plan.validate();
    if (plan.stage != PlanStage::Pretrain && plan.stage != PlanStage::ContPre) {
        throw UsageError("pretrain_mlm needs a pretrain or cont-pre plan");
    }
    if (plan.stage == PlanStage::ContPre && model.meta.stage != Stage::Pretrained) {
        throw UsageError("continual pre-training starts from a pre-trained model, not '" +
                         stage_name(model.meta.stage) + "'");
    }
    if (docs.empty()) throw DataError("pre-training corpus is empty");
    std::vector<InputSequence> base;
    base.reserve(docs.size());
    for (const auto& d : docs) base.push_back(build_document_sequence(d, limits.max_len));
    detail::begin_stage(model, plan.stage == PlanStage::Pretrain ? Stage::Pretrained : Stage::ContPre, plan.seed);
    auto make = [&](std::size_t idx, Rng& rng) { return apply_mlm_mask(base[idx], plan.mask_rate, MaskScope::AllTokens, rng); };
    return detail::run_epochs(model, plan, base.size(), make, true, hook);
}

inline std::vector<std::vector<int>> encode_documents(const DocStore& store, const std::vector<std::string>& docids,
                                                      const Vocabulary& vocab) {
    std::vector<std::vector<int>> out;
    out.reserve(docids.size());
    for (const auto& id : docids) {
        auto ids = encode(store.text(id), vocab);
        if (!ids.empty()) out.push_back(std::move(ids));
    }
    return out;
}

/// Relevance classification over labelled query-document sequences.
inline TrainResult fine_tune(Model& model, const std::vector<InputSequence>& instances, const TrainPlan& plan,
                             const EpochHook& hook = {}) {
    plan.validate();
    if (plan.stage != PlanStage::Finetune) throw UsageError("fine_tune needs a finetune plan");
    if (instances.empty()) throw DataError("no fine-tuning instances");
    TrainResult warn;
    bool pos = false, neg = false;
    for (const auto& s : instances) {
        if (!s.relevance_label) throw DataError("fine-tuning instance without a relevance label");
        (*s.relevance_label ? pos : neg) = true;
    }
    if (!(pos && neg)) warn.warnings.push_back("fine-tuning labels contain a single class");
    if (plan.reinit_relevance_head) reinit_relevance_head(model.weights, model.config, plan.seed);
    detail::begin_stage(model, Stage::Finetuned, plan.seed);
    auto make = [&](std::size_t idx, Rng&) { return instances[idx]; };
    TrainResult r = detail::run_epochs(model, plan, instances.size(), make, false, hook);
    r.warnings = std::move(warn.warnings);
    return r;
}

// ---- evaluation helpers ----------------------------------------------------

struct PairEval {
    double accuracy = 0.0;
    double loss = 0.0;
    std::size_t count = 0;
};

/// Pair-prediction accuracy of the model (no dropout) on fixed instances.
inline PairEval evaluate_qdpp(const Model& model, const std::vector<InputSequence>& instances) {
    PairEval r;
    std::size_t correct = 0;
    for (const auto& full : instances) {
        if (!full.pair_label) continue;
        const InputSequence seq = full.trimmed();
        Graph g;
        const Var logits = qdpp_logits(g, model.weights, encode(g, model.config, model.weights, seq));
        const int target[] = {static_cast<int>(*full.pair_label)};
        r.loss += g.scalar(g.softmax_cross_entropy(logits, target));
        const auto v = g.value(logits);
        correct += (v[1] > v[0]) == (*full.pair_label == PairLabel::IsPair);
        ++r.count;
    }
    if (r.count) {
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
        r.loss /= static_cast<double>(r.count);
    }
    return r;
}

struct MlmEval {
    double loss = 0.0;      // mean NLL per masked token
    double accuracy = 0.0;  // top-1 accuracy over masked tokens
    std::size_t count = 0;
};

inline MlmEval evaluate_mlm(const Model& model, const std::vector<InputSequence>& instances) {
    MlmEval r;
    std::size_t correct = 0;
    for (const auto& full : instances) {
        const InputSequence seq = full.trimmed();
        const auto positions = seq.masked_positions();
        if (positions.empty()) continue;
        const auto targets = seq.masked_targets();
        Graph g;
        const Var h = encode(g, model.config, model.weights, seq);
        const Var logits = mlm_logits(g, model.config, model.weights, h, positions);
        r.loss += g.scalar(g.softmax_cross_entropy(logits, targets)) * static_cast<double>(positions.size());
        const auto v = g.value(logits);
        const auto V = static_cast<std::size_t>(model.config.vocab);
        for (std::size_t i = 0; i < positions.size(); ++i) {
            const auto row = v.subspan(i * V, V);
            const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += best == targets[i];
        }
        r.count += positions.size();
    }
    if (r.count) {
        r.loss /= static_cast<double>(r.count);
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
    }
    return r;
}

}  // namespace coarse
