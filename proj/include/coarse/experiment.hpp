#pragma once

// Experiment orchestration: the six ranking conditions with cross-validation
// and multi-seed trials, cached stage checkpoints, run files, reports, and
// the sampling-rate / epoch sweep.
//
// Work-dir layout:
//   checkpoints/  stage checkpoints (final and per epoch)
//   runs/         TREC run files
//   reports/      text tables and their JSON twins
//   logs/         JSON-lines training metrics and a timestamped progress log

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "rankeval.hpp"
#include "retrieval.hpp"
#include "tokenizer.hpp"
#include "train.hpp"

namespace coarse {

inline const std::vector<std::string>& condition_names() {
    static const std::vector<std::string> kNames = {"bm25",       "pre-trained",   "coarse-tuned",
                                                    "fine-tuned", "cont-pre+fine", "coarse+fine"};
    return kNames;
}

inline bool is_condition(const std::string& c) {
    const auto& n = condition_names();
    return std::find(n.begin(), n.end(), c) != n.end();
}

// ---- configuration ---------------------------------------------------------

struct ExperimentConfig {
    std::filesystem::path vocab, docs, clicks, queries, qrels;
    std::filesystem::path work_dir = "work";
    std::filesystem::path pretrained;  // optional: skip the built-in pre-training stage
    ModelConfig model = ModelConfig::tiny(0);
    SequenceLimits limits;
    TrainPlan pretrain = TrainPlan::defaults(PlanStage::Pretrain);
    TrainPlan coarse = TrainPlan::defaults(PlanStage::Coarse);
    TrainPlan contpre = TrainPlan::defaults(PlanStage::ContPre);
    TrainPlan finetune = TrainPlan::defaults(PlanStage::Finetune);
    double sample_rate = 0.08;
    int folds = 4;
    int eval_folds = 0;  // evaluate only the first n folds; 0 = all
    std::uint64_t seed = 42;
    int n_seeds = 5;
    Bm25Params bm25;
    int depth = 1000;
    std::string baseline = "fine-tuned";

    std::vector<std::uint64_t> trial_seeds() const {
        std::vector<std::uint64_t> s;
        for (int t = 0; t < n_seeds; ++t) s.push_back(seed + static_cast<std::uint64_t>(t));
        return s;
    }

    /// Checks values and the inputs `condition` needs ("" = value checks only).
    void validate(const std::string& condition = "") const {
        if (!(sample_rate > 0.0 && sample_rate <= 1.0)) throw UsageError("sample-rate must lie in (0, 1]");
        if (n_seeds < 1) throw UsageError("seeds must be at least 1");
        if (folds < 2) throw UsageError("folds must be at least 2");
        if (eval_folds < 0 || eval_folds > folds) throw UsageError("eval-folds must lie in [0, folds]");
        if (depth < 1) throw UsageError("depth must be at least 1");
        if (limits.max_len < 8 || limits.max_query_tokens < 1) throw UsageError("invalid sequence limits");
        if (!is_condition(baseline)) throw UsageError("unknown baseline condition '" + baseline + "'");
        for (const TrainPlan* p : {&pretrain, &coarse, &contpre, &finetune}) p->validate();
        if (condition.empty()) return;
        if (!is_condition(condition)) throw UsageError("unknown condition '" + condition + "'");
        auto need = [](const std::filesystem::path& p, const char* key) {
            if (p.empty()) throw UsageError(std::string("missing required input --") + key);
            if (!std::filesystem::exists(p)) throw DataError(std::string(key) + " file not found: " + p.string());
        };
        need(docs, "docs");
        need(queries, "queries");
        need(qrels, "qrels");
        if (condition == "bm25") return;
        need(vocab, "vocab");
        if (!pretrained.empty()) need(pretrained, "pretrained");
        if (condition == "coarse-tuned" || condition == "coarse+fine" || condition == "cont-pre+fine") {
            need(clicks, "clicks");
        }
    }
};

/// One `key = value` setting; keys double as long command-line flags.
struct Setting {
    std::string key;
    std::string help;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        T out;
        if constexpr (std::is_same_v<T, double>) {
            out = std::stod(v, &used);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            out = std::stoull(v, &used);
        } else {
            out = std::stoi(v, &used);
        }
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw UsageError("invalid value '" + v + "' for " + key);
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("invalid value '" + v + "' for " + key + " (expected true or false)");
}

inline Setting path_setting(const char* key, const char* help, std::filesystem::path ExperimentConfig::*m) {
    return {key, help, [m](const ExperimentConfig& c) { return (c.*m).string(); },
            [m](ExperimentConfig& c, const std::string& v) { c.*m = v; }};
}

template <typename T, typename Get>
Setting number_setting(std::string key, std::string help, Get ref) {
    return {key, std::move(help),
            [ref](const ExperimentConfig& c) {
                ExperimentConfig copy = c;
                const T v = ref(copy);
                if constexpr (std::is_same_v<T, double>) return fmt_double(v);
                else return std::to_string(v);
            },
            [ref, key](ExperimentConfig& c, const std::string& v) { ref(c) = parse_number<T>(key, v); }};
}

}  // namespace detail

inline const std::vector<Setting>& experiment_settings() {
    using detail::number_setting;
    static const std::vector<Setting> kSettings = [] {
        std::vector<Setting> s = {
            detail::path_setting("vocab", "vocabulary file", &ExperimentConfig::vocab),
            detail::path_setting("docs", "document store (JSON lines)", &ExperimentConfig::docs),
            detail::path_setting("clicks", "click log TSV", &ExperimentConfig::clicks),
            detail::path_setting("queries", "judged queries TSV", &ExperimentConfig::queries),
            detail::path_setting("qrels", "relevance judgments", &ExperimentConfig::qrels),
            detail::path_setting("work-dir", "experiment directory", &ExperimentConfig::work_dir),
            detail::path_setting("pretrained", "pre-trained checkpoint (optional)", &ExperimentConfig::pretrained),
            number_setting<int>("model-layers", "encoder layers", [](ExperimentConfig& c) -> int& { return c.model.layers; }),
            number_setting<int>("model-hidden", "hidden size", [](ExperimentConfig& c) -> int& { return c.model.hidden; }),
            number_setting<int>("model-heads", "attention heads", [](ExperimentConfig& c) -> int& { return c.model.heads; }),
            number_setting<int>("model-ffn", "feed-forward size", [](ExperimentConfig& c) -> int& { return c.model.ffn; }),
            number_setting<double>("model-dropout", "dropout rate", [](ExperimentConfig& c) -> double& { return c.model.dropout; }),
            number_setting<double>("model-init-std", "weight init std", [](ExperimentConfig& c) -> double& { return c.model.init_std; }),
            {"max-len", "maximum sequence length",
             [](const ExperimentConfig& c) { return std::to_string(c.limits.max_len); },
             [](ExperimentConfig& c, const std::string& v) {
                 c.limits.max_len = c.model.max_len = detail::parse_number<int>("max-len", v);
             }},
            number_setting<int>("max-query-tokens", "query token cap", [](ExperimentConfig& c) -> int& { return c.limits.max_query_tokens; }),
            number_setting<double>("sample-rate", "click-log sampling rate", [](ExperimentConfig& c) -> double& { return c.sample_rate; }),
            number_setting<int>("folds", "cross-validation folds", [](ExperimentConfig& c) -> int& { return c.folds; }),
            number_setting<int>("eval-folds", "folds evaluated (0 = all)", [](ExperimentConfig& c) -> int& { return c.eval_folds; }),
            number_setting<std::uint64_t>("seed", "base seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }),
            number_setting<int>("seeds", "number of trials (seeds seed..seed+n-1)", [](ExperimentConfig& c) -> int& { return c.n_seeds; }),
            number_setting<double>("k1", "BM25 k1", [](ExperimentConfig& c) -> double& { return c.bm25.k1; }),
            number_setting<double>("b", "BM25 b", [](ExperimentConfig& c) -> double& { return c.bm25.b; }),
            number_setting<int>("depth", "BM25 candidates re-ranked per query", [](ExperimentConfig& c) -> int& { return c.depth; }),
            {"baseline", "condition used for significance marks",
             [](const ExperimentConfig& c) { return c.baseline; },
             [](ExperimentConfig& c, const std::string& v) { c.baseline = v; }},
        };
        const std::pair<const char*, TrainPlan ExperimentConfig::*> plans[] = {
            {"pretrain", &ExperimentConfig::pretrain},
            {"coarse", &ExperimentConfig::coarse},
            {"cont-pre", &ExperimentConfig::contpre},
            {"finetune", &ExperimentConfig::finetune},
        };
        for (const auto& [name, member] : plans) {
            const std::string p = name;
            const auto m = member;
            s.push_back(number_setting<int>(p + "-epochs", p + " epochs", [m](ExperimentConfig& c) -> int& { return (c.*m).epochs; }));
            s.push_back(number_setting<int>(p + "-batch", p + " batch size", [m](ExperimentConfig& c) -> int& { return (c.*m).batch; }));
            s.push_back(number_setting<double>(p + "-lr", p + " learning rate", [m](ExperimentConfig& c) -> double& { return (c.*m).adamw.lr; }));
            s.push_back(number_setting<double>(p + "-weight-decay", p + " AdamW weight decay", [m](ExperimentConfig& c) -> double& { return (c.*m).adamw.weight_decay; }));
            s.push_back(number_setting<double>(p + "-clip-norm", p + " gradient clip norm (0 = off)", [m](ExperimentConfig& c) -> double& { return (c.*m).clip_norm; }));
            if (p != "finetune") {
                s.push_back(number_setting<double>(p + "-mask-rate", p + " MLM mask rate", [m](ExperimentConfig& c) -> double& { return (c.*m).mask_rate; }));
            }
        }
        s.push_back(number_setting<double>("coarse-w-mlm", "coarse MLM loss weight", [](ExperimentConfig& c) -> double& { return c.coarse.w_mlm; }));
        s.push_back(number_setting<double>("coarse-w-qdpp", "coarse pair-prediction loss weight", [](ExperimentConfig& c) -> double& { return c.coarse.w_qdpp; }));
        s.push_back(number_setting<double>("p-ispair", "IsPair probability", [](ExperimentConfig& c) -> double& { return c.coarse.p_ispair; }));
        s.push_back({"mask-scope", "coarse MLM scope: all or query",
                     [](const ExperimentConfig& c) { return std::string(c.coarse.mask_scope == MaskScope::AllTokens ? "all" : "query"); },
                     [](ExperimentConfig& c, const std::string& v) {
                         if (v == "all") c.coarse.mask_scope = MaskScope::AllTokens;
                         else if (v == "query") c.coarse.mask_scope = MaskScope::QueryOnly;
                         else throw UsageError("invalid value '" + v + "' for mask-scope (expected all or query)");
                     }});
        s.push_back({"mlm-on-notpair", "compute MLM loss on NotPair instances",
                     [](const ExperimentConfig& c) { return std::string(c.coarse.mlm_on_notpair ? "true" : "false"); },
                     [](ExperimentConfig& c, const std::string& v) { c.coarse.mlm_on_notpair = detail::parse_bool("mlm-on-notpair", v); }});
        return s;
    }();
    return kSettings;
}

inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& value) {
    for (const auto& s : experiment_settings()) {
        if (s.key == key) {
            s.set(c, value);
            return;
        }
    }
    throw UsageError("unknown configuration key '" + key + "'");
}

/// Reads `key = value` lines; '#' starts a comment. Later keys win.
inline std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read config file " + path.string());
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    std::size_t line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(is, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
            throw UsageError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
        }
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

/// The fully resolved configuration in config-file form.
inline std::string format_manifest(const ExperimentConfig& c, const std::string& condition = "") {
    std::string out;
    if (!condition.empty()) out += "condition = " + condition + "\n";
    for (const auto& s : experiment_settings()) out += s.key + " = " + s.get(c) + "\n";
    return out;
}

// ---- fingerprints ----------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string fingerprint(std::initializer_list<std::string> parts) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : parts) {
        h = fnv1a(p, h);
        h = fnv1a(std::string_view("\x1f", 1), h);
    }
    return hex64(h);
}

inline std::string file_hash(const std::filesystem::path& p) { return hex64(fnv1a(read_file(p))); }

inline std::string plan_key(const TrainPlan& p) {
    nlohmann::json j = {{"stage", plan_stage_name(p.stage)}, {"epochs", p.epochs},  {"batch", p.batch},
                        {"w_mlm", p.w_mlm},                  {"w_qdpp", p.w_qdpp},  {"mask_rate", p.mask_rate},
                        {"scope", static_cast<int>(p.mask_scope)}, {"p_ispair", p.p_ispair},
                        {"mlm_on_notpair", p.mlm_on_notpair}, {"clip", p.clip_norm}, {"reinit", p.reinit_relevance_head},
                        {"lr", p.adamw.lr},                  {"b1", p.adamw.beta1}, {"b2", p.adamw.beta2},
                        {"eps", p.adamw.eps},                {"wd", p.adamw.weight_decay}};
    return j.dump();
}

}  // namespace detail

// ---- progress log ----------------------------------------------------------

class ProgressLog {
public:
    ProgressLog() = default;
    ProgressLog(const std::filesystem::path& path, bool echo)
        : os_(path, std::ios::app), echo_(echo), t0_(std::chrono::steady_clock::now()) {}

    void operator()(const std::string& msg) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "[%8.1fs] ",
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count());
        if (os_) os_ << buf << msg << '\n' << std::flush;
        if (echo_) std::cerr << buf << msg << '\n';
    }

private:
    std::ofstream os_;
    bool echo_ = false;
    std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

// ---- experiment context ----------------------------------------------------

struct TrialResult {
    std::uint64_t seed = 0;
    RankedRun run;          // eval queries of every evaluated fold
    MetricsReport metrics;
};

struct ConditionOutcome {
    std::string condition;
    std::vector<TrialResult> trials;
    MetricsReport averaged;  // per-query metrics averaged over trials
};

/// Loaded inputs plus the stage cache for one work directory.
class Experiment {
public:
    Experiment(ExperimentConfig cfg, bool echo = false) : cfg_(std::move(cfg)) {
        for (const char* d : {"checkpoints", "runs", "reports", "logs"}) std::filesystem::create_directories(cfg_.work_dir / d);
        log_ = std::make_unique<ProgressLog>(cfg_.work_dir / "logs" / "run.log", echo);
    }

    const ExperimentConfig& config() const noexcept { return cfg_; }
    ProgressLog& log() { return *log_; }

    ConditionOutcome run_condition(const std::string& condition) {
        cfg_.validate(condition);
        load_common();
        log()("condition " + condition);
        ConditionOutcome out;
        out.condition = condition;
        for (std::uint64_t s : cfg_.trial_seeds()) {
            TrialResult t;
            t.seed = s;
            t.run = RankedRun(condition);
            for (std::size_t f = 0; f < eval_fold_count(); ++f) t.run.merge(fold_run(condition, s, f));
            t.metrics = evaluate_run(t.run, qrels_);
            save_trec_run(t.run, cfg_.work_dir / "runs" / (condition + ".seed" + std::to_string(s) + ".trec"));
            log()(condition + " seed " + std::to_string(s) + ": MRR " + detail::fixed3(t.metrics.mean.at("MRR")) +
                  " nDCG@5 " + detail::fixed3(t.metrics.mean.at("nDCG@5")));
            out.trials.push_back(std::move(t));
        }
        out.averaged = average_trials(out.trials, condition);
        write_condition_report(out);
        detail::write_file(cfg_.work_dir / ("manifest." + condition + ".conf"), format_manifest(cfg_, condition));
        return out;
    }

    // Stage models, cached under checkpoints/ by fingerprint.

    Model pretrained() {
        load_vocab_file();
        if (!cfg_.pretrained.empty()) {
            Model m = load_checkpoint(cfg_.pretrained, vocab_);
            if (m.meta.stage != Stage::Pretrained) throw DataError("--pretrained checkpoint is not a pre-trained model");
            if (m.meta.fingerprint.empty()) m.meta.fingerprint = detail::file_hash(cfg_.pretrained);
            return m;
        }
        load_docs();
        ModelConfig mc = model_config();
        const std::string fp = detail::fingerprint({"pretrained", nlohmann::json(mc).dump(), detail::plan_key(cfg_.pretrain),
                                                    std::to_string(cfg_.limits.max_len), std::to_string(cfg_.seed),
                                                    docs_hash_, vocab_hash_});
        return cached("pretrained", fp, [&] {
            Model m = Model::fresh(mc, cfg_.seed);
            TrainPlan plan = cfg_.pretrain;
            plan.seed = cfg_.seed;
            train_logged("pretrained", plan, [&](const EpochHook& hook) {
                return pretrain_mlm(m, encode_documents(store_, store_.ids(), vocab_), cfg_.limits, plan, hook);
            });
            return m;
        });
    }

    Model coarse_tuned(std::uint64_t seed) {
        Model base = pretrained();
        load_clicks();
        const std::string fp = detail::fingerprint({"coarse", base.meta.fingerprint, detail::plan_key(cfg_.coarse),
                                                    detail::fmt_double(cfg_.sample_rate), clicks_hash_,
                                                    std::to_string(cfg_.limits.max_len), std::to_string(cfg_.limits.max_query_tokens),
                                                    std::to_string(seed)});
        return cached("coarse.seed" + std::to_string(seed), fp, [&] {
            TrainPlan plan = cfg_.coarse;
            plan.seed = seed;
            train_logged("coarse.seed" + std::to_string(seed), plan, [&](const EpochHook& hook) {
                return coarse_tune(base, clicks_, store_, vocab_, cfg_.limits, plan, hook);
            });
            return base;
        });
    }

    Model cont_pretrained(std::uint64_t seed) {
        Model base = pretrained();
        load_clicks();
        const std::string fp = detail::fingerprint({"cont-pre", base.meta.fingerprint, detail::plan_key(cfg_.contpre),
                                                    detail::fmt_double(cfg_.sample_rate), clicks_hash_,
                                                    std::to_string(cfg_.limits.max_len), std::to_string(seed)});
        return cached("cont-pre.seed" + std::to_string(seed), fp, [&] {
            TrainPlan plan = cfg_.contpre;
            plan.seed = seed;
            train_logged("cont-pre.seed" + std::to_string(seed), plan, [&](const EpochHook& hook) {
                return pretrain_mlm(base, encode_documents(store_, click_docids(), vocab_), cfg_.limits, plan, hook);
            });
            return base;
        });
    }

    Model fine_tuned(const std::string& condition, std::uint64_t seed, std::size_t fold) {
        Model base = condition == "coarse+fine"     ? coarse_tuned(seed)
                     : condition == "cont-pre+fine" ? cont_pretrained(seed)
                                                    : pretrained();
        const auto train_qids = training_qids(fold);
        std::string qid_key;
        for (const auto& q : train_qids) qid_key += q + ",";
        const std::string name = condition + ".seed" + std::to_string(seed) + ".fold" + std::to_string(fold);
        const std::string fp = detail::fingerprint({"finetune", base.meta.fingerprint, detail::plan_key(cfg_.finetune),
                                                    qrels_hash_, queries_hash_, qid_key,
                                                    std::to_string(cfg_.limits.max_len), std::to_string(seed)});
        return cached(name, fp, [&] {
            const auto set = make_finetune_instances(qrels_.subset(train_qids), queries_, store_, vocab_, cfg_.limits);
            for (const auto& msg : set.skipped) log()("skipped judgment: " + msg);
            TrainPlan plan = cfg_.finetune;
            plan.seed = seed;
            train_logged(name, plan, [&](const EpochHook& hook) {
                auto r = fine_tune(base, set.instances, plan, hook);
                for (const auto& w : r.warnings) log()("warning: " + w);
                return r;
            });
            return base;
        });
    }

    /// BM25 candidates for the eval queries of a fold.
    RankedRun bm25_candidates(std::size_t fold) {
        load_common();
        auto it = bm25_cache_.find(fold);
        if (it != bm25_cache_.end()) return it->second;
        RankedRun run = bm25_run(*index_, queries_, folds_.at(fold), static_cast<std::size_t>(cfg_.depth), cfg_.bm25);
        bm25_cache_.emplace(fold, run);
        return run;
    }

    RankedRun fold_run(const std::string& condition, std::uint64_t seed, std::size_t fold) {
        RankedRun cand = bm25_candidates(fold);
        if (condition == "bm25") {
            cand.set_tag("bm25");
            return cand;
        }
        load_vocab_file();
        Model m;
        if (condition == "pre-trained") {
            m = pretrained();
            reinit_relevance_head(m.weights, m.config, seed);
        } else if (condition == "coarse-tuned") {
            m = coarse_tuned(seed);
            copy_qdpp_to_relevance(m.weights);
        } else {
            m = fine_tuned(condition, seed, fold);
        }
        return rerank(m, queries_, cand, store_, vocab_, cfg_.limits, condition);
    }

    std::size_t eval_fold_count() {
        load_common();
        return cfg_.eval_folds == 0 ? folds_.size() : static_cast<std::size_t>(cfg_.eval_folds);
    }

    const std::vector<std::vector<std::string>>& folds() {
        load_common();
        return folds_;
    }

    std::vector<std::string> training_qids(std::size_t fold) {
        load_common();
        std::vector<std::string> out;
        for (std::size_t f = 0; f < folds_.size(); ++f)
            if (f != fold) out.insert(out.end(), folds_[f].begin(), folds_[f].end());
        std::sort(out.begin(), out.end());
        return out;
    }

    const DocStore& store() { load_docs(); return store_; }
    const Vocabulary& vocabulary() { load_vocab_file(); return vocab_; }
    const QueryMap& queries() { load_common(); return queries_; }
    const Qrels& qrels() { load_common(); return qrels_; }
    const std::vector<ClickLogEntry>& clicks() { load_clicks(); return clicks_; }

    /// Unique clicked docids of the sampled click log, in first-click order.
    std::vector<std::string> click_docids() {
        load_clicks();
        std::vector<std::string> out;
        std::set<std::string> seen;
        for (const auto& e : clicks_)
            if (seen.insert(e.docid).second) out.push_back(e.docid);
        return out;
    }

    /// Replaces the sampled click log (used by the sampling-rate sweep).
    void set_sample_rate(double rate) {
        cfg_.sample_rate = rate;
        clicks_loaded_ = false;
        load_clicks();
    }

    static MetricsReport average_trials(const std::vector<TrialResult>& trials, const std::string& tag) {
        MetricsReport avg = trials.front().metrics;
        avg.run_tag = tag;
        for (const auto& m : avg.metrics) {
            auto& v = avg.per_query[m];
            for (std::size_t t = 1; t < trials.size(); ++t) {
                const auto& o = trials[t].metrics;
                if (o.qids != avg.qids) throw DataError("trials of '" + tag + "' cover different queries");
                for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.per_query.at(m)[i];
            }
            for (double& x : v) x /= static_cast<double>(trials.size());
            avg.mean[m] = v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        }
        return avg;
    }

    void write_condition_report(const ConditionOutcome& o) {
        std::vector<std::pair<std::string, MetricsReport>> rows;
        nlohmann::json trials = nlohmann::json::array();
        for (const auto& t : o.trials) {
            rows.emplace_back("seed " + std::to_string(t.seed), t.metrics);
            trials.push_back({{"seed", t.seed}, {"mean", t.metrics.mean}, {"per_query", t.metrics.per_query}});
        }
        rows.emplace_back("mean", o.averaged);
        std::string text = "condition: " + o.condition + "\n" + format_table(rows);
        text += "queries evaluated: " + std::to_string(o.averaged.qids.size()) + "\n";
        detail::write_file(cfg_.work_dir / "reports" / (o.condition + ".txt"), text);
        nlohmann::json j = {{"condition", o.condition}, {"trials", std::move(trials)}, {"averaged", report_json(o.averaged)}};
        detail::write_file(cfg_.work_dir / "reports" / (o.condition + ".json"), j.dump(2) + "\n");
    }

private:
    template <typename Train>
    void train_logged(const std::string& name, const TrainPlan& plan, Train&& train) {
        std::ofstream metrics(cfg_.work_dir / "logs" / (name + ".jsonl"));
        log()("training " + name + " (" + plan_stage_name(plan.stage) + ", " + std::to_string(plan.epochs) + " epochs)");
        EpochHook hook = [&](const EpochMetrics& m, const Model& current) {
            metrics << to_json(m).dump() << '\n' << std::flush;
            save_checkpoint(current, cfg_.work_dir / "checkpoints" / (name + ".epoch" + std::to_string(m.epoch) + ".ckpt"));
            std::string line = name + " epoch " + std::to_string(m.epoch);
            if (m.mlm_loss) line += " mlm " + detail::fixed3(*m.mlm_loss);
            if (m.qdpp_loss) line += " qdpp " + detail::fixed3(*m.qdpp_loss) + " acc " + detail::fixed3(*m.qdpp_acc);
            if (m.cls_loss) line += " cls " + detail::fixed3(*m.cls_loss);
            log()(line);
        };
        train(hook);
    }

    template <typename Make>
    Model cached(const std::string& name, const std::string& fp, Make&& make) {
        if (auto it = memo_.find(fp); it != memo_.end()) return it->second;
        const auto path = cfg_.work_dir / "checkpoints" / (name + ".ckpt");
        if (std::filesystem::exists(path)) {
            Model m = load_checkpoint(path);
            if (m.meta.fingerprint == fp) {
                memo_.emplace(fp, m);
                return m;
            }
        }
        Model m = make();
        m.meta.fingerprint = fp;
        save_checkpoint(m, path);
        memo_.emplace(fp, m);
        return m;
    }

    ModelConfig model_config() {
        ModelConfig mc = cfg_.model;
        mc.vocab = static_cast<int>(vocab_.size());
        mc.max_len = cfg_.limits.max_len;
        mc.validate();
        return mc;
    }

    void load_vocab_file() {
        if (vocab_loaded_) return;
        if (cfg_.vocab.empty()) throw UsageError("missing required input --vocab");
        vocab_ = load_vocab(cfg_.vocab);
        vocab_hash_ = detail::file_hash(cfg_.vocab);
        vocab_loaded_ = true;
    }

    void load_docs() {
        if (docs_loaded_) return;
        if (cfg_.docs.empty()) throw UsageError("missing required input --docs");
        store_ = load_docstore(cfg_.docs);
        docs_hash_ = detail::file_hash(cfg_.docs);
        docs_loaded_ = true;
    }

    void load_clicks() {
        if (clicks_loaded_) return;
        load_docs();
        if (cfg_.clicks.empty()) throw UsageError("missing required input --clicks");
        auto loaded = load_clicklog(cfg_.clicks, store_, cfg_.sample_rate, cfg_.seed);
        if (loaded.dropped_unknown) {
            log()("click log: dropped " + std::to_string(loaded.dropped_unknown) + " sampled lines with unknown docids");
        }
        log()("click log: kept " + std::to_string(loaded.entries.size()) + " of " + std::to_string(loaded.lines) +
              " lines at rate " + detail::fmt_double(cfg_.sample_rate));
        if (loaded.entries.empty()) throw DataError("click log is empty after sampling");
        clicks_ = std::move(loaded.entries);
        clicks_hash_ = detail::file_hash(cfg_.clicks) + "@" + detail::fmt_double(cfg_.sample_rate);
        clicks_loaded_ = true;
    }

    void load_common() {
        if (common_loaded_) return;
        load_docs();
        if (cfg_.queries.empty() || cfg_.qrels.empty()) throw UsageError("missing required input --queries/--qrels");
        queries_ = load_queries(cfg_.queries);
        qrels_ = load_qrels(cfg_.qrels);
        queries_hash_ = detail::file_hash(cfg_.queries);
        qrels_hash_ = detail::file_hash(cfg_.qrels);
        std::vector<std::string> usable;
        for (const auto& q : qrels_.qids())
            if (qrels_.num_relevant(q) > 0 && queries_.contains(q)) usable.push_back(q);
        folds_ = fold_split(usable, static_cast<std::size_t>(cfg_.folds));
        index_ = InvertedIndex::build(store_);
        common_loaded_ = true;
    }

    ExperimentConfig cfg_;
    std::unique_ptr<ProgressLog> log_;
    bool vocab_loaded_ = false, docs_loaded_ = false, clicks_loaded_ = false, common_loaded_ = false;
    Vocabulary vocab_;
    DocStore store_;
    std::vector<ClickLogEntry> clicks_;
    QueryMap queries_;
    Qrels qrels_;
    std::vector<std::vector<std::string>> folds_;
    std::optional<InvertedIndex> index_;
    std::string vocab_hash_, docs_hash_, clicks_hash_, queries_hash_, qrels_hash_;
    std::map<std::string, Model> memo_;
    std::map<std::size_t, RankedRun> bm25_cache_;
};

// ---- cross-condition summary -----------------------------------------------

struct ConditionComparison {
    std::string condition;
    std::map<std::string, double> delta;              // averaged mean minus baseline mean
    std::map<std::string, TTestResult> test;          // on trial-averaged per-query values
    std::vector<std::map<std::string, TTestResult>> per_trial;  // one map per seed
};

/// Table of trial-averaged means with significance marks against the
/// baseline, followed by every delta and p-value, overall and per seed.
inline std::pair<std::string, nlohmann::json> summarize_conditions(const std::vector<ConditionOutcome>& outcomes,
                                                                   const std::string& baseline) {
    auto p_text = [](const TTestResult& t) {
        if (!t.defined) return std::string("undefined");
        char b[32];
        std::snprintf(b, sizeof b, "%.4g", t.p);
        return std::string(b);
    };
    const ConditionOutcome* base = nullptr;
    for (const auto& o : outcomes)
        if (o.condition == baseline) base = &o;
    std::vector<std::pair<std::string, MetricsReport>> rows;
    nlohmann::json j = {{"baseline", baseline}, {"conditions", nlohmann::json::array()}};
    std::string detail_text;
    for (const auto& o : outcomes) {
        MetricsReport r = o.averaged;
        nlohmann::json cj = {{"condition", o.condition}, {"mean", r.mean}};
        nlohmann::json seeds = nlohmann::json::array();
        for (const auto& t : o.trials) seeds.push_back({{"seed", t.seed}, {"mean", t.metrics.mean}});
        cj["trials"] = std::move(seeds);
        if (base && o.condition != baseline) {
            attach_baseline(r, base->averaged);
            nlohmann::json tests;
            detail_text += o.condition + " vs " + baseline + "\n";
            for (const auto& m : r.metrics) {
                const auto& t = r.vs_baseline.at(m);
                auto tj = detail::ttest_json(t);
                tj["mark"] = significance_mark(t);
                nlohmann::json per_seed = nlohmann::json::array();
                char buf[200];
                std::snprintf(buf, sizeof buf, "  %-8s delta %+.4f  p %s\n", m.c_str(), t.mean_diff, p_text(t).c_str());
                detail_text += buf;
                for (std::size_t i = 0; i < o.trials.size() && i < base->trials.size(); ++i) {
                    MetricsReport trial = o.trials[i].metrics;
                    attach_baseline(trial, base->trials[i].metrics);
                    const auto& tt = trial.vs_baseline.at(m);
                    per_seed.push_back({{"seed", o.trials[i].seed}, {"test", detail::ttest_json(tt)}});
                    std::snprintf(buf, sizeof buf, "    seed %-6llu delta %+.4f  p %s\n",
                                  static_cast<unsigned long long>(o.trials[i].seed), tt.mean_diff, p_text(tt).c_str());
                    detail_text += buf;
                }
                tj["per_seed"] = std::move(per_seed);
                tests[m] = std::move(tj);
            }
            cj["vs_baseline"] = std::move(tests);
        }
        j["conditions"].push_back(std::move(cj));
        rows.emplace_back(o.condition == baseline ? o.condition + " (baseline)" : o.condition, std::move(r));
    }
    std::string text = format_table(rows);
    text += "mean over " + std::to_string(outcomes.empty() ? 0 : outcomes.front().trials.size()) +
            " trials; significance vs " + baseline + " (paired two-sided t-test over queries): * p<0.01, † p<0.05, ‡ p<0.10\n\n";
    text += detail_text;
    return {text, j};
}

// ---- sweep -----------------------------------------------------------------

struct SweepGrid {
    std::vector<double> sampling;
    std::vector<int> coarse_epochs;
    std::vector<int> fine_epochs;
};

/// Parses "a:b:step" or a comma list into values.
inline std::vector<double> parse_range(const std::string& text, const std::string& key) {
    std::vector<double> out;
    if (text.find(':') != std::string::npos) {
        std::vector<double> parts;
        std::size_t a = 0;
        while (true) {
            const auto b = text.find(':', a);
            parts.push_back(detail::parse_number<double>(key, text.substr(a, b == std::string::npos ? std::string::npos : b - a)));
            if (b == std::string::npos) break;
            a = b + 1;
        }
        if (parts.size() < 2 || parts.size() > 3) throw UsageError("range for " + key + " must be start:end[:step]");
        const double step = parts.size() == 3 ? parts[2] : 1.0;
        if (!(step > 0.0) || parts[1] < parts[0]) throw UsageError("empty or descending range for " + key);
        const auto n = static_cast<long>(std::floor((parts[1] - parts[0]) / step + 1e-9));
        for (long i = 0; i <= n; ++i) out.push_back(parts[0] + static_cast<double>(i) * step);
    } else {
        std::size_t a = 0;
        while (true) {
            const auto b = text.find(',', a);
            out.push_back(detail::parse_number<double>(key, text.substr(a, b == std::string::npos ? std::string::npos : b - a)));
            if (b == std::string::npos) break;
            a = b + 1;
        }
    }
    return out;
}

/// coarse+fine over the grid sampling x coarse epochs x fine epochs. One
/// coarse run per (rate, seed) provides every coarse epoch, and one fine
/// run per (coarse epoch, seed, fold) provides every fine epoch, because an
/// e-epoch run equals the first e epochs of a longer one.
inline std::pair<std::string, nlohmann::json> run_sweep(Experiment& ex, const SweepGrid& grid) {
    const auto& cfg = ex.config();
    cfg.validate("coarse+fine");
    if (grid.sampling.empty() || grid.coarse_epochs.empty() || grid.fine_epochs.empty()) {
        throw UsageError("sweep grid must be non-empty");
    }
    const int max_ce = *std::max_element(grid.coarse_epochs.begin(), grid.coarse_epochs.end());
    const int max_fe = *std::max_element(grid.fine_epochs.begin(), grid.fine_epochs.end());
    if (*std::min_element(grid.coarse_epochs.begin(), grid.coarse_epochs.end()) < 1 ||
        *std::min_element(grid.fine_epochs.begin(), grid.fine_epochs.end()) < 1) {
        throw UsageError("sweep epochs must be at least 1");
    }
    const Model pre = ex.pretrained();
    const std::set<int> want_ce(grid.coarse_epochs.begin(), grid.coarse_epochs.end());
    const std::set<int> want_fe(grid.fine_epochs.begin(), grid.fine_epochs.end());
    // (rate index, coarse epochs, fine epochs) -> one result per seed
    std::map<std::tuple<std::size_t, int, int>, std::vector<TrialResult>> results;
    for (std::size_t ri = 0; ri < grid.sampling.size(); ++ri) {
        ex.set_sample_rate(grid.sampling[ri]);
        for (std::uint64_t seed : cfg.trial_seeds()) {
            std::map<int, Model> coarse_snapshots;
            Model m = pre;
            TrainPlan cp = cfg.coarse;
            cp.seed = seed;
            cp.epochs = max_ce;
            coarse_tune(m, ex.clicks(), ex.store(), ex.vocabulary(), cfg.limits, cp,
                        [&](const EpochMetrics& em, const Model& cur) {
                            if (want_ce.contains(em.epoch)) coarse_snapshots.emplace(em.epoch, cur);
                        });
            ex.log()("sweep rate " + detail::fmt_double(grid.sampling[ri]) + " seed " + std::to_string(seed) +
                     ": coarse-tuned " + std::to_string(max_ce) + " epochs on " + std::to_string(ex.clicks().size()) + " pairs");
            for (const auto& [ce, snapshot] : coarse_snapshots) {
                std::map<int, RankedRun> runs;
                for (std::size_t f = 0; f < ex.eval_fold_count(); ++f) {
                    const auto set = make_finetune_instances(ex.qrels().subset(ex.training_qids(f)), ex.queries(), ex.store(),
                                                             ex.vocabulary(), cfg.limits);
                    const RankedRun cand = ex.bm25_candidates(f);
                    Model fm = snapshot;
                    TrainPlan fp = cfg.finetune;
                    fp.seed = seed;
                    fp.epochs = max_fe;
                    fine_tune(fm, set.instances, fp, [&](const EpochMetrics& em, const Model& cur) {
                        if (!want_fe.contains(em.epoch)) return;
                        auto [it, _] = runs.try_emplace(em.epoch, RankedRun("coarse+fine"));
                        it->second.merge(rerank(cur, ex.queries(), cand, ex.store(), ex.vocabulary(), cfg.limits, "coarse+fine"));
                    });
                }
                for (auto& [fe, run] : runs) {
                    TrialResult t;
                    t.seed = seed;
                    t.metrics = evaluate_run(run, ex.qrels());
                    t.run = std::move(run);
                    results[{ri, ce, fe}].push_back(std::move(t));
                }
            }
        }
    }

    std::map<std::tuple<std::size_t, int, int>, MetricsReport> avg;
    for (auto& [key, trials] : results) avg[key] = Experiment::average_trials(trials, "coarse+fine");

    nlohmann::json j = {{"grid", nlohmann::json::array()}};
    for (const auto& [key, r] : avg) {
        j["grid"].push_back({{"sampling", grid.sampling[std::get<0>(key)]},
                             {"coarse_epochs", std::get<1>(key)},
                             {"fine_epochs", std::get<2>(key)},
                             {"mean", r.mean}});
    }

    auto pick = [&](const std::vector<int>& v, int preferred) {
        return std::find(v.begin(), v.end(), preferred) != v.end() ? preferred : v.back();
    };
    const int ce0 = pick(grid.coarse_epochs, cfg.coarse.epochs);
    const int fe0 = pick(grid.fine_epochs, cfg.finetune.epochs);
    std::string text = "sampling rate sweep (coarse epochs " + std::to_string(ce0) + ", fine epochs " + std::to_string(fe0) + ")\n";
    text += "rate(%)        MRR     nDCG@5\n";
    char buf[128];
    for (std::size_t ri = 0; ri < grid.sampling.size(); ++ri) {
        const auto& r = avg.at({ri, ce0, fe0});
        std::snprintf(buf, sizeof buf, "%7.2f %10.3f %10.3f\n", grid.sampling[ri] * 100.0, r.mean.at("MRR"), r.mean.at("nDCG@5"));
        text += buf;
    }
    for (std::size_t ri = 0; ri < grid.sampling.size(); ++ri) {
        std::snprintf(buf, sizeof buf, "%.2f", grid.sampling[ri] * 100.0);
        text += std::string("\nepoch grid at rate ") + buf + "% (rows: coarse epochs, columns: fine epochs), MRR / nDCG@5\n";
        text += "coarse\\fine";
        for (int fe : grid.fine_epochs) {
            std::snprintf(buf, sizeof buf, " %13d", fe);
            text += buf;
        }
        text += "\n";
        for (int ce : grid.coarse_epochs) {
            std::snprintf(buf, sizeof buf, "%11d", ce);
            text += buf;
            for (int fe : grid.fine_epochs) {
                const auto& r = avg.at({ri, ce, fe});
                std::snprintf(buf, sizeof buf, "   %.3f/%.3f", r.mean.at("MRR"), r.mean.at("nDCG@5"));
                text += buf;
            }
            text += "\n";
        }
    }
    return {text, j};
}

}  // namespace coarse
