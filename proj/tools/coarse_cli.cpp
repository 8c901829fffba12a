// Command-line front end: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coarse/coarse.hpp"

namespace fs = std::filesystem;
using namespace coarse;

namespace {

bool is_setting(const std::string& key) {
    if (key == "condition") return true;
    for (const auto& s : experiment_settings())
        if (s.key == key) return true;
    return false;
}

/// Experiment settings registered as flags on one subcommand. Values given
/// on the command line win over the config file, which wins over defaults.
struct SettingFlags {
    CLI::App* app = nullptr;
    std::map<std::string, std::string> values;
    std::string config_path;

    SettingFlags(CLI::App* sub, const std::vector<std::string>& prefixes) : app(sub) {
        const ExperimentConfig defaults;
        for (const auto& s : experiment_settings()) {
            bool wanted = false;
            for (const auto& p : prefixes) wanted |= p == "*" || s.key == p || (p.ends_with('-') && s.key.starts_with(p));
            if (!wanted) continue;
            values[s.key] = s.get(defaults);
            sub->add_option("--" + s.key, values[s.key], s.help)->default_str(values[s.key]);
        }
        sub->add_option("--config", config_path, "key = value file; command-line flags take precedence");
    }

    /// Merges the config file into unset options and returns the resolved
    /// config. Experiment keys this command does not use are skipped, so one
    /// file can serve every stage.
    ExperimentConfig resolve() {
        if (!config_path.empty()) {
            for (const auto& [key, value] : read_config_file(config_path)) {
                CLI::Option* opt = app->get_option_no_throw("--" + key);
                if (opt == nullptr) {
                    if (is_setting(key)) continue;
                    throw UsageError("unknown config key '" + key + "'");
                }
                if (opt->count() == 0) {
                    opt->add_result(value);
                    opt->run_callback();
                }
            }
        }
        ExperimentConfig cfg;
        for (const auto& s : experiment_settings()) {
            auto it = values.find(s.key);
            if (it == values.end()) continue;
            CLI::Option* opt = app->get_option_no_throw("--" + s.key);
            if (opt && opt->count() > 0) s.set(cfg, it->second);
        }
        return cfg;
    }
};

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw DataError("cannot read " + p.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

/// Training subcommands write per-epoch metrics as JSON lines.
EpochHook metrics_hook(std::ofstream& log_file, const std::string& log_path) {
    if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw DataError("cannot write metrics log " + log_path);
    }
    return [&log_file](const EpochMetrics& m, const Model&) {
        const std::string line = to_json(m).dump();
        std::cerr << line << '\n';
        if (log_file.is_open()) log_file << line << '\n' << std::flush;
    };
}

SequenceLimits limits_for(const ExperimentConfig& cfg, const Model& m) {
    SequenceLimits l = cfg.limits;
    l.max_len = std::min(l.max_len, m.config.max_len);
    return l;
}

TrainPlan plan_with_seed(TrainPlan p, std::uint64_t seed) {
    p.seed = seed;
    return p;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 4;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Coarse-tuning pipeline for neural re-ranking"};
    app.require_subcommand(1);
    std::function<void()> action;

    // build-vocab
    auto* bv = app.add_subcommand("build-vocab", "Learn a WordPiece vocabulary from documents (and optional queries)");
    SettingFlags bv_flags(bv, {"docs", "clicks", "queries"});
    std::string bv_out;
    std::size_t bv_size = VocabOptions{}.target_size, bv_min = VocabOptions{}.min_freq;
    bv->add_option("--out", bv_out, "output vocabulary file")->required();
    bv->add_option("--size", bv_size, "target vocabulary size")->default_val(bv_size);
    bv->add_option("--min-freq", bv_min, "minimum pair frequency for a merge")->default_val(bv_min);
    bv->callback([&] {
        action = [&] {
            const auto cfg = bv_flags.resolve();
            if (cfg.docs.empty()) throw UsageError("missing required input --docs");
            std::vector<std::string> texts = load_docstore(cfg.docs).texts();
            if (!cfg.queries.empty())
                for (const auto& [q, t] : load_queries(cfg.queries)) texts.push_back(t);
            if (!cfg.clicks.empty()) {
                for (const auto& line : read_lines(cfg.clicks)) {
                    const auto f = detail::split_tabs(line);
                    if (f.size() >= 2) texts.push_back(f[1]);
                }
            }
            const Vocabulary v = build_vocab(texts, {bv_size, bv_min});
            save_vocab(v, bv_out);
            std::cerr << "vocabulary: " << v.size() << " tokens\n";
        };
    });

    // index
    auto* ix = app.add_subcommand("index", "Build the BM25 inverted index");
    SettingFlags ix_flags(ix, {"docs"});
    std::string ix_out;
    ix->add_option("--out", ix_out, "output index file")->required();
    ix->callback([&] {
        action = [&] {
            const auto cfg = ix_flags.resolve();
            if (cfg.docs.empty()) throw UsageError("missing required input --docs");
            const auto idx = InvertedIndex::build(load_docstore(cfg.docs));
            save_index(idx, ix_out);
            std::cerr << "indexed " << idx.num_docs() << " documents, " << idx.terms().size() << " terms\n";
        };
    });

    // search
    auto* se = app.add_subcommand("search", "BM25 retrieval to a TREC run");
    SettingFlags se_flags(se, {"queries", "k1", "b", "depth"});
    std::string se_index, se_query, se_out, se_tag = "bm25";
    se->add_option("--index", se_index, "index file")->required();
    se->add_option("--query", se_query, "single query text (prints results)");
    se->add_option("--out", se_out, "output run file");
    se->add_option("--tag", se_tag, "run tag")->default_val(se_tag);
    se->callback([&] {
        action = [&] {
            const auto cfg = se_flags.resolve();
            const auto idx = load_index(se_index);
            if (!se_query.empty()) {
                for (const auto& h : search(se_query, idx, static_cast<std::size_t>(cfg.depth), cfg.bm25)) {
                    std::printf("%s\t%.6f\n", h.docid.c_str(), h.score);
                }
                return;
            }
            if (cfg.queries.empty() || se_out.empty()) throw UsageError("search needs --query, or --queries with --out");
            const auto queries = load_queries(cfg.queries);
            std::vector<std::string> qids;
            for (const auto& [q, _] : queries) qids.push_back(q);
            save_trec_run(bm25_run(idx, queries, qids, static_cast<std::size_t>(cfg.depth), cfg.bm25, se_tag), se_out);
        };
    });

    // pretrain
    auto* pt = app.add_subcommand("pretrain", "MLM pre-training on documents");
    SettingFlags pt_flags(pt, {"vocab", "docs", "model-", "max-len", "pretrain-", "seed"});
    std::string pt_out, pt_log;
    pt->add_option("--out", pt_out, "output checkpoint")->required();
    pt->add_option("--log", pt_log, "metrics JSON-lines file");
    pt->callback([&] {
        action = [&] {
            auto cfg = pt_flags.resolve();
            if (cfg.vocab.empty() || cfg.docs.empty()) throw UsageError("pretrain needs --vocab and --docs");
            const auto vocab = load_vocab(cfg.vocab);
            const auto store = load_docstore(cfg.docs);
            ModelConfig mc = cfg.model;
            mc.vocab = static_cast<int>(vocab.size());
            mc.max_len = cfg.limits.max_len;
            Model m = Model::fresh(mc, cfg.seed);
            std::ofstream lf;
            pretrain_mlm(m, encode_documents(store, store.ids(), vocab), cfg.limits, plan_with_seed(cfg.pretrain, cfg.seed),
                         metrics_hook(lf, pt_log));
            save_checkpoint(m, pt_out);
        };
    });

    // coarse-tune
    auto* ct = app.add_subcommand("coarse-tune", "Joint MLM + pair-prediction training on click-log pairs");
    SettingFlags ct_flags(ct, {"vocab", "docs", "clicks", "sample-rate", "max-len", "max-query-tokens", "coarse-",
                               "p-ispair", "mask-scope", "mlm-on-notpair", "seed"});
    std::string ct_model, ct_out, ct_log;
    ct->add_option("--model", ct_model, "input checkpoint (pre-trained)")->required();
    ct->add_option("--out", ct_out, "output checkpoint")->required();
    ct->add_option("--log", ct_log, "metrics JSON-lines file");
    ct->callback([&] {
        action = [&] {
            auto cfg = ct_flags.resolve();
            if (cfg.vocab.empty() || cfg.docs.empty() || cfg.clicks.empty()) {
                throw UsageError("coarse-tune needs --vocab, --docs and --clicks");
            }
            const auto vocab = load_vocab(cfg.vocab);
            const auto store = load_docstore(cfg.docs);
            const auto clicks = load_clicklog(cfg.clicks, store, cfg.sample_rate, cfg.seed);
            if (clicks.dropped_unknown) std::cerr << "warning: dropped " << clicks.dropped_unknown << " clicks with unknown docids\n";
            std::cerr << "click log: kept " << clicks.entries.size() << " of " << clicks.lines << " lines\n";
            Model m = load_checkpoint(ct_model, vocab);
            std::ofstream lf;
            coarse_tune(m, clicks.entries, store, vocab, limits_for(cfg, m), plan_with_seed(cfg.coarse, cfg.seed),
                        metrics_hook(lf, ct_log));
            save_checkpoint(m, ct_out);
        };
    });

    // cont-pretrain
    auto* cp = app.add_subcommand("cont-pretrain", "Continue MLM pre-training on clicked documents");
    SettingFlags cp_flags(cp, {"vocab", "docs", "clicks", "sample-rate", "max-len", "cont-pre-", "seed"});
    std::string cp_model, cp_out, cp_log;
    cp->add_option("--model", cp_model, "input checkpoint (pre-trained)")->required();
    cp->add_option("--out", cp_out, "output checkpoint")->required();
    cp->add_option("--log", cp_log, "metrics JSON-lines file");
    cp->callback([&] {
        action = [&] {
            auto cfg = cp_flags.resolve();
            if (cfg.vocab.empty() || cfg.docs.empty() || cfg.clicks.empty()) {
                throw UsageError("cont-pretrain needs --vocab, --docs and --clicks");
            }
            const auto vocab = load_vocab(cfg.vocab);
            const auto store = load_docstore(cfg.docs);
            const auto clicks = load_clicklog(cfg.clicks, store, cfg.sample_rate, cfg.seed);
            std::vector<std::string> ids;
            std::set<std::string> seen;
            for (const auto& e : clicks.entries)
                if (seen.insert(e.docid).second) ids.push_back(e.docid);
            Model m = load_checkpoint(cp_model, vocab);
            std::ofstream lf;
            pretrain_mlm(m, encode_documents(store, ids, vocab), limits_for(cfg, m), plan_with_seed(cfg.contpre, cfg.seed),
                         metrics_hook(lf, cp_log));
            save_checkpoint(m, cp_out);
        };
    });

    // fine-tune
    auto* ft = app.add_subcommand("fine-tune", "Relevance classification on judged query-document pairs");
    SettingFlags ft_flags(ft, {"vocab", "docs", "queries", "qrels", "max-len", "max-query-tokens", "finetune-", "seed"});
    std::string ft_model, ft_out, ft_log, ft_qids;
    ft->add_option("--model", ft_model, "input checkpoint")->required();
    ft->add_option("--out", ft_out, "output checkpoint")->required();
    ft->add_option("--log", ft_log, "metrics JSON-lines file");
    ft->add_option("--train-qids", ft_qids, "file listing the training qids (default: all judged queries)");
    ft->callback([&] {
        action = [&] {
            auto cfg = ft_flags.resolve();
            if (cfg.vocab.empty() || cfg.docs.empty() || cfg.queries.empty() || cfg.qrels.empty()) {
                throw UsageError("fine-tune needs --vocab, --docs, --queries and --qrels");
            }
            const auto vocab = load_vocab(cfg.vocab);
            const auto store = load_docstore(cfg.docs);
            Qrels qrels = load_qrels(cfg.qrels);
            if (!ft_qids.empty()) qrels = qrels.subset(read_lines(ft_qids));
            Model m = load_checkpoint(ft_model, vocab);
            const auto set = make_finetune_instances(qrels, load_queries(cfg.queries), store, vocab, limits_for(cfg, m));
            for (const auto& s : set.skipped) std::cerr << "warning: skipped " << s << '\n';
            std::ofstream lf;
            const auto r = fine_tune(m, set.instances, plan_with_seed(cfg.finetune, cfg.seed), metrics_hook(lf, ft_log));
            for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
            save_checkpoint(m, ft_out);
        };
    });

    // rerank
    auto* rr = app.add_subcommand("rerank", "Re-rank a candidate run with a checkpoint's relevance head");
    SettingFlags rr_flags(rr, {"vocab", "docs", "queries", "max-len", "max-query-tokens"});
    std::string rr_model, rr_run, rr_out, rr_tag = "rerank";
    rr->add_option("--model", rr_model, "checkpoint")->required();
    rr->add_option("--run", rr_run, "candidate TREC run")->required();
    rr->add_option("--out", rr_out, "output run file")->required();
    rr->add_option("--tag", rr_tag, "run tag")->default_val(rr_tag);
    rr->callback([&] {
        action = [&] {
            auto cfg = rr_flags.resolve();
            if (cfg.vocab.empty() || cfg.docs.empty() || cfg.queries.empty()) {
                throw UsageError("rerank needs --vocab, --docs and --queries");
            }
            const auto vocab = load_vocab(cfg.vocab);
            const Model m = load_checkpoint(rr_model, vocab);
            save_trec_run(rerank(m, load_queries(cfg.queries), load_trec_run(rr_run), load_docstore(cfg.docs), vocab,
                                 limits_for(cfg, m), rr_tag),
                          rr_out);
        };
    });

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Metrics of a run, optionally with significance against a baseline run");
    SettingFlags ev_flags(ev, {"qrels"});
    std::string ev_run, ev_base, ev_json;
    ev->add_option("--run", ev_run, "run to evaluate")->required();
    ev->add_option("--baseline", ev_base, "baseline run for paired t-tests");
    ev->add_option("--json", ev_json, "write the JSON report here");
    ev->callback([&] {
        action = [&] {
            auto cfg = ev_flags.resolve();
            if (cfg.qrels.empty()) throw UsageError("evaluate needs --qrels");
            const Qrels qrels = load_qrels(cfg.qrels);
            const RankedRun run = load_trec_run(ev_run);
            const MetricsReport r = ev_base.empty() ? evaluate_run(run, qrels) : evaluate(run, load_trec_run(ev_base), qrels);
            std::cout << format_report(r);
            if (!ev_json.empty()) detail::write_file(ev_json, report_json(r).dump(2) + "\n");
        };
    });

    // probe
    auto* pr = app.add_subcommand("probe", "Predict query tokens for a document from masked query slots");
    SettingFlags pr_flags(pr, {"vocab", "docs", "max-len"});
    std::vector<std::string> pr_models;
    std::string pr_docid, pr_text, pr_json;
    int pr_masks = 3, pr_topk = 5;
    pr->add_option("--model", pr_models, "checkpoint, optionally label=path; repeat for side-by-side columns")->required();
    pr->add_option("--docid", pr_docid, "document id in --docs");
    pr->add_option("--text", pr_text, "document text");
    pr->add_option("--masks", pr_masks, "number of [MASK] query slots")->default_val(pr_masks);
    pr->add_option("--top-k", pr_topk, "predictions per slot")->default_val(pr_topk);
    pr->add_option("--json", pr_json, "write the JSON twin here");
    pr->callback([&] {
        action = [&] {
            auto cfg = pr_flags.resolve();
            if (cfg.vocab.empty()) throw UsageError("probe needs --vocab");
            std::string text = pr_text;
            if (text.empty()) {
                if (pr_docid.empty() || cfg.docs.empty()) throw UsageError("probe needs --text, or --docid with --docs");
                text = load_docstore(cfg.docs).text(pr_docid);
            }
            const auto vocab = load_vocab(cfg.vocab);
            std::vector<std::pair<std::string, ProbeResult>> cols;
            for (const auto& arg : pr_models) {
                const auto eq = arg.find('=');
                const std::string path = eq == std::string::npos ? arg : arg.substr(eq + 1);
                const Model m = load_checkpoint(path, vocab);
                const std::string label = eq == std::string::npos ? stage_name(m.meta.stage) : arg.substr(0, eq);
                cols.emplace_back(label, predict_query(m, text, vocab, pr_masks, pr_topk, cfg.limits.max_len));
            }
            std::cout << probe_table(cols);
            if (!pr_json.empty()) detail::write_file(pr_json, probe_report_json(cols).dump(2) + "\n");
        };
    });

    // synth
    auto* sy = app.add_subcommand("synth", "Generate the planted synthetic corpus");
    SynthConfig sc;
    std::string sy_out;
    sy->add_option("--out", sy_out, "output directory")->required();
    sy->add_option("--docs", sc.n_docs, "documents")->default_val(sc.n_docs);
    sy->add_option("--queries", sc.n_queries, "judged queries")->default_val(sc.n_queries);
    sy->add_option("--clicks", sc.n_clicks, "click-log lines")->default_val(sc.n_clicks);
    sy->add_option("--words", sc.vocab_words, "distinct word types")->default_val(sc.vocab_words);
    sy->add_option("--topics", sc.n_topics, "topics")->default_val(sc.n_topics);
    sy->add_option("--distractors", sc.distractors, "grade-0 judgments per query")->default_val(sc.distractors);
    sy->add_option("--seed", sc.seed, "generator seed")->default_val(sc.seed);
    std::string sy_config;
    sy->add_option("--config", sy_config, "key = value file; command-line flags take precedence");
    sy->callback([&] {
        action = [&] {
            if (!sy_config.empty()) {
                for (const auto& [key, value] : read_config_file(sy_config)) {
                    CLI::Option* opt = sy->get_option_no_throw("--" + key);
                    if (opt == nullptr) throw UsageError("config key '" + key + "' is not an option of 'synth'");
                    if (opt->count() == 0) {
                        opt->add_result(value);
                        opt->run_callback();
                    }
                }
            }
            const auto c = generate_synthetic_corpus(sc);
            save_synthetic_corpus(c, sy_out);
            std::cerr << "wrote " << c.store.size() << " documents, " << c.clicks.size() << " click lines, "
                      << c.queries.size() << " judged queries to " << sy_out << '\n';
        };
    });

    // run-condition
    auto* rc = app.add_subcommand("run-condition", "Run ranking conditions with cross-validation and multi-seed trials");
    SettingFlags rc_flags(rc, {"*"});
    std::string rc_condition;
    bool rc_quiet = false;
    rc->add_option("--condition", rc_condition,
                   "bm25, pre-trained, coarse-tuned, fine-tuned, cont-pre+fine, coarse+fine, a comma list, or all");
    rc->add_flag("--quiet", rc_quiet, "do not echo progress to stderr");
    rc->callback([&] {
        action = [&] {
            const auto cfg = rc_flags.resolve();
            if (rc_condition.empty()) throw UsageError("run-condition needs --condition");
            std::vector<std::string> conditions;
            if (rc_condition == "all") {
                conditions = condition_names();
            } else {
                for (std::size_t a = 0;;) {
                    const auto b = rc_condition.find(',', a);
                    conditions.push_back(rc_condition.substr(a, b == std::string::npos ? std::string::npos : b - a));
                    if (b == std::string::npos) break;
                    a = b + 1;
                }
            }
            for (const auto& c : conditions) cfg.validate(c);
            Experiment ex(cfg, !rc_quiet);
            std::vector<ConditionOutcome> outcomes;
            for (const auto& c : conditions) {
                outcomes.push_back(ex.run_condition(c));
                std::cout << detail::read_file(cfg.work_dir / "reports" / (c + ".txt")) << '\n';
            }
            if (outcomes.size() > 1) {
                auto [text, json] = summarize_conditions(outcomes, cfg.baseline);
                detail::write_file(cfg.work_dir / "reports" / "summary.txt", text);
                detail::write_file(cfg.work_dir / "reports" / "summary.json", json.dump(2) + "\n");
                detail::write_file(cfg.work_dir / "manifest.conf", format_manifest(cfg, rc_condition));
                std::cout << text;
            }
        };
    });

    // sweep
    auto* sw = app.add_subcommand("sweep", "Grid over sampling rate, coarse epochs and fine epochs (coarse+fine)");
    SettingFlags sw_flags(sw, {"*"});
    std::string sw_sampling = "0.01:0.10:0.01", sw_ce = "1:5", sw_fe = "1:5";
    bool sw_quiet = false;
    sw->add_option("--sampling", sw_sampling, "sampling rates, start:end:step or a comma list")->default_val(sw_sampling);
    sw->add_option("--coarse-grid", sw_ce, "coarse epochs to evaluate, start:end or a comma list")->default_val(sw_ce);
    sw->add_option("--fine-grid", sw_fe, "fine epochs to evaluate, start:end or a comma list")->default_val(sw_fe);
    sw->add_flag("--quiet", sw_quiet, "do not echo progress to stderr");
    sw->callback([&] {
        action = [&] {
            const auto cfg = sw_flags.resolve();
            SweepGrid grid;
            grid.sampling = parse_range(sw_sampling, "sampling");
            for (double v : parse_range(sw_ce, "coarse-grid")) grid.coarse_epochs.push_back(static_cast<int>(v));
            for (double v : parse_range(sw_fe, "fine-grid")) grid.fine_epochs.push_back(static_cast<int>(v));
            Experiment ex(cfg, !sw_quiet);
            auto [text, json] = run_sweep(ex, grid);
            detail::write_file(cfg.work_dir / "reports" / "sweep.txt", text);
            detail::write_file(cfg.work_dir / "reports" / "sweep.json", json.dump(2) + "\n");
            detail::write_file(cfg.work_dir / "manifest.sweep.conf", format_manifest(cfg));
            std::cout << text;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    try {
        if (action) action();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return 0;
}
