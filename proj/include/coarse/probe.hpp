#pragma once

// Query prediction probe: fill the query slot of a document sequence with
// [MASK] tokens and read the MLM head's top predictions at each position.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

namespace coarse {

struct TokenProb {
    std::string token;
    int id = 0;
    double prob = 0.0;

    friend bool operator==(const TokenProb&, const TokenProb&) = default;
};

struct ProbeResult {
    // positions[i] = top-k predictions for the i-th masked query slot.
    std::vector<std::vector<TokenProb>> positions;
    // Full-vocabulary probability mass at each position (1 up to rounding).
    std::vector<double> mass;

    friend bool operator==(const ProbeResult& a, const ProbeResult& b) { return a.positions == b.positions; }
};

/// `[CLS] [Q] [MASK]xn [SEP] [D] doc... [SEP]`, one forward pass, softmax
/// over the vocabulary at each mask, top-k by probability (ties by id).
inline ProbeResult predict_query(const Model& model, const std::string& doc_text, const Vocabulary& vocab,
                                 int n_masks = 3, int top_k = 5, int max_len = 256) {
    if (n_masks < 1) throw UsageError("the probe needs at least one mask");
    if (top_k < 1) throw UsageError("top-k must be at least 1");
    if (static_cast<std::size_t>(model.config.vocab) != vocab.size()) {
        throw DataError("checkpoint vocabulary size differs from the vocabulary");
    }
    const auto doc = encode(doc_text, vocab);
    if (doc.empty()) throw DataError("document is empty after tokenization");
    const std::vector<int> masks(static_cast<std::size_t>(n_masks), kMask);
    const InputSequence seq = build_pair_sequence(masks, doc, std::min(max_len, model.config.max_len)).trimmed();

    std::vector<int> positions;
    for (std::size_t i = seq.query_begin; i < seq.query_end; ++i) positions.push_back(static_cast<int>(i));
    Graph g;
    const Var h = encode(g, model.config, model.weights, seq);
    const auto logits = g.value(mlm_logits(g, model.config, model.weights, h, positions));

    const auto V = static_cast<std::size_t>(model.config.vocab);
    const auto k = std::min(static_cast<std::size_t>(top_k), V);
    ProbeResult r;
    for (std::size_t p = 0; p < positions.size(); ++p) {
        const auto row = logits.subspan(p * V, V);
        const double mx = *std::max_element(row.begin(), row.end());
        std::vector<double> prob(V);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += prob[j] = std::exp(row[j] - mx);
        double mass = 0.0;
        for (double& x : prob) mass += x /= z;
        std::vector<int> ids(V);
        for (std::size_t j = 0; j < V; ++j) ids[j] = static_cast<int>(j);
        std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
            return prob[a] != prob[b] ? prob[a] > prob[b] : a < b;
        });
        std::vector<TokenProb> top;
        for (std::size_t j = 0; j < k; ++j) top.push_back({vocab.token(ids[j]), ids[j], prob[ids[j]]});
        r.positions.push_back(std::move(top));
        r.mass.push_back(mass);
    }
    return r;
}

// ---- diagnostics -----------------------------------------------------------

/// True if any position's top-k contains one of the query's subword ids.
inline bool probe_hit(const ProbeResult& r, const std::vector<int>& query_ids) {
    const std::unordered_set<int> wanted(query_ids.begin(), query_ids.end());
    for (const auto& pos : r.positions)
        for (const auto& t : pos)
            if (wanted.contains(t.id)) return true;
    return false;
}

/// True if the top-1 prediction at the first position is a "##" continuation.
inline bool first_slot_continuation(const ProbeResult& r) {
    return !r.positions.empty() && !r.positions[0].empty() && r.positions[0][0].token.starts_with("##");
}

// ---- reports ---------------------------------------------------------------

inline nlohmann::json probe_json(const ProbeResult& r) {
    nlohmann::json positions = nlohmann::json::array();
    for (const auto& pos : r.positions) {
        nlohmann::json list = nlohmann::json::array();
        for (const auto& t : pos) list.push_back({{"token", t.token}, {"id", t.id}, {"prob", t.prob}});
        positions.push_back(std::move(list));
    }
    return {{"positions", std::move(positions)}};
}

inline ProbeResult parse_probe_json(const nlohmann::json& j) {
    ProbeResult r;
    try {
        for (const auto& pos : j.at("positions")) {
            std::vector<TokenProb> list;
            for (const auto& t : pos) {
                list.push_back({t.at("token").get<std::string>(), t.at("id").get<int>(), t.at("prob").get<double>()});
            }
            r.positions.push_back(std::move(list));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed probe JSON: ") + e.what());
    }
    return r;
}

/// Machine-readable twin of probe_table: {"columns": [{"label", "positions"}]}.
inline nlohmann::json probe_report_json(const std::vector<std::pair<std::string, ProbeResult>>& columns) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& [label, r] : columns) {
        auto j = probe_json(r);
        j["label"] = label;
        cols.push_back(std::move(j));
    }
    return {{"columns", std::move(cols)}};
}

inline std::vector<std::pair<std::string, ProbeResult>> parse_probe_report_json(const nlohmann::json& j) {
    std::vector<std::pair<std::string, ProbeResult>> out;
    try {
        for (const auto& c : j.at("columns")) out.emplace_back(c.at("label").get<std::string>(), parse_probe_json(c));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed probe report: ") + e.what());
    }
    return out;
}

/// Side-by-side table: one column group per checkpoint with one column per
/// mask position (q1..qn), rows Top1..Topk. Cells show the token as the
/// vocabulary spells it, so "##" continuations stay visible.
inline std::string probe_table(const std::vector<std::pair<std::string, ProbeResult>>& columns) {
    if (columns.empty()) return "";
    const std::size_t n_pos = columns.front().second.positions.size();
    std::size_t k = 0;
    for (const auto& [label, r] : columns) {
        if (r.positions.size() != n_pos) throw DataError("probe results have different mask counts");
        for (const auto& p : r.positions) k = std::max(k, p.size());
    }
    std::size_t cell = 4;
    for (const auto& [label, r] : columns)
        for (const auto& p : r.positions)
            for (const auto& t : p) cell = std::max(cell, t.token.size());
    std::size_t group = n_pos * (cell + 1) - 1;
    for (const auto& [label, r] : columns) group = std::max(group, label.size());
    auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };

    std::string out;
    auto end_line = [&out] {
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += "\n";
    };
    out += pad("", 5);
    for (const auto& [label, r] : columns) out += " | " + pad(label, group);
    end_line();
    out += pad("", 5);
    for (std::size_t c = 0; c < columns.size(); ++c) {
        std::string cells;
        for (std::size_t p = 0; p < n_pos; ++p) cells += (p ? " " : "") + pad("q" + std::to_string(p + 1), cell);
        out += " | " + pad(cells, group);
    }
    end_line();
    for (std::size_t row = 0; row < k; ++row) {
        out += pad("Top" + std::to_string(row + 1), 5);
        for (const auto& [label, r] : columns) {
            std::string cells;
            for (std::size_t p = 0; p < n_pos; ++p) {
                const auto& list = r.positions[p];
                cells += (p ? " " : "") + pad(row < list.size() ? list[row].token : "", cell);
            }
            out += " | " + pad(cells, group);
        }
        end_line();
    }
    return out;
}

}  // namespace coarse
