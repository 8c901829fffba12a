#pragma once

// BERT-style bidirectional encoder with three heads sharing one trunk:
// masked-token prediction (tied to the token embeddings), query-document pair
// prediction on [CLS], and relevance classification on [CLS].

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "numerics.hpp"
#include "rng.hpp"
#include "sequence.hpp"

namespace coarse {

struct ModelConfig {
    int layers = 2;
    int hidden = 128;
    int heads = 2;
    int ffn = 512;
    int vocab = 0;
    int max_len = 256;
    int segments = 2;
    double dropout = 0.1;
    double init_std = 0.02;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        if (layers < 1 || hidden < 1 || heads < 1 || ffn < 1) throw UsageError("model dimensions must be positive");
        if (hidden % heads != 0) throw UsageError("hidden size must be divisible by the attention-head count");
        if (vocab <= kNumSpecial) throw UsageError("vocabulary size must exceed the special-token block");
        if (max_len < 8) throw UsageError("max_len must be at least 8");
        if (segments != 2) throw UsageError("exactly two segments are supported");
        if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must lie in [0, 1)");
    }

    /// The bert-tiny shape: L=2, H=128, A=2, F=512.
    static ModelConfig tiny(int vocab_size) {
        ModelConfig c;
        c.vocab = vocab_size;
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"layers", c.layers},   {"hidden", c.hidden},   {"heads", c.heads},
         {"ffn", c.ffn},         {"vocab", c.vocab},     {"max_len", c.max_len},
         {"segments", c.segments}, {"dropout", c.dropout}, {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("layers").get_to(c.layers);
    j.at("hidden").get_to(c.hidden);
    j.at("heads").get_to(c.heads);
    j.at("ffn").get_to(c.ffn);
    j.at("vocab").get_to(c.vocab);
    j.at("max_len").get_to(c.max_len);
    j.at("segments").get_to(c.segments);
    j.at("dropout").get_to(c.dropout);
    j.at("init_std").get_to(c.init_std);
}

struct LayerWeights {
    Tensor query_w, query_b, key_w, key_b, value_w, value_b, attn_out_w, attn_out_b;
    Tensor attn_ln_gain, attn_ln_bias;
    Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
    Tensor ffn_ln_gain, ffn_ln_bias;
};

struct EncoderWeights {
    Tensor token_emb, position_emb, segment_emb;
    std::vector<LayerWeights> layers;
    Tensor mlm_w, mlm_b, mlm_ln_gain, mlm_ln_bias, mlm_out_bias;
    Tensor qdpp_w, qdpp_b;
    Tensor rel_w, rel_b;

    /// Calls f(name, tensor) for every tensor in checkpoint manifest order.
    template <typename Self, typename F>
    static void visit(Self& w, F&& f) {
        f("embeddings.token", w.token_emb);
        f("embeddings.position", w.position_emb);
        f("embeddings.segment", w.segment_emb);
        for (std::size_t i = 0; i < w.layers.size(); ++i) {
            auto& l = w.layers[i];
            const std::string p = "layer." + std::to_string(i) + ".";
            f(p + "attention.query.weight", l.query_w);
            f(p + "attention.query.bias", l.query_b);
            f(p + "attention.key.weight", l.key_w);
            f(p + "attention.key.bias", l.key_b);
            f(p + "attention.value.weight", l.value_w);
            f(p + "attention.value.bias", l.value_b);
            f(p + "attention.output.weight", l.attn_out_w);
            f(p + "attention.output.bias", l.attn_out_b);
            f(p + "attention.norm.gain", l.attn_ln_gain);
            f(p + "attention.norm.bias", l.attn_ln_bias);
            f(p + "ffn.inner.weight", l.ffn_in_w);
            f(p + "ffn.inner.bias", l.ffn_in_b);
            f(p + "ffn.outer.weight", l.ffn_out_w);
            f(p + "ffn.outer.bias", l.ffn_out_b);
            f(p + "ffn.norm.gain", l.ffn_ln_gain);
            f(p + "ffn.norm.bias", l.ffn_ln_bias);
        }
        f("mlm.transform.weight", w.mlm_w);
        f("mlm.transform.bias", w.mlm_b);
        f("mlm.norm.gain", w.mlm_ln_gain);
        f("mlm.norm.bias", w.mlm_ln_bias);
        f("mlm.output.bias", w.mlm_out_bias);
        f("qdpp.weight", w.qdpp_w);
        f("qdpp.bias", w.qdpp_b);
        f("relevance.weight", w.rel_w);
        f("relevance.bias", w.rel_b);
    }

    std::vector<std::pair<std::string, Tensor*>> named() {
        std::vector<std::pair<std::string, Tensor*>> out;
        visit(*this, [&](std::string name, Tensor& t) { out.emplace_back(std::move(name), &t); });
        return out;
    }
    std::vector<std::pair<std::string, const Tensor*>> named() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        visit(*this, [&](std::string name, const Tensor& t) { out.emplace_back(std::move(name), &t); });
        return out;
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        visit(*this, [&](const std::string&, Tensor& t) { ps.push_back(&t); });
        return ps;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        visit(*this, [&](const std::string&, const Tensor& t) { n += t.size(); });
        return n;
    }

    bool all_finite() const {
        bool ok = true;
        visit(*this, [&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
        return ok;
    }

    void clear_grads() {
        visit(*this, [](const std::string&, Tensor& t) { t.clear_grad(); });
    }

    friend bool operator==(const EncoderWeights& a, const EncoderWeights& b) {
        auto na = a.named();
        auto nb = b.named();
        if (na.size() != nb.size()) return false;
        for (std::size_t i = 0; i < na.size(); ++i)
            if (na[i].first != nb[i].first || !(*na[i].second == *nb[i].second)) return false;
        return true;
    }
};

/// Names and shapes a checkpoint of `c` must contain, in order.
inline std::vector<std::pair<std::string, Shape>> expected_manifest(const ModelConfig& c) {
    const auto h = static_cast<std::size_t>(c.hidden);
    const auto f = static_cast<std::size_t>(c.ffn);
    const auto v = static_cast<std::size_t>(c.vocab);
    std::vector<std::pair<std::string, Shape>> m = {
        {"embeddings.token", {v, h}},
        {"embeddings.position", {static_cast<std::size_t>(c.max_len), h}},
        {"embeddings.segment", {static_cast<std::size_t>(c.segments), h}},
    };
    for (int i = 0; i < c.layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        for (const char* proj : {"query", "key", "value", "output"}) {
            m.push_back({p + "attention." + proj + ".weight", {h, h}});
            m.push_back({p + "attention." + proj + ".bias", {h}});
        }
        m.push_back({p + "attention.norm.gain", {h}});
        m.push_back({p + "attention.norm.bias", {h}});
        m.push_back({p + "ffn.inner.weight", {h, f}});
        m.push_back({p + "ffn.inner.bias", {f}});
        m.push_back({p + "ffn.outer.weight", {f, h}});
        m.push_back({p + "ffn.outer.bias", {h}});
        m.push_back({p + "ffn.norm.gain", {h}});
        m.push_back({p + "ffn.norm.bias", {h}});
    }
    m.push_back({"mlm.transform.weight", {h, h}});
    m.push_back({"mlm.transform.bias", {h}});
    m.push_back({"mlm.norm.gain", {h}});
    m.push_back({"mlm.norm.bias", {h}});
    m.push_back({"mlm.output.bias", {v}});
    m.push_back({"qdpp.weight", {h, 2}});
    m.push_back({"qdpp.bias", {2}});
    m.push_back({"relevance.weight", {h, 2}});
    m.push_back({"relevance.bias", {2}});
    return m;
}

namespace detail {

inline void fill_truncated_normal(Tensor& t, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : t.values()) {
        do {
            x = dist(rng);
        } while (std::abs(x) > 2.0 * stddev);
    }
}

inline bool is_norm_gain(const std::string& name) { return name.ends_with("norm.gain"); }
inline bool is_matrix(const Tensor& t) { return t.shape().size() == 2; }

}  // namespace detail

/// Fresh weights: matrices ~ N(0, init_std) truncated at two standard
/// deviations, biases zero, norm gains one.
inline EncoderWeights init_weights(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    EncoderWeights w;
    w.layers.resize(static_cast<std::size_t>(c.layers));
    Rng rng = derive_rng(seed, {stream::kInit});
    const auto manifest = expected_manifest(c);
    auto named = w.named();
    for (std::size_t i = 0; i < named.size(); ++i) {
        auto& [name, t] = named[i];
        *t = Tensor(manifest[i].second, detail::is_norm_gain(name) ? 1.0 : 0.0);
        if (detail::is_matrix(*t)) detail::fill_truncated_normal(*t, c.init_std, rng);
    }
    return w;
}

/// Re-draws the relevance head, leaving everything else untouched.
inline void reinit_relevance_head(EncoderWeights& w, const ModelConfig& c, std::uint64_t seed) {
    Rng rng = derive_rng(seed, {stream::kHeadInit});
    w.rel_w = Tensor({static_cast<std::size_t>(c.hidden), 2});
    detail::fill_truncated_normal(w.rel_w, c.init_std, rng);
    w.rel_b = Tensor({2});
}

inline void copy_qdpp_to_relevance(EncoderWeights& w) {
    w.rel_w = Tensor(w.qdpp_w.shape(), std::vector<double>(w.qdpp_w.values().begin(), w.qdpp_w.values().end()));
    w.rel_b = Tensor(w.qdpp_b.shape(), std::vector<double>(w.qdpp_b.values().begin(), w.qdpp_b.values().end()));
}

// ---- forward ---------------------------------------------------------------

struct ForwardOptions {
    bool train = false;             // enables dropout
    Rng* rng = nullptr;             // dropout stream, required when train && dropout > 0
    std::vector<Tensor>* attention = nullptr;  // receives [len x len] probabilities per layer and head
};

namespace detail {

inline Var linear(Graph& g, Var x, const Tensor& w, const Tensor& b) {
    return g.add(g.matmul(x, g.leaf(w)), g.leaf(b));
}

}  // namespace detail

/// Runs the encoder trunk; returns hidden states [len x H].
inline Var encode(Graph& g, const ModelConfig& c, const EncoderWeights& w, const InputSequence& seq,
                  const ForwardOptions& opt = {}) {
    const std::size_t n = seq.size();
    if (n == 0) throw DataError("empty input sequence");
    if (n > static_cast<std::size_t>(c.max_len)) {
        throw DataError("sequence of " + std::to_string(n) + " tokens exceeds max_len " + std::to_string(c.max_len));
    }
    for (int id : seq.token_ids) {
        if (id < 0 || id >= c.vocab) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
    const double drop = opt.train ? c.dropout : 0.0;
    if (drop > 0.0 && opt.rng == nullptr) throw UsageError("training forward with dropout needs an rng");
    auto dropout = [&](Var x) { return drop > 0.0 ? g.dropout(x, drop, *opt.rng) : x; };

    std::vector<int> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);

    Var x = g.add(g.add(g.gather_rows(g.leaf(w.token_emb), seq.token_ids),
                        g.gather_rows(g.leaf(w.position_emb), positions)),
                  g.gather_rows(g.leaf(w.segment_emb), seq.segment_ids));
    x = dropout(x);

    const auto dh = static_cast<std::size_t>(c.head_dim());
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const LayerWeights& l : w.layers) {
        Var q = detail::linear(g, x, l.query_w, l.query_b);
        Var k = detail::linear(g, x, l.key_w, l.key_b);
        Var v = detail::linear(g, x, l.value_w, l.value_b);
        std::vector<Var> heads;
        heads.reserve(static_cast<std::size_t>(c.heads));
        for (std::size_t h = 0; h < static_cast<std::size_t>(c.heads); ++h) {
            Var qh = g.slice_cols(q, h * dh, dh);
            Var kh = g.slice_cols(k, h * dh, dh);
            Var vh = g.slice_cols(v, h * dh, dh);
            Var scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
            Var probs = g.softmax_rows(scores, seq.attention_mask);
            if (opt.attention) opt.attention->push_back(g.tensor(probs));
            heads.push_back(g.matmul(dropout(probs), vh));
        }
        Var ctx = g.concat_cols(heads);
        Var attn = dropout(detail::linear(g, ctx, l.attn_out_w, l.attn_out_b));
        x = g.layer_norm(g.add(x, attn), g.leaf(l.attn_ln_gain), g.leaf(l.attn_ln_bias));

        Var inner = g.gelu(detail::linear(g, x, l.ffn_in_w, l.ffn_in_b));
        Var outer = dropout(detail::linear(g, inner, l.ffn_out_w, l.ffn_out_b));
        x = g.layer_norm(g.add(x, outer), g.leaf(l.ffn_ln_gain), g.leaf(l.ffn_ln_bias));
    }
    return x;
}

/// Vocabulary logits [positions.size() x V] at the requested rows.
inline Var mlm_logits(Graph& g, const ModelConfig& c, const EncoderWeights& w, Var hidden,
                      std::span<const int> positions) {
    const std::size_t n = g.shape(hidden)[0];
    for (int p : positions) {
        if (p < 0 || static_cast<std::size_t>(p) >= n) {
            throw DataError("mlm position " + std::to_string(p) + " outside sequence of length " + std::to_string(n));
        }
    }
    if (positions.empty()) {
        return g.constant(Tensor({0, static_cast<std::size_t>(c.vocab)}), false);
    }
    Var rows = g.gather_rows(hidden, positions);
    Var t = g.gelu(detail::linear(g, rows, w.mlm_w, w.mlm_b));
    t = g.layer_norm(t, g.leaf(w.mlm_ln_gain), g.leaf(w.mlm_ln_bias));
    return g.add(g.matmul_nt(t, g.leaf(w.token_emb)), g.leaf(w.mlm_out_bias));
}

namespace detail {

inline Var cls_head(Graph& g, Var hidden, const Tensor& wt, const Tensor& b) {
    const int first[] = {0};
    return linear(g, g.gather_rows(hidden, first), wt, b);
}

}  // namespace detail

/// [1 x 2] logits on [CLS]; column 0 = NotPair, 1 = IsPair.
inline Var qdpp_logits(Graph& g, const EncoderWeights& w, Var hidden) {
    return detail::cls_head(g, hidden, w.qdpp_w, w.qdpp_b);
}

/// [1 x 2] logits on [CLS]; column 1 = relevant.
inline Var relevance_logits(Graph& g, const EncoderWeights& w, Var hidden) {
    return detail::cls_head(g, hidden, w.rel_w, w.rel_b);
}

/// P(class 1) from a [1 x 2] logit pair.
inline double positive_probability(std::span<const double> logits) {
    return 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
}

/// Relevance score of one sequence: softmax probability of the relevant class.
inline double relevance_score(const ModelConfig& c, const EncoderWeights& w, const InputSequence& seq) {
    Graph g;
    Var h = encode(g, c, w, seq.trimmed());
    return positive_probability(g.value(relevance_logits(g, w, h)));
}

// ---- checkpoints -----------------------------------------------------------

enum class Stage { Random, Pretrained, Coarse, Finetuned, ContPre };

inline std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Random: return "random";
        case Stage::Pretrained: return "pretrained";
        case Stage::Coarse: return "coarse";
        case Stage::Finetuned: return "finetuned";
        case Stage::ContPre: return "cont-pre";
    }
    return "random";
}

inline Stage parse_stage(const std::string& s) {
    if (s == "random") return Stage::Random;
    if (s == "pretrained") return Stage::Pretrained;
    if (s == "coarse") return Stage::Coarse;
    if (s == "finetuned") return Stage::Finetuned;
    if (s == "cont-pre") return Stage::ContPre;
    throw DataError("unknown training stage tag '" + s + "'");
}

struct CheckpointMeta {
    Stage stage = Stage::Random;
    std::vector<std::uint64_t> seed_lineage;  // one seed per stage applied, oldest first
    int epoch = 0;
    std::string fingerprint;  // optional cache key for the producing configuration

    friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

/// A model together with its configuration and provenance.
struct Model {
    ModelConfig config;
    EncoderWeights weights;
    CheckpointMeta meta;

    static Model fresh(const ModelConfig& c, std::uint64_t seed) {
        Model m{c, init_weights(c, seed), {}};
        m.meta.seed_lineage = {seed};
        return m;
    }
};

inline constexpr char kCheckpointMagic[4] = {'C', 'T', 'N', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos, const std::string& what) {
    if (pos + sizeof(T) > in.size()) throw DataError("truncated " + what);
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read " + path.string());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("failed writing " + path.string());
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
    nlohmann::json header;
    header["config"] = m.config;
    header["meta"] = {{"stage", stage_name(m.meta.stage)},
                      {"seed_lineage", m.meta.seed_lineage},
                      {"epoch", m.meta.epoch},
                      {"fingerprint", m.meta.fingerprint}};
    nlohmann::json manifest = nlohmann::json::array();
    std::string data;
    for (const auto& [name, t] : m.weights.named()) {
        manifest.push_back({{"name", name}, {"shape", t->shape()}, {"offset", data.size()}});
        for (double v : t->values()) detail::put_le(data, v);
    }
    header["tensors"] = std::move(manifest);
    const std::string hs = header.dump();

    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, hs.size());
    out += hs;
    out += data;
    return out;
}

inline Model deserialize_checkpoint(const std::string& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw DataError("not a checkpoint (bad magic bytes)");
    }
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, pos, "checkpoint header");
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto header_len = detail::get_le<std::uint64_t>(bytes, pos, "checkpoint header");
    if (header_len > bytes.size() - pos) throw DataError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    }
    pos += header_len;
    const std::size_t data_begin = pos;

    Model m;
    try {
        m.config = header.at("config").get<ModelConfig>();
        const auto& meta = header.at("meta");
        m.meta.stage = parse_stage(meta.at("stage").get<std::string>());
        m.meta.seed_lineage = meta.at("seed_lineage").get<std::vector<std::uint64_t>>();
        m.meta.epoch = meta.at("epoch").get<int>();
        m.meta.fingerprint = meta.value("fingerprint", "");
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    } catch (const UsageError& e) {
        throw DataError(std::string("invalid checkpoint config: ") + e.what());
    }
    try {
        m.config.validate();
    } catch (const UsageError& e) {
        throw DataError(std::string("invalid checkpoint config: ") + e.what());
    }

    const auto expected = expected_manifest(m.config);
    const auto& tensors = header.at("tensors");
    if (!tensors.is_array() || tensors.size() != expected.size()) {
        throw DataError("checkpoint manifest has " + std::to_string(tensors.size()) + " tensors, config implies " +
                        std::to_string(expected.size()));
    }
    m.weights.layers.resize(static_cast<std::size_t>(m.config.layers));
    auto named = m.weights.named();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& entry = tensors[i];
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        if (name != expected[i].first || shape != expected[i].second) {
            throw DataError("checkpoint manifest entry " + std::to_string(i) + " is " + name + shape_str(shape) +
                            ", expected " + expected[i].first + shape_str(expected[i].second));
        }
        if (entry.at("offset").get<std::size_t>() != offset) throw DataError("checkpoint tensor offsets inconsistent");
        const std::size_t count = numel(shape);
        if (data_begin + offset + count * sizeof(double) > bytes.size()) throw DataError("truncated checkpoint data");
        std::vector<double> values(count);
        std::memcpy(values.data(), bytes.data() + data_begin + offset, count * sizeof(double));
        *named[i].second = Tensor(shape, std::move(values));
        offset += count * sizeof(double);
    }
    if (data_begin + offset != bytes.size()) throw DataError("trailing bytes after checkpoint data");
    return m;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
    detail::write_file(path, serialize_checkpoint(m));
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(detail::read_file(path));
}

/// Loads a checkpoint and checks that its vocabulary size matches `vocab`.
inline Model load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab) {
    Model m = load_checkpoint(path);
    if (static_cast<std::size_t>(m.config.vocab) != vocab.size()) {
        throw DataError("checkpoint vocabulary size " + std::to_string(m.config.vocab) +
                        " does not match vocabulary file size " + std::to_string(vocab.size()));
    }
    return m;
}

}  // namespace coarse
