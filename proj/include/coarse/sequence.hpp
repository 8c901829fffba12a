#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "numerics.hpp"
#include "tokenizer.hpp"

namespace coarse {

enum class PairLabel : int { NotPair = 0, IsPair = 1 };

/// One encoder input. Pair layout:
///   [CLS] [Q] q... [SEP] [D] d... [SEP] [PAD]...
/// Document-only layout (MLM pre-training):
///   [CLS] d... [SEP] [PAD]...
struct InputSequence {
    std::vector<int> token_ids;
    std::vector<int> segment_ids;
    std::vector<std::uint8_t> attention_mask;  // 1 = real token, 0 = [PAD]
    std::vector<int> mlm_targets;              // kIgnoreIndex where not masked
    std::optional<PairLabel> pair_label;
    std::optional<int> relevance_label;
    std::string qid;
    std::string docid;

    // Content ranges [begin, end) within token_ids; empty for absent parts.
    std::size_t query_begin = 0, query_end = 0;
    std::size_t doc_begin = 0, doc_end = 0;

    std::size_t size() const noexcept { return token_ids.size(); }

    /// Number of non-[PAD] positions; pads only ever trail.
    std::size_t length() const noexcept {
        std::size_t n = 0;
        for (auto m : attention_mask) n += m;
        return n;
    }

    std::vector<int> masked_positions() const {
        std::vector<int> pos;
        for (std::size_t i = 0; i < mlm_targets.size(); ++i)
            if (mlm_targets[i] != kIgnoreIndex) pos.push_back(static_cast<int>(i));
        return pos;
    }

    std::vector<int> masked_targets() const {
        std::vector<int> t;
        for (int x : mlm_targets)
            if (x != kIgnoreIndex) t.push_back(x);
        return t;
    }

    /// Copy without trailing pads. Encoder outputs at the kept positions are
    /// identical to those of the padded sequence because pads are masked out
    /// as attention keys.
    InputSequence trimmed() const {
        InputSequence s = *this;
        const std::size_t n = length();
        s.token_ids.resize(n);
        s.segment_ids.resize(n);
        s.attention_mask.resize(n);
        s.mlm_targets.resize(n);
        return s;
    }

    /// Throws DataError describing the first violated layout invariant.
    void validate() const {
        const std::size_t n = token_ids.size();
        if (segment_ids.size() != n || attention_mask.size() != n || mlm_targets.size() != n) {
            throw DataError("sequence component lengths differ");
        }
        if (pair_label.has_value() && relevance_label.has_value()) {
            throw DataError("sequence carries both a pair label and a relevance label");
        }
        if (n < 2 || token_ids[0] != kCls) throw DataError("sequence must start with [CLS]");
        const std::size_t len = length();
        for (std::size_t i = 0; i < n; ++i) {
            if ((i < len) != (attention_mask[i] == 1)) throw DataError("padding must be a contiguous suffix");
            if (i >= len && token_ids[i] != kPad) throw DataError("masked-out position holds a non-[PAD] token");
        }
        if (token_ids[len - 1] != kSep) throw DataError("last real token must be [SEP]");
        const bool paired = query_end > query_begin || (len > 1 && token_ids[1] == kQuery);
        if (paired) {
            if (token_ids[1] != kQuery || query_begin != 2) throw DataError("[Q] must follow [CLS]");
            if (token_ids[query_end] != kSep || token_ids[query_end + 1] != kDoc || doc_begin != query_end + 2) {
                throw DataError("query must be followed by [SEP] [D]");
            }
            if (doc_end != len - 1) throw DataError("document must end right before the final [SEP]");
        } else if (doc_begin != 1 || doc_end != len - 1) {
            throw DataError("document-only sequence must be [CLS] d... [SEP]");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (mlm_targets[i] == kIgnoreIndex) continue;
            const bool content = (i >= query_begin && i < query_end) || (i >= doc_begin && i < doc_end);
            if (!content) throw DataError("mlm target on a special or pad position");
            if (is_special_id(mlm_targets[i])) throw DataError("mlm target is a special token");
        }
    }
};

}  // namespace coarse
