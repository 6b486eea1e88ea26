#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ovlw/tensor.hpp"

namespace ovlw {

// Category phrases plus the prompt they are wrapped in before encoding.
// Entry order is significant: it fixes logit column order everywhere
// downstream.
struct VocabularySpec {
    std::vector<std::string> entries;
    std::string prompt_template = "a photo of a {}";
    bool normalize = true;

    void validate() const;  // entries unique after normalization, exactly one "{}"
};

// lowercase, strip punctuation except hyphens, collapse whitespace
std::string normalize_phrase(std::string_view s);

// Unit-norm text embeddings, one row per phrase. Stands in for the frozen
// text branch of the VLM; immutable after construction.
struct EmbeddingTable {
    std::vector<std::string> names;  // normalized phrases, order = logit columns
    Tensor vectors;                  // [C x D]
    int64_t dim = 0;
    std::string source_tag;

    int64_t count() const { return static_cast<int64_t>(names.size()); }
    void validate() const;  // row count, unit norms within 1e-5
    uint64_t content_hash() const;
    EmbeddingTable permuted(const std::vector<size_t>& perm) const;
    // Rows for the given indices as a dense [n x D] block.
    Tensor rows(const std::vector<int>& idx) const;
    int find(const std::string& normalized_name) const;  // -1 if absent
};

// Deterministic stand-in encoder: hashes character trigrams of the
// normalized phrase into `dim` signed buckets, then L2-normalizes. Phrases
// sharing trigrams land closer in cosine than trigram-disjoint ones, which
// is what makes zero-shot composition observable at desk scale.
Tensor toy_text_encoder(const std::string& phrase, int64_t dim, uint64_t seed);

using TextEncoder = std::function<Tensor(const std::string&)>;
TextEncoder make_toy_encoder(int64_t dim, uint64_t seed);

EmbeddingTable encode_vocabulary(const VocabularySpec& vocab, const TextEncoder& encoder,
                                 const std::string& source_tag = "toy");

// Text format, one table per file:
//   line 1:       OVLW-EMB v1 dim=<D> count=<C>
//   lines 2..C+1: <phrase>\t<f_1> <f_2> ... <f_D>
void save_embedding_table(const EmbeddingTable& table, const std::string& path);
EmbeddingTable load_embedding_table(const std::string& path);

}  // namespace ovlw
