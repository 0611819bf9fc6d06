#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clner/encoder.hpp"
#include "clner/num/checkpoint.hpp"
#include "clner/num/random.hpp"
#include "clner/num/tensor.hpp"
#include "clner/types.hpp"

// Span-based multi-label NER head: one start/end projection pair per entity
// type, scored with a scaled dot product into an n x n span matrix whose upper
// triangle (start <= end) holds one logit per span.
namespace clner::spankl {

using TypeId = std::size_t;

struct TypeHead {
    TypeId type = 0;
    std::string name;
    num::Tensor start_w;  // [hidden, out]
    num::Tensor start_b;  // [1, out]
    num::Tensor end_w;
    num::Tensor end_b;
};

// Uniform(-1/sqrt(hidden), 1/sqrt(hidden)) weights and biases.
TypeHead make_head(TypeId type, std::string name, std::size_t hidden_dim, std::size_t out_dim, num::Rng& rng);

struct SpanMatrixSet {
    std::size_t n = 0;
    std::vector<TypeId> types;
    std::vector<num::Tensor> logits;  // parallel to types, each [n, n]

    // Throws std::out_of_range for a type without a matrix.
    const num::Tensor& logits_for(TypeId type) const;
};

// Materialized sigmoid probabilities; same layout as SpanMatrixSet.
struct SpanScores {
    std::size_t n = 0;
    std::vector<TypeId> types;
    std::vector<std::vector<double>> probs;  // row-major [n, n]

    double at(std::size_t k, std::size_t i, std::size_t j) const { return probs[k][i * n + j]; }
};

SpanScores probabilities(const SpanMatrixSet& matrices);

using CellSet = std::set<std::pair<std::size_t, std::size_t>>;

// Gold cells per type; any cell not listed is a negative.
struct GoldLabelSet {
    std::map<TypeId, CellSet> cells;
};

// Teacher probabilities per old type, row-major [n, n].
struct DistilledLabelSet {
    std::size_t n = 0;
    std::map<TypeId, std::vector<double>> probs;
};

// M[k](i, j) = start_k(h_i) . end_k(h_j) / sqrt(out_dim), computed for every
// cell; only i <= j is meaningful downstream.
SpanMatrixSet span_logits(const num::Tensor& hidden, std::span<const TypeHead> heads);

// Sum over current types and upper-triangle cells of the binary cross
// entropy between sigmoid(logit) and the 0/1 gold label.
num::Tensor bce_loss(const SpanMatrixSet& matrices, const GoldLabelSet& gold, std::span<const TypeId> current_types);

inline constexpr double kTeacherClamp = 1e-7;

// Sum over old types and upper-triangle cells of KL(Bern(p~) || Bern(p^)),
// with p~ clamped to [kTeacherClamp, 1 - kTeacherClamp].
num::Tensor kd_loss(const SpanMatrixSet& matrices, const DistilledLabelSet& distilled, std::span<const TypeId> old_types);

// alpha * bce + beta * kd. An undefined kd tensor (no teacher) counts as 0.
num::Tensor total_loss(const num::Tensor& bce, const num::Tensor& kd, double alpha, double beta);

struct SpanCandidate {
    std::size_t start = 0;
    std::size_t end = 0;
    TypeId type = 0;
    double score = 0.0;

    bool operator==(const SpanCandidate&) const = default;
};

// Every cell with probability above threshold, ordered by descending score;
// ties go to the smaller start, then end, then type id.
std::vector<SpanCandidate> candidates(const SpanScores& scores, double threshold);

// Greedy flattening: accept candidates in order unless they overlap a span
// that was already accepted.
std::vector<SpanCandidate> decode_flat(const SpanScores& scores, double threshold);

// Multi-label decoding that keeps nested and overlapping candidates.
std::vector<SpanCandidate> decode_nested(const SpanScores& scores, double threshold);

class SpanModel {
public:
    SpanModel(const encoder::EncoderConfig& encoder_config, std::size_t out_dim, num::Rng& init_rng);

    // Registers one head per new type. Existing heads are left untouched.
    // Throws std::invalid_argument when a type is already registered or
    // listed twice.
    std::vector<TypeId> add_task_head(const std::vector<std::string>& new_types, num::Rng& rng);

    SpanMatrixSet forward(std::span<const std::size_t> ids, bool train, num::Rng& rng) const;
    SpanMatrixSet forward(std::span<const std::size_t> ids, std::span<const TypeId> types, bool train,
                          num::Rng& rng) const;

    const encoder::Encoder& encoder() const { return encoder_; }
    encoder::Encoder& encoder() { return encoder_; }
    const std::vector<TypeHead>& heads() const { return heads_; }
    std::size_t out_dim() const { return out_dim_; }

    std::optional<TypeId> type_id(const std::string& name) const;
    const std::string& type_name(TypeId id) const { return heads_.at(id).name; }
    std::vector<TypeId> type_ids(const std::vector<std::string>& names) const;

    num::NamedTensors named_parameters() const;
    std::vector<num::Tensor> head_parameters() const;

private:
    encoder::Encoder encoder_;
    std::size_t out_dim_;
    std::vector<TypeHead> heads_;  // heads_[id].type == id
};

// Gold cells for the given types from a sentence's spans; spans of other
// types are ignored.
GoldLabelSet make_gold(const Sentence& sentence, const SpanModel& model, std::span<const TypeId> types);

// One-off teacher prediction over a training set, computed without dropout.
// The result is never modified afterwards.
class TeacherCache {
public:
    TeacherCache() = default;
    TeacherCache(std::vector<TypeId> old_types, std::vector<DistilledLabelSet> labels)
        : old_types_(std::move(old_types)), labels_(std::move(labels)) {}

    bool empty() const { return old_types_.empty(); }
    const std::vector<TypeId>& old_types() const { return old_types_; }
    const DistilledLabelSet& at(std::size_t sentence) const { return labels_.at(sentence); }
    std::size_t size() const { return labels_.size(); }

    // FNV-1a over dimensions and the raw bytes of every probability.
    std::uint64_t digest() const;

private:
    std::vector<TypeId> old_types_;
    std::vector<DistilledLabelSet> labels_;
};

TeacherCache teacher_predict(const SpanModel& teacher, std::span<const std::vector<std::size_t>> sentences,
                             std::span<const TypeId> old_types);

}  // namespace clner::spankl
