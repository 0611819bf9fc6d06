#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clner/encoder.hpp"
#include "clner/num/checkpoint.hpp"
#include "clner/num/random.hpp"
#include "clner/num/tensor.hpp"
#include "clner/types.hpp"

// Token-tagging continual learners. AddNER keeps one linear head per task,
// each with its own O tag; ExtendNER keeps a single head with one global O
// tag that grows as tasks arrive.
namespace clner::baselines {

enum class Mode { AddNER, ExtendNER };

// Tags of one head: index 0 is O, then B-t and I-t for each type in order.
struct TagSet {
    std::vector<std::string> types;

    std::size_t size() const { return 1 + 2 * types.size(); }
    static std::size_t begin_tag(std::size_t k) { return 1 + 2 * k; }
    static std::size_t inside_tag(std::size_t k) { return 2 + 2 * k; }
    std::string name(std::size_t tag) const;
    std::optional<std::size_t> type_index(const std::string& type) const;
};

// Keeps only spans of `types`, then removes overlaps: longer spans win, ties
// go to the earlier start.
std::vector<Span> flatten_longest(const std::vector<Span>& spans, const std::vector<std::string>& types,
                                  std::size_t sentence_length);

// Tag ids under `tags` after flattening. Throws std::out_of_range for a span
// outside the sentence.
std::vector<std::size_t> iob_encode(const Sentence& sentence, const TagSet& tags);

// Contiguous B-X (I-X)* groups; an I-X that does not continue an X span
// starts a new one.
std::vector<Span> tag_decode(const std::vector<std::string>& tags);

// I-X tags that do not continue B-X/I-X are rewritten to B-X.
void repair_continuity(std::vector<std::string>& tags);

// Softmax outputs of one sentence: per head, row-major [n, width].
struct TagDistributions {
    std::size_t n = 0;
    std::vector<std::size_t> widths;
    std::vector<std::vector<double>> heads;

    double at(std::size_t h, std::size_t i, std::size_t tag) const { return heads[h][i * widths[h] + tag]; }
};

TagDistributions tag_probabilities(const std::vector<num::Tensor>& logits);

inline constexpr double kDefaultPad = 1e-4;

// Widens each row to new_width by appending `c` for the new tags, then
// renormalizes every row to sum to 1.
std::vector<double> pad_distribution(std::span<const double> row, std::size_t new_width, double c);
TagDistributions pad_teacher(const TagDistributions& teacher, std::size_t new_width, double c);

// Per token: O when every head's argmax is its own O; otherwise the non-O
// argmax tag with the highest probability across heads (ties to the earlier
// head). Continuity is repaired afterwards.
std::vector<std::string> combine_heads(const TagDistributions& probs, const std::vector<TagSet>& tagsets);

struct Head {
    TagSet tags;
    num::Tensor w;  // [hidden, tags]
    num::Tensor b;  // [1, tags]
};

class Tagger {
public:
    Tagger(const encoder::EncoderConfig& encoder_config, Mode mode, num::Rng& init_rng);

    Mode mode() const { return mode_; }

    // AddNER: appends a head for the task. ExtendNER: extend_head.
    void add_task(const std::vector<std::string>& types, num::Rng& rng);

    // ExtendNER only. Appends B/I columns for each new type; existing columns
    // keep their exact values. Throws std::invalid_argument on a type that is
    // already known or listed twice, std::logic_error in AddNER mode.
    void extend_head(const std::vector<std::string>& new_types, num::Rng& rng);

    // One [n, tags] logit matrix per head.
    std::vector<num::Tensor> logits(std::span<const std::size_t> ids, bool train, num::Rng& rng) const;

    const std::vector<Head>& heads() const { return heads_; }
    std::vector<TagSet> tagsets() const;
    std::vector<std::string> types() const;
    const encoder::Encoder& encoder() const { return encoder_; }
    encoder::Encoder& encoder() { return encoder_; }

    num::NamedTensors named_parameters() const;
    std::vector<num::Tensor> head_parameters() const;

private:
    void check_new(const std::vector<std::string>& new_types) const;

    encoder::Encoder encoder_;
    Mode mode_;
    std::vector<Head> heads_;
};

// Summed token loss for one sentence. `gold` holds tag ids for the current
// head (the last head for AddNER, the single head for ExtendNER), annotated
// for the current task's types only.
//   ExtendNER: cross entropy on tokens whose gold tag is an entity tag; every
//     other token uses KL(teacher || student) over the padded teacher row, or
//     cross entropy against O when there is no teacher.
//   AddNER: cross entropy on every token of the current head; KL(teacher ||
//     student) on every token of each older head.
// Throws std::invalid_argument when teacher widths do not match the heads.
num::Tensor tagger_loss(const Tagger& tagger, const std::vector<num::Tensor>& logits, std::span<const std::size_t> gold,
                        const TagDistributions* teacher);

// Flat predictions: argmax per token (ExtendNER) or combine_heads (AddNER).
std::vector<Span> predict_spans(const Tagger& tagger, const std::vector<num::Tensor>& logits);

// Teacher outputs over a training set from the model before the task's
// heads were added, already padded to the student's width for ExtendNER.
class TagTeacherCache {
public:
    TagTeacherCache() = default;
    explicit TagTeacherCache(std::vector<TagDistributions> items) : items_(std::move(items)) {}

    bool empty() const { return items_.empty(); }
    std::size_t size() const { return items_.size(); }
    const TagDistributions& at(std::size_t i) const { return items_.at(i); }
    std::uint64_t digest() const;

private:
    std::vector<TagDistributions> items_;
};

// Runs `teacher` over the sentences without dropout. For ExtendNER the rows
// are padded to `student_width` with constant `pad`.
TagTeacherCache tag_teacher_predict(const Tagger& teacher, std::span<const std::vector<std::size_t>> sentences,
                                    std::size_t student_width, double pad);

}  // namespace clner::baselines
