#include "clner/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "clner/num/ops.hpp"

namespace clner::baselines {

namespace {

num::Tensor uniform_param(num::Shape shape, double bound, num::Rng& rng) {
    std::vector<double> v(num::shape_size(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return num::Tensor::from(std::move(shape), std::move(v), true);
}

std::size_t argmax(const double* row, std::size_t width) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < width; ++t) {
        if (row[t] > row[best]) best = t;
    }
    return best;
}

}  // namespace

std::string TagSet::name(std::size_t tag) const {
    if (tag == 0) return "O";
    const std::size_t k = (tag - 1) / 2;
    if (k >= types.size()) throw std::out_of_range("tag id " + std::to_string(tag) + " outside a tag set of size " + std::to_string(size()));
    return (tag % 2 == 1 ? "B-" : "I-") + types[k];
}

std::optional<std::size_t> TagSet::type_index(const std::string& type) const {
    auto it = std::find(types.begin(), types.end(), type);
    if (it == types.end()) return std::nullopt;
    return static_cast<std::size_t>(it - types.begin());
}

std::vector<Span> flatten_longest(const std::vector<Span>& spans, const std::vector<std::string>& types,
                                  std::size_t sentence_length) {
    std::vector<Span> pool;
    for (const auto& s : spans) {
        if (std::find(types.begin(), types.end(), s.type) == types.end()) continue;
        if (s.start > s.end || s.end >= sentence_length)
            throw std::out_of_range("span (" + std::to_string(s.start) + "," + std::to_string(s.end) + ") outside a sentence of " +
                                    std::to_string(sentence_length) + " tokens");
        pool.push_back(s);
    }
    std::sort(pool.begin(), pool.end(), [](const Span& a, const Span& b) {
        const std::size_t la = a.end - a.start, lb = b.end - b.start;
        if (la != lb) return la > lb;
        if (a.start != b.start) return a.start < b.start;
        return a.type < b.type;
    });
    std::vector<Span> kept;
    for (const auto& s : pool) {
        bool clash = std::any_of(kept.begin(), kept.end(), [&](const Span& k) { return s.start <= k.end && k.start <= s.end; });
        if (!clash) kept.push_back(s);
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

std::vector<std::size_t> iob_encode(const Sentence& sentence, const TagSet& tags) {
    std::vector<std::size_t> out(sentence.tokens.size(), 0);
    for (const auto& s : flatten_longest(sentence.spans, tags.types, sentence.tokens.size())) {
        const std::size_t k = *tags.type_index(s.type);
        out[s.start] = TagSet::begin_tag(k);
        for (std::size_t i = s.start + 1; i <= s.end; ++i) out[i] = TagSet::inside_tag(k);
    }
    return out;
}

std::vector<Span> tag_decode(const std::vector<std::string>& tags) {
    std::vector<Span> out;
    bool open = false;
    Span cur;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& t = tags[i];
        const bool b = t.rfind("B-", 0) == 0, in = t.rfind("I-", 0) == 0;
        if (in && open && cur.type == t.substr(2)) {
            cur.end = i;
            continue;
        }
        if (open) out.push_back(cur);
        open = b || in;
        if (open) cur = {i, i, t.substr(2)};
    }
    if (open) out.push_back(cur);
    return out;
}

void repair_continuity(std::vector<std::string>& tags) {
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (tags[i].rfind("I-", 0) != 0) continue;
        const std::string type = tags[i].substr(2);
        const bool continues = i > 0 && (tags[i - 1] == "B-" + type || tags[i - 1] == "I-" + type);
        if (!continues) tags[i] = "B-" + type;
    }
}

TagDistributions tag_probabilities(const std::vector<num::Tensor>& logits) {
    TagDistributions d;
    for (const auto& l : logits) {
        num::NoGradGuard guard;
        auto p = num::softmax(l, 1);
        d.n = l.rows();
        d.widths.push_back(l.cols());
        d.heads.emplace_back(p.values().begin(), p.values().end());
    }
    return d;
}

std::vector<double> pad_distribution(std::span<const double> row, std::size_t new_width, double c) {
    if (new_width < row.size()) throw std::invalid_argument("padding cannot shrink a distribution");
    if (!(c >= 0.0)) throw std::invalid_argument("padding constant must be non-negative");
    std::vector<double> out(row.begin(), row.end());
    out.resize(new_width, c);
    double total = 0.0;
    for (double x : out) total += x;
    for (double& x : out) x /= total;
    return out;
}

TagDistributions pad_teacher(const TagDistributions& teacher, std::size_t new_width, double c) {
    TagDistributions out;
    out.n = teacher.n;
    for (std::size_t h = 0; h < teacher.heads.size(); ++h) {
        const std::size_t w = teacher.widths[h];
        std::vector<double> rows;
        for (std::size_t i = 0; i < teacher.n; ++i) {
            auto padded = pad_distribution(std::span<const double>(teacher.heads[h].data() + i * w, w), new_width, c);
            rows.insert(rows.end(), padded.begin(), padded.end());
        }
        out.widths.push_back(new_width);
        out.heads.push_back(std::move(rows));
    }
    return out;
}

std::vector<std::string> combine_heads(const TagDistributions& probs, const std::vector<TagSet>& tagsets) {
    if (tagsets.size() != probs.heads.size()) throw std::invalid_argument("one tag set per head is required");
    std::vector<std::string> out(probs.n, "O");
    for (std::size_t i = 0; i < probs.n; ++i) {
        double best = -1.0;
        for (std::size_t h = 0; h < probs.heads.size(); ++h) {
            const double* row = probs.heads[h].data() + i * probs.widths[h];
            const std::size_t a = argmax(row, probs.widths[h]);
            if (a != 0 && row[a] > best) {
                best = row[a];
                out[i] = tagsets[h].name(a);
            }
        }
    }
    repair_continuity(out);
    return out;
}

Tagger::Tagger(const encoder::EncoderConfig& encoder_config, Mode mode, num::Rng& init_rng)
    : encoder_(encoder_config, init_rng), mode_(mode) {}

void Tagger::check_new(const std::vector<std::string>& new_types) const {
    if (new_types.empty()) throw std::invalid_argument("a task needs at least one entity type");
    std::set<std::string> seen;
    for (const auto& t : types()) seen.insert(t);
    for (const auto& t : new_types) {
        if (!seen.insert(t).second) throw std::invalid_argument("entity type '" + t + "' is already registered");
    }
}

void Tagger::add_task(const std::vector<std::string>& types, num::Rng& rng) {
    if (mode_ == Mode::ExtendNER) {
        extend_head(types, rng);
        return;
    }
    check_new(types);
    const std::size_t hidden = encoder_.config().dim;
    Head h;
    h.tags.types = types;
    h.w = uniform_param({hidden, h.tags.size()}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    h.b = num::Tensor::zeros({1, h.tags.size()}, true);
    heads_.push_back(std::move(h));
}

void Tagger::extend_head(const std::vector<std::string>& new_types, num::Rng& rng) {
    if (mode_ != Mode::ExtendNER) throw std::logic_error("extend_head applies to the single-head tagger only");
    check_new(new_types);
    const std::size_t hidden = encoder_.config().dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    if (heads_.empty()) {
        Head h;
        h.tags.types = new_types;
        h.w = uniform_param({hidden, h.tags.size()}, bound, rng);
        h.b = num::Tensor::zeros({1, h.tags.size()}, true);
        heads_.push_back(std::move(h));
        return;
    }
    Head& h = heads_[0];
    const std::size_t old_width = h.tags.size();
    const std::size_t width = old_width + 2 * new_types.size();
    std::vector<double> w(hidden * width), b(width, 0.0);
    const auto& ow = h.w.values();
    for (std::size_t r = 0; r < hidden; ++r) {
        for (std::size_t c = 0; c < old_width; ++c) w[r * width + c] = ow[r * old_width + c];
        for (std::size_t c = old_width; c < width; ++c) w[r * width + c] = rng.uniform(-bound, bound);
    }
    std::copy(h.b.values().begin(), h.b.values().end(), b.begin());
    h.tags.types.insert(h.tags.types.end(), new_types.begin(), new_types.end());
    h.w = num::Tensor::from({hidden, width}, std::move(w), true);
    h.b = num::Tensor::from({1, width}, std::move(b), true);
}

std::vector<num::Tensor> Tagger::logits(std::span<const std::size_t> ids, bool train, num::Rng& rng) const {
    num::Tensor hidden = encoder_.encode(ids, train, rng);
    std::vector<num::Tensor> out;
    for (const auto& h : heads_) out.push_back(num::add(num::matmul(hidden, h.w), h.b));
    return out;
}

std::vector<TagSet> Tagger::tagsets() const {
    std::vector<TagSet> out;
    for (const auto& h : heads_) out.push_back(h.tags);
    return out;
}

std::vector<std::string> Tagger::types() const {
    std::vector<std::string> out;
    for (const auto& h : heads_) out.insert(out.end(), h.tags.types.begin(), h.tags.types.end());
    return out;
}

num::NamedTensors Tagger::named_parameters() const {
    num::NamedTensors out = encoder_.named_parameters();
    for (std::size_t k = 0; k < heads_.size(); ++k) {
        out.emplace_back("tagger.head" + std::to_string(k) + ".w", heads_[k].w);
        out.emplace_back("tagger.head" + std::to_string(k) + ".b", heads_[k].b);
    }
    return out;
}

std::vector<num::Tensor> Tagger::head_parameters() const {
    std::vector<num::Tensor> out;
    for (const auto& h : heads_) {
        out.push_back(h.w);
        out.push_back(h.b);
    }
    return out;
}

num::Tensor tagger_loss(const Tagger& tagger, const std::vector<num::Tensor>& logits, std::span<const std::size_t> gold,
                        const TagDistributions* teacher) {
    if (logits.empty()) throw std::invalid_argument("tagger has no heads");
    const std::size_t n = logits[0].rows();
    if (gold.size() != n) throw std::invalid_argument("gold tags do not match the sentence length");
    const bool extend = tagger.mode() == Mode::ExtendNER;
    const std::size_t cur = logits.size() - 1;
    if (teacher) {
        const std::size_t expect = extend ? 1 : cur;
        if (teacher->heads.size() != expect || teacher->n != n)
            throw std::invalid_argument("teacher distributions do not match the tagger's heads");
        for (std::size_t h = 0; h < expect; ++h) {
            if (teacher->widths[h] != logits[h].cols() || teacher->heads[h].size() != n * logits[h].cols())
                throw std::invalid_argument("teacher width " + std::to_string(teacher->widths[h]) + " does not match head width " +
                                            std::to_string(logits[h].cols()));
        }
    }

    num::Tensor total;
    double constant = 0.0;
    auto accumulate = [&](const num::Tensor& head_logits, const std::vector<double>& weights) {
        num::Tensor term = num::sum(num::mul(num::log_softmax(head_logits, 1), num::Tensor::from(head_logits.shape(), weights)));
        total = total.defined() ? num::add(total, term) : term;
    };
    auto kl_row = [&](std::vector<double>& weights, std::size_t width, std::size_t i, const double* p) {
        for (std::size_t t = 0; t < width; ++t) {
            weights[i * width + t] = -p[t];
            if (p[t] > 0.0) constant += p[t] * std::log(p[t]);
        }
    };

    // Current head: cross entropy, or KL on non-entity tokens for ExtendNER.
    {
        const std::size_t width = logits[cur].cols();
        std::vector<double> weights(n * width, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (gold[i] >= width) throw std::invalid_argument("gold tag id outside the head");
            if (extend && teacher && gold[i] == 0) {
                kl_row(weights, width, i, teacher->heads[0].data() + i * width);
            } else {
                weights[i * width + gold[i]] = -1.0;
            }
        }
        accumulate(logits[cur], weights);
    }
    if (!extend && teacher) {
        for (std::size_t h = 0; h < cur; ++h) {
            const std::size_t width = logits[h].cols();
            std::vector<double> weights(n * width, 0.0);
            for (std::size_t i = 0; i < n; ++i) kl_row(weights, width, i, teacher->heads[h].data() + i * width);
            accumulate(logits[h], weights);
        }
    }
    return num::add(total, num::Tensor::scalar(constant));
}

std::vector<Span> predict_spans(const Tagger& tagger, const std::vector<num::Tensor>& logits) {
    const auto probs = tag_probabilities(logits);
    const auto sets = tagger.tagsets();
    std::vector<std::string> tags;
    if (tagger.mode() == Mode::AddNER) {
        tags = combine_heads(probs, sets);
    } else {
        tags.resize(probs.n);
        for (std::size_t i = 0; i < probs.n; ++i)
            tags[i] = sets[0].name(argmax(probs.heads[0].data() + i * probs.widths[0], probs.widths[0]));
        repair_continuity(tags);
    }
    return tag_decode(tags);
}

std::uint64_t TagTeacherCache::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& d : items_) {
        feed(&d.n, sizeof(d.n));
        for (std::size_t k = 0; k < d.heads.size(); ++k) {
            feed(&d.widths[k], sizeof(d.widths[k]));
            feed(d.heads[k].data(), d.heads[k].size() * sizeof(double));
        }
    }
    return h;
}

TagTeacherCache tag_teacher_predict(const Tagger& teacher, std::span<const std::vector<std::size_t>> sentences,
                                    std::size_t student_width, double pad) {
    if (teacher.heads().empty()) return {};
    num::NoGradGuard guard;
    num::Rng unused(0);
    std::vector<TagDistributions> items;
    for (const auto& ids : sentences) {
        auto probs = tag_probabilities(teacher.logits(ids, false, unused));
        if (teacher.mode() == Mode::ExtendNER) probs = pad_teacher(probs, student_width, pad);
        items.push_back(std::move(probs));
    }
    return TagTeacherCache(std::move(items));
}

}  // namespace clner::baselines
