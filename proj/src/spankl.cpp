#include "clner/spankl.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

#include "clner/num/ops.hpp"

namespace clner::spankl {

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

num::Tensor uniform_param(num::Shape shape, double bound, num::Rng& rng) {
    std::vector<double> v(num::shape_size(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return num::Tensor::from(std::move(shape), std::move(v), true);
}

bool contains(std::span<const TypeId> ids, TypeId id) { return std::find(ids.begin(), ids.end(), id) != ids.end(); }

}  // namespace

TypeHead make_head(TypeId type, std::string name, std::size_t hidden_dim, std::size_t out_dim, num::Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    TypeHead h;
    h.type = type;
    h.name = std::move(name);
    h.start_w = uniform_param({hidden_dim, out_dim}, bound, rng);
    h.start_b = uniform_param({1, out_dim}, bound, rng);
    h.end_w = uniform_param({hidden_dim, out_dim}, bound, rng);
    h.end_b = uniform_param({1, out_dim}, bound, rng);
    return h;
}

const num::Tensor& SpanMatrixSet::logits_for(TypeId type) const {
    for (std::size_t k = 0; k < types.size(); ++k) {
        if (types[k] == type) return logits[k];
    }
    throw std::out_of_range("no span matrix for type " + std::to_string(type));
}

SpanScores probabilities(const SpanMatrixSet& matrices) {
    SpanScores s;
    s.n = matrices.n;
    s.types = matrices.types;
    for (const auto& m : matrices.logits) {
        std::vector<double> p(m.size());
        auto v = m.values();
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid(v[i]);
        s.probs.push_back(std::move(p));
    }
    return s;
}

SpanMatrixSet span_logits(const num::Tensor& hidden, std::span<const TypeHead> heads) {
    if (hidden.dim() != 2 || hidden.rows() == 0) {
        throw std::invalid_argument("span_logits: hidden must be a non-empty [n, d] matrix, got " + num::shape_str(hidden.shape()));
    }
    if (heads.empty()) throw std::invalid_argument("span_logits: no type heads");
    SpanMatrixSet out;
    out.n = hidden.rows();
    for (const auto& h : heads) {
        if (h.start_w.rows() != hidden.cols() || h.end_w.rows() != hidden.cols()) {
            throw std::invalid_argument("span_logits: hidden width " + std::to_string(hidden.cols()) + " does not match head '" +
                                        h.name + "' with weights " + num::shape_str(h.start_w.shape()));
        }
        const double inv_sqrt_out = 1.0 / std::sqrt(static_cast<double>(h.start_w.cols()));
        num::Tensor start = num::add(num::matmul(hidden, h.start_w), h.start_b);
        num::Tensor end = num::add(num::matmul(hidden, h.end_w), h.end_b);
        out.types.push_back(h.type);
        out.logits.push_back(num::scale(num::matmul(start, num::transpose(end)), inv_sqrt_out));
    }
    return out;
}

num::Tensor bce_loss(const SpanMatrixSet& matrices, const GoldLabelSet& gold, std::span<const TypeId> current_types) {
    const std::size_t n = matrices.n;
    for (const auto& [type, cells] : gold.cells) {
        if (!contains(current_types, type)) {
            throw std::invalid_argument("bce_loss: gold type " + std::to_string(type) + " is not a current type");
        }
        for (const auto& [i, j] : cells) {
            if (i > j || j >= n) {
                throw std::invalid_argument("bce_loss: gold span (" + std::to_string(i) + ", " + std::to_string(j) +
                                            ") outside a " + std::to_string(n) + "-token span matrix");
            }
        }
    }
    std::vector<num::Tensor> terms;
    for (TypeId type : current_types) {
        const num::Tensor& logits = matrices.logits_for(type);
        std::vector<double> target(n * n, 0.0);
        if (auto it = gold.cells.find(type); it != gold.cells.end()) {
            for (const auto& [i, j] : it->second) target[i * n + j] = 1.0;
        }
        auto x = logits.values();
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                const double z = x[i * n + j];
                loss += softplus(z) - z * target[i * n + j];
            }
        }
        terms.push_back(num::Tensor::make_op({}, {loss}, {logits}, [logits, target = std::move(target), n](std::span<const double> g) mutable {
            auto x = logits.values();
            std::vector<double> dx(n * n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i; j < n; ++j) dx[i * n + j] = g[0] * (sigmoid(x[i * n + j]) - target[i * n + j]);
            }
            logits.accumulate_grad(dx);
        }));
    }
    if (terms.empty()) return num::Tensor::scalar(0.0);
    num::Tensor total = terms[0];
    for (std::size_t t = 1; t < terms.size(); ++t) total = num::add(total, terms[t]);
    return total;
}

num::Tensor kd_loss(const SpanMatrixSet& matrices, const DistilledLabelSet& distilled, std::span<const TypeId> old_types) {
    const std::size_t n = matrices.n;
    std::vector<num::Tensor> terms;
    for (TypeId type : old_types) {
        auto it = distilled.probs.find(type);
        if (it == distilled.probs.end()) {
            throw std::invalid_argument("kd_loss: no distilled label for old type " + std::to_string(type));
        }
        if (distilled.n != n || it->second.size() != n * n) {
            throw std::invalid_argument("kd_loss: distilled matrix for type " + std::to_string(type) +
                                        " does not match sentence length " + std::to_string(n));
        }
        const num::Tensor& logits = matrices.logits_for(type);
        std::vector<double> teacher(it->second);
        for (double& p : teacher) p = std::clamp(p, kTeacherClamp, 1.0 - kTeacherClamp);
        auto x = logits.values();
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                const double p = teacher[i * n + j];
                const double z = x[i * n + j];
                // log sigmoid(z) = -softplus(-z), log(1 - sigmoid(z)) = -softplus(z)
                loss += p * (std::log(p) + softplus(-z)) + (1.0 - p) * (std::log1p(-p) + softplus(z));
            }
        }
        terms.push_back(num::Tensor::make_op({}, {loss}, {logits}, [logits, teacher = std::move(teacher), n](std::span<const double> g) mutable {
            auto x = logits.values();
            std::vector<double> dx(n * n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = i; j < n; ++j) dx[i * n + j] = g[0] * (sigmoid(x[i * n + j]) - teacher[i * n + j]);
            }
            logits.accumulate_grad(dx);
        }));
    }
    if (terms.empty()) return num::Tensor::scalar(0.0);
    num::Tensor total = terms[0];
    for (std::size_t t = 1; t < terms.size(); ++t) total = num::add(total, terms[t]);
    return total;
}

num::Tensor total_loss(const num::Tensor& bce, const num::Tensor& kd, double alpha, double beta) {
    if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("total_loss: weights must be non-negative");
    num::Tensor out = num::scale(bce, alpha);
    if (kd.defined() && beta != 0.0) out = num::add(out, num::scale(kd, beta));
    return out;
}

std::vector<SpanCandidate> candidates(const SpanScores& scores, double threshold) {
    std::vector<SpanCandidate> out;
    const std::size_t n = scores.n;
    for (std::size_t k = 0; k < scores.types.size(); ++k) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                const double p = scores.at(k, i, j);
                if (p > threshold) out.push_back({i, j, scores.types[k], p});
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const SpanCandidate& a, const SpanCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        if (a.end != b.end) return a.end < b.end;
        return a.type < b.type;
    });
    return out;
}

std::vector<SpanCandidate> decode_flat(const SpanScores& scores, double threshold) {
    std::vector<SpanCandidate> kept;
    std::vector<bool> taken(scores.n, false);
    for (const auto& c : candidates(scores, threshold)) {
        bool overlaps = false;
        for (std::size_t t = c.start; t <= c.end && !overlaps; ++t) overlaps = taken[t];
        if (overlaps) continue;
        for (std::size_t t = c.start; t <= c.end; ++t) taken[t] = true;
        kept.push_back(c);
    }
    return kept;
}

std::vector<SpanCandidate> decode_nested(const SpanScores& scores, double threshold) {
    return candidates(scores, threshold);
}

SpanModel::SpanModel(const encoder::EncoderConfig& encoder_config, std::size_t out_dim, num::Rng& init_rng)
    : encoder_(encoder_config, init_rng), out_dim_(out_dim) {
    if (out_dim == 0) throw std::invalid_argument("SpanModel: out_dim must be positive");
}

std::vector<TypeId> SpanModel::add_task_head(const std::vector<std::string>& new_types, num::Rng& rng) {
    std::unordered_set<std::string> fresh;
    for (const auto& name : new_types) {
        if (type_id(name) || !fresh.insert(name).second) {
            throw std::invalid_argument("add_task_head: entity type '" + name + "' is already registered");
        }
    }
    std::vector<TypeId> ids;
    for (const auto& name : new_types) {
        const TypeId id = heads_.size();
        heads_.push_back(make_head(id, name, encoder_.config().dim, out_dim_, rng));
        ids.push_back(id);
    }
    return ids;
}

SpanMatrixSet SpanModel::forward(std::span<const std::size_t> ids, bool train, num::Rng& rng) const {
    num::Tensor hidden = encoder_.encode(ids, train, rng);
    return span_logits(hidden, heads_);
}

SpanMatrixSet SpanModel::forward(std::span<const std::size_t> ids, std::span<const TypeId> types, bool train,
                                 num::Rng& rng) const {
    std::vector<TypeHead> selected;
    for (TypeId t : types) selected.push_back(heads_.at(t));
    num::Tensor hidden = encoder_.encode(ids, train, rng);
    return span_logits(hidden, selected);
}

std::optional<TypeId> SpanModel::type_id(const std::string& name) const {
    for (const auto& h : heads_) {
        if (h.name == name) return h.type;
    }
    return std::nullopt;
}

std::vector<TypeId> SpanModel::type_ids(const std::vector<std::string>& names) const {
    std::vector<TypeId> out;
    for (const auto& n : names) {
        auto id = type_id(n);
        if (!id) throw std::invalid_argument("unknown entity type '" + n + "'");
        out.push_back(*id);
    }
    return out;
}

num::NamedTensors SpanModel::named_parameters() const {
    num::NamedTensors out = encoder_.named_parameters();
    for (const auto& h : heads_) {
        const std::string p = "heads." + h.name + ".";
        out.emplace_back(p + "start_w", h.start_w);
        out.emplace_back(p + "start_b", h.start_b);
        out.emplace_back(p + "end_w", h.end_w);
        out.emplace_back(p + "end_b", h.end_b);
    }
    return out;
}

std::vector<num::Tensor> SpanModel::head_parameters() const {
    std::vector<num::Tensor> out;
    for (const auto& h : heads_) {
        out.insert(out.end(), {h.start_w, h.start_b, h.end_w, h.end_b});
    }
    return out;
}

GoldLabelSet make_gold(const Sentence& sentence, const SpanModel& model, std::span<const TypeId> types) {
    GoldLabelSet gold;
    for (TypeId t : types) gold.cells[t];
    for (const auto& s : sentence.spans) {
        auto id = model.type_id(s.type);
        if (!id || !contains(types, *id)) continue;
        gold.cells[*id].insert({s.start, s.end});
    }
    return gold;
}

std::uint64_t TeacherCache::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (TypeId t : old_types_) feed(&t, sizeof(t));
    for (const auto& d : labels_) {
        feed(&d.n, sizeof(d.n));
        for (const auto& [type, probs] : d.probs) {
            feed(&type, sizeof(type));
            feed(probs.data(), probs.size() * sizeof(double));
        }
    }
    return h;
}

TeacherCache teacher_predict(const SpanModel& teacher, std::span<const std::vector<std::size_t>> sentences,
                             std::span<const TypeId> old_types) {
    if (old_types.empty()) return {};
    num::NoGradGuard no_grad;
    num::Rng unused(0);
    std::vector<DistilledLabelSet> labels;
    labels.reserve(sentences.size());
    for (const auto& ids : sentences) {
        SpanMatrixSet m = teacher.forward(ids, old_types, false, unused);
        SpanScores p = probabilities(m);
        DistilledLabelSet d;
        d.n = p.n;
        for (std::size_t k = 0; k < p.types.size(); ++k) d.probs.emplace(p.types[k], std::move(p.probs[k]));
        labels.push_back(std::move(d));
    }
    return TeacherCache({old_types.begin(), old_types.end()}, std::move(labels));
}

}  // namespace clner::spankl
