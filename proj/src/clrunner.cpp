#include "clner/clrunner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "clner/baselines.hpp"
#include "clner/encoder.hpp"
#include "clner/errors.hpp"
#include "clner/num/ops.hpp"
#include "clner/num/optim.hpp"
#include "clner/spankl.hpp"

namespace clner::runner {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kToolVersion = "clner 1.0.0";

// ---- configuration ----

std::string to_string(ModelKind m) {
    switch (m) {
        case ModelKind::SpanKL: return "spankl";
        case ModelKind::AddNER: return "addner";
        case ModelKind::ExtendNER: return "extendner";
    }
    return "?";
}

std::string to_string(Decode d) { return d == Decode::Flat ? "flat" : "nested"; }

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::optional<std::uint64_t> parse_uint(const std::string& v) {
    std::uint64_t out = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) return std::nullopt;
    return out;
}

std::optional<double> parse_double(const std::string& v) {
    double out = 0.0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) return std::nullopt;
    return out;
}

std::optional<bool> parse_bool(const std::string& v) {
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    return std::nullopt;
}

std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::optional<std::string> set_field(RunConfig& c, const std::string& key, const std::string& value) {
    auto bad = [&](const char* expect) { return key + ": expected " + expect + ", got '" + value + "'"; };
    auto size_field = [&](std::size_t& f) -> std::optional<std::string> {
        auto v = parse_uint(value);
        if (!v) return bad("a non-negative integer");
        f = static_cast<std::size_t>(*v);
        return std::nullopt;
    };
    auto real_field = [&](double& f) -> std::optional<std::string> {
        auto v = parse_double(value);
        if (!v) return bad("a number");
        f = *v;
        return std::nullopt;
    };
    auto bool_field = [&](bool& f) -> std::optional<std::string> {
        auto v = parse_bool(value);
        if (!v) return bad("true or false");
        f = *v;
        return std::nullopt;
    };
    if (key == "model") {
        if (value == "spankl") c.model = ModelKind::SpanKL;
        else if (value == "addner") c.model = ModelKind::AddNER;
        else if (value == "extendner") c.model = ModelKind::ExtendNER;
        else return bad("spankl, addner or extendner");
        return std::nullopt;
    }
    if (key == "decode") {
        if (value == "flat") c.decode = Decode::Flat;
        else if (value == "nested") c.decode = Decode::Nested;
        else return bad("flat or nested");
        return std::nullopt;
    }
    if (key == "seed") {
        auto v = parse_uint(value);
        if (!v) return bad("a non-negative integer");
        c.seed = *v;
        return std::nullopt;
    }
    if (key == "epochs") return size_field(c.epochs);
    if (key == "batch_size") return size_field(c.batch_size);
    if (key == "dim") return size_field(c.dim);
    if (key == "heads") return size_field(c.heads);
    if (key == "out_dim") return size_field(c.out_dim);
    if (key == "max_len") return size_field(c.max_len);
    if (key == "warmup_steps") return size_field(c.warmup_steps);
    if (key == "lr_encoder") return real_field(c.lr_encoder);
    if (key == "lr_heads") return real_field(c.lr_heads);
    if (key == "weight_decay") return real_field(c.weight_decay);
    if (key == "alpha") return real_field(c.alpha);
    if (key == "beta") return real_field(c.beta);
    if (key == "threshold") return real_field(c.threshold);
    if (key == "dropout") return real_field(c.dropout);
    if (key == "pad_constant") return real_field(c.pad_constant);
    if (key == "freeze_encoder") return bool_field(c.freeze_encoder);
    if (key == "warmup_cosine") return bool_field(c.warmup_cosine);
    return "unknown key '" + key + "'";
}

std::vector<std::string> validate(const RunConfig& c) {
    std::vector<std::string> e;
    if (c.epochs < 1) e.push_back("epochs: must be at least 1");
    if (c.batch_size < 1) e.push_back("batch_size: must be at least 1");
    if (!(c.lr_encoder > 0.0)) e.push_back("lr_encoder: must be positive");
    if (!(c.lr_heads > 0.0)) e.push_back("lr_heads: must be positive");
    if (c.weight_decay < 0.0) e.push_back("weight_decay: must be non-negative");
    if (c.alpha < 0.0) e.push_back("alpha: must be non-negative");
    if (c.beta < 0.0) e.push_back("beta: must be non-negative");
    if (!(c.threshold > 0.0 && c.threshold < 1.0)) e.push_back("threshold: must lie in (0, 1)");
    if (c.dim < 1) e.push_back("dim: must be at least 1");
    if (c.heads < 1 || (c.dim >= 1 && c.dim % c.heads != 0)) e.push_back("heads: must be at least 1 and divide dim");
    if (c.out_dim < 1) e.push_back("out_dim: must be at least 1");
    if (c.max_len < 1) e.push_back("max_len: must be at least 1");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) e.push_back("dropout: must lie in [0, 1)");
    if (c.pad_constant < 0.0) e.push_back("pad_constant: must be non-negative");
    return e;
}

RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::vector<std::string> errors;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(lineno) + ": expected key = value");
            continue;
        }
        if (auto err = set_field(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1))))
            errors.push_back("line " + std::to_string(lineno) + ": " + *err);
    }
    for (auto& e : validate(c)) errors.push_back(e);
    if (!errors.empty()) {
        std::string msg = "invalid run configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return c;
}

RunConfig load_config(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return parse_config(s.str());
}

std::string render_config(const RunConfig& c) {
    std::ostringstream o;
    o << "model = " << to_string(c.model) << '\n'
      << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "lr_encoder = " << format_double(c.lr_encoder) << '\n'
      << "lr_heads = " << format_double(c.lr_heads) << '\n'
      << "weight_decay = " << format_double(c.weight_decay) << '\n'
      << "alpha = " << format_double(c.alpha) << '\n'
      << "beta = " << format_double(c.beta) << '\n'
      << "threshold = " << format_double(c.threshold) << '\n'
      << "dim = " << c.dim << '\n'
      << "heads = " << c.heads << '\n'
      << "out_dim = " << c.out_dim << '\n'
      << "max_len = " << c.max_len << '\n'
      << "dropout = " << format_double(c.dropout) << '\n'
      << "pad_constant = " << format_double(c.pad_constant) << '\n'
      << "freeze_encoder = " << (c.freeze_encoder ? "true" : "false") << '\n'
      << "warmup_cosine = " << (c.warmup_cosine ? "true" : "false") << '\n'
      << "warmup_steps = " << c.warmup_steps << '\n'
      << "decode = " << to_string(c.decode) << '\n'
      << "seed = " << c.seed << '\n';
    return o.str();
}

std::string config_hash(const RunConfig& c) { return hex64(fnv1a(render_config(c))); }

// ---- learners ----

namespace {

encoder::EncoderConfig encoder_config(const RunConfig& c, std::size_t vocab_size) {
    encoder::EncoderConfig e;
    e.vocab_size = vocab_size;
    e.dim = c.dim;
    e.heads = c.heads;
    e.max_len = c.max_len;
    e.dropout = c.dropout;
    return e;
}

class SpanLearner final : public Learner {
public:
    SpanLearner(const RunConfig& c, std::size_t vocab_size, num::Rng& rng)
        : config_(c), model_(encoder_config(c, vocab_size), c.out_dim, rng) {}

    std::uint64_t start_task(const std::vector<std::string>& types, const std::vector<std::vector<std::size_t>>& train_ids,
                             num::Rng& rng) override {
        old_.clear();
        for (const auto& h : model_.heads()) old_.push_back(h.type);
        grow(types, rng);
        cache_ = {};
        // With beta = 0 the distilled labels are never read.
        if (!old_.empty() && config_.beta > 0.0) cache_ = spankl::teacher_predict(model_, train_ids, old_);
        return cache_.empty() ? 0 : cache_.digest();
    }

    void grow(const std::vector<std::string>& types, num::Rng& rng) override { current_ = model_.add_task_head(types, rng); }

    num::Tensor loss(std::size_t index, const std::vector<std::size_t>& ids, const Sentence& gold, num::Rng& rng) override {
        const bool distill = !cache_.empty();
        std::vector<spankl::TypeId> types = current_;
        if (distill) types.insert(types.end(), old_.begin(), old_.end());
        auto matrices = model_.forward(ids, types, true, rng);
        auto bce = spankl::bce_loss(matrices, spankl::make_gold(gold, model_, current_), current_);
        num::Tensor kd;
        if (distill) kd = spankl::kd_loss(matrices, cache_.at(index), old_);
        return spankl::total_loss(bce, kd, config_.alpha, config_.beta);
    }

    std::vector<Span> predict(const std::vector<std::size_t>& ids) const override {
        num::NoGradGuard guard;
        num::Rng unused(0);
        auto scores = spankl::probabilities(model_.forward(ids, false, unused));
        auto found = config_.decode == Decode::Flat ? spankl::decode_flat(scores, config_.threshold)
                                                    : spankl::decode_nested(scores, config_.threshold);
        std::vector<Span> out;
        for (const auto& c : found) out.push_back({c.start, c.end, model_.type_name(c.type)});
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<std::string> learned_types() const override {
        std::vector<std::string> out;
        for (const auto& h : model_.heads()) out.push_back(h.name);
        return out;
    }
    num::NamedTensors named_parameters() const override { return model_.named_parameters(); }
    std::vector<num::Tensor> encoder_parameters() const override { return model_.encoder().parameters(); }
    std::vector<num::Tensor> head_parameters() const override { return model_.head_parameters(); }
    void set_encoder_trainable(bool t) override { model_.encoder().set_trainable(t); }

private:
    RunConfig config_;
    spankl::SpanModel model_;
    std::vector<spankl::TypeId> current_, old_;
    spankl::TeacherCache cache_;
};

class TagLearner final : public Learner {
public:
    TagLearner(const RunConfig& c, std::size_t vocab_size, num::Rng& rng)
        : config_(c),
          tagger_(encoder_config(c, vocab_size), c.model == ModelKind::AddNER ? baselines::Mode::AddNER : baselines::Mode::ExtendNER,
                  rng) {}

    std::uint64_t start_task(const std::vector<std::string>& types, const std::vector<std::vector<std::size_t>>& train_ids,
                             num::Rng& rng) override {
        cache_ = {};
        if (!tagger_.heads().empty()) {
            const std::size_t width = tagger_.heads().back().tags.size() + 2 * types.size();
            cache_ = baselines::tag_teacher_predict(tagger_, train_ids, width, config_.pad_constant);
        }
        grow(types, rng);
        return cache_.empty() ? 0 : cache_.digest();
    }

    void grow(const std::vector<std::string>& types, num::Rng& rng) override { tagger_.add_task(types, rng); }

    num::Tensor loss(std::size_t index, const std::vector<std::size_t>& ids, const Sentence& gold, num::Rng& rng) override {
        auto logits = tagger_.logits(ids, true, rng);
        auto tags = baselines::iob_encode(gold, tagger_.heads().back().tags);
        return baselines::tagger_loss(tagger_, logits, tags, cache_.empty() ? nullptr : &cache_.at(index));
    }

    std::vector<Span> predict(const std::vector<std::size_t>& ids) const override {
        num::NoGradGuard guard;
        num::Rng unused(0);
        auto out = baselines::predict_spans(tagger_, tagger_.logits(ids, false, unused));
        std::sort(out.begin(), out.end());
        return out;
    }

    std::vector<std::string> learned_types() const override { return tagger_.types(); }
    num::NamedTensors named_parameters() const override { return tagger_.named_parameters(); }
    std::vector<num::Tensor> encoder_parameters() const override { return tagger_.encoder().parameters(); }
    std::vector<num::Tensor> head_parameters() const override { return tagger_.head_parameters(); }
    void set_encoder_trainable(bool t) override { tagger_.encoder().set_trainable(t); }

private:
    RunConfig config_;
    baselines::Tagger tagger_;
    baselines::TagTeacherCache cache_;
};

}  // namespace

std::unique_ptr<Learner> make_learner(const RunConfig& config, std::size_t vocab_size, num::Rng& init_rng) {
    if (config.model == ModelKind::SpanKL) return std::make_unique<SpanLearner>(config, vocab_size, init_rng);
    return std::make_unique<TagLearner>(config, vocab_size, init_rng);
}

// ---- training ----

namespace {

// Random streams: one for initialization, and per step one for head growth
// and one for training, so a resumed run sees the same numbers.
num::Rng init_stream(const RunConfig& c) { return num::Rng(c.seed).fork(0); }
num::Rng grow_stream(const RunConfig& c, std::size_t step) { return num::Rng(c.seed).fork(100 + step); }
num::Rng train_stream(const RunConfig& c, std::size_t step) { return num::Rng(c.seed).fork(200 + step); }

struct StepData {
    std::vector<Sentence> train, dev, test;
    std::vector<std::string> new_types;   // heads added at this step
    std::vector<std::string> dev_types;   // scored during dev selection
    std::vector<std::string> test_types;  // scored on the test set
};

struct Prepared {
    encoder::Vocab vocab;
    std::map<std::string, std::string> coarse_of;
};

std::vector<std::string> coarse_units(const std::vector<std::string>& types, const std::map<std::string, std::string>& coarse_of) {
    std::vector<std::string> out;
    if (coarse_of.empty()) return out;
    for (const auto& t : types) {
        auto it = coarse_of.find(t);
        if (it == coarse_of.end()) throw DataError("type '" + t + "' has no coarse group");
        if (std::find(out.begin(), out.end(), it->second) == out.end()) out.push_back(it->second);
    }
    return out;
}

metrics::StepEval score(std::size_t step, const std::vector<Sentence>& gold, const std::vector<std::vector<Span>>& pred,
                        const std::vector<std::string>& types, const std::map<std::string, std::string>& coarse_of) {
    std::vector<metrics::LabeledSpan> g, p;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        for (const auto& sp : gold[s].spans) g.push_back({s, sp.start, sp.end, sp.type});
        for (const auto& sp : pred[s]) p.push_back({s, sp.start, sp.end, sp.type});
    }
    return metrics::evaluate_step(step, g, p, types, coarse_of, coarse_units(types, coarse_of));
}

std::vector<std::vector<std::size_t>> encode_all(const encoder::Vocab& vocab, const std::vector<Sentence>& sents,
                                                 std::size_t max_len, std::size_t step) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& s : sents) {
        if (s.tokens.empty() || s.tokens.size() > max_len)
            throw RunAbort(step, "sentence of " + std::to_string(s.tokens.size()) + " tokens does not fit max_len " +
                                     std::to_string(max_len));
        out.push_back(vocab.encode(s.tokens));
    }
    return out;
}

std::vector<std::vector<Span>> predict_all(const Learner& learner, const std::vector<std::vector<std::size_t>>& ids) {
    std::vector<std::vector<Span>> out;
    for (const auto& x : ids) out.push_back(learner.predict(x));
    return out;
}

Prepared prepare(const cldata::SynthesizedBenchmark& bench) {
    Prepared p;
    std::vector<Sentence> all;
    for (const auto& t : bench.tasks) all.insert(all.end(), t.train_full.begin(), t.train_full.end());
    p.vocab = encoder::Vocab::build(all);
    p.coarse_of = bench.coarse_of;
    return p;
}

// Trains the current task, keeps the epoch with the best dev score and
// leaves those parameters in the learner.
void train_task(Learner& learner, const RunConfig& c, const StepData& d, const std::vector<std::vector<std::size_t>>& train_ids,
                const Prepared& prep, std::size_t step, StepRecord& rec) {
    if (d.train.empty()) throw RunAbort(step, "task has no training sentences");
    const auto dev_ids = encode_all(prep.vocab, d.dev, c.max_len, step);
    num::Rng rng = train_stream(c, step);

    learner.set_encoder_trainable(!c.freeze_encoder);
    num::AdamW opt({0.9, 0.999, 1e-8, c.weight_decay});
    if (!c.freeze_encoder) opt.add_group(learner.encoder_parameters(), c.lr_encoder);
    opt.add_group(learner.head_parameters(), c.lr_heads);

    const std::size_t n = d.train.size();
    const std::size_t batches = (n + c.batch_size - 1) / c.batch_size;
    const auto total_updates = static_cast<std::int64_t>(batches * c.epochs);
    std::int64_t update = 0;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    auto params = learner.named_parameters();
    std::vector<std::vector<double>> best;
    double best_score = -1.0;
    for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b = 0; b < n; b += c.batch_size) {
            const std::size_t end = std::min(n, b + c.batch_size);
            opt.zero_grad();
            const double w = 1.0 / static_cast<double>(end - b);
            for (std::size_t k = b; k < end; ++k) {
                const std::size_t i = order[k];
                num::scale(learner.loss(i, train_ids[i], d.train[i], rng), w).backward();
            }
            if (c.warmup_cosine)
                opt.set_lr_multiplier(num::warmup_cosine(update, static_cast<std::int64_t>(c.warmup_steps), total_updates));
            opt.step();
            ++update;
        }
        double dev_score = 0.0;
        if (!d.dev.empty()) dev_score = score(step, d.dev, predict_all(learner, dev_ids), d.dev_types, prep.coarse_of).macro;
        rec.dev_curve.push_back(dev_score);
        // Ties go to the later epoch; with an empty dev set every epoch ties.
        const bool better = dev_score >= best_score;
        if (better) {
            best_score = dev_score;
            rec.best_epoch = epoch;
            best.clear();
            for (const auto& [name, t] : params) best.emplace_back(t.values().begin(), t.values().end());
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto dst = params[k].second.mutable_values();
        std::copy(best[k].begin(), best[k].end(), dst.begin());
    }
    opt.zero_grad();
}

std::string step_dir_name(std::size_t step) {
    std::string n = std::to_string(step);
    return "step_" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
}

void write_step_files(const fs::path& dir, const StepRecord& rec, const Learner& learner) {
    const fs::path sd = dir / step_dir_name(rec.step);
    fs::create_directories(sd);
    num::save_checkpoint(sd / "model.ckpt", learner.named_parameters());
    write_text(sd / "teacher_digest.txt", hex64(rec.teacher_digest) + "\n");
    std::string preds;
    for (std::size_t s = 0; s < rec.predictions.size(); ++s) {
        json spans = json::array();
        for (const auto& sp : rec.predictions[s]) spans.push_back(json::array({sp.start, sp.end, sp.type}));
        preds += json{{"sentence", s}, {"spans", spans}}.dump() + "\n";
    }
    write_text(sd / "predictions.jsonl", preds);
}

void write_run_header(const fs::path& dir, const RunConfig& c, const cldata::SynthesizedBenchmark& bench, const Prepared& prep,
                      const std::string& mode, const RunOptions& o) {
    fs::create_directories(dir);
    write_text(dir / "config.txt", render_config(c));
    prep.vocab.save(dir / "vocab.txt");
    json m;
    m["tool_version"] = kToolVersion;
    m["command"] = o.command;
    m["mode"] = mode;
    m["model"] = to_string(c.model);
    m["config_hash"] = config_hash(c);
    m["config"] = render_config(c);
    m["inputs"] = json::array({o.benchmark_path});
    m["benchmark"] = benchmark_id(bench);
    m["seeds"] = json::array({c.seed});
    if (!o.timestamp.empty()) m["created"] = o.timestamp;
    m["dev_selection"] = mode == "cl" ? "best epoch by macro-F1 on the step's own dev set (current task types only)"
                                      : "best epoch by macro-F1 on the union dev set (all types learned so far)";
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p, std::ios::binary);
    for (std::string line; std::getline(in, line);) {
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

}  // namespace

std::string benchmark_id(const cldata::SynthesizedBenchmark& b) {
    std::string id = cldata::to_string(b.kind) + ":" + cldata::to_string(b.setup) + ":p" + std::to_string(b.sequence.permutation) +
                     ":s" + std::to_string(b.seed) + ":";
    for (std::size_t l = 0; l < b.sequence.tasks.size(); ++l) {
        if (l) id += "|";
        for (std::size_t k = 0; k < b.sequence.tasks[l].types.size(); ++k) id += (k ? "," : "") + b.sequence.tasks[l].types[k];
    }
    return id;
}

std::string metrics_line(const StepRecord& r, const RunConfig& c, const cldata::SynthesizedBenchmark& bench) {
    json units = json::object();
    for (const auto& u : r.eval.units) {
        metrics::TypeCounts tc;
        if (auto it = r.eval.counts.find(u); it != r.eval.counts.end()) tc = it->second;
        units[u] = {{"tp", tc.tp}, {"fp", tc.fp}, {"fn", tc.fn}, {"f1", tc.f1()}};
    }
    json j = {{"mode", r.mode},
              {"model", to_string(c.model)},
              {"config_hash", config_hash(c)},
              {"benchmark", benchmark_id(bench)},
              {"setup", cldata::to_string(bench.setup)},
              {"permutation", bench.sequence.permutation},
              {"seed", c.seed},
              {"step", r.step},
              {"macro_f1", r.eval.macro},
              {"units", units},
              {"unit_order", r.eval.units},
              {"dev_curve", r.dev_curve},
              {"best_epoch", r.best_epoch},
              {"teacher_digest", hex64(r.teacher_digest)}};
    return j.dump();
}

std::vector<MetricsRow> read_metrics(const fs::path& run_dir) {
    const fs::path p = run_dir / "metrics.jsonl";
    if (!fs::exists(p)) throw DataError("no metrics.jsonl in " + run_dir.string());
    std::vector<MetricsRow> out;
    for (const auto& line : read_lines(p)) {
        try {
            auto j = json::parse(line);
            MetricsRow r;
            r.mode = j.at("mode");
            r.model = j.at("model");
            r.config_hash = j.at("config_hash");
            r.benchmark = j.at("benchmark");
            r.setup = j.at("setup");
            r.permutation = j.at("permutation");
            r.seed = j.at("seed");
            r.step = j.at("step");
            r.macro_f1 = j.at("macro_f1");
            for (const auto& u : j.at("unit_order")) {
                const std::string name = u.get<std::string>();
                const auto& rec = j.at("units").at(name);
                r.unit_order.push_back(name);
                r.unit_f1[name] = rec.at("f1");
                r.unit_counts[name] = {rec.at("tp").get<long>(), rec.at("fp").get<long>(), rec.at("fn").get<long>()};
            }
            out.push_back(std::move(r));
        } catch (const json::exception& e) {
            throw DataError("malformed metrics line in " + p.string() + ": " + e.what());
        }
    }
    return out;
}

RunResult run_cl(const RunConfig& c, const cldata::SynthesizedBenchmark& bench, const RunOptions& o) {
    if (auto errs = validate(c); !errs.empty()) throw ConfigError("invalid run configuration: " + errs.front());
    const Prepared prep = prepare(bench);
    const std::size_t L = bench.tasks.size();
    const std::size_t last = o.stop_after ? std::min(o.stop_after, L) : L;
    const bool writing = !o.out_dir.empty();

    num::Rng init = init_stream(c);
    auto learner = make_learner(c, prep.vocab.size(), init);

    // Completed steps from an earlier run in the same directory.
    std::size_t done = 0;
    std::vector<std::string> kept_lines;
    if (writing && o.resume) {
        for (const auto& line : read_lines(o.out_dir / "metrics.jsonl")) {
            auto j = json::parse(line, nullptr, false);
            if (j.is_discarded() || j.value("mode", "") != "cl" || j.value("step", std::size_t{0}) != done + 1) break;
            if (!fs::exists(o.out_dir / step_dir_name(done + 1) / "model.ckpt")) break;
            kept_lines.push_back(line);
            ++done;
        }
        done = std::min(done, last);
        kept_lines.resize(done);
    }
    if (writing) {
        write_run_header(o.out_dir, c, bench, prep, "cl", o);
        std::string text;
        for (const auto& l : kept_lines) text += l + "\n";
        write_text(o.out_dir / "metrics.jsonl", text);
    }

    RunResult result;
    for (std::size_t step = 1; step <= last; ++step) {
        const auto& task = bench.tasks[step - 1];
        const auto& types = bench.sequence.tasks[step - 1].types;
        num::Rng grow_rng = grow_stream(c, step);
        if (step <= done) {
            learner->grow(types, grow_rng);
            if (step == done) {
                try {
                    num::restore_parameters(num::load_checkpoint(o.out_dir / step_dir_name(step) / "model.ckpt"),
                                            learner->named_parameters());
                } catch (const std::exception& e) {
                    throw RunAbort(step, std::string("checkpoint load failed: ") + e.what());
                }
            }
            continue;
        }
        StepData d;
        d.train = task.train;
        d.dev = task.dev;
        d.test = task.test;
        d.new_types = types;
        d.dev_types = types;
        d.test_types = bench.sequence.learned_through(step);

        StepRecord rec;
        rec.mode = "cl";
        rec.step = step;
        const auto train_ids = encode_all(prep.vocab, d.train, c.max_len, step);
        rec.teacher_digest = learner->start_task(types, train_ids, grow_rng);
        train_task(*learner, c, d, train_ids, prep, step, rec);
        rec.predictions = predict_all(*learner, encode_all(prep.vocab, d.test, c.max_len, step));
        rec.eval = score(step, d.test, rec.predictions, d.test_types, prep.coarse_of);
        if (writing) {
            write_step_files(o.out_dir, rec, *learner);
            std::ofstream(o.out_dir / "metrics.jsonl", std::ios::binary | std::ios::app) << metrics_line(rec, c, bench) << "\n";
        }
        result.steps.push_back(std::move(rec));
    }
    return result;
}

std::vector<Sentence> noncl_union(const cldata::SynthesizedBenchmark& bench, std::size_t step, bool dev) {
    const auto seen_v = bench.sequence.learned_through(step);
    const std::set<std::string> seen(seen_v.begin(), seen_v.end());
    std::vector<Sentence> out;
    std::set<std::size_t> taken;
    for (std::size_t l = 0; l < step && l < bench.tasks.size(); ++l) {
        const auto& t = bench.tasks[l];
        const auto& full = dev ? t.dev_full : t.train_full;
        const auto& source = dev ? t.dev_source : t.train_source;
        for (std::size_t k = 0; k < full.size(); ++k) {
            if (!source.empty() && !taken.insert(source[k]).second) continue;
            out.push_back(cldata::erase_annotations(full[k], seen));
        }
    }
    return out;
}

RunResult run_noncl(const RunConfig& c, const cldata::SynthesizedBenchmark& bench, const RunOptions& o) {
    if (auto errs = validate(c); !errs.empty()) throw ConfigError("invalid run configuration: " + errs.front());
    const Prepared prep = prepare(bench);
    const std::size_t L = bench.tasks.size();
    const bool writing = !o.out_dir.empty();
    if (writing) {
        write_run_header(o.out_dir, c, bench, prep, "noncl", o);
        write_text(o.out_dir / "metrics.jsonl", "");
    }

    RunResult result;
    for (std::size_t step = 1; step <= L; ++step) {
        if (!o.only_steps.empty() && std::find(o.only_steps.begin(), o.only_steps.end(), step) == o.only_steps.end()) continue;
        const auto seen_v = bench.sequence.learned_through(step);
        StepData d;
        d.train = noncl_union(bench, step, false);
        d.dev = noncl_union(bench, step, true);
        d.test = bench.tasks[step - 1].test;
        d.new_types = seen_v;
        d.dev_types = seen_v;
        d.test_types = seen_v;

        num::Rng init = init_stream(c);
        auto learner = make_learner(c, prep.vocab.size(), init);
        num::Rng grow_rng = grow_stream(c, step);
        StepRecord rec;
        rec.mode = "noncl";
        rec.step = step;
        const auto train_ids = encode_all(prep.vocab, d.train, c.max_len, step);
        rec.teacher_digest = learner->start_task(seen_v, train_ids, grow_rng);
        train_task(*learner, c, d, train_ids, prep, step, rec);
        rec.predictions = predict_all(*learner, encode_all(prep.vocab, d.test, c.max_len, step));
        rec.eval = score(step, d.test, rec.predictions, d.test_types, prep.coarse_of);
        if (writing) {
            write_step_files(o.out_dir, rec, *learner);
            std::ofstream(o.out_dir / "metrics.jsonl", std::ios::binary | std::ios::app) << metrics_line(rec, c, bench) << "\n";
        }
        result.steps.push_back(std::move(rec));
    }
    return result;
}

// ---- sweeps ----

double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

SweepResult aggregate(std::vector<SweepRun> runs) {
    SweepResult out;
    std::size_t steps = 0;
    std::set<std::uint64_t> seeds;
    for (const auto& r : runs) {
        for (const auto& s : r.cl.steps) steps = std::max(steps, s.step);
        seeds.insert(r.seed);
    }
    for (std::size_t step = 1; step <= steps; ++step) {
        SweepStep agg;
        agg.step = step;
        std::vector<double> cl_meds, ncl_meds, deltas;
        for (auto seed : seeds) {
            double cl = 0.0, ncl = 0.0;
            std::size_t n_cl = 0, n_ncl = 0, runs_for_seed = 0;
            for (const auto& r : runs) {
                if (r.seed != seed) continue;
                ++runs_for_seed;
                for (const auto& s : r.cl.steps)
                    if (s.step == step) cl += s.eval.macro, ++n_cl;
                for (const auto& s : r.noncl.steps)
                    if (s.step == step) ncl += s.eval.macro, ++n_ncl;
            }
            if (n_cl == 0) continue;
            agg.cl_by_seed[seed] = cl / static_cast<double>(n_cl);
            cl_meds.push_back(agg.cl_by_seed[seed]);
            // A reference mean needs every permutation of this seed.
            if (n_ncl == runs_for_seed && n_cl == runs_for_seed) {
                agg.noncl_by_seed[seed] = ncl / static_cast<double>(n_ncl);
                ncl_meds.push_back(agg.noncl_by_seed[seed]);
                deltas.push_back(metrics::gap(agg.cl_by_seed[seed], agg.noncl_by_seed[seed]));
            }
        }
        if (cl_meds.empty()) continue;
        agg.cl_median = median(cl_meds);
        if (!ncl_meds.empty() && ncl_meds.size() == cl_meds.size()) {
            agg.noncl_median = median(ncl_meds);
            agg.delta_median = median(deltas);
        }
        out.steps.push_back(std::move(agg));
    }
    out.runs = std::move(runs);
    return out;
}

fs::path sweep_run_dir(const fs::path& root, std::size_t permutation, std::uint64_t seed) {
    return root / ("p" + std::to_string(permutation) + "_s" + std::to_string(seed));
}

SweepResult sweep(const RunConfig& config, const std::vector<cldata::SynthesizedBenchmark>& benches,
                  const std::vector<std::uint64_t>& seeds, const SweepOptions& options) {
    if (benches.empty()) throw ConfigError("a sweep needs at least one permutation");
    if (seeds.empty()) throw ConfigError("a sweep needs at least one seed");
    std::vector<SweepRun> runs;
    for (const auto& b : benches)
        for (auto s : seeds) runs.push_back({b.sequence.permutation, s, {}, {}});

    auto work = [&](std::size_t i) {
        const auto& bench = benches[i / seeds.size()];
        RunConfig c = config;
        c.seed = runs[i].seed;
        const fs::path dir = options.out_dir.empty() ? fs::path{} : sweep_run_dir(options.out_dir, runs[i].permutation, runs[i].seed);
        RunOptions oc;
        oc.command = options.command;
        oc.timestamp = options.timestamp;
        if (!dir.empty()) oc.out_dir = dir / "cl";
        runs[i].cl = run_cl(c, bench, oc);
        if (options.with_noncl) {
            RunOptions o;
            o.command = options.command;
            o.timestamp = options.timestamp;
            if (!dir.empty()) o.out_dir = dir / "noncl";
            if (options.noncl_final_only) o.only_steps = {bench.tasks.size()};
            runs[i].noncl = run_noncl(c, bench, o);
        }
    };

    const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, runs.size()));
    if (jobs == 1) {
        for (std::size_t i = 0; i < runs.size(); ++i) work(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < jobs; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i; (i = next.fetch_add(1)) < runs.size();) {
                    try {
                        work(i);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(failure_mutex);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        if (failure) std::rethrow_exception(failure);
    }
    return aggregate(std::move(runs));
}

}  // namespace clner::runner
