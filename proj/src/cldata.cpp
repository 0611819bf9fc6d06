#include "clner/cldata.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "clner/errors.hpp"
#include "clner/num/random.hpp"

namespace clner::cldata {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (true) {
        auto tab = line.find('\t', pos);
        out.push_back(line.substr(pos, tab - pos));
        if (tab == std::string::npos) break;
        pos = tab + 1;
    }
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

bool blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// Turns one tag column of a sentence into spans.
std::vector<Span> decode_layer(const std::vector<std::string>& tags, std::size_t& repaired) {
    std::vector<Span> out;
    bool open = false;
    Span cur;
    auto close = [&] {
        if (open) out.push_back(cur);
        open = false;
    };
    auto start = [&](std::size_t i, const std::string& type) {
        close();
        cur = {i, i, type};
        open = true;
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& t = tags[i];
        if (t == "O") {
            close();
        } else if (t.rfind("B-", 0) == 0) {
            start(i, t.substr(2));
        } else if (t.rfind("I-", 0) == 0) {
            const std::string type = t.substr(2);
            if (open && cur.type == type) {
                cur.end = i;
            } else {
                start(i, type);
                ++repaired;
            }
        } else if (open && cur.type == t) {
            cur.end = i;
        } else {
            start(i, t);
        }
    }
    close();
    return out;
}

void check_token(const std::string& tok) {
    if (tok.empty() || tok.find_first_of("\t\n\r") != std::string::npos)
        throw DataError("token cannot be written to a column file: '" + tok + "'");
}

// Greedy interval colouring: longer spans first at equal starts, so an outer
// span lands in an earlier column than the spans nested in it.
std::vector<std::vector<Span>> pack_layers(std::vector<Span> spans) {
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) {
        if (a.start != b.start) return a.start < b.start;
        if (a.end != b.end) return a.end > b.end;
        return a.type < b.type;
    });
    std::vector<std::vector<Span>> layers;
    for (const auto& s : spans) {
        bool placed = false;
        for (auto& layer : layers) {
            if (layer.back().end < s.start) {
                layer.push_back(s);
                placed = true;
                break;
            }
        }
        if (!placed) layers.push_back({s});
    }
    return layers;
}

std::vector<std::size_t> chunk_sizes(std::size_t n, std::size_t parts) {
    std::vector<std::size_t> out(parts, n / parts);
    for (std::size_t i = 0; i < n % parts; ++i) out[i]++;
    return out;
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

}  // namespace

// ---- column files ----

void canonicalize(Sentence& s) {
    std::sort(s.spans.begin(), s.spans.end());
    s.spans.erase(std::unique(s.spans.begin(), s.spans.end()), s.spans.end());
}

Corpus make_corpus(std::vector<Sentence> sentences) {
    Corpus c;
    std::set<std::string> types;
    for (auto& s : sentences) {
        canonicalize(s);
        for (const auto& sp : s.spans) {
            if (sp.start > sp.end || sp.end >= s.tokens.size())
                throw DataError("span (" + std::to_string(sp.start) + "," + std::to_string(sp.end) + ") outside a sentence of " +
                                std::to_string(s.tokens.size()) + " tokens");
            types.insert(sp.type);
        }
    }
    c.sentences = std::move(sentences);
    c.types.assign(types.begin(), types.end());
    const bool grouped = !types.empty() && std::all_of(types.begin(), types.end(), [](const std::string& t) {
        auto dash = t.find('-');
        return dash != std::string::npos && dash > 0;
    });
    if (grouped) {
        for (const auto& t : types) c.coarse_of[t] = t.substr(0, t.find('-'));
    }
    return c;
}

ParseResult parse_corpus(std::istream& in, const std::string& source_name) {
    ParseResult result;
    std::vector<Sentence> sentences;
    std::vector<std::string> tokens;
    std::vector<std::vector<std::string>> layers;
    std::size_t columns = 0;

    auto flush = [&] {
        if (tokens.empty()) return;
        Sentence s;
        s.tokens = tokens;
        for (const auto& tags : layers) {
            auto spans = decode_layer(tags, result.repaired);
            s.spans.insert(s.spans.end(), spans.begin(), spans.end());
        }
        sentences.push_back(std::move(s));
        tokens.clear();
        for (auto& l : layers) l.clear();
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (blank(line)) {
            flush();
            continue;
        }
        auto fields = split_tabs(line);
        if (columns == 0) {
            if (fields.size() < 2)
                throw DataError(source_name + ":" + std::to_string(lineno) + ": expected token<TAB>tag, got one column");
            columns = fields.size();
            layers.assign(columns - 1, {});
        } else if (fields.size() != columns) {
            throw DataError(source_name + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                            " columns, found " + std::to_string(fields.size()));
        }
        if (fields[0].empty()) throw DataError(source_name + ":" + std::to_string(lineno) + ": empty token");
        tokens.push_back(fields[0]);
        for (std::size_t c = 1; c < columns; ++c) {
            if (fields[c].empty()) throw DataError(source_name + ":" + std::to_string(lineno) + ": empty tag");
            layers[c - 1].push_back(fields[c]);
        }
    }
    if (in.bad()) throw DataError(source_name + ": read error");
    flush();
    result.corpus = make_corpus(std::move(sentences));
    return result;
}

ParseResult parse_corpus(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open corpus file " + path.string());
    return parse_corpus(in, path.string());
}

void write_corpus(std::ostream& out, const std::vector<Sentence>& sentences) {
    std::vector<std::vector<std::vector<Span>>> packed;
    std::size_t columns = 1;
    for (const auto& s : sentences) {
        for (const auto& t : s.tokens) check_token(t);
        for (const auto& sp : s.spans) {
            if (sp.start > sp.end || sp.end >= s.tokens.size()) throw DataError("span outside its sentence");
            check_token(sp.type);
        }
        packed.push_back(pack_layers(s.spans));
        columns = std::max(columns, packed.back().size());
    }
    for (std::size_t si = 0; si < sentences.size(); ++si) {
        const auto& s = sentences[si];
        std::vector<std::vector<std::string>> tags(columns, std::vector<std::string>(s.tokens.size(), "O"));
        for (std::size_t l = 0; l < packed[si].size(); ++l) {
            for (const auto& sp : packed[si][l]) {
                tags[l][sp.start] = "B-" + sp.type;
                for (std::size_t i = sp.start + 1; i <= sp.end; ++i) tags[l][i] = "I-" + sp.type;
            }
        }
        for (std::size_t i = 0; i < s.tokens.size(); ++i) {
            out << s.tokens[i];
            for (std::size_t l = 0; l < columns; ++l) out << '\t' << tags[l][i];
            out << '\n';
        }
        out << '\n';
    }
}

void write_corpus(const fs::path& path, const std::vector<Sentence>& sentences) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_corpus(out, sentences);
    if (!out) throw DataError("write failed for " + path.string());
}

Sentence erase_annotations(const Sentence& s, const std::set<std::string>& allowed) {
    Sentence out;
    out.tokens = s.tokens;
    for (const auto& sp : s.spans) {
        if (allowed.count(sp.type)) out.spans.push_back(sp);
    }
    return out;
}

bool mentions_any(const Sentence& s, const std::set<std::string>& types) {
    return std::any_of(s.spans.begin(), s.spans.end(), [&](const Span& sp) { return types.count(sp.type) > 0; });
}

// ---- toy corpora ----

ToySpec default_toy_spec() {
    ToySpec spec;
    spec.types = {
        {"PER",
         {"John Smith", "Maria Garcia", "Wei Chen", "Ahmed Khan", "Olga Petrova", "David Brown", "Yuki Tanaka", "Peter",
          "Laura", "Carlos Diaz", "Fatima Ali", "Tom Becker", "Nina Rossi", "Kofi Mensah"}},
        {"ORG",
         {"Acme Corp", "Globex", "Initech", "Red Cross", "Umbrella Group", "Stark Industries", "Hooli", "Vandelay Industries",
          "World Bank", "Blue Harbor Labs", "Northwind", "Tyrell Corporation"}},
        {"GPE",
         {"Paris", "Berlin", "Tokyo", "Canada", "Brazil", "New York", "Kenya", "Lima", "Oslo", "India", "Texas", "Madrid",
          "Cairo", "Seoul"}},
        {"DATE",
         {"Monday", "last year", "June 5", "2019", "next week", "March", "Friday", "yesterday", "the 1990s", "this spring",
          "October 12", "2021"}},
        {"CARD", {"three", "42", "seven", "two hundred", "12", "five", "nine", "forty", "eighteen", "six", "350", "two"}},
        {"NORP",
         {"French", "Buddhist", "Canadian", "Republican", "Japanese", "Muslim", "Brazilian", "Democrat", "Kenyan", "German",
          "Catholic", "Korean"}},
    };
    spec.templates = {
        "{PER} works for {ORG} in {GPE} .",
        "{PER} visited {GPE} on {DATE} .",
        "{ORG} hired {CARD} engineers last quarter .",
        "The {NORP} delegation met {PER} in {GPE} .",
        "{CARD} {NORP} students joined {ORG} .",
        "On {DATE} , {ORG} opened an office in {GPE} .",
        "{PER} said the deal was worth {CARD} million dollars .",
        "{PER} and {PER} founded {ORG} .",
        "Officials in {GPE} expect {CARD} new flights by {DATE} .",
        "The {NORP} minister spoke with {PER} .",
        "{ORG} reported strong results for {DATE} .",
        "{PER} moved to {GPE} .",
        "Many {NORP} voters support {PER} .",
        "{ORG} sold {CARD} units in {GPE} .",
        "The report was published on {DATE} .",
        "About {CARD} people attended the festival .",
        "{GPE} signed a trade pact with {GPE} .",
        "{PER} , a {NORP} writer , lives in {GPE} .",
        "The museum in {GPE} reopened on {DATE} .",
        "{ORG} shares fell {CARD} percent on {DATE} .",
        "{NORP} groups in {GPE} welcomed the plan .",
        "The weather was pleasant all afternoon .",
        "Nobody expected the meeting to end so quickly .",
        "Prices kept rising despite the warnings .",
        "She closed the window and went to sleep .",
        "The committee postponed its decision .",
        "It is unclear what happens next .",
    };
    spec.nest_rules = {
        {"ORG", "University of {GPE}"},
        {"ORG", "{GPE} National Bank"},
        {"ORG", "{NORP} Heritage Society"},
        {"DATE", "{CARD} years ago"},
    };
    spec.sentences = 500;
    spec.nesting_probability = 0.0;
    return spec;
}

namespace {

struct Piece {
    bool slot = false;
    std::string text;  // word, or type name for slots
};

std::vector<Piece> parse_pattern(const std::string& pattern, const std::map<std::string, const ToyType*>& types) {
    std::vector<Piece> out;
    for (const auto& w : split_words(pattern)) {
        if (w.size() > 2 && w.front() == '{' && w.back() == '}') {
            std::string name = w.substr(1, w.size() - 2);
            if (!types.count(name)) throw ConfigError("toy template refers to unknown type '" + name + "'");
            out.push_back({true, name});
        } else {
            out.push_back({false, w});
        }
    }
    return out;
}

}  // namespace

Corpus generate_toy_corpus(const ToySpec& spec, std::uint64_t seed) {
    if (spec.types.empty()) throw ConfigError("toy spec has no types");
    if (spec.templates.empty()) throw ConfigError("toy spec has no templates");
    if (!(spec.nesting_probability >= 0.0 && spec.nesting_probability <= 1.0))
        throw ConfigError("toy nesting probability must lie in [0, 1]");
    std::map<std::string, const ToyType*> types;
    std::map<std::string, std::vector<std::vector<std::string>>> lexicon;
    for (const auto& t : spec.types) {
        if (t.lexicon.empty()) throw ConfigError("toy type '" + t.name + "' has an empty lexicon");
        if (!types.emplace(t.name, &t).second) throw ConfigError("toy type '" + t.name + "' listed twice");
        for (const auto& entry : t.lexicon) {
            auto words = split_words(entry);
            if (words.empty()) throw ConfigError("toy type '" + t.name + "' has a blank lexicon entry");
            lexicon[t.name].push_back(words);
        }
    }
    std::vector<std::vector<Piece>> templates;
    for (const auto& t : spec.templates) templates.push_back(parse_pattern(t, types));
    std::map<std::string, std::vector<std::vector<Piece>>> nests;
    for (const auto& r : spec.nest_rules) {
        if (!types.count(r.outer)) throw ConfigError("nest rule for unknown type '" + r.outer + "'");
        auto pieces = parse_pattern(r.pattern, types);
        if (std::none_of(pieces.begin(), pieces.end(), [](const Piece& p) { return p.slot; }))
            throw ConfigError("nest rule '" + r.pattern + "' has no inner slot");
        nests[r.outer].push_back(std::move(pieces));
    }

    num::Rng rng(seed);
    std::vector<Sentence> sentences;
    for (std::size_t n = 0; n < spec.sentences; ++n) {
        Sentence s;
        auto fill = [&](const std::string& type) {
            const auto& words = lexicon[type][rng.below(lexicon[type].size())];
            const std::size_t begin = s.tokens.size();
            s.tokens.insert(s.tokens.end(), words.begin(), words.end());
            s.spans.push_back({begin, s.tokens.size() - 1, type});
        };
        for (const auto& piece : templates[rng.below(templates.size())]) {
            if (!piece.slot) {
                s.tokens.push_back(piece.text);
                continue;
            }
            auto it = nests.find(piece.text);
            if (it != nests.end() && spec.nesting_probability > 0.0 && rng.bernoulli(spec.nesting_probability)) {
                const auto& rule = it->second[rng.below(it->second.size())];
                const std::size_t begin = s.tokens.size();
                for (const auto& inner : rule) {
                    if (inner.slot)
                        fill(inner.text);
                    else
                        s.tokens.push_back(inner.text);
                }
                s.spans.push_back({begin, s.tokens.size() - 1, piece.text});
            } else {
                fill(piece.text);
            }
        }
        sentences.push_back(std::move(s));
    }
    Corpus c = make_corpus(std::move(sentences));
    // Inventory is the declared type list, even for types that were never drawn.
    c.types.clear();
    for (const auto& t : spec.types) c.types.push_back(t.name);
    std::sort(c.types.begin(), c.types.end());
    c.coarse_of.clear();
    return c;
}

SplitCorpus split_corpus(const Corpus& corpus, double train_fraction, double dev_fraction, std::uint64_t seed) {
    if (train_fraction <= 0.0 || dev_fraction < 0.0 || train_fraction + dev_fraction > 1.0)
        throw ConfigError("split fractions must be positive and sum to at most 1");
    std::vector<std::size_t> idx(corpus.sentences.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    num::Rng rng(seed);
    rng.shuffle(idx);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(n * train_fraction + 0.5);
    const auto n_dev = std::min(idx.size() - n_train, static_cast<std::size_t>(n * dev_fraction + 0.5));
    SplitCorpus out;
    for (Corpus* c : {&out.train, &out.dev, &out.test}) {
        c->types = corpus.types;
        c->coarse_of = corpus.coarse_of;
    }
    for (std::size_t i = 0; i < idx.size(); ++i) {
        Corpus& dst = i < n_train ? out.train : i < n_train + n_dev ? out.dev : out.test;
        dst.sentences.push_back(corpus.sentences[idx[i]]);
    }
    return out;
}

// ---- task sequences ----

DatasetKind parse_kind(const std::string& name) {
    const auto n = lower(name);
    if (n == "ontonotes") return DatasetKind::OntoNotes;
    if (n == "fewnerd" || n == "few-nerd") return DatasetKind::FewNerd;
    if (n == "toy") return DatasetKind::Toy;
    throw ConfigError("unknown dataset kind '" + name + "' (expected ontonotes, fewnerd or toy)");
}

std::string to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::OntoNotes: return "ontonotes";
        case DatasetKind::FewNerd: return "fewnerd";
        case DatasetKind::Toy: return "toy";
    }
    return "?";
}

std::vector<std::string> TaskSequence::learned_through(std::size_t step) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < step && i < tasks.size(); ++i) out.insert(out.end(), tasks[i].types.begin(), tasks[i].types.end());
    return out;
}

std::vector<std::string> TaskSequence::all_types() const { return learned_through(tasks.size()); }

const std::vector<std::vector<std::string>>& ontonotes_orders() {
    static const std::vector<std::vector<std::string>> orders = {
        {"ORG", "PER", "GPE", "DATE", "CARD", "NORP"}, {"DATE", "NORP", "PER", "CARD", "ORG", "GPE"},
        {"GPE", "CARD", "ORG", "NORP", "DATE", "PER"}, {"NORP", "ORG", "DATE", "PER", "GPE", "CARD"},
        {"CARD", "GPE", "NORP", "ORG", "PER", "DATE"}, {"PER", "DATE", "CARD", "GPE", "NORP", "ORG"},
    };
    return orders;
}

const std::vector<std::vector<std::string>>& fewnerd_orders() {
    static const std::vector<std::vector<std::string>> orders = [] {
        const std::map<std::string, std::string> coarse = {
            {"LOC", "location"}, {"PER", "person"},   {"ORG", "organization"}, {"OTH", "other"},
            {"PROD", "product"}, {"BUID", "building"}, {"ART", "art"},          {"EVET", "event"},
        };
        const std::vector<std::vector<std::string>> abbrev = {
            {"LOC", "PER", "ORG", "OTH", "PROD", "BUID", "ART", "EVET"},
            {"ORG", "PROD", "ART", "EVET", "OTH", "PER", "LOC", "BUID"},
            {"PROD", "EVET", "OTH", "PER", "ART", "LOC", "BUID", "ORG"},
            {"BUID", "OTH", "PROD", "PER", "ORG", "LOC", "ART", "EVET"},
        };
        std::vector<std::vector<std::string>> out;
        for (const auto& order : abbrev) {
            std::vector<std::string> names;
            for (const auto& a : order) names.push_back(coarse.at(a));
            out.push_back(names);
        }
        return out;
    }();
    return orders;
}

std::vector<TaskSequence> permutations(DatasetKind kind, const Corpus& inventory, std::size_t tasks, std::size_t count,
                                       std::uint64_t seed) {
    std::vector<TaskSequence> out;
    if (kind == DatasetKind::OntoNotes) {
        for (std::size_t p = 0; p < ontonotes_orders().size(); ++p) {
            TaskSequence seq{p + 1, {}};
            for (const auto& t : ontonotes_orders()[p]) seq.tasks.push_back({t, {t}});
            out.push_back(std::move(seq));
        }
        return out;
    }
    if (kind == DatasetKind::FewNerd) {
        for (std::size_t p = 0; p < fewnerd_orders().size(); ++p) {
            TaskSequence seq{p + 1, {}};
            for (const auto& c : fewnerd_orders()[p]) {
                TaskSpec task{c, {}};
                for (const auto& [fine, group] : inventory.coarse_of) {
                    if (group == c) task.types.push_back(fine);
                }
                if (inventory.types.empty()) task.types.push_back(c);
                seq.tasks.push_back(std::move(task));
            }
            out.push_back(std::move(seq));
        }
        return out;
    }

    // Toy: shuffle the units (coarse groups when grouped, else types).
    std::vector<std::string> units;
    if (inventory.grouped()) {
        std::set<std::string> groups;
        for (const auto& [f, c] : inventory.coarse_of) groups.insert(c);
        units.assign(groups.begin(), groups.end());
    } else {
        units = inventory.types;
    }
    if (units.empty()) throw ConfigError("toy permutations need a non-empty type inventory");
    if (tasks == 0 || tasks > units.size())
        throw ConfigError("task count must lie in [1, " + std::to_string(units.size()) + "]");
    if (count == 0) throw ConfigError("permutation count must be at least 1");
    const num::Rng base(seed);
    for (std::size_t p = 0; p < count; ++p) {
        num::Rng rng = base.fork(p + 1);
        auto order = units;
        rng.shuffle(order);
        TaskSequence seq{p + 1, {}};
        std::size_t pos = 0;
        for (std::size_t size : chunk_sizes(order.size(), tasks)) {
            TaskSpec task;
            std::vector<std::string> chunk(order.begin() + static_cast<long>(pos), order.begin() + static_cast<long>(pos + size));
            pos += size;
            for (const auto& u : chunk) {
                if (!task.name.empty()) task.name += "+";
                task.name += u;
                if (inventory.grouped()) {
                    for (const auto& [fine, group] : inventory.coarse_of) {
                        if (group == u) task.types.push_back(fine);
                    }
                } else {
                    task.types.push_back(u);
                }
            }
            seq.tasks.push_back(std::move(task));
        }
        out.push_back(std::move(seq));
    }
    return out;
}

void validate_sequence(const TaskSequence& seq, const Corpus& corpus) {
    if (seq.tasks.empty()) throw ConfigError("task sequence is empty");
    std::set<std::string> seen;
    const auto inventory = as_set(corpus.types);
    for (std::size_t i = 0; i < seq.tasks.size(); ++i) {
        const auto& task = seq.tasks[i];
        if (task.types.empty()) throw DataError("task " + std::to_string(i + 1) + " (" + task.name + ") has no entity types");
        for (const auto& t : task.types) {
            if (!inventory.count(t))
                throw DataError("task " + std::to_string(i + 1) + " type '" + t + "' is not in the corpus inventory");
            if (!seen.insert(t).second) throw DataError("type '" + t + "' appears in more than one task");
        }
    }
}

// ---- synthesis ----

Setup parse_setup(const std::string& name) {
    const auto n = lower(name);
    if (n == "split-all") return Setup::SplitAll;
    if (n == "split-filter") return Setup::SplitFilter;
    if (n == "filter-all") return Setup::FilterAll;
    if (n == "filter-filter") return Setup::FilterFilter;
    throw ConfigError("unknown setup '" + name + "' (expected split-all, split-filter, filter-all or filter-filter)");
}

std::string to_string(Setup setup) {
    switch (setup) {
        case Setup::SplitAll: return "split-all";
        case Setup::SplitFilter: return "split-filter";
        case Setup::FilterAll: return "filter-all";
        case Setup::FilterFilter: return "filter-filter";
    }
    return "?";
}

bool split_train(Setup s) { return s == Setup::SplitAll || s == Setup::SplitFilter; }
bool filter_test(Setup s) { return s == Setup::SplitFilter || s == Setup::FilterFilter; }

namespace {

// Per-task source indices for train or dev.
std::vector<std::vector<std::size_t>> assign(const std::vector<Sentence>& pool, const TaskSequence& seq, bool split,
                                             num::Rng rng) {
    const std::size_t L = seq.tasks.size();
    std::vector<std::vector<std::size_t>> out(L);
    if (split) {
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        rng.shuffle(idx);
        std::size_t pos = 0;
        auto sizes = chunk_sizes(idx.size(), L);
        for (std::size_t l = 0; l < L; ++l) {
            out[l].assign(idx.begin() + static_cast<long>(pos), idx.begin() + static_cast<long>(pos + sizes[l]));
            std::sort(out[l].begin(), out[l].end());
            pos += sizes[l];
        }
    } else {
        for (std::size_t l = 0; l < L; ++l) {
            const auto types = as_set(seq.tasks[l].types);
            for (std::size_t i = 0; i < pool.size(); ++i) {
                if (mentions_any(pool[i], types)) out[l].push_back(i);
            }
        }
    }
    return out;
}

}  // namespace

SynthesizedBenchmark synthesize(const SplitCorpus& data, const TaskSequence& seq, Setup setup, std::uint64_t seed,
                                DatasetKind kind) {
    validate_sequence(seq, data.train);
    SynthesizedBenchmark b;
    b.kind = kind;
    b.setup = setup;
    b.seed = seed;
    b.sequence = seq;
    b.coarse_of = data.train.coarse_of;

    const num::Rng base(seed);
    const bool split = split_train(setup);
    const auto train_idx = assign(data.train.sentences, seq, split, base.fork(1));
    const auto dev_idx = assign(data.dev.sentences, seq, split, base.fork(2));
    const auto everything = as_set(seq.all_types());

    for (std::size_t l = 0; l < seq.tasks.size(); ++l) {
        if (train_idx[l].empty())
            throw DataError("task " + std::to_string(l + 1) + " (" + seq.tasks[l].name + ") has no training sentences");
        TaskData t;
        const auto own = as_set(seq.tasks[l].types);
        const auto seen = as_set(seq.learned_through(l + 1));
        for (auto i : train_idx[l]) {
            t.train.push_back(erase_annotations(data.train.sentences[i], own));
            t.train_full.push_back(erase_annotations(data.train.sentences[i], everything));
        }
        for (auto i : dev_idx[l]) {
            t.dev.push_back(erase_annotations(data.dev.sentences[i], own));
            t.dev_full.push_back(erase_annotations(data.dev.sentences[i], everything));
        }
        t.train_source = train_idx[l];
        t.dev_source = dev_idx[l];
        for (const auto& s : data.test.sentences) {
            if (filter_test(setup) && !mentions_any(s, seen)) continue;
            t.test.push_back(erase_annotations(s, seen));
        }
        b.tasks.push_back(std::move(t));
    }
    return b;
}

namespace {

std::string task_dir_name(std::size_t l) {
    std::string n = std::to_string(l + 1);
    return "task_" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

std::vector<Sentence> read_sentences(const fs::path& p) { return parse_corpus(p).corpus.sentences; }

}  // namespace

void write_benchmark(const fs::path& dir, const SynthesizedBenchmark& b, const std::string& extra_json) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    json m;
    m["kind"] = to_string(b.kind);
    m["setup"] = to_string(b.setup);
    m["seed"] = b.seed;
    m["permutation"] = b.sequence.permutation;
    m["coarse_of"] = b.coarse_of;
    m["tasks"] = json::array();
    for (std::size_t l = 0; l < b.tasks.size(); ++l) {
        const auto& t = b.tasks[l];
        const fs::path td = dir / task_dir_name(l);
        fs::create_directories(td, ec);
        if (ec) throw DataError("cannot create " + td.string() + ": " + ec.message());
        write_corpus(td / "train.txt", t.train);
        write_corpus(td / "dev.txt", t.dev);
        write_corpus(td / "test.txt", t.test);
        write_corpus(td / "train_full.txt", t.train_full);
        write_corpus(td / "dev_full.txt", t.dev_full);
        m["tasks"].push_back({{"dir", task_dir_name(l)},
                              {"name", b.sequence.tasks[l].name},
                              {"types", b.sequence.tasks[l].types},
                              {"train", t.train.size()},
                              {"dev", t.dev.size()},
                              {"test", t.test.size()},
                              {"train_source", t.train_source},
                              {"dev_source", t.dev_source}});
    }
    json extra = json::parse(extra_json);
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write manifest in " + dir.string());
    out << m.dump(2) << '\n';
}

SynthesizedBenchmark read_benchmark(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) throw DataError("no manifest.json in " + dir.string());
    json m;
    try {
        m = json::parse(in);
        SynthesizedBenchmark b;
        b.kind = parse_kind(m.at("kind").get<std::string>());
        b.setup = parse_setup(m.at("setup").get<std::string>());
        b.seed = m.at("seed").get<std::uint64_t>();
        b.sequence.permutation = m.at("permutation").get<std::size_t>();
        b.coarse_of = m.at("coarse_of").get<std::map<std::string, std::string>>();
        for (const auto& jt : m.at("tasks")) {
            b.sequence.tasks.push_back({jt.at("name").get<std::string>(), jt.at("types").get<std::vector<std::string>>()});
            const fs::path td = dir / jt.at("dir").get<std::string>();
            TaskData t;
            t.train = read_sentences(td / "train.txt");
            t.dev = read_sentences(td / "dev.txt");
            t.test = read_sentences(td / "test.txt");
            t.train_full = read_sentences(td / "train_full.txt");
            t.dev_full = read_sentences(td / "dev_full.txt");
            t.train_source = jt.value("train_source", std::vector<std::size_t>{});
            t.dev_source = jt.value("dev_source", std::vector<std::size_t>{});
            if (t.train.size() != t.train_full.size() || t.dev.size() != t.dev_full.size())
                throw DataError("task files in " + td.string() + " disagree in sentence count");
            b.tasks.push_back(std::move(t));
        }
        if (b.tasks.empty()) throw DataError("benchmark in " + dir.string() + " has no tasks");
        return b;
    } catch (const json::exception& e) {
        throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
    }
}

}  // namespace clner::cldata
