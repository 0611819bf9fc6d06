#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "clner/types.hpp"

namespace clner::cldata {

// ---- column files ----

struct ParseResult {
    Corpus corpus;
    std::size_t repaired = 0;  // orphan I- tags turned into B-
};

// Token-per-line files: "token<TAB>tag[<TAB>tag...]", blank line between
// sentences. Each extra tag column is one more annotation layer, which is how
// nested spans are stored. Tags are IOB ("B-PER", "I-PER", "O") or plain IO
// ("person-actor"), where a run of identical tags is one span.
// Throws DataError (with the line number) on inconsistent column counts.
ParseResult parse_corpus(const std::filesystem::path& path);
ParseResult parse_corpus(std::istream& in, const std::string& source_name = "<stream>");

// Writes IOB layers; spans are packed into as few columns as possible.
void write_corpus(std::ostream& out, const std::vector<Sentence>& sentences);
void write_corpus(const std::filesystem::path& path, const std::vector<Sentence>& sentences);

// Builds the inventory from the spans present. When every type has the form
// "coarse-fine", the coarse grouping is filled in from the prefix.
Corpus make_corpus(std::vector<Sentence> sentences);

// Sorts spans and drops exact duplicates.
void canonicalize(Sentence& s);

Sentence erase_annotations(const Sentence& s, const std::set<std::string>& allowed);
bool mentions_any(const Sentence& s, const std::set<std::string>& types);

// ---- toy corpora ----

struct ToyType {
    std::string name;
    std::vector<std::string> lexicon;  // entries may span several tokens
};

// An outer entity whose surface form embeds an inner one, e.g.
// {"ORG", "University of {GPE}"}.
struct NestRule {
    std::string outer;
    std::string pattern;
};

struct ToySpec {
    std::vector<ToyType> types;
    std::vector<std::string> templates;  // "{TYPE}" marks a slot
    std::vector<NestRule> nest_rules;
    std::size_t sentences = 500;
    double nesting_probability = 0.0;
};

ToySpec default_toy_spec();
Corpus generate_toy_corpus(const ToySpec& spec, std::uint64_t seed);

struct SplitCorpus {
    Corpus train, dev, test;
};

// Seeded shuffle, then consecutive train/dev/test slices.
SplitCorpus split_corpus(const Corpus& corpus, double train_fraction, double dev_fraction, std::uint64_t seed);

// ---- task sequences ----

enum class DatasetKind { OntoNotes, FewNerd, Toy };

DatasetKind parse_kind(const std::string& name);
std::string to_string(DatasetKind kind);

struct TaskSpec {
    std::string name;                // type name, or coarse name for grouped corpora
    std::vector<std::string> types;  // entity types learned in this task
};

struct TaskSequence {
    std::size_t permutation = 0;  // 1-based id
    std::vector<TaskSpec> tasks;

    std::vector<std::string> learned_through(std::size_t step) const;  // 1-based step
    std::vector<std::string> all_types() const;
};

// Published task orders, by task name.
const std::vector<std::vector<std::string>>& ontonotes_orders();
const std::vector<std::vector<std::string>>& fewnerd_orders();

// OntoNotes: 6 orders of 6 types. Few-NERD: 4 orders of 8 coarse types, each
// task holding the fine types of its coarse group found in `inventory`
// (must be grouped). Toy: `count` seeded shuffles of the inventory, chunked
// into `tasks` tasks.
std::vector<TaskSequence> permutations(DatasetKind kind, const Corpus& inventory = {}, std::size_t tasks = 0,
                                       std::size_t count = 0, std::uint64_t seed = 0);

// Checks disjointness and that every type exists in the corpus.
void validate_sequence(const TaskSequence& seq, const Corpus& corpus);

// ---- synthesis ----

enum class Setup { SplitAll, SplitFilter, FilterAll, FilterFilter };

Setup parse_setup(const std::string& name);  // "split-all", ...
std::string to_string(Setup setup);
bool split_train(Setup s);
bool filter_test(Setup s);

struct TaskData {
    std::vector<Sentence> train, dev, test;
    // Same train/dev sentences annotated for the whole sequence inventory;
    // used to restore annotations for non-CL reference runs.
    std::vector<Sentence> train_full, dev_full;
    std::vector<std::size_t> train_source, dev_source;  // indices into the original splits
};

struct SynthesizedBenchmark {
    DatasetKind kind = DatasetKind::Toy;
    Setup setup = Setup::SplitAll;
    std::uint64_t seed = 0;
    TaskSequence sequence;
    std::map<std::string, std::string> coarse_of;
    std::vector<TaskData> tasks;
};

SynthesizedBenchmark synthesize(const SplitCorpus& data, const TaskSequence& seq, Setup setup, std::uint64_t seed,
                                DatasetKind kind = DatasetKind::Toy);

// Layout: manifest.json plus task_XX/{train,dev,test,train_full,dev_full}.txt.
// `extra` entries are merged into the manifest object (JSON text).
void write_benchmark(const std::filesystem::path& dir, const SynthesizedBenchmark& b, const std::string& extra_json = "{}");
SynthesizedBenchmark read_benchmark(const std::filesystem::path& dir);

}  // namespace clner::cldata
