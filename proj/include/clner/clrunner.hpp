#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clner/cldata.hpp"
#include "clner/metrics.hpp"
#include "clner/num/checkpoint.hpp"
#include "clner/num/random.hpp"
#include "clner/num/tensor.hpp"
#include "clner/types.hpp"

namespace clner::runner {

enum class ModelKind { SpanKL, AddNER, ExtendNER };
enum class Decode { Flat, Nested };

std::string to_string(ModelKind m);
std::string to_string(Decode d);

struct RunConfig {
    ModelKind model = ModelKind::SpanKL;
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    double lr_encoder = 1e-3;
    double lr_heads = 3e-3;
    double weight_decay = 0.01;
    double alpha = 1.0;
    double beta = 1.0;
    double threshold = 0.5;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t out_dim = 50;
    std::size_t max_len = 128;
    double dropout = 0.1;
    double pad_constant = 1e-4;
    bool freeze_encoder = false;
    bool warmup_cosine = false;
    std::size_t warmup_steps = 200;
    Decode decode = Decode::Flat;
    std::uint64_t seed = 1;
};

// Flat "key = value" text, '#' starts a comment. Unknown keys and bad values
// are all collected; the ConfigError message lists one problem per line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

// Applies one key/value pair; returns an error message instead of throwing.
std::optional<std::string> set_field(RunConfig& config, const std::string& key, const std::string& value);

// Range checks; one message per bad field.
std::vector<std::string> validate(const RunConfig& config);

// Every field, one per line, in a fixed order. parse_config(render) == config.
std::string render_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);  // 16 hex digits

// A continual learner: a growing model plus its loss and decoding rule.
class Learner {
public:
    virtual ~Learner() = default;

    // Grows the model for `types`, then caches teacher outputs over the
    // task's training sentences from the model as it stood before this step.
    // Returns the cache digest (0 when there is no teacher).
    virtual std::uint64_t start_task(const std::vector<std::string>& types, const std::vector<std::vector<std::size_t>>& train_ids,
                                     num::Rng& rng) = 0;
    // Grows the model without computing a teacher (used before restoring a checkpoint).
    virtual void grow(const std::vector<std::string>& types, num::Rng& rng) = 0;

    // Loss for training sentence `index` of the current task.
    virtual num::Tensor loss(std::size_t index, const std::vector<std::size_t>& ids, const Sentence& gold, num::Rng& rng) = 0;
    virtual std::vector<Span> predict(const std::vector<std::size_t>& ids) const = 0;

    virtual std::vector<std::string> learned_types() const = 0;
    virtual num::NamedTensors named_parameters() const = 0;
    virtual std::vector<num::Tensor> encoder_parameters() const = 0;
    virtual std::vector<num::Tensor> head_parameters() const = 0;
    virtual void set_encoder_trainable(bool trainable) = 0;
};

std::unique_ptr<Learner> make_learner(const RunConfig& config, std::size_t vocab_size, num::Rng& init_rng);

struct StepRecord {
    std::string mode;  // "cl" or "noncl"
    std::size_t step = 0;
    metrics::StepEval eval;
    std::vector<double> dev_curve;  // dev macro-F1 per epoch
    std::size_t best_epoch = 0;     // 1-based
    std::uint64_t teacher_digest = 0;
    std::vector<std::vector<Span>> predictions;  // per test sentence
};

struct RunResult {
    std::vector<StepRecord> steps;
};

struct RunOptions {
    std::filesystem::path out_dir;  // empty: nothing is written
    std::size_t stop_after = 0;     // 0: run every step
    bool resume = false;            // reuse completed steps found in out_dir
    std::vector<std::size_t> only_steps;  // non-CL: evaluate just these steps (empty: all)
    std::string benchmark_path;     // recorded in the manifest
    std::string command;            // recorded in the manifest
    std::string timestamp;          // recorded as "created" when set
};

// Non-CL data for a step: train (or dev) sentences of tasks 1..step with
// annotations restored for every type learned so far. A sentence shared by
// several tasks (Filter setups) appears once.
std::vector<Sentence> noncl_union(const cldata::SynthesizedBenchmark& bench, std::size_t step, bool dev);

RunResult run_cl(const RunConfig& config, const cldata::SynthesizedBenchmark& bench, const RunOptions& options = {});
RunResult run_noncl(const RunConfig& config, const cldata::SynthesizedBenchmark& bench, const RunOptions& options = {});

// Identifies a benchmark: kind, setup, permutation, seed and task types.
std::string benchmark_id(const cldata::SynthesizedBenchmark& bench);

// One metrics line per step; deterministic text.
std::string metrics_line(const StepRecord& r, const RunConfig& config, const cldata::SynthesizedBenchmark& bench);

// Records read back from a run directory's metrics file.
struct MetricsRow {
    std::string mode;
    std::string model;
    std::string config_hash;
    std::string benchmark;
    std::size_t step = 0;
    double macro_f1 = 0.0;
    std::map<std::string, double> unit_f1;
    std::map<std::string, metrics::TypeCounts> unit_counts;
    std::vector<std::string> unit_order;
    std::uint64_t seed = 0;
    std::size_t permutation = 0;
    std::string setup;
};

std::vector<MetricsRow> read_metrics(const std::filesystem::path& run_dir);

// ---- sweeps ----

struct SweepRun {
    std::size_t permutation = 0;
    std::uint64_t seed = 0;
    RunResult cl;
    RunResult noncl;
};

struct SweepStep {
    std::size_t step = 0;
    std::map<std::uint64_t, double> cl_by_seed;     // mean over permutations
    std::map<std::uint64_t, double> noncl_by_seed;  // mean over permutations
    double cl_median = 0.0;
    std::optional<double> noncl_median;
    std::optional<double> delta_median;  // median over seeds of per-seed deltas
};

struct SweepResult {
    std::vector<SweepRun> runs;
    std::vector<SweepStep> steps;
};

struct SweepOptions {
    bool with_noncl = true;
    bool noncl_final_only = false;  // reference run for the last step only
    std::size_t jobs = 1;           // > 1 runs independent pairs on worker threads
    std::filesystem::path out_dir;  // when set, runs go to out_dir/p<perm>_s<seed>/{cl,noncl}
    std::string command;            // recorded in each run manifest
    std::string timestamp;
};

std::filesystem::path sweep_run_dir(const std::filesystem::path& root, std::size_t permutation, std::uint64_t seed);

// Runs every (benchmark, seed) pair with config.seed replaced by the seed.
SweepResult sweep(const RunConfig& config, const std::vector<cldata::SynthesizedBenchmark>& benches,
                  const std::vector<std::uint64_t>& seeds, const SweepOptions& options = {});

SweepResult aggregate(std::vector<SweepRun> runs);

double median(std::vector<double> v);

}  // namespace clner::runner
