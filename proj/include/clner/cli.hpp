#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace clner::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kAbort = 3 };

struct SynthesizeArgs {
    std::string corpus = "toy";  // "toy", a column file, or a directory with train/dev/test.txt
    std::string kind = "toy";
    std::string setup = "split-all";
    std::uint64_t seed = 1;
    std::size_t permutation = 1;  // 1-based
    std::size_t tasks = 3;        // toy only
    std::size_t sentences = 500;  // toy only
    double train_fraction = 0.7;  // single-file and toy corpora
    double dev_fraction = 0.15;
    std::filesystem::path out;
    std::string command;
    bool timestamp = false;  // add a "created" time to the manifest (breaks byte identity)
};

struct TrainArgs {
    std::filesystem::path benchmark;
    std::filesystem::path config;  // optional
    std::string mode = "cl";
    std::vector<std::pair<std::string, std::string>> overrides;  // applied after the file
    std::filesystem::path out;
    bool resume = false;
    std::size_t stop_after = 0;
    std::string command;
    bool timestamp = false;
};

struct ReportArgs {
    std::vector<std::filesystem::path> runs;
    std::filesystem::path out;  // optional: report.txt, records.csv, curves.csv
};

struct SweepArgs {
    SynthesizeArgs data;  // out is ignored; benchmarks go under out/bench_pX
    std::size_t permutations = 1;
    std::vector<std::uint64_t> seeds{1};
    std::filesystem::path config;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::size_t jobs = 1;
    bool noncl = true;
    bool noncl_final_only = false;
    std::filesystem::path out;
    std::string command;
    bool timestamp = false;
};

// Each command reports problems on `err` and returns an ExitCode.
int cmd_synthesize(const SynthesizeArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err);
int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err);

// Parses argv and dispatches to a command.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace clner::cli
