#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "clner/types.hpp"

// Exact-match span scoring: a prediction counts only when sentence, both
// boundaries and the type agree with a gold span. Zero denominators give 0.
namespace clner::metrics {

struct LabeledSpan {
    std::size_t sentence = 0;
    std::size_t start = 0;
    std::size_t end = 0;
    std::string type;

    auto operator<=>(const LabeledSpan&) const = default;
};

struct TypeCounts {
    long tp = 0;
    long fp = 0;
    long fn = 0;

    double precision() const;
    double recall() const;
    double f1() const;
    TypeCounts& operator+=(const TypeCounts& o);
    bool operator==(const TypeCounts&) const = default;
};

using CountTable = std::map<std::string, TypeCounts>;

std::vector<LabeledSpan> collect_spans(const std::vector<Sentence>& sentences);

// Per-type counts. Duplicate spans on either side are counted once.
CountTable span_f1(const std::vector<LabeledSpan>& gold, const std::vector<LabeledSpan>& predicted);

// Unweighted mean over learned types; a type missing from the table scores 0.
// Throws std::invalid_argument on an empty type list.
double macro_f1(const std::map<std::string, double>& per_type_f1, const std::vector<std::string>& learned_types);

// Pools fine-type counts within each coarse type and scores the pool. Every
// fine type in the table must have a coarse type.
CountTable coarse_counts(const CountTable& fine, const std::map<std::string, std::string>& coarse_of);
std::map<std::string, double> coarse_micro_f1(const CountTable& fine, const std::map<std::string, std::string>& coarse_of);

inline double gap(double cl_score, double noncl_score) { return cl_score - noncl_score; }

// Scores for one step: units are either the learned types, or the learned
// coarse types when a grouping is supplied.
struct StepEval {
    std::size_t step = 0;
    std::vector<std::string> units;
    CountTable counts;  // keyed by unit
    double macro = 0.0;

    std::map<std::string, double> unit_f1() const;
};

StepEval evaluate_step(std::size_t step, const std::vector<LabeledSpan>& gold, const std::vector<LabeledSpan>& predicted,
                       const std::vector<std::string>& learned_types, const std::map<std::string, std::string>& coarse_of = {},
                       const std::vector<std::string>& learned_coarse = {});

struct EvalReport {
    std::vector<std::size_t> steps;
    std::vector<double> cl_macro;
    std::vector<std::optional<double>> noncl_macro;
    std::vector<std::optional<double>> delta;
    std::vector<std::map<std::string, double>> per_unit_f1;
};

// Delta is filled only for steps that have both a CL and a non-CL score.
EvalReport build_report(const std::vector<StepEval>& cl, const std::vector<StepEval>& noncl);

}  // namespace clner::metrics
