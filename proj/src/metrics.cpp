#include "clner/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace clner::metrics {

double TypeCounts::precision() const { return tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp); }
double TypeCounts::recall() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }

double TypeCounts::f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

TypeCounts& TypeCounts::operator+=(const TypeCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
}

std::vector<LabeledSpan> collect_spans(const std::vector<Sentence>& sentences) {
    std::vector<LabeledSpan> out;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        for (const auto& sp : sentences[s].spans) out.push_back({s, sp.start, sp.end, sp.type});
    }
    return out;
}

CountTable span_f1(const std::vector<LabeledSpan>& gold, const std::vector<LabeledSpan>& predicted) {
    auto sorted = [](std::vector<LabeledSpan> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    const auto g = sorted(gold);
    const auto p = sorted(predicted);
    CountTable table;
    std::size_t a = 0, b = 0;
    while (a < g.size() || b < p.size()) {
        if (b == p.size() || (a < g.size() && g[a] < p[b])) {
            table[g[a++].type].fn++;
        } else if (a == g.size() || p[b] < g[a]) {
            table[p[b++].type].fp++;
        } else {
            table[g[a].type].tp++;
            ++a;
            ++b;
        }
    }
    return table;
}

double macro_f1(const std::map<std::string, double>& per_type_f1, const std::vector<std::string>& learned_types) {
    if (learned_types.empty()) throw std::invalid_argument("macro_f1: no learned types");
    double total = 0.0;
    for (const auto& t : learned_types) {
        auto it = per_type_f1.find(t);
        total += it == per_type_f1.end() ? 0.0 : it->second;
    }
    return total / static_cast<double>(learned_types.size());
}

CountTable coarse_counts(const CountTable& fine, const std::map<std::string, std::string>& coarse_of) {
    CountTable out;
    for (const auto& [type, counts] : fine) {
        auto it = coarse_of.find(type);
        if (it == coarse_of.end()) throw std::invalid_argument("coarse grouping does not cover fine type '" + type + "'");
        out[it->second] += counts;
    }
    return out;
}

std::map<std::string, double> coarse_micro_f1(const CountTable& fine, const std::map<std::string, std::string>& coarse_of) {
    std::map<std::string, double> out;
    for (const auto& [coarse, counts] : coarse_counts(fine, coarse_of)) out[coarse] = counts.f1();
    return out;
}

std::map<std::string, double> StepEval::unit_f1() const {
    std::map<std::string, double> out;
    for (const auto& u : units) {
        auto it = counts.find(u);
        out[u] = it == counts.end() ? 0.0 : it->second.f1();
    }
    return out;
}

StepEval evaluate_step(std::size_t step, const std::vector<LabeledSpan>& gold, const std::vector<LabeledSpan>& predicted,
                       const std::vector<std::string>& learned_types, const std::map<std::string, std::string>& coarse_of,
                       const std::vector<std::string>& learned_coarse) {
    auto restrict = [&](const std::vector<LabeledSpan>& spans) {
        std::vector<LabeledSpan> out;
        for (const auto& s : spans) {
            if (std::find(learned_types.begin(), learned_types.end(), s.type) != learned_types.end()) out.push_back(s);
        }
        return out;
    };
    StepEval e;
    e.step = step;
    CountTable fine = span_f1(restrict(gold), restrict(predicted));
    if (learned_coarse.empty()) {
        e.units = learned_types;
        e.counts = std::move(fine);
    } else {
        e.units = learned_coarse;
        e.counts = coarse_counts(fine, coarse_of);
    }
    e.macro = macro_f1(e.unit_f1(), e.units);
    return e;
}

EvalReport build_report(const std::vector<StepEval>& cl, const std::vector<StepEval>& noncl) {
    EvalReport r;
    for (const auto& s : cl) {
        r.steps.push_back(s.step);
        r.cl_macro.push_back(s.macro);
        r.per_unit_f1.push_back(s.unit_f1());
        std::optional<double> ref;
        for (const auto& n : noncl) {
            if (n.step == s.step) ref = n.macro;
        }
        r.noncl_macro.push_back(ref);
        r.delta.push_back(ref ? std::optional<double>(gap(s.macro, *ref)) : std::nullopt);
    }
    return r;
}

}  // namespace clner::metrics
