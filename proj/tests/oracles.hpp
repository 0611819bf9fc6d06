#pragma once

// Brute-force reference implementations used by unit and acceptance tests.
// They are written from the definitions and share no code with the library.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "clner/num/random.hpp"

namespace clner::testing {

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double bce_cell(double logit, double gold) {
    const double p = sigmoid_ref(logit);
    return -(gold * std::log(p) + (1.0 - gold) * std::log(1.0 - p));
}

inline double kd_cell(double teacher, double student) {
    return teacher * (std::log(teacher) - std::log(student)) + (1.0 - teacher) * (std::log(1.0 - teacher) - std::log(1.0 - student));
}

// (start, end, type, score)
using Cand = std::tuple<std::size_t, std::size_t, std::size_t, double>;

// probs[type][i][j]; flat decoding by elimination: repeatedly take the
// best remaining candidate and delete everything that intersects it.
inline std::vector<Cand> flat_decode_oracle(const std::vector<std::vector<std::vector<double>>>& probs, double threshold) {
    std::vector<Cand> pool;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        for (std::size_t i = 0; i < probs[k].size(); ++i) {
            for (std::size_t j = i; j < probs[k].size(); ++j) {
                if (probs[k][i][j] > threshold) pool.emplace_back(i, j, k, probs[k][i][j]);
            }
        }
    }
    auto better = [](const Cand& a, const Cand& b) {
        return std::make_tuple(-std::get<3>(a), std::get<0>(a), std::get<1>(a), std::get<2>(a)) <
               std::make_tuple(-std::get<3>(b), std::get<0>(b), std::get<1>(b), std::get<2>(b));
    };
    std::vector<Cand> kept;
    while (!pool.empty()) {
        auto best = *std::min_element(pool.begin(), pool.end(), better);
        kept.push_back(best);
        std::vector<Cand> rest;
        for (const auto& c : pool) {
            const bool disjoint = std::get<1>(c) < std::get<0>(best) || std::get<0>(c) > std::get<1>(best);
            if (disjoint) rest.push_back(c);
        }
        pool = std::move(rest);
    }
    return kept;
}

// (sentence, start, end, type)
using LSpan = std::tuple<std::size_t, std::size_t, std::size_t, std::string>;

struct RefCounts {
    long tp = 0, fp = 0, fn = 0;
};

// Counting by exhaustive pairing: every gold is looked up in the prediction
// list and vice versa.
inline std::map<std::string, RefCounts> count_oracle(const std::vector<LSpan>& gold, const std::vector<LSpan>& pred) {
    std::map<std::string, RefCounts> out;
    auto dedup = [](std::vector<LSpan> v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    auto g = dedup(gold);
    auto p = dedup(pred);
    for (const auto& x : p) {
        bool hit = false;
        for (const auto& y : g) hit = hit || x == y;
        if (hit) {
            out[std::get<3>(x)].tp++;
        } else {
            out[std::get<3>(x)].fp++;
        }
    }
    for (const auto& y : g) {
        bool hit = false;
        for (const auto& x : p) hit = hit || x == y;
        if (!hit) out[std::get<3>(y)].fn++;
    }
    return out;
}

inline double f1_ref(const RefCounts& c) {
    const double p = (c.tp + c.fp) == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    const double r = (c.tp + c.fn) == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return (p + r) == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

}  // namespace clner::testing
