#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace clner {

// Token range [start, end], 0-based and inclusive on both ends.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string type;

    auto operator<=>(const Span&) const = default;
};

struct Sentence {
    std::vector<std::string> tokens;
    std::vector<Span> spans;  // may overlap or nest

    bool operator==(const Sentence&) const = default;
};

struct Corpus {
    std::vector<Sentence> sentences;
    std::vector<std::string> types;               // sorted inventory
    std::map<std::string, std::string> coarse_of;  // fine type -> coarse type, when grouped

    bool grouped() const { return !coarse_of.empty(); }
};

struct ScoredSpan {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string type;
    double score = 0.0;
};

}  // namespace clner
