#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "clner/baselines.hpp"
#include "clner/num/ops.hpp"
#include "gradcheck.hpp"

using namespace clner;
using namespace clner::baselines;

namespace {

encoder::EncoderConfig small_config() {
    encoder::EncoderConfig c;
    c.vocab_size = 12;
    c.dim = 8;
    c.heads = 2;
    c.max_len = 16;
    c.dropout = 0.0;
    return c;
}

std::vector<double> softmax_ref(const std::vector<double>& z) {
    double m = *std::max_element(z.begin(), z.end()), s = 0.0;
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
    for (auto& x : p) x /= s;
    return p;
}

double ce_ref(const std::vector<double>& z, std::size_t gold) { return -std::log(softmax_ref(z)[gold]); }

double kl_ref(const std::vector<double>& teacher, const std::vector<double>& z) {
    auto q = softmax_ref(z);
    double out = 0.0;
    for (std::size_t t = 0; t < q.size(); ++t)
        if (teacher[t] > 0) out += teacher[t] * (std::log(teacher[t]) - std::log(q[t]));
    return out;
}

}  // namespace

TEST_CASE("iob_encode") {
    TagSet tags{{"PER", "ORG"}};
    CHECK(tags.size() == 5);
    CHECK(tags.name(0) == "O");
    CHECK(tags.name(3) == "B-ORG");
    CHECK(tags.name(4) == "I-ORG");
    Sentence s{{"a", "b", "c"}, {}};
    CHECK(iob_encode(s, tags) == std::vector<std::size_t>{0, 0, 0});
    s.spans = {{0, 1, "PER"}};
    CHECK(iob_encode(s, tags) == std::vector<std::size_t>{1, 2, 0});
    s.spans = {{0, 2, "PER"}, {1, 1, "PER"}};
    CHECK(iob_encode(s, tags) == std::vector<std::size_t>{1, 2, 2});
    s.spans = {{0, 0, "PER"}, {1, 2, "GPE"}};  // GPE is not in the tag set
    CHECK(iob_encode(s, tags) == std::vector<std::size_t>{1, 0, 0});
    s.spans = {{1, 3, "ORG"}};
    CHECK_THROWS_AS(iob_encode(s, tags), std::out_of_range);
}

TEST_CASE("flatten_longest ties and chains") {
    // equal length, overlapping: earlier start wins
    auto f = flatten_longest({{1, 2, "A"}, {0, 1, "A"}}, {"A"}, 4);
    CHECK(f == std::vector<Span>{{0, 1, "A"}});
    // the longest goes first even if it blocks two shorter ones
    f = flatten_longest({{0, 0, "A"}, {2, 2, "A"}, {0, 2, "B"}}, {"A", "B"}, 3);
    CHECK(f == std::vector<Span>{{0, 2, "B"}});
}

TEST_CASE("tag_decode") {
    CHECK(tag_decode({"B-PER", "I-PER", "O"}) == std::vector<Span>{{0, 1, "PER"}});
    CHECK(tag_decode({"O", "O"}).empty());
    CHECK(tag_decode({"B-PER", "B-PER"}) == std::vector<Span>{{0, 0, "PER"}, {1, 1, "PER"}});
    CHECK(tag_decode({"B-PER", "I-ORG"}) == std::vector<Span>{{0, 0, "PER"}, {1, 1, "ORG"}});
    CHECK(tag_decode({"I-PER", "I-PER"}) == std::vector<Span>{{0, 1, "PER"}});
}

TEST_CASE("decode inverts encode on flat spans") {
    num::Rng rng(8);
    TagSet tags{{"A", "B", "C"}};
    for (int trial = 0; trial < 300; ++trial) {
        Sentence s;
        const std::size_t n = 1 + rng.below(8);
        s.tokens.assign(n, "w");
        for (std::size_t k = 0, c = rng.below(5); k < c; ++k) {
            const std::size_t a = rng.below(n);
            s.spans.push_back({a, a + rng.below(n - a), tags.types[rng.below(3)]});
        }
        const auto flat = flatten_longest(s.spans, tags.types, n);
        std::vector<std::string> names;
        for (auto id : iob_encode(s, tags)) names.push_back(tags.name(id));
        CHECK(tag_decode(names) == flat);
    }
}

TEST_CASE("combine_heads") {
    std::vector<TagSet> sets = {TagSet{{"PER"}}, TagSet{{"ORG"}}};
    TagDistributions d;
    d.n = 1;
    d.widths = {3, 3};
    SUBCASE("all O") {
        d.heads = {{0.8, 0.1, 0.1}, {0.5, 0.3, 0.2}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"O"});
    }
    SUBCASE("max confidence across heads") {
        d.heads = {{0.05, 0.9, 0.05}, {0.3, 0.6, 0.1}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"B-PER"});
        d.heads = {{0.35, 0.4, 0.25}, {0.3, 0.6, 0.1}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"B-ORG"});
    }
    SUBCASE("one head non-O wins over confident O") {
        d.heads = {{0.99, 0.005, 0.005}, {0.3, 0.1, 0.6}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"B-ORG"});  // orphan I repaired
    }
    SUBCASE("orphan I after O") {
        d.n = 2;
        d.heads = {{0.9, 0.05, 0.05, 0.1, 0.1, 0.8}, {0.9, 0.05, 0.05, 0.9, 0.05, 0.05}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"O", "B-PER"});
    }
    SUBCASE("continuation kept") {
        d.n = 2;
        d.heads = {{0.1, 0.8, 0.1, 0.1, 0.1, 0.8}, {0.9, 0.05, 0.05, 0.9, 0.05, 0.05}};
        CHECK(combine_heads(d, sets) == std::vector<std::string>{"B-PER", "I-PER"});
    }
}

TEST_CASE("padding") {
    num::Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t w = 1 + rng.below(6), extra = 2 * (1 + rng.below(3));
        std::vector<double> z(w);
        for (auto& x : z) x = rng.uniform(-4, 4);
        const auto p = softmax_ref(z);
        const double c = trial % 2 ? kDefaultPad : rng.uniform(0, 0.3);
        const auto q = pad_distribution(p, w + extra, c);
        double s = 0.0;
        for (double x : q) s += x;
        CHECK(std::abs(s - 1.0) < 1e-12);
        CHECK(std::max_element(q.begin(), q.begin() + static_cast<long>(w)) - q.begin() ==
              std::max_element(p.begin(), p.end()) - p.begin());
        for (std::size_t t = w; t < q.size(); ++t) CHECK(q[t] == doctest::Approx(c / (1.0 + c * static_cast<double>(extra))));
    }
    CHECK_THROWS_AS(pad_distribution(std::vector<double>{0.5, 0.5}, 1, 0.1), std::invalid_argument);
}

TEST_CASE("head growth") {
    num::Rng rng(1);
    SUBCASE("ExtendNER keeps old columns bitwise") {
        Tagger t(small_config(), Mode::ExtendNER, rng);
        t.add_task({"PER"}, rng);
        CHECK(t.heads().size() == 1);
        CHECK(t.heads()[0].w.cols() == 3);
        const std::vector<double> old_w(t.heads()[0].w.values().begin(), t.heads()[0].w.values().end());
        const std::vector<double> old_b(t.heads()[0].b.values().begin(), t.heads()[0].b.values().end());
        std::vector<std::size_t> ids = {2, 3, 4};
        const auto before = t.logits(ids, false, rng)[0];
        t.extend_head({"ORG"}, rng);
        CHECK(t.heads()[0].w.cols() == 5);
        t.extend_head({"GPE", "DATE"}, rng);
        CHECK(t.heads()[0].w.cols() == 9);
        CHECK(t.heads()[0].tags.types == std::vector<std::string>{"PER", "ORG", "GPE", "DATE"});
        const auto& nw = t.heads()[0].w.values();
        for (std::size_t r = 0; r < 8; ++r)
            for (std::size_t c = 0; c < 3; ++c) CHECK(std::memcmp(&nw[r * 9 + c], &old_w[r * 3 + c], sizeof(double)) == 0);
        for (std::size_t c = 0; c < 3; ++c) CHECK(t.heads()[0].b.values()[c] == old_b[c]);
        const auto after = t.logits(ids, false, rng)[0];
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < 3; ++c) CHECK(after.at(i, c) == before.at(i, c));
        CHECK_THROWS_AS(t.extend_head({"ORG"}, rng), std::invalid_argument);
        CHECK_THROWS_AS(t.extend_head({"X", "X"}, rng), std::invalid_argument);
    }
    SUBCASE("AddNER adds a head per task") {
        Tagger t(small_config(), Mode::AddNER, rng);
        t.add_task({"PER", "ORG"}, rng);
        t.add_task({"GPE"}, rng);
        REQUIRE(t.heads().size() == 2);
        CHECK(t.heads()[0].w.cols() == 5);
        CHECK(t.heads()[1].w.cols() == 3);
        CHECK_THROWS_AS(t.extend_head({"DATE"}, rng), std::logic_error);
        CHECK_THROWS_AS(t.add_task({"PER"}, rng), std::invalid_argument);
        CHECK(t.named_parameters().back().first == "tagger.head1.b");
    }
}

TEST_CASE("tagger_loss hand examples") {
    num::Rng rng(1);
    Tagger extend(small_config(), Mode::ExtendNER, rng);
    Tagger add(small_config(), Mode::AddNER, rng);
    const std::vector<double> z0 = {0.2, 1.0, -0.5}, z1 = {0.7, -0.3, 0.1};
    auto logits = num::Tensor::from({2, 3}, {0.2, 1.0, -0.5, 0.7, -0.3, 0.1});
    std::vector<std::size_t> gold = {1, 0};

    SUBCASE("no teacher: plain token cross entropy") {
        const double want = ce_ref(z0, 1) + ce_ref(z1, 0);
        CHECK(tagger_loss(extend, {logits}, gold, nullptr).item() == doctest::Approx(want).epsilon(1e-12));
        CHECK(tagger_loss(add, {logits}, gold, nullptr).item() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("ExtendNER: teacher equals student on the O token") {
        TagDistributions t;
        t.n = 2;
        t.widths = {3};
        auto p0 = softmax_ref(z0), p1 = softmax_ref(z1);
        t.heads = {{p0[0], p0[1], p0[2], p1[0], p1[1], p1[2]}};
        const double got = tagger_loss(extend, {logits}, gold, &t).item();
        CHECK(std::abs(got - ce_ref(z0, 1)) < 1e-12);
    }
    SUBCASE("ExtendNER: switching per token matches the oracle sum") {
        TagDistributions t;
        t.n = 2;
        t.widths = {3};
        const std::vector<double> teacher1 = {0.6, 0.3, 0.1};
        t.heads = {{0.2, 0.2, 0.6, teacher1[0], teacher1[1], teacher1[2]}};
        const double want = ce_ref(z0, 1) + kl_ref(teacher1, z1);
        CHECK(tagger_loss(extend, {logits}, gold, &t).item() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("AddNER: cross entropy on the new head, KL on the old one") {
        auto old_logits = num::Tensor::from({2, 3}, {1.5, 0.0, -1.0, -0.2, 0.4, 0.9});
        TagDistributions t;
        t.n = 2;
        t.widths = {3};
        const std::vector<double> a = {0.7, 0.2, 0.1}, b = {0.1, 0.1, 0.8};
        t.heads = {{a[0], a[1], a[2], b[0], b[1], b[2]}};
        const double want = ce_ref(z0, 1) + ce_ref(z1, 0) + kl_ref(a, {1.5, 0.0, -1.0}) + kl_ref(b, {-0.2, 0.4, 0.9});
        CHECK(tagger_loss(add, {old_logits, logits}, gold, &t).item() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("width mismatch is rejected") {
        TagDistributions t;
        t.n = 2;
        t.widths = {5};
        t.heads = {std::vector<double>(10, 0.2)};
        CHECK_THROWS_AS(tagger_loss(extend, {logits}, gold, &t), std::invalid_argument);
    }
}

TEST_CASE("tagger gradients") {
    for (Mode mode : {Mode::ExtendNER, Mode::AddNER}) {
        num::Rng rng(4);
        Tagger t(small_config(), mode, rng);
        t.add_task({"PER"}, rng);
        std::vector<std::size_t> ids = {2, 5, 7};
        const auto teacher_probs = tag_probabilities(t.logits(ids, false, rng));
        t.add_task({"ORG"}, rng);
        const std::size_t width = t.heads().back().w.cols();
        TagDistributions teacher = mode == Mode::ExtendNER ? pad_teacher(teacher_probs, width, kDefaultPad) : teacher_probs;
        // perturb so the student differs from the teacher
        for (auto& p : t.named_parameters()) {
            for (auto& v : p.second.mutable_values()) v += 0.05 * rng.uniform(-1, 1);
        }
        std::vector<std::size_t> gold = {0, mode == Mode::ExtendNER ? 3u : 1u, 0};
        auto loss_fn = [&] {
            num::Rng r(0);
            return tagger_loss(t, t.logits(ids, false, r), gold, &teacher);
        };
        std::vector<num::Tensor> params;
        std::vector<std::string> names;
        for (auto& [n, p] : t.named_parameters()) {
            params.push_back(p);
            names.push_back(n);
        }
        auto r = testing::grad_check(loss_fn, params, names);
        CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
    }
}

TEST_CASE("predict_spans and teacher cache") {
    num::Rng rng(2);
    Tagger t(small_config(), Mode::ExtendNER, rng);
    t.add_task({"PER"}, rng);
    std::vector<std::vector<std::size_t>> sents = {{2, 3}, {4, 5, 6}};
    auto cache = tag_teacher_predict(t, sents, 5, kDefaultPad);
    REQUIRE(cache.size() == 2);
    CHECK(cache.at(1).widths == std::vector<std::size_t>{5});
    CHECK(cache.at(1).heads[0].size() == 15);
    CHECK(cache.digest() == tag_teacher_predict(t, sents, 5, kDefaultPad).digest());
    CHECK(cache.digest() != tag_teacher_predict(t, sents, 7, kDefaultPad).digest());

    // forcing the B-PER column to dominate tags every token as PER
    auto b = t.heads()[0].b;
    b.mutable_values()[1] = 100.0;
    auto logits = t.logits(sents[1], false, rng);
    CHECK(predict_spans(t, logits) == std::vector<Span>{{0, 0, "PER"}, {1, 1, "PER"}, {2, 2, "PER"}});
    b.mutable_values()[1] = 0.0;
    b.mutable_values()[0] = 100.0;
    CHECK(predict_spans(t, t.logits(sents[1], false, rng)).empty());
}
