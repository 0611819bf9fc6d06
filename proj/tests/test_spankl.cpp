#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "clner/num/ops.hpp"
#include "clner/num/optim.hpp"
#include "clner/spankl.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace clner;
using namespace clner::spankl;

namespace {

// Head whose projections are fixed matrices, for hand-evaluated logits.
TypeHead fixed_head(TypeId id, std::vector<double> sw, std::vector<double> ew, std::size_t hidden, std::size_t out) {
    TypeHead h;
    h.type = id;
    h.name = "T" + std::to_string(id);
    h.start_w = num::Tensor::from({hidden, out}, std::move(sw));
    h.start_b = num::Tensor::zeros({1, out});
    h.end_w = num::Tensor::from({hidden, out}, std::move(ew));
    h.end_b = num::Tensor::zeros({1, out});
    return h;
}

SpanMatrixSet single_matrix(std::size_t n, std::vector<double> logits, bool grad = false) {
    SpanMatrixSet m;
    m.n = n;
    m.types = {0};
    m.logits = {num::Tensor::from({n, n}, std::move(logits), grad)};
    return m;
}

encoder::EncoderConfig tiny_encoder(std::size_t vocab) {
    encoder::EncoderConfig c;
    c.vocab_size = vocab;
    c.dim = 8;
    c.heads = 2;
    c.max_len = 16;
    c.dropout = 0.1;
    return c;
}

const std::vector<TypeId> kType0 = {0};

}  // namespace

TEST_CASE("span_logits hand-evaluated examples") {
    num::Tensor hidden = num::Tensor::from({1, 1}, {1.0});
    SUBCASE("zero start projection gives zero logits") {
        num::Tensor h2 = num::Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
        std::vector<TypeHead> heads = {fixed_head(0, {0, 0, 0, 0}, {1, 2, 3, 4}, 2, 2)};
        auto m = span_logits(h2, heads);
        for (double x : m.logits[0].values()) CHECK(x == 0.0);
    }
    SUBCASE("d_out = 1") {
        std::vector<TypeHead> heads = {fixed_head(0, {2.0}, {3.0}, 1, 1)};
        CHECK(span_logits(hidden, heads).logits[0].item() == doctest::Approx(6.0));
    }
    SUBCASE("d_out = 4 includes the 1/sqrt(d_out) scale") {
        std::vector<TypeHead> heads = {fixed_head(0, {1, 1, 1, 1}, {1, 1, 1, 1}, 1, 4)};
        CHECK(span_logits(hidden, heads).logits[0].item() == doctest::Approx(2.0));
    }
    SUBCASE("width mismatch rejected") {
        std::vector<TypeHead> heads = {fixed_head(0, {1, 1}, {1, 1}, 2, 1)};
        CHECK_THROWS_AS(span_logits(hidden, heads), std::invalid_argument);
        CHECK_THROWS_AS(span_logits(hidden, {}), std::invalid_argument);
    }
}

TEST_CASE("bce_loss") {
    SUBCASE("logit 0 on a gold cell") {
        auto m = single_matrix(1, {0.0});
        GoldLabelSet g;
        g.cells[0] = {{0, 0}};
        CHECK(bce_loss(m, g, kType0).item() == doctest::Approx(0.693147).epsilon(1e-6));
    }
    SUBCASE("saturated correct prediction") {
        const std::size_t n = 3;
        GoldLabelSet g;
        g.cells[0] = {{0, 1}, {2, 2}};
        std::vector<double> logits(n * n, -20.0);
        logits[0 * n + 1] = 20.0;
        logits[2 * n + 2] = 20.0;
        CHECK(bce_loss(single_matrix(n, logits), g, kType0).item() < 1e-6);
    }
    SUBCASE("n = 2 brute-force per-cell oracle") {
        // lower-left cell is junk and must be ignored
        auto m = single_matrix(2, {0.3, -0.2, 99.0, 0.1});
        GoldLabelSet g;
        g.cells[0] = {{0, 0}};
        const double oracle = testing::bce_cell(0.3, 1) + testing::bce_cell(-0.2, 0) + testing::bce_cell(0.1, 0);
        CHECK(bce_loss(m, g, kType0).item() == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(oracle == doctest::Approx(1.89689077392369).epsilon(1e-12));
    }
    SUBCASE("gold out of bounds or not current") {
        auto m = single_matrix(2, {0, 0, 0, 0});
        GoldLabelSet g;
        g.cells[0] = {{1, 2}};
        CHECK_THROWS_AS(bce_loss(m, g, kType0), std::invalid_argument);
        GoldLabelSet g2;
        g2.cells[5] = {{0, 0}};
        CHECK_THROWS_AS(bce_loss(m, g2, kType0), std::invalid_argument);
    }
}

TEST_CASE("kd_loss") {
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    SUBCASE("identical distributions") {
        auto m = single_matrix(2, {0.4, -1.3, 0.0, 2.2});
        DistilledLabelSet d;
        d.n = 2;
        d.probs[0] = probabilities(m).probs[0];
        CHECK(std::abs(kd_loss(m, d, kType0).item()) < 1e-12);
    }
    SUBCASE("near-certain teacher against 0.5") {
        auto m = single_matrix(1, {0.0});
        DistilledLabelSet d;
        d.n = 1;
        d.probs[0] = {1.0 - 1e-12};
        CHECK(kd_loss(m, d, kType0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-5));
    }
    SUBCASE("p~ = 0.8, p^ = 0.6 against high-precision value") {
        // mpmath, 40 digits: 0.8 ln(0.8/0.6) + 0.2 ln(0.2/0.4)
        const double oracle = 0.09151622184943568;
        auto m = single_matrix(1, {logit(0.6)});
        DistilledLabelSet d;
        d.n = 1;
        d.probs[0] = {0.8};
        CHECK(kd_loss(m, d, kType0).item() == doctest::Approx(oracle).epsilon(1e-12));
        CHECK(testing::kd_cell(0.8, 0.6) == doctest::Approx(oracle).epsilon(1e-12));
    }
    SUBCASE("missing old type rejected") {
        auto m = single_matrix(1, {0.0});
        DistilledLabelSet d;
        d.n = 1;
        CHECK_THROWS_AS(kd_loss(m, d, kType0), std::invalid_argument);
    }
}

TEST_CASE("total_loss weighting") {
    auto bce = num::Tensor::scalar(0.5);
    auto kd = num::Tensor::scalar(0.25);
    CHECK(total_loss(bce, kd, 1.0, 1.0).item() == doctest::Approx(0.75));
    CHECK(total_loss(bce, kd, 1.0, 0.0).item() == doctest::Approx(0.5));
    CHECK(total_loss(bce, num::Tensor::scalar(0.0), 0.0, 1.0).item() == 0.0);
    CHECK(total_loss(bce, num::Tensor(), 1.0, 1.0).item() == doctest::Approx(0.5));
    CHECK_THROWS_AS(total_loss(bce, kd, -1.0, 1.0), std::invalid_argument);
}

TEST_CASE("loss properties on random inputs") {
    num::Rng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(5);
        std::vector<double> logits(n * n), teacher(n * n);
        for (auto& x : logits) x = rng.uniform(-6, 6);
        for (auto& p : teacher) p = rng.uniform(0.001, 0.999);
        auto m = single_matrix(n, logits);
        GoldLabelSet g;
        g.cells[0];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                if (rng.bernoulli(0.3)) g.cells[0].insert({i, j});
            }
        }
        DistilledLabelSet d;
        d.n = n;
        d.probs[0] = teacher;
        const double bce = bce_loss(m, g, kType0).item();
        const double kd = kd_loss(m, d, kType0).item();
        CHECK(bce >= 0.0);
        CHECK(kd >= 0.0);

        // Only the upper triangle is read.
        auto perturbed = logits;
        for (std::size_t i = 1; i < n; ++i) perturbed[i * n] += 3.0;
        auto m2 = single_matrix(n, perturbed);
        CHECK(bce_loss(m2, g, kType0).item() == bce);
        CHECK(kd_loss(m2, d, kType0).item() == kd);

        // Per-cell oracle sums.
        double bce_ref = 0.0, kd_ref = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = i; j < n; ++j) {
                bce_ref += testing::bce_cell(logits[i * n + j], g.cells[0].count({i, j}) ? 1.0 : 0.0);
                kd_ref += testing::kd_cell(teacher[i * n + j], testing::sigmoid_ref(logits[i * n + j]));
            }
        }
        CHECK(bce == doctest::Approx(bce_ref).epsilon(1e-9));
        CHECK(kd == doctest::Approx(kd_ref).epsilon(1e-9));
    }
}

TEST_CASE("fused loss gradients match finite differences") {
    num::Rng rng(2);
    const std::size_t n = 3;
    std::vector<double> logits(n * n), teacher(n * n);
    for (auto& x : logits) x = rng.uniform(-2, 2);
    for (auto& p : teacher) p = rng.uniform(0.05, 0.95);
    num::Tensor x = num::Tensor::from({n, n}, logits, true);
    GoldLabelSet g;
    g.cells[0] = {{0, 2}, {1, 1}};
    DistilledLabelSet d;
    d.n = n;
    d.probs[0] = teacher;
    auto loss = [&] {
        SpanMatrixSet m;
        m.n = n;
        m.types = {0};
        m.logits = {x};
        return total_loss(bce_loss(m, g, kType0), kd_loss(m, d, kType0), 1.0, 1.0);
    };
    auto res = testing::grad_check(loss, {x});
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("add_task_head") {
    num::Rng rng(3);
    SpanModel model(tiny_encoder(10), 4, rng);
    std::vector<std::size_t> ids = {2, 3, 4};
    auto per = model.add_task_head({"PER"}, rng);
    CHECK(per == std::vector<TypeId>{0});
    CHECK(model.head_parameters().size() == 4);

    num::Rng r(0);
    auto before = model.forward(ids, false, r);
    std::vector<double> per_before(before.logits[0].values().begin(), before.logits[0].values().end());
    auto snapshot = model.named_parameters();
    std::vector<std::vector<double>> values;
    for (auto& [name, t] : snapshot) values.emplace_back(t.values().begin(), t.values().end());

    auto ids2 = model.add_task_head({"ORG", "GPE"}, rng);
    CHECK(ids2 == std::vector<TypeId>{1, 2});
    // two projection sets (weight + bias each) per type
    CHECK(model.head_parameters().size() == 4 * 3);
    auto after = model.forward(ids, false, r);
    std::vector<double> per_after(after.logits_for(0).values().begin(), after.logits_for(0).values().end());
    CHECK(per_before == per_after);
    for (std::size_t k = 0; k < snapshot.size(); ++k) {
        CHECK(std::vector<double>(snapshot[k].second.values().begin(), snapshot[k].second.values().end()) == values[k]);
    }

    CHECK_THROWS_AS(model.add_task_head({"PER"}, rng), std::invalid_argument);
    CHECK_THROWS_AS(model.add_task_head({"X", "X"}, rng), std::invalid_argument);
    CHECK(model.heads().size() == 3);
    CHECK(model.heads()[1].start_w.same_node(model.heads()[1].end_w) == false);
}

TEST_CASE("gradient of the total loss through encoder and heads") {
    encoder::EncoderConfig c = tiny_encoder(8);
    c.dropout = 0.0;
    num::Rng rng(21);
    SpanModel model(c, 4, rng);
    model.add_task_head({"A"}, rng);
    model.add_task_head({"B"}, rng);
    std::vector<std::size_t> ids = {2, 5, 3};
    GoldLabelSet gold;
    gold.cells[1] = {{0, 1}};
    DistilledLabelSet teacher;
    teacher.n = 3;
    teacher.probs[0] = {0.9, 0.2, 0.1, 0.5, 0.7, 0.3, 0.5, 0.5, 0.05};
    const std::vector<TypeId> current = {1}, old = {0};
    num::Rng r(0);
    auto loss = [&] {
        auto m = model.forward(ids, false, r);
        return total_loss(bce_loss(m, gold, current), kd_loss(m, teacher, old), 1.0, 1.0);
    };
    std::vector<num::Tensor> params;
    std::vector<std::string> names;
    for (auto& [n, t] : model.named_parameters()) {
        params.push_back(t);
        names.push_back(n);
    }
    auto res = testing::grad_check(loss, params, names);
    CHECK_MESSAGE(res.max_rel_error < 1e-4, res.worst);
}

TEST_CASE("decode_flat") {
    auto scores_from = [](std::size_t n, std::vector<std::tuple<std::size_t, std::size_t, TypeId, double>> cells, std::size_t types) {
        SpanScores s;
        s.n = n;
        for (std::size_t k = 0; k < types; ++k) {
            s.types.push_back(k);
            s.probs.emplace_back(n * n, 0.01);
        }
        for (auto [i, j, k, p] : cells) s.probs[k][i * n + j] = p;
        return s;
    };
    SUBCASE("nothing above threshold") {
        CHECK(decode_flat(scores_from(3, {}, 2), 0.5).empty());
    }
    SUBCASE("overlap keeps the higher score") {
        // 1-based (1,2,PER) and (2,3,ORG)
        auto out = decode_flat(scores_from(4, {{0, 1, 0, 0.9}, {1, 2, 1, 0.8}}, 2), 0.5);
        REQUIRE(out.size() == 1);
        CHECK(out[0] == SpanCandidate{0, 1, 0, 0.9});
    }
    SUBCASE("disjoint spans both kept") {
        auto out = decode_flat(scores_from(4, {{0, 0, 0, 0.7}, {2, 3, 1, 0.6}}, 2), 0.5);
        CHECK(out.size() == 2);
    }
    SUBCASE("ties broken by start, end, type") {
        auto out = decode_flat(scores_from(3, {{1, 2, 0, 0.8}, {0, 1, 1, 0.8}, {0, 1, 0, 0.8}}, 2), 0.5);
        REQUIRE(out.size() == 1);
        CHECK(out[0] == SpanCandidate{0, 1, 0, 0.8});
    }
    SUBCASE("nested decoding keeps everything above threshold") {
        auto out = decode_nested(scores_from(3, {{0, 2, 0, 0.9}, {1, 1, 1, 0.8}}, 2), 0.5);
        CHECK(out.size() == 2);
    }
    SUBCASE("random instances against the elimination oracle") {
        num::Rng rng(99);
        for (int t = 0; t < 200; ++t) {
            const std::size_t n = 1 + rng.below(6);
            const std::size_t k = 1 + rng.below(3);
            SpanScores s;
            s.n = n;
            std::vector<std::vector<std::vector<double>>> ref(k, std::vector<std::vector<double>>(n, std::vector<double>(n)));
            for (std::size_t c = 0; c < k; ++c) {
                s.types.push_back(c);
                s.probs.emplace_back(n * n);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        // coarse grid produces ties
                        const double p = static_cast<double>(rng.below(10)) / 10.0 + 0.05;
                        s.probs[c][i * n + j] = p;
                        ref[c][i][j] = p;
                    }
                }
            }
            auto got = decode_flat(s, 0.5);
            auto want = testing::flat_decode_oracle(ref, 0.5);
            REQUIRE(got.size() == want.size());
            for (std::size_t q = 0; q < got.size(); ++q) {
                CHECK(got[q].start == std::get<0>(want[q]));
                CHECK(got[q].end == std::get<1>(want[q]));
                CHECK(got[q].type == std::get<2>(want[q]));
                CHECK(got[q].score == std::get<3>(want[q]));
                CHECK(got[q].score > 0.5);
            }
            for (std::size_t a = 0; a < got.size(); ++a) {
                for (std::size_t b = a + 1; b < got.size(); ++b) {
                    CHECK((got[a].end < got[b].start || got[b].end < got[a].start));
                }
            }
        }
    }
}

TEST_CASE("teacher prediction") {
    num::Rng rng(5);
    SpanModel model(tiny_encoder(12), 4, rng);
    model.add_task_head({"PER", "ORG"}, rng);
    std::vector<std::vector<std::size_t>> data = {{2, 3, 4}, {5, 6}, {7, 8, 9, 10}};

    SUBCASE("first step has no teacher") {
        auto cache = teacher_predict(model, data, {});
        CHECK(cache.empty());
        CHECK(cache.size() == 0);
    }
    SUBCASE("self-distillation has zero KD") {
        const std::vector<TypeId> old = {0, 1};
        auto cache = teacher_predict(model, data, old);
        REQUIRE(cache.size() == data.size());
        num::Rng r(0);
        for (std::size_t s = 0; s < data.size(); ++s) {
            auto m = model.forward(data[s], false, r);
            CHECK(std::abs(kd_loss(m, cache.at(s), old).item()) < 1e-12);
        }
    }
    SUBCASE("cache is immutable while the student trains") {
        const std::vector<TypeId> old = {0};
        auto cache = teacher_predict(model, data, old);
        const auto digest = cache.digest();
        auto current = model.add_task_head({"GPE"}, rng);
        num::AdamW opt;
        opt.add_group(model.encoder().parameters(), 1e-2);
        opt.add_group(model.head_parameters(), 1e-2);
        num::Rng r(1);
        for (int epoch = 0; epoch < 3; ++epoch) {
            for (std::size_t s = 0; s < data.size(); ++s) {
                opt.zero_grad();
                auto m = model.forward(data[s], true, r);
                GoldLabelSet gold;
                gold.cells[current[0]] = {{0, 0}};
                total_loss(bce_loss(m, gold, current), kd_loss(m, cache.at(s), old), 1.0, 1.0).backward();
                opt.step();
            }
        }
        CHECK(cache.digest() == digest);
        // the student did move
        CHECK(teacher_predict(model, data, old).digest() != digest);
    }
}

TEST_CASE("make_gold picks only the requested types") {
    num::Rng rng(1);
    SpanModel model(tiny_encoder(5), 2, rng);
    model.add_task_head({"PER", "ORG"}, rng);
    Sentence s{{"a", "b", "c"}, {{0, 0, "PER"}, {0, 2, "ORG"}, {1, 1, "LOC"}}};
    const std::vector<TypeId> only_org = {1};
    auto g = make_gold(s, model, only_org);
    CHECK(g.cells.size() == 1);
    CHECK(g.cells.at(1) == CellSet{{0, 2}});
}
