#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clner/cldata.hpp"
#include "clner/clrunner.hpp"
#include "clner/errors.hpp"

using namespace clner;
using namespace clner::runner;
namespace fs = std::filesystem;

namespace {

RunConfig tiny(ModelKind model = ModelKind::SpanKL) {
    RunConfig c;
    c.model = model;
    c.epochs = 2;
    c.batch_size = 4;
    c.dim = 16;
    c.heads = 2;
    c.out_dim = 8;
    c.max_len = 32;
    c.seed = 3;
    return c;
}

cldata::SynthesizedBenchmark toy_bench(cldata::Setup setup, std::size_t tasks, std::size_t sentences = 90) {
    auto spec = cldata::default_toy_spec();
    spec.sentences = sentences;
    auto corpus = cldata::generate_toy_corpus(spec, 17);
    auto data = cldata::split_corpus(corpus, 0.7, 0.15, 17);
    auto seq = cldata::permutations(cldata::DatasetKind::Toy, corpus, tasks, 1, 5)[0];
    return cldata::synthesize(data, seq, setup, 9);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("clner_test_runner_" + name);
    fs::remove_all(p);
    return p;
}

SweepOptions sweep_options(bool noncl, bool final_only, std::size_t jobs) {
    SweepOptions o;
    o.with_noncl = noncl;
    o.noncl_final_only = final_only;
    o.jobs = jobs;
    return o;
}

}  // namespace

TEST_CASE("config parsing") {
    SUBCASE("defaults round trip") {
        RunConfig c;
        auto back = parse_config(render_config(c));
        CHECK(render_config(back) == render_config(c));
        CHECK(config_hash(back) == config_hash(c));
        CHECK(config_hash(c).size() == 16);
    }
    SUBCASE("values, comments and spacing") {
        auto c = parse_config("# comment\nmodel=extendner\n  epochs = 3   # trailing\nbeta = 0\nfreeze_encoder = yes\ndecode = nested\n");
        CHECK(c.model == ModelKind::ExtendNER);
        CHECK(c.epochs == 3);
        CHECK(c.beta == 0.0);
        CHECK(c.freeze_encoder);
        CHECK(c.decode == Decode::Nested);
        CHECK(parse_config(render_config(c)).lr_heads == c.lr_heads);
    }
    SUBCASE("every problem is listed") {
        try {
            parse_config("epochs = 0\nbatch_size = -1\nmodel = crf\ncolour = blue\nthreshold = 2\nnonsense\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            for (const char* needle : {"epochs", "batch_size", "model", "colour", "threshold", "line 6"})
                CHECK_MESSAGE(msg.find(needle) != std::string::npos, needle);
        }
    }
    SUBCASE("heads must divide dim") {
        RunConfig c;
        c.dim = 10;
        c.heads = 4;
        CHECK(validate(c).size() == 1);
    }
}

TEST_CASE("median") {
    CHECK(median({3.0}) == 3.0);
    CHECK(median({4.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS(median({}));
}

TEST_CASE("single task is plain supervised training") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 1);
    for (auto beta : {0.0, 1.0}) {
        auto c = tiny();
        c.beta = beta;
        auto r = run_cl(c, bench);
        REQUIRE(r.steps.size() == 1);
        CHECK(r.steps[0].teacher_digest == 0);
    }
    auto c0 = tiny(), c1 = tiny();
    c0.beta = 0.0;
    CHECK(run_cl(c0, bench).steps[0].eval.macro == run_cl(c1, bench).steps[0].eval.macro);
}

TEST_CASE("run directory layout and determinism") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 2);
    for (auto model : {ModelKind::SpanKL, ModelKind::ExtendNER, ModelKind::AddNER}) {
        CAPTURE(to_string(model));
        auto a = scratch("det_a"), b = scratch("det_b");
        RunOptions oa, ob;
        oa.out_dir = a;
        ob.out_dir = b;
        auto ra = run_cl(tiny(model), bench, oa);
        run_cl(tiny(model), bench, ob);
        for (const char* f : {"config.txt", "vocab.txt", "manifest.json", "metrics.jsonl", "step_01/model.ckpt", "step_02/model.ckpt",
                              "step_02/teacher_digest.txt", "step_02/predictions.jsonl"})
            CHECK_MESSAGE(fs::exists(a / f), f);
        CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
        CHECK(slurp(a / "step_02/model.ckpt") == slurp(b / "step_02/model.ckpt"));
        auto rows = read_metrics(a);
        REQUIRE(rows.size() == 2);
        CHECK(rows[1].mode == "cl");
        CHECK(rows[1].step == 2);
        CHECK(rows[1].macro_f1 == ra.steps[1].eval.macro);
        CHECK(rows[1].unit_f1.size() == bench.sequence.learned_through(2).size());
        CHECK(ra.steps[1].teacher_digest != 0);
        CHECK(parse_config(slurp(a / "config.txt")).model == model);
        fs::remove_all(a);
        fs::remove_all(b);
    }
}

TEST_CASE("dev selection keeps the best epoch") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 2);
    auto c = tiny();
    c.epochs = 4;
    auto r = run_cl(c, bench);
    for (const auto& s : r.steps) {
        REQUIRE(s.dev_curve.size() == 4);
        const double top = *std::max_element(s.dev_curve.begin(), s.dev_curve.end());
        std::size_t last_top = 0;
        for (std::size_t e = 0; e < s.dev_curve.size(); ++e)
            if (s.dev_curve[e] == top) last_top = e + 1;
        CHECK(s.best_epoch == last_top);
    }
}

TEST_CASE("resume after step 1 reproduces step 2") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 3);
    for (auto model : {ModelKind::SpanKL, ModelKind::ExtendNER}) {
        CAPTURE(to_string(model));
        auto full = scratch("full"), part = scratch("part");
        RunOptions of;
        of.out_dir = full;
        auto whole = run_cl(tiny(model), bench, of);

        RunOptions op;
        op.out_dir = part;
        op.stop_after = 1;
        CHECK(run_cl(tiny(model), bench, op).steps.size() == 1);
        op.stop_after = 0;
        op.resume = true;
        auto rest = run_cl(tiny(model), bench, op);
        REQUIRE(rest.steps.size() == 2);
        CHECK(rest.steps[0].step == 2);
        CHECK(rest.steps[0].teacher_digest == whole.steps[1].teacher_digest);
        CHECK(slurp(full / "step_02/teacher_digest.txt") == slurp(part / "step_02/teacher_digest.txt"));
        CHECK(slurp(full / "metrics.jsonl") == slurp(part / "metrics.jsonl"));
        fs::remove_all(full);
        fs::remove_all(part);
    }
}

TEST_CASE("corrupt checkpoint aborts with the step") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 2);
    auto dir = scratch("corrupt");
    RunOptions o;
    o.out_dir = dir;
    o.stop_after = 1;
    run_cl(tiny(), bench, o);
    std::ofstream(dir / "step_01/model.ckpt", std::ios::binary | std::ios::trunc) << "junk";
    o.stop_after = 0;
    o.resume = true;
    try {
        run_cl(tiny(), bench, o);
        FAIL("expected RunAbort");
    } catch (const RunAbort& e) {
        CHECK(e.step == 1);
    }
    fs::remove_all(dir);
}

TEST_CASE("empty task aborts") {
    auto bench = toy_bench(cldata::Setup::SplitAll, 2);
    bench.tasks[1].train.clear();
    bench.tasks[1].train_full.clear();
    bench.tasks[1].train_source.clear();
    try {
        run_cl(tiny(), bench);
        FAIL("expected RunAbort");
    } catch (const RunAbort& e) {
        CHECK(e.step == 2);
    }
}

TEST_CASE("non-CL reference runs") {
    SUBCASE("step 1 matches the CL step 1") {
        auto bench = toy_bench(cldata::Setup::SplitAll, 2);
        for (auto model : {ModelKind::SpanKL, ModelKind::ExtendNER, ModelKind::AddNER}) {
            auto cl = run_cl(tiny(model), bench);
            RunOptions o;
            o.only_steps = {1};
            auto ref = run_noncl(tiny(model), bench, o);
            REQUIRE(ref.steps.size() == 1);
            CHECK(ref.steps[0].mode == "noncl");
            CHECK(ref.steps[0].eval.macro == cl.steps[0].eval.macro);
            CHECK(ref.steps[0].predictions == cl.steps[0].predictions);
        }
    }
    SUBCASE("union sizes under Split") {
        auto bench = toy_bench(cldata::Setup::SplitAll, 3);
        std::size_t total = 0;
        for (std::size_t l = 1; l <= 3; ++l) {
            total += bench.tasks[l - 1].train.size();
            auto u = noncl_union(bench, l, false);
            CHECK(u.size() == total);
            const auto seen = bench.sequence.learned_through(l);
            for (const auto& s : u)
                for (const auto& sp : s.spans) CHECK(std::find(seen.begin(), seen.end(), sp.type) != seen.end());
        }
    }
    SUBCASE("union under Filter has no repeats") {
        auto bench = toy_bench(cldata::Setup::FilterAll, 3);
        auto u = noncl_union(bench, 3, false);
        std::set<std::size_t> sources;
        for (const auto& t : bench.tasks) sources.insert(t.train_source.begin(), t.train_source.end());
        CHECK(u.size() == sources.size());
    }
    SUBCASE("writes a tagged metrics file") {
        auto bench = toy_bench(cldata::Setup::SplitAll, 2);
        auto dir = scratch("noncl");
        RunOptions o;
        o.out_dir = dir;
        run_noncl(tiny(), bench, o);
        auto rows = read_metrics(dir);
        REQUIRE(rows.size() == 2);
        CHECK(rows[0].mode == "noncl");
        CHECK(fs::exists(dir / "step_02/model.ckpt"));
        fs::remove_all(dir);
    }
}

TEST_CASE("sweep aggregation") {
    auto make = [](std::size_t perm, std::uint64_t seed, double cl_final, std::optional<double> ref) {
        SweepRun r;
        r.permutation = perm;
        r.seed = seed;
        StepRecord a, b;
        a.step = 1;
        a.eval.macro = 0.9;
        b.step = 2;
        b.eval.macro = cl_final;
        r.cl.steps = {a, b};
        if (ref) {
            StepRecord n;
            n.step = 2;
            n.eval.macro = *ref;
            r.noncl.steps = {n};
        }
        return r;
    };
    SUBCASE("two permutations average") {
        auto agg = aggregate({make(1, 7, 80.0, 85.0), make(2, 7, 82.0, 85.0)});
        REQUIRE(agg.steps.size() == 2);
        CHECK(agg.steps[1].cl_by_seed.at(7) == doctest::Approx(81.0));
        CHECK(agg.steps[1].cl_median == doctest::Approx(81.0));
        REQUIRE(agg.steps[1].delta_median.has_value());
        CHECK(*agg.steps[1].delta_median == doctest::Approx(-4.0));
        CHECK_FALSE(agg.steps[0].delta_median.has_value());
    }
    SUBCASE("median over seeds") {
        auto agg = aggregate({make(1, 1, 70.0, 80.0), make(1, 2, 75.0, 80.0), make(1, 3, 90.0, 80.0)});
        CHECK(agg.steps[1].cl_median == doctest::Approx(75.0));
        CHECK(*agg.steps[1].delta_median == doctest::Approx(-5.0));
    }
    SUBCASE("single permutation equals the run") {
        auto bench = toy_bench(cldata::Setup::SplitAll, 2);
        auto c = tiny();
        auto res = sweep(c, {bench}, {c.seed}, sweep_options(false, false, 1));
        auto direct = run_cl(c, bench);
        REQUIRE(res.steps.size() == 2);
        CHECK(res.steps[1].cl_median == direct.steps[1].eval.macro);
        CHECK(res.runs.size() == 1);
    }
    SUBCASE("threads give the same numbers") {
        auto bench = toy_bench(cldata::Setup::SplitAll, 2, 60);
        auto c = tiny();
        auto one = sweep(c, {bench}, {1, 2}, sweep_options(true, true, 1));
        auto two = sweep(c, {bench}, {1, 2}, sweep_options(true, true, 2));
        CHECK(one.steps[1].cl_by_seed == two.steps[1].cl_by_seed);
        CHECK(one.steps[1].delta_median == two.steps[1].delta_median);
    }
    CHECK_THROWS_AS(sweep(tiny(), {}, {1}), ConfigError);
}
