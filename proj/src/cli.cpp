#include "clner/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "clner/cldata.hpp"
#include "clner/clrunner.hpp"
#include "clner/errors.hpp"

namespace clner::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const RunAbort& e) {
        err << "run aborted at " << e.what() << '\n';
        return kAbort;
    } catch (const std::exception& e) {
        err << "run aborted: " << e.what() << '\n';
        return kAbort;
    }
}

std::string num_text(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

std::string pad(std::string s, std::size_t w) {
    if (s.size() < w) s.append(w - s.size(), ' ');
    return s;
}

std::string rpad(const std::string& s, std::size_t w) { return s.size() < w ? std::string(w - s.size(), ' ') + s : s; }

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
}

cldata::SplitCorpus load_data(const SynthesizeArgs& a, std::ostream& err) {
    if (a.corpus == "toy") {
        auto spec = cldata::default_toy_spec();
        spec.sentences = a.sentences;
        return cldata::split_corpus(cldata::generate_toy_corpus(spec, a.seed), a.train_fraction, a.dev_fraction, a.seed);
    }
    const fs::path p(a.corpus);
    auto parse = [&](const fs::path& f) {
        auto r = cldata::parse_corpus(f);
        if (r.repaired) err << "warning: " << f.string() << ": " << r.repaired << " orphan I- tags read as span starts\n";
        return r.corpus;
    };
    if (fs::is_directory(p)) {
        cldata::SplitCorpus s;
        s.train = parse(p / "train.txt");
        s.dev = parse(p / "dev.txt");
        s.test = parse(p / "test.txt");
        return s;
    }
    if (!fs::exists(p)) throw DataError("corpus not found: " + a.corpus);
    return cldata::split_corpus(parse(p), a.train_fraction, a.dev_fraction, a.seed);
}

cldata::SynthesizedBenchmark build_benchmark(const SynthesizeArgs& a, const cldata::SplitCorpus& data) {
    const auto kind = cldata::parse_kind(a.kind);
    const auto setup = cldata::parse_setup(a.setup);
    if (a.permutation == 0) throw ConfigError("permutation ids start at 1");
    auto seqs = kind == cldata::DatasetKind::Toy ? cldata::permutations(kind, data.train, a.tasks, a.permutation, a.seed)
                                                  : cldata::permutations(kind, data.train);
    if (a.permutation > seqs.size())
        throw ConfigError("permutation " + std::to_string(a.permutation) + " out of range [1, " + std::to_string(seqs.size()) + "]");
    const auto& seq = seqs[a.permutation - 1];
    cldata::validate_sequence(seq, data.train);
    return cldata::synthesize(data, seq, setup, a.seed, kind);
}

void write_bench(const fs::path& dir, const cldata::SynthesizedBenchmark& b, const SynthesizeArgs& a) {
    json extra = {{"tool_version", "clner 1.0.0"},
                  {"command", a.command},
                  {"inputs", json::array({a.corpus})},
                  {"seeds", json::array({a.seed})},
                  {"options",
                   {{"tasks", a.tasks},
                    {"sentences", a.sentences},
                    {"train_fraction", a.train_fraction},
                    {"dev_fraction", a.dev_fraction}}}};
    if (a.timestamp) extra["created"] = utc_now();
    cldata::write_benchmark(dir, b, extra.dump());
}

runner::RunConfig build_config(const fs::path& file, const std::vector<std::pair<std::string, std::string>>& overrides) {
    runner::RunConfig c = file.empty() ? runner::RunConfig{} : runner::load_config(file);
    std::vector<std::string> errors;
    for (const auto& [k, v] : overrides) {
        if (auto e = runner::set_field(c, k, v)) errors.push_back("override " + *e);
    }
    for (auto& e : runner::validate(c)) errors.push_back(e);
    if (!errors.empty()) {
        std::string msg = "invalid run configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return c;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

// Runs may be compared when they share the corpus kind, setup, task count
// and type inventory; permutations and seeds may differ.
std::string compat_key(const std::string& benchmark_id) {
    auto parts = split(benchmark_id, ':');
    if (parts.size() != 5) throw DataError("unrecognised benchmark id '" + benchmark_id + "'");
    auto tasks = split(parts[4], '|');
    std::set<std::string> types;
    for (const auto& t : tasks)
        for (const auto& ty : split(t, ',')) types.insert(ty);
    std::string key = parts[0] + " " + parts[1] + ", " + std::to_string(tasks.size()) + " tasks, types";
    for (const auto& t : types) key += " " + t;
    return key;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

struct Series {
    // step -> seed -> permutation -> value
    std::map<std::size_t, std::map<std::uint64_t, std::map<std::size_t, double>>> values;
};

std::map<std::uint64_t, double> per_seed(const std::map<std::uint64_t, std::map<std::size_t, double>>& by_seed) {
    std::map<std::uint64_t, double> out;
    for (const auto& [seed, perms] : by_seed) {
        std::vector<double> v;
        for (const auto& [p, x] : perms) v.push_back(x);
        out[seed] = mean(v);
    }
    return out;
}

double median_of(const std::map<std::uint64_t, double>& m) {
    std::vector<double> v;
    for (const auto& [k, x] : m) v.push_back(x);
    return runner::median(v);
}

}  // namespace

int cmd_synthesize(const SynthesizeArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (a.out.empty()) throw ConfigError("--out is required");
        const auto data = load_data(a, err);
        const auto b = build_benchmark(a, data);
        write_bench(a.out, b, a);
        out << "wrote " << b.tasks.size() << " tasks to " << a.out.string() << '\n';
        for (std::size_t l = 0; l < b.tasks.size(); ++l) {
            out << "  task " << l + 1 << " " << b.sequence.tasks[l].name << ": train " << b.tasks[l].train.size() << ", dev "
                << b.tasks[l].dev.size() << ", test " << b.tasks[l].test.size() << '\n';
        }
        return int(kOk);
    });
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (a.out.empty()) throw ConfigError("--out is required");
        if (a.benchmark.empty()) throw ConfigError("--benchmark is required");
        if (a.mode != "cl" && a.mode != "noncl") throw ConfigError("--mode must be cl or noncl, got '" + a.mode + "'");
        const auto config = build_config(a.config, a.overrides);
        const auto bench = cldata::read_benchmark(a.benchmark);
        runner::RunOptions o;
        o.out_dir = a.out;
        o.resume = a.resume;
        o.stop_after = a.stop_after;
        o.benchmark_path = a.benchmark.string();
        o.command = a.command;
        if (a.timestamp) o.timestamp = utc_now();
        const auto r = a.mode == "cl" ? runner::run_cl(config, bench, o) : runner::run_noncl(config, bench, o);
        for (const auto& s : r.steps)
            out << a.mode << " step " << s.step << "  macro-F1 " << pct(s.eval.macro) << "  best epoch " << s.best_epoch << '\n';
        return int(kOk);
    });
}

int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (a.runs.empty()) throw ConfigError("report needs at least one run directory");
        std::string key;
        // (model, mode) -> macro series; (model, mode, unit) -> unit series
        std::map<std::pair<std::string, std::string>, Series> macro;
        std::map<std::tuple<std::string, std::string, std::string>, Series> units;
        std::string records = "model,mode,setup,permutation,seed,step,type,tp,fp,fn,precision,recall,f1\n";
        std::size_t max_step = 0;

        for (const auto& dir : a.runs) {
            const auto rows = runner::read_metrics(dir);
            if (rows.empty()) throw DataError("no metrics records in " + dir.string());
            for (const auto& r : rows) {
                const std::string k = compat_key(r.benchmark);
                if (key.empty()) {
                    key = k;
                } else if (k != key) {
                    throw DataError("incompatible benchmarks: '" + key + "' and '" + k + "' (" + dir.string() + ")");
                }
                auto& slot = macro[{r.model, r.mode}].values[r.step][r.seed];
                if (slot.count(r.permutation))
                    throw DataError("duplicate record for " + r.model + " " + r.mode + " permutation " + std::to_string(r.permutation) +
                                    " seed " + std::to_string(r.seed) + " step " + std::to_string(r.step));
                slot[r.permutation] = r.macro_f1;
                max_step = std::max(max_step, r.step);
                for (const auto& u : r.unit_order) {
                    const auto& tc = r.unit_counts.at(u);
                    units[{r.model, r.mode, u}].values[r.step][r.seed][r.permutation] = tc.f1();
                    records += r.model + "," + r.mode + "," + r.setup + "," + std::to_string(r.permutation) + "," + std::to_string(r.seed) +
                               "," + std::to_string(r.step) + "," + u + "," + std::to_string(tc.tp) + "," + std::to_string(tc.fp) + "," +
                               std::to_string(tc.fn) + "," + num_text(tc.precision()) + "," + num_text(tc.recall()) + "," +
                               num_text(tc.f1()) + "\n";
                }
            }
        }

        // Per-seed deltas pair CL and non-CL scores of the same permutation.
        std::map<std::string, Series> delta;
        for (const auto& [mm, s] : macro) {
            if (mm.second != "cl") continue;
            auto it = macro.find({mm.first, "noncl"});
            if (it == macro.end()) continue;
            for (const auto& [step, seeds] : s.values) {
                auto ns = it->second.values.find(step);
                if (ns == it->second.values.end()) continue;
                for (const auto& [seed, perms] : seeds) {
                    auto np = ns->second.find(seed);
                    if (np == ns->second.end()) continue;
                    for (const auto& [p, v] : perms) {
                        if (auto q = np->second.find(p); q != np->second.end())
                            delta[mm.first].values[step][seed][p] = metrics::gap(v, q->second);
                    }
                }
            }
        }

        std::ostringstream t;
        std::string summary = "model,mode,step,seed,macro_f1\n";
        t << "benchmark " << key << '\n';
        t << "macro-F1 (%): median over seeds of the mean over permutations; delta = CL - non-CL\n\n";
        t << pad("model", 11) << pad("mode", 7) << rpad("seeds", 5);
        for (std::size_t s = 1; s <= max_step; ++s) t << rpad("step " + std::to_string(s), 9);
        t << '\n';

        auto emit = [&](const std::string& model, const std::string& mode, const Series& s) {
            std::set<std::uint64_t> seeds;
            for (const auto& [step, by] : s.values)
                for (const auto& [seed, p] : by) seeds.insert(seed);
            t << pad(model, 11) << pad(mode, 7) << rpad(std::to_string(seeds.size()), 5);
            for (std::size_t step = 1; step <= max_step; ++step) {
                auto it = s.values.find(step);
                if (it == s.values.end()) {
                    t << rpad("-", 9);
                    continue;
                }
                const auto ps = per_seed(it->second);
                const double m = median_of(ps);
                t << rpad(pct(m), 9);
                for (const auto& [seed, v] : ps)
                    summary += model + "," + mode + "," + std::to_string(step) + "," + std::to_string(seed) + "," + num_text(v) + "\n";
                summary += model + "," + mode + "," + std::to_string(step) + ",median," + num_text(m) + "\n";
            }
            t << '\n';
        };
        std::set<std::string> models;
        for (const auto& [mm, s] : macro) models.insert(mm.first);
        for (const auto& model : models) {
            for (const char* mode : {"cl", "noncl"}) {
                if (auto it = macro.find({model, mode}); it != macro.end()) emit(model, mode, it->second);
            }
            if (auto it = delta.find(model); it != delta.end()) emit(model, "delta", it->second);
        }

        // Per-seed breakdown.
        t << "\nper seed\n";
        for (const auto& [mm, s] : macro) {
            std::set<std::uint64_t> seeds;
            for (const auto& [step, by] : s.values)
                for (const auto& [seed, p] : by) seeds.insert(seed);
            for (auto seed : seeds) {
                t << pad(mm.first, 11) << pad(mm.second, 7) << rpad(std::to_string(seed), 5);
                for (std::size_t step = 1; step <= max_step; ++step) {
                    auto it = s.values.find(step);
                    auto ps = it == s.values.end() ? std::map<std::uint64_t, double>{} : per_seed(it->second);
                    t << rpad(ps.count(seed) ? pct(ps.at(seed)) : "-", 9);
                }
                t << '\n';
            }
        }
        out << t.str();

        if (!a.out.empty()) {
            std::map<std::tuple<std::string, std::string, std::size_t, std::string>, double> rows;
            for (const auto& [k, s] : units) {
                const auto& [model, mode, unit] = k;
                for (const auto& [step, by] : s.values) rows[{model, mode, step, unit}] = median_of(per_seed(by));
            }
            std::string curves = "model,mode,step,type,f1\n";
            for (const auto& [k, f1] : rows) {
                const auto& [model, mode, step, unit] = k;
                curves += model + "," + mode + "," + std::to_string(step) + "," + unit + "," + num_text(f1) + "\n";
            }
            std::error_code ec;
            fs::create_directories(a.out, ec);
            if (ec) throw DataError("cannot create " + a.out.string() + ": " + ec.message());
            write_file(a.out / "report.txt", t.str());
            write_file(a.out / "records.csv", records);
            write_file(a.out / "summary.csv", summary);
            write_file(a.out / "curves.csv", curves);
        }
        return int(kOk);
    });
}

int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (a.out.empty()) throw ConfigError("--out is required");
        if (a.permutations == 0) throw ConfigError("--permutations must be at least 1");
        const auto config = build_config(a.config, a.overrides);
        const auto data = load_data(a.data, err);
        std::vector<cldata::SynthesizedBenchmark> benches;
        for (std::size_t p = 1; p <= a.permutations; ++p) {
            SynthesizeArgs sa = a.data;
            sa.permutation = p;
            sa.command = a.command;
            sa.timestamp = a.timestamp;
            benches.push_back(build_benchmark(sa, data));
            write_bench(a.out / ("bench_p" + std::to_string(p)), benches.back(), sa);
        }
        runner::SweepOptions so;
        so.with_noncl = a.noncl;
        so.noncl_final_only = a.noncl_final_only;
        so.jobs = a.jobs;
        so.out_dir = a.out;
        so.command = a.command;
        if (a.timestamp) so.timestamp = utc_now();
        const auto result = runner::sweep(config, benches, a.seeds, so);

        ReportArgs ra;
        ra.out = a.out / "report";
        for (const auto& r : result.runs) {
            const auto dir = runner::sweep_run_dir(a.out, r.permutation, r.seed);
            ra.runs.push_back(dir / "cl");
            if (a.noncl) ra.runs.push_back(dir / "noncl");
        }
        return cmd_report(ra, out, err);
    });
}

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Continual span-based NER experiments"};
    app.require_subcommand(1);

    std::string command;
    for (std::size_t i = 0; i < argv.size(); ++i) command += (i ? " " : "") + argv[i];

    SynthesizeArgs syn;
    auto* s = app.add_subcommand("synthesize", "build a task sequence benchmark from a corpus");
    auto add_data_flags = [](CLI::App* sub, SynthesizeArgs& d) {
        sub->add_option("--corpus", d.corpus, "\"toy\", a column file, or a directory with train/dev/test.txt")->capture_default_str();
        sub->add_option("--kind", d.kind, "toy, ontonotes or fewnerd")->capture_default_str();
        sub->add_option("--setup", d.setup, "split-all, split-filter, filter-all or filter-filter")->capture_default_str();
        sub->add_option("--seed", d.seed, "synthesis seed")->capture_default_str();
        sub->add_option("--tasks", d.tasks, "number of tasks (toy kind)")->capture_default_str();
        sub->add_option("--sentences", d.sentences, "toy corpus size")->capture_default_str();
        sub->add_option("--train-fraction", d.train_fraction)->capture_default_str();
        sub->add_option("--dev-fraction", d.dev_fraction)->capture_default_str();
    };
    add_data_flags(s, syn);
    s->add_option("--permutation", syn.permutation, "task order id, 1-based")->capture_default_str();
    s->add_option("--out", syn.out, "benchmark directory")->required();
    s->add_flag("--timestamp", syn.timestamp, "record the creation time in the manifest");

    // Config overrides shared by train and sweep, applied in this order.
    struct Overrides {
        std::string model, epochs, alpha, beta, threshold, seed;
        std::vector<std::string> set;
        std::vector<std::pair<std::string, std::string>> collect() const {
            std::vector<std::pair<std::string, std::string>> out;
            for (const auto& [k, v] : {std::pair{"model", model}, {"epochs", epochs}, {"alpha", alpha}, {"beta", beta},
                                       {"threshold", threshold}, {"seed", seed}})
                if (!v.empty()) out.emplace_back(k, v);
            for (const auto& kv : set) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
                out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
            }
            return out;
        }
    };
    auto add_overrides = [](CLI::App* sub, Overrides& o, bool with_seed) {
        sub->add_option("--model", o.model, "spankl, addner or extendner");
        sub->add_option("--epochs", o.epochs);
        sub->add_option("--alpha", o.alpha, "weight of the supervised loss");
        sub->add_option("--beta", o.beta, "weight of the distillation loss");
        sub->add_option("--threshold", o.threshold, "span decision threshold");
        if (with_seed) sub->add_option("--seed", o.seed, "training seed");
        sub->add_option("--set", o.set, "any config field as key=value")->take_all();
    };

    TrainArgs tr;
    Overrides tro;
    auto* t = app.add_subcommand("train", "run a continual or non-CL experiment on a benchmark");
    t->add_option("--benchmark", tr.benchmark, "benchmark directory")->required();
    t->add_option("--config", tr.config, "key = value run config file");
    t->add_option("--mode", tr.mode, "cl or noncl")->capture_default_str();
    t->add_option("--out", tr.out, "run directory")->required();
    t->add_flag("--resume", tr.resume, "continue from completed steps in --out");
    t->add_option("--stop-after", tr.stop_after, "stop after this step");
    t->add_flag("--timestamp", tr.timestamp, "record the creation time in the manifest");
    add_overrides(t, tro, true);

    ReportArgs rep;
    auto* r = app.add_subcommand("report", "merge run directories into a step table and curve files");
    r->add_option("runs", rep.runs, "run directories")->required();
    r->add_option("--out", rep.out, "write report.txt, records.csv, summary.csv and curves.csv here");

    SweepArgs sw;
    Overrides swo;
    auto* w = app.add_subcommand("sweep", "run every permutation and seed, CL and non-CL, then report");
    add_data_flags(w, sw.data);
    w->add_option("--permutations", sw.permutations, "number of task orders")->capture_default_str();
    w->add_option("--seeds", sw.seeds, "training seeds, comma separated")->delimiter(',');
    w->add_option("--config", sw.config, "key = value run config file");
    w->add_option("--jobs", sw.jobs, "parallel runs")->capture_default_str();
    w->add_flag("!--no-noncl", sw.noncl, "skip the non-CL reference runs");
    w->add_flag("--noncl-final-only", sw.noncl_final_only, "non-CL reference for the last step only");
    w->add_option("--out", sw.out, "sweep directory")->required();
    w->add_flag("--timestamp", sw.timestamp, "record the creation time in each manifest");
    add_overrides(w, swo, false);

    std::vector<std::string> rest(argv.rbegin(), argv.rend());
    if (!rest.empty()) rest.pop_back();  // program name
    try {
        app.parse(rest);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? int(kOk) : int(kUsage);
    }

    return guarded(err, [&] {
        if (s->parsed()) {
            syn.command = command;
            return cmd_synthesize(syn, out, err);
        }
        if (t->parsed()) {
            tr.overrides = tro.collect();
            tr.command = command;
            return cmd_train(tr, out, err);
        }
        if (r->parsed()) return cmd_report(rep, out, err);
        sw.overrides = swo.collect();
        sw.command = command;
        return cmd_sweep(sw, out, err);
    });
}

}  // namespace clner::cli
