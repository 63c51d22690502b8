#include "f2m/cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>

#include "CLI11.hpp"
#include "f2m/bench.hpp"
#include "f2m/config.hpp"
#include "f2m/errors.hpp"
#include "f2m/kernels.hpp"

namespace f2m {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::optional<std::string> config;
    std::optional<std::string> seed, out, bound, noise_samples, lambda, flags, checkpoint;
};

void add_common(CLI::App* cmd, Options& o) {
    cmd->add_option("--config", o.config, "config file (TOML-style or run_manifest.json)");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--bound", o.bound, "flat region bound b");
    cmd->add_option("--noise-samples", o.noise_samples, "noise draws per step (M)");
    cmd->add_option("--lambda", o.lambda, "prototype-fixing weight");
    cmd->add_option("--flags", o.flags, "comma list of fm,pf,pc,pn or none");
}

RunConfig resolve(const Options& o, std::optional<Mode> mode) {
    std::vector<Override> ov;
    auto push = [&](const char* key, const std::optional<std::string>& v) {
        if (v) ov.emplace_back(key, *v);
    };
    push("seed", o.seed);
    push("out", o.out);
    push("b", o.bound);
    push("noise_samples", o.noise_samples);
    push("lambda", o.lambda);
    push("flags", o.flags);
    push("checkpoint", o.checkpoint);
    RunConfig rc = parse_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt, ov);
    if (mode) rc.mode = *mode;
    return rc;
}

void write_json(const fs::path& path, const json& doc) { write_metrics_json(path, doc); }

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& rc) {
    write_json(dir / "run_manifest.json",
               {{"tool", "f2m"}, {"version", kToolVersion}, {"command", command}, {"config", to_json(rc)}});
}

ExperimentConfig seed_at(const RunConfig& rc, std::size_t i) {
    ExperimentConfig c = rc.experiment;
    c.seed = rc.experiment.seed + i;
    if (rc.mode == Mode::baseline) {
        c.train.flags = Flags::none();
        c.train.inc_epochs = 0;
    }
    return c;
}

json flatness_doc(const FlatnessReport& r) {
    return {{"split", r.split},         {"I", r.indicator},       {"sigma2", r.variance},
            {"L_star", r.anchor_loss},  {"mean_loss", r.mean_loss}, {"samples", r.sample_count},
            {"bound", r.bound}};
}

json flatness_pair(const FlatnessReport& train, const FlatnessReport& test) {
    return {{"train", flatness_doc(train)}, {"test", flatness_doc(test)}};
}

Metrics mean_metrics(const std::vector<ExperimentResult>& runs) {
    Metrics m = runs.front().metrics;
    const double n = static_cast<double>(runs.size());
    for (std::size_t t = 0; t < m.sessions.size(); ++t) {
        SessionAccuracy& a = m.sessions[t];
        a.all = a.base = a.base_joint = 0.0;
        if (a.novel) a.novel = a.novel_joint = 0.0;
        for (const auto& r : runs) {
            const SessionAccuracy& s = r.metrics.sessions.at(t);
            a.all += s.all / n;
            a.base += s.base / n;
            a.base_joint += s.base_joint / n;
            if (a.novel) {
                *a.novel += *s.novel / n;
                *a.novel_joint += *s.novel_joint / n;
            }
        }
    }
    return m;
}

std::vector<ExperimentResult> run_seeds(const RunConfig& rc, bool base_only) {
    std::vector<ExperimentResult> runs;
    for (std::size_t i = 0; i < rc.seeds; ++i) {
        ExperimentConfig c = seed_at(rc, i);
        c.base_only = base_only;
        c.measure_flatness = true;
        runs.push_back(run_experiment(c));
    }
    return runs;
}

json runs_doc(const std::vector<ExperimentResult>& runs, const RunConfig& rc) {
    json list = json::array();
    for (std::size_t i = 0; i < runs.size(); ++i) {
        json d = experiment_json(runs[i]);
        d["seed"] = rc.experiment.seed + i;
        list.push_back(std::move(d));
    }
    const SessionSummary s = summarize(runs);
    return {{"mode", mode_name(rc.mode)}, {"runs", list}, {"summary", {{"mean", s.mean}, {"std", s.stddev}}}};
}

void cmd_run(const RunConfig& rc, bool base_only) {
    const fs::path dir = rc.out;
    fs::create_directories(dir);
    write_manifest(dir, base_only ? "train-base" : "run", rc);
    const std::vector<ExperimentResult> runs = run_seeds(rc, base_only);
    write_json(dir / "metrics.json", runs_doc(runs, rc));
    write_sessions_csv(dir / "sessions.csv", mean_metrics(runs));
    const ExperimentResult& first = runs.front();
    write_json(dir / "flatness.json", flatness_pair(*first.flatness_train, *first.flatness_test));
    save_run_state(dir / "state", first.state);
}

void cmd_ablation(const RunConfig& rc) {
    const fs::path dir = rc.out;
    fs::create_directories(dir);
    write_manifest(dir, "ablation", rc);
    std::vector<std::vector<AblationRow>> grids;
    for (std::size_t i = 0; i < rc.seeds; ++i) grids.push_back(run_ablation_grid(seed_at(rc, i)));

    std::vector<AblationRow> mean = grids.front();
    const double n = static_cast<double>(grids.size());
    for (std::size_t r = 0; r < mean.size(); ++r) {
        for (double& a : mean[r].accuracy) a = 0.0;
        for (const auto& g : grids)
            for (std::size_t t = 0; t < mean[r].accuracy.size(); ++t) mean[r].accuracy[t] += g[r].accuracy[t] / n;
        if (mean[r].pd) mean[r].pd = performance_dropping_rate(mean[r].accuracy);
    }
    write_ablation_csv(dir / "ablation.csv", mean);

    json per_seed = json::array();
    for (std::size_t i = 0; i < grids.size(); ++i) {
        json rows = json::array();
        for (const auto& row : grids[i])
            rows.push_back({{"flags", row.flags.label()}, {"accuracy", row.accuracy}, {"pd", row.pd ? json(*row.pd) : json()}});
        per_seed.push_back({{"seed", rc.experiment.seed + i}, {"rows", rows}});
    }
    json rows = json::array();
    for (const auto& row : mean)
        rows.push_back({{"flags", row.flags.label()}, {"accuracy", row.accuracy}, {"pd", row.pd ? json(*row.pd) : json()}});
    write_json(dir / "metrics.json", {{"mode", "ablation"}, {"mean", rows}, {"runs", per_seed}});
}

void cmd_sweep(const RunConfig& rc) {
    const fs::path dir = rc.out;
    fs::create_directories(dir);
    write_manifest(dir, "sweep", rc);
    std::vector<std::vector<SweepRow>> sweeps;
    for (std::size_t i = 0; i < rc.seeds; ++i) sweeps.push_back(run_bound_sweep(seed_at(rc, i), rc.sweep_grid));

    std::vector<SweepRow> mean = sweeps.front();
    const double n = static_cast<double>(sweeps.size());
    for (std::size_t r = 0; r < mean.size(); ++r) {
        SweepRow& m = mean[r];
        m.session1 = m.last_all = m.last_base = 0.0;
        if (m.last_new) m.last_new = 0.0;
        for (const auto& s : sweeps) {
            m.session1 += s[r].session1 / n;
            m.last_all += s[r].last_all / n;
            m.last_base += s[r].last_base / n;
            if (m.last_new) *m.last_new += *s[r].last_new / n;
        }
    }
    write_sweep_csv(dir / "sweep.csv", mean);

    auto row_doc = [](const SweepRow& r) {
        return json{{"b", r.bound},
                    {"session1", r.session1},
                    {"last_all", r.last_all},
                    {"last_base", r.last_base},
                    {"last_new", r.last_new ? json(*r.last_new) : json()}};
    };
    json mean_rows = json::array();
    for (const auto& r : mean) mean_rows.push_back(row_doc(r));
    json per_seed = json::array();
    for (std::size_t i = 0; i < sweeps.size(); ++i) {
        json rows = json::array();
        for (const auto& r : sweeps[i]) rows.push_back(row_doc(r));
        per_seed.push_back({{"seed", rc.experiment.seed + i}, {"rows", rows}});
    }
    write_json(dir / "metrics.json", {{"mode", "sweep"}, {"mean", mean_rows}, {"runs", per_seed}});
}

void cmd_flatness(const RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("checkpoint: the flatness subcommand needs --checkpoint <run-state dir>");
    const RunState state = load_run_state(rc.checkpoint);
    const fs::path dir = rc.out;
    fs::create_directories(dir);
    write_manifest(dir, "flatness", rc);
    ExperimentConfig c = rc.experiment;
    const SplitFlatness f = probe_base_flatness(c, state.params, state.head_classes);
    const json doc = flatness_pair(f.train, f.test);
    write_json(dir / "flatness.json", doc);
    write_flatness_csv(dir / "flatness.csv", {f.train, f.test});
    write_json(dir / "metrics.json", {{"mode", "flatness"}, {"checkpoint", rc.checkpoint}, {"flatness", doc}});
}

json trace_doc(const std::vector<GradNormPoint>& trace) {
    json out = json::array();
    for (const auto& p : trace) out.push_back({{"step", p.step}, {"sq_norm", p.sq_norm}});
    return out;
}

void cmd_convergence(RunConfig rc) {
    // The monitor is only meaningful under a decaying step size.
    if (rc.experiment.train.lr_decay == 0.0) rc.experiment.train.lr_decay = 0.01;
    const fs::path dir = rc.out;
    fs::create_directories(dir);
    write_manifest(dir, "convergence", rc);

    const QuadraticToy toy{{1.0, 2.0, 0.5, 4.0}, {0.3, -0.2, 0.1, 0.5}, {2.0, -1.5, 3.0, 1.0}};
    ConvergenceConfig cc;
    cc.noise = rc.experiment.train.noise;
    cc.noise.seed = derive_seed(rc.experiment.seed, 20);
    const std::vector<GradNormPoint> quad = quadratic_convergence(toy, cc);

    ExperimentConfig c = rc.experiment;
    c.base_only = true;
    c.trace_grad_norm = true;
    const ExperimentResult r = run_experiment(c);

    std::ofstream csv(dir / "convergence.csv");
    csv << "series,step,sq_norm\n";
    for (const auto& p : quad) csv << "quadratic," << p.step << ',' << json(p.sq_norm).dump() << '\n';
    for (const auto& p : r.metrics.grad_norm_trace) csv << "network," << p.step << ',' << json(p.sq_norm).dump() << '\n';

    write_json(dir / "metrics.json", {{"mode", "convergence"},
                                      {"quadratic", {{"schedule", {{"base_lr", cc.base_lr}, {"decay", cc.lr_decay}}},
                                                     {"trace", trace_doc(quad)}}},
                                      {"network", {{"schedule",
                                                    {{"base_lr", c.train.base_lr}, {"decay", c.train.lr_decay}}},
                                                   {"trace", trace_doc(r.metrics.grad_norm_trace)}}}});
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"F2M: incremental few-shot learning with flat-minima search"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);

    Options o;
    struct Sub {
        const char* name;
        const char* help;
    };
    const Sub subs[] = {{"train-base", "train the base session and save its run state"},
                        {"run", "base training plus every incremental session"},
                        {"ablation", "six-row flag ablation with performance dropping rate"},
                        {"sweep", "accuracy across a grid of flat region bounds"},
                        {"flatness", "flatness indicator of a saved run state"},
                        {"convergence", "gradient-norm monitor on a quadratic toy and the network"}};
    std::vector<CLI::App*> cmds;
    for (const Sub& s : subs) {
        CLI::App* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, o);
        if (std::string(s.name) == "flatness") cmd->add_option("--checkpoint", o.checkpoint, "run-state directory");
        cmds.push_back(cmd);
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    kernels::configure_threads_from_env();
    const std::string name = app.get_subcommands().front()->get_name();
    try {
        std::optional<Mode> mode;
        if (name == "ablation") mode = Mode::ablation;
        if (name == "sweep") mode = Mode::sweep;
        if (name == "flatness") mode = Mode::flatness;
        if (name == "convergence") mode = Mode::convergence;
        RunConfig rc = resolve(o, mode);
        if (!mode && rc.mode != Mode::baseline) rc.mode = Mode::f2m;

        if (name == "train-base" || name == "run") cmd_run(rc, name == "train-base");
        else if (name == "ablation") cmd_ablation(rc);
        else if (name == "sweep") cmd_sweep(rc);
        else if (name == "flatness") cmd_flatness(rc);
        else cmd_convergence(rc);
        out << name << ": results in " << rc.out << '\n';
    } catch (const Error& e) {
        err << "error [" << e.kind() << "] " << name << ": " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error [io] " << name << ": " << e.what() << '\n';
        return 1;
    }
    return 0;
}

}  // namespace f2m
