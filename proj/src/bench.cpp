#include "f2m/bench.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "f2m/errors.hpp"
#include "f2m/random.hpp"

namespace f2m {

using nlohmann::json;

void SyntheticSpec::validate() const {
    if (class_count < 2) throw ConfigError("classes: need at least 2 classes");
    if (input_dim < 1) throw ConfigError("input_dim: must be >= 1");
    if (!(separation > 0.0)) throw ConfigError("separation: must be positive");
    if (!(within_std >= 0.0)) throw ConfigError("within_std: must be >= 0");
    if (base_classes + new_classes != class_count)
        throw ConfigError("base_classes + new_classes must equal classes (" + std::to_string(base_classes) + " + " +
                          std::to_string(new_classes) + " != " + std::to_string(class_count) + ")");
    if (train_per_class < 1) throw ConfigError("train_per_class: must be >= 1");
    if (test_per_class < 1) throw ConfigError("test_per_class: must be >= 1");
}

TrainTest gen_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<std::vector<double>> means(spec.class_count, std::vector<double>(spec.input_dim));
    for (auto& m : means) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (double& v : m) {
                v = unit(rng);
                norm += v * v;
            }
        } while (norm == 0.0);
        norm = std::sqrt(norm);
        for (double& v : m) v = v / norm * spec.separation;
    }
    TrainTest out{Dataset(spec.input_dim), Dataset(spec.input_dim)};
    std::vector<double> x(spec.input_dim);
    auto draw = [&](Dataset& into, std::size_t per_class) {
        for (std::size_t c = 0; c < spec.class_count; ++c)
            for (std::size_t i = 0; i < per_class; ++i) {
                for (std::size_t k = 0; k < spec.input_dim; ++k) x[k] = means[c][k] + spec.within_std * unit(rng);
                into.add(x, static_cast<int>(c));
            }
    };
    draw(out.train, spec.train_per_class);
    draw(out.test, spec.test_per_class);
    return out;
}

std::vector<SessionSpec> split_sessions(const Dataset& train, std::size_t base_class_count, std::size_t way,
                                        std::size_t shot, std::uint64_t seed) {
    if (way < 1) throw ConfigError("way: must be >= 1");
    if (shot < 1) throw ConfigError("shot: must be >= 1");
    const auto groups = train.indices_by_class();
    // Either base-only, or room for at least one few-shot session.
    if (groups.size() != base_class_count && groups.size() < base_class_count + way)
        throw ConfigError("dataset has " + std::to_string(groups.size()) + " classes, need at least base (" +
                          std::to_string(base_class_count) + ") + way (" + std::to_string(way) + ")");
    if (base_class_count < 2) throw ConfigError("base_classes: need at least 2 base classes");

    std::vector<int> ids;
    for (const auto& [c, _] : groups) ids.push_back(c);
    Rng rng(seed);
    const std::vector<std::size_t> order = permutation(ids.size(), rng);

    std::vector<SessionSpec> sessions;
    SessionSpec base;
    base.index = kBaseSession;
    for (std::size_t i = 0; i < base_class_count; ++i) base.classes.push_back(ids[order[i]]);
    std::sort(base.classes.begin(), base.classes.end());
    base.train = train.filter_classes({base.classes.begin(), base.classes.end()});
    base.way = base.classes.size();
    base.shot = 0;
    sessions.push_back(std::move(base));

    for (std::size_t start = base_class_count; start + way <= ids.size(); start += way) {
        SessionSpec s;
        s.index = static_cast<int>(sessions.size()) + 1;
        s.way = way;
        s.shot = shot;
        s.train = Dataset(train.dim);
        for (std::size_t i = start; i < start + way; ++i) s.classes.push_back(ids[order[i]]);
        std::sort(s.classes.begin(), s.classes.end());
        for (int c : s.classes) {
            const auto& idx = groups.at(c);
            if (shot > idx.size())
                throw ConfigError("shot " + std::to_string(shot) + " exceeds the " + std::to_string(idx.size()) +
                                  " training samples of class " + std::to_string(c));
            std::vector<std::size_t> pick = permutation(idx.size(), rng);
            pick.resize(shot);
            std::sort(pick.begin(), pick.end());
            for (auto p : pick) s.train.add(train.row(idx[p]), c);
        }
        sessions.push_back(std::move(s));
    }
    return sessions;
}

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    Dataset data;
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> feats;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto fail = [&](const std::string& why) {
            return ParseError(path.string() + ":" + std::to_string(line_no) + ": " + why);
        };
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (cells.size() < 2) throw fail("expected a label and at least one feature");

        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string label_text = trim(cells[0]);
        long long label = -1;
        auto [lp, lec] = std::from_chars(label_text.data(), label_text.data() + label_text.size(), label);
        if (lec != std::errc() || lp != label_text.data() + label_text.size() || label < 0 ||
            label > std::numeric_limits<int>::max())
            throw fail("label '" + label_text + "' is not a nonnegative integer");

        feats.clear();
        for (std::size_t i = 1; i < cells.size(); ++i) {
            const std::string t = trim(cells[i]);
            double v = 0.0;
            auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
            if (t.empty() || ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v))
                throw fail("feature " + std::to_string(i) + " ('" + t + "') is not a finite number");
            feats.push_back(v);
        }
        if (data.empty() && data.dim == 0) data.dim = feats.size();
        if (feats.size() != data.dim)
            throw fail("expected " + std::to_string(data.dim) + " features, found " + std::to_string(feats.size()));
        data.add(feats, static_cast<int>(label));
    }
    return data;
}

namespace {
std::string format_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}
std::string format_optional(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }
}  // namespace

void write_csv(const std::filesystem::path& path, const Dataset& data) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    for (std::size_t i = 0; i < data.size(); ++i) {
        out << data.labels[i];
        for (double v : data.row(i)) out << ',' << format_double(v);
        out << '\n';
    }
}

ExperimentConfig seeded(ExperimentConfig config) {
    const std::uint64_t s = config.seed;
    config.data.synthetic.seed = derive_seed(s, 10);
    config.net.seed = derive_seed(s, 12);
    config.train.seed = derive_seed(s, 13);
    config.train.noise.seed = derive_seed(s, 14);
    return config;
}

TrainTest load_data(const ExperimentConfig& config) {
    if (config.data.train_csv.empty() != config.data.test_csv.empty())
        throw ConfigError("train_csv and test_csv must be given together");
    if (!config.data.train_csv.empty()) {
        TrainTest tt{load_csv(config.data.train_csv), load_csv(config.data.test_csv)};
        if (tt.train.dim != tt.test.dim) throw ConfigError("train and test CSV feature counts differ");
        return tt;
    }
    return gen_synthetic(config.data.synthetic);
}

SplitFlatness probe_base_flatness(const ExperimentConfig& raw, const ParamSet& params,
                                  const std::vector<int>& head_classes) {
    const ExperimentConfig config = seeded(raw);
    const TrainTest data = load_data(config);
    const std::set<int> base_set(head_classes.begin(), head_classes.end());
    const Dataset train_head = to_head_labels(data.train.filter_classes(base_set), head_classes);
    const Dataset test_head = to_head_labels(data.test.filter_classes(base_set), head_classes);
    const std::uint64_t probe_seed = derive_seed(config.seed, 15);
    SplitFlatness out{
        flatness_indicator(params, config.train.noise.bound, train_head, config.flatness_samples, probe_seed),
        flatness_indicator(params, config.train.noise.bound, test_head, config.flatness_samples, probe_seed)};
    out.train.split = "train";
    out.test.split = "test";
    return out;
}

ExperimentResult run_experiment(const ExperimentConfig& raw, const StepObserver& observer) {
    const ExperimentConfig config = seeded(raw);
    const TrainTest data = load_data(config);
    NetworkConfig net = config.net;
    net.input_dim = data.train.dim;
    const std::vector<SessionSpec> sessions =
        split_sessions(data.train, config.data.synthetic.base_classes, config.data.way, config.data.shot,
                       derive_seed(config.seed, 11));

    ExperimentResult result;
    EpochObserver epoch_observer;
    Dataset base_head;
    std::vector<int> head_classes(sessions[0].classes);
    if (config.trace_grad_norm) {
        base_head = to_head_labels(sessions[0].train, head_classes);
        epoch_observer = [&, rng = Rng(derive_seed(config.seed, 16))](std::size_t epoch,
                                                                        const ParamSet& params) mutable {
            const double lambda = config.train.flags.pf ? config.train.lambda : 0.0;
            NoiseSpec spec = config.train.noise;
            if (!config.train.flags.fm) spec.samples = 1;
            LossGrad lg = config.train.flags.fm
                              ? multi_noise_loss(params, spec, rng, base_head, lambda)
                              : multi_noise_loss(params, std::vector<NoiseVector>{NoiseVector(params.eligible_count(), 0.0)},
                                                 base_head, lambda);
            double s = 0.0;
            for (const auto& g : lg.grad)
                for (double v : g.values()) s += v * v;
            result.metrics.grad_norm_trace.push_back({epoch, s});
        };
    }

    BaseResult base = train_base(sessions[0].train, net, config.train, epoch_observer);

    if (config.measure_flatness) {
        SplitFlatness f = probe_base_flatness(raw, base.params, base.head_classes);
        result.flatness_train = std::move(f.train);
        result.flatness_test = std::move(f.test);
    }

    result.state = make_run_state(net, std::move(base), config.train.exemplars_per_class);
    result.metrics.sessions.push_back(session_accuracy(result.state.params, result.state.store, data.test));

    const FlatRegion* region = result.state.region ? &*result.state.region : nullptr;
    for (std::size_t t = 1; t < sessions.size() && !config.base_only; ++t) {
        incremental_session(result.state, sessions[t], config.train, [&](const ParamSet& params) {
            if (region) result.max_drift = std::max(result.max_drift, region_drift(params, *region));
            if (observer) observer(params);
        });
        result.metrics.sessions.push_back(session_accuracy(result.state.params, result.state.store, data.test));
    }

    result.base_norms = prototype_norm_stats(result.state.store, Split::base);
    if (result.metrics.sessions.size() > 1) result.new_norms = prototype_norm_stats(result.state.store, Split::novel);
    return result;
}

SessionSummary summarize(const std::vector<ExperimentResult>& runs) {
    SessionSummary s;
    if (runs.empty()) return s;
    const std::size_t sessions = runs.front().metrics.sessions.size();
    for (std::size_t t = 0; t < sessions; ++t) {
        double mean = 0.0;
        for (const auto& r : runs) mean += r.metrics.sessions.at(t).all;
        mean /= static_cast<double>(runs.size());
        double var = 0.0;
        for (const auto& r : runs) var += (r.metrics.sessions.at(t).all - mean) * (r.metrics.sessions.at(t).all - mean);
        var /= static_cast<double>(runs.size());
        s.mean.push_back(mean);
        s.stddev.push_back(std::sqrt(var));
    }
    return s;
}

std::vector<Flags> ablation_flag_sets() {
    return {Flags::parse("none"),     Flags::parse("pc"),       Flags::parse("fm,pf,pn"),
            Flags::parse("fm,pc,pn"), Flags::parse("fm,pf,pc"), Flags::parse("fm,pf,pc,pn")};
}

std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& config) {
    std::vector<AblationRow> rows;
    for (const Flags& flags : ablation_flag_sets()) {
        ExperimentConfig c = config;
        c.train.flags = flags;
        c.measure_flatness = false;
        const ExperimentResult r = run_experiment(c);
        rows.push_back({flags, r.metrics.accuracies(), r.metrics.pd()});
    }
    return rows;
}

std::vector<double> default_bound_grid() { return {0.0025, 0.005, 0.01, 0.02, 0.04, 0.08}; }

std::vector<SweepRow> run_bound_sweep(const ExperimentConfig& config, const std::vector<double>& grid) {
    if (grid.empty()) throw ConfigError("sweep_grid: must not be empty");
    for (double b : grid)
        if (!(b > 0.0)) throw ConfigError("sweep_grid: every bound must be positive");
    std::vector<SweepRow> rows;
    for (double b : grid) {
        ExperimentConfig c = config;
        c.train.noise.bound = b;
        c.measure_flatness = false;
        const ExperimentResult r = run_experiment(c);
        const auto& first = r.metrics.sessions.front();
        const auto& last = r.metrics.sessions.back();
        rows.push_back({b, first.all, last.all, last.base, last.novel});
    }
    return rows;
}

void write_metrics_json(const std::filesystem::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

json experiment_json(const ExperimentResult& r) {
    json doc = to_json(r.metrics);
    doc["max_drift"] = r.max_drift;
    auto norms = [](const std::optional<NormStats>& n) {
        return n ? json{{"mean", n->mean}, {"std", n->stddev}} : json(nullptr);
    };
    doc["prototype_norms"] = {{"base", norms(r.base_norms)}, {"new", norms(r.new_norms)}};
    if (r.flatness_train) doc["flatness"] = {to_json(*r.flatness_train), to_json(*r.flatness_test)};
    return doc;
}

void write_sessions_csv(const std::filesystem::path& path, const Metrics& metrics) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    out << "session,acc_all,acc_base,acc_new\n";
    for (const auto& s : metrics.sessions)
        out << s.session << ',' << format_double(s.all) << ',' << format_double(s.base) << ','
            << format_optional(s.novel) << '\n';
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    const std::size_t sessions = rows.empty() ? 0 : rows.front().accuracy.size();
    out << "fm,pf,pc,pn";
    for (std::size_t t = 0; t < sessions; ++t) out << ",session_" << t + 1;
    out << ",pd\n";
    for (const auto& r : rows) {
        out << r.flags.fm << ',' << r.flags.pf << ',' << r.flags.pc << ',' << r.flags.pn;
        for (double a : r.accuracy) out << ',' << format_double(a);
        out << ',' << format_optional(r.pd) << '\n';
    }
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    out << "b,session1_all,last_all,last_base,last_new\n";
    for (const auto& r : rows)
        out << format_double(r.bound) << ',' << format_double(r.session1) << ',' << format_double(r.last_all) << ','
            << format_double(r.last_base) << ',' << format_optional(r.last_new) << '\n';
}

void write_flatness_csv(const std::filesystem::path& path, const std::vector<FlatnessReport>& reports) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    out << "split,sample,loss\n";
    for (const auto& r : reports)
        for (std::size_t i = 0; i < r.sample_losses.size(); ++i)
            out << r.split << ',' << i << ',' << format_double(r.sample_losses[i]) << '\n';
}

}  // namespace f2m
