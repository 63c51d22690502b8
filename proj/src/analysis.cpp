#include "f2m/analysis.hpp"

#include <cmath>
#include <exception>

#include "f2m/errors.hpp"

namespace f2m {

using nlohmann::json;

namespace {

// Neumaier-compensated running sum.
class CompensatedSum {
public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

}  // namespace

FlatnessReport flatness_probe(const ParamSet& params, const ValueFn& loss, double bound, std::size_t n_samples,
                              std::uint64_t seed, kernels::Exec exec) {
    if (n_samples < 1) throw ContractError("flatness probe needs at least one sample");
    const NoiseSpec spec{bound, 1, seed};
    Rng rng(seed);
    std::vector<NoiseVector> draws;
    draws.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) draws.push_back(sample_noise(spec, params, rng));

    FlatnessReport report;
    report.bound = bound;
    report.sample_count = n_samples;
    report.anchor_loss = loss(params);
    report.sample_losses.assign(n_samples, 0.0);
    std::vector<std::exception_ptr> errors(n_samples);
    kernels::parallel_for(exec, n_samples, [&](std::size_t i) {
        try {
            report.sample_losses[i] = loss(perturbed(params, draws[i]));
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    const auto n = static_cast<double>(n_samples);
    CompensatedSum total;
    for (double l : report.sample_losses) total.add(l);
    report.mean_loss = total.value() / n;
    CompensatedSum dev_anchor, dev_mean;
    for (double l : report.sample_losses) {
        dev_anchor.add((l - report.anchor_loss) * (l - report.anchor_loss));
        dev_mean.add((l - report.mean_loss) * (l - report.mean_loss));
    }
    report.indicator = dev_anchor.value() / n;
    report.variance = dev_mean.value() / n;
    return report;
}

double cross_entropy_loss(const ParamSet& params, const Dataset& data, kernels::Exec exec) {
    std::vector<std::size_t> labels(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.labels[i] < 0) throw IndexError("negative head label");
        labels[i] = static_cast<std::size_t>(data.labels[i]);
    }
    return ad::softmax_cross_entropy(logits(params, data.matrix(), exec), labels);
}

FlatnessReport flatness_indicator(const ParamSet& params, double bound, const Dataset& data, std::size_t n_samples,
                                  std::uint64_t seed, kernels::Exec exec) {
    // The outer loop carries the parallelism; each evaluation runs serially.
    return flatness_probe(
        params, [&data](const ParamSet& at) { return cross_entropy_loss(at, data, kernels::Exec::serial); }, bound,
        n_samples, seed, exec);
}

double grad_norm_estimate(const ParamSet& params, const LossGradFn& full, const NoiseSpec& spec, Rng& rng) {
    std::vector<NoiseVector> draws;
    for (std::size_t j = 0; j < spec.samples; ++j) draws.push_back(sample_noise(spec, params, rng));
    const LossGrad lg = noise_averaged(params, draws, full);
    double s = 0.0;
    for (const auto& g : lg.grad)
        for (double v : g.values()) s += v * v;
    return s;
}

ParamSet QuadraticToy::start_params() const {
    if (curvature.size() != center.size() || start.size() != center.size() || center.empty())
        throw DimensionError("quadratic toy vectors must share a positive length");
    return ParamSet({Param{"theta", Tensor::vector(start), Group::embedding, true}});
}

LossGradFn QuadraticToy::loss() const {
    return [a = curvature, c = center](const ParamSet& at) {
        const Tensor& theta = at[0].value;
        LossGrad lg{0.0, {Tensor::zeros_like(theta)}};
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = theta[i] - c[i];
            lg.value += 0.5 * a[i] * d * d;
            lg.grad[0][i] = a[i] * d;
        }
        return lg;
    };
}

std::vector<GradNormPoint> quadratic_convergence(const QuadraticToy& toy, const ConvergenceConfig& config) {
    config.noise.validate();
    ParamSet params = toy.start_params();
    const LossGradFn fn = toy.loss();
    Rng train_rng(derive_seed(config.noise.seed, 1));
    Rng probe_rng(derive_seed(config.noise.seed, 2));
    std::vector<GradNormPoint> trace;
    trace.push_back({0, grad_norm_estimate(params, fn, config.noise, probe_rng)});
    for (std::size_t k = 0; k < config.steps; ++k) {
        std::vector<NoiseVector> draws;
        for (std::size_t j = 0; j < config.noise.samples; ++j)
            draws.push_back(sample_noise(config.noise, params, train_rng));
        const double step = config.base_lr / (1.0 + config.lr_decay * static_cast<double>(k));
        base_train_step(params, draws, fn, step, kernels::Exec::serial);
        const std::size_t done = k + 1;
        if (done == config.steps || (config.record_every && done % config.record_every == 0))
            trace.push_back({done, grad_norm_estimate(params, fn, config.noise, probe_rng)});
    }
    return trace;
}

SessionAccuracy session_accuracy(const ParamSet& params, const PrototypeStore& store, const Dataset& test,
                                 kernels::Exec exec) {
    if (store.empty()) throw StateError("accuracy with an empty prototype store");
    const std::set<int> encountered = store.classes();
    const Dataset eval = test.filter_classes(encountered);
    const std::set<int> present = eval.classes();
    for (int c : encountered)
        if (!present.count(c)) throw StateError("no test samples for encountered class " + std::to_string(c));

    std::set<int> base, novel;
    int session = kBaseSession;
    for (const auto& [c, p] : store.prototypes()) {
        (p.session == kBaseSession ? base : novel).insert(c);
        session = std::max(session, p.session);
    }

    const Tensor emb = embed(params, eval.matrix(), exec);
    const std::size_t d = emb.cols();
    std::size_t hit_all = 0, n_base = 0, hit_base = 0, hit_base_joint = 0, n_novel = 0, hit_novel = 0,
                hit_novel_joint = 0;
    for (std::size_t i = 0; i < eval.size(); ++i) {
        const auto e = emb.data().subspan(i * d, d);
        const int y = eval.labels[i];
        const bool joint = nearest_prototype(store, e) == y;
        hit_all += joint;
        if (base.count(y)) {
            ++n_base;
            hit_base_joint += joint;
            hit_base += nearest_prototype(store, e, &base) == y;
        } else {
            ++n_novel;
            hit_novel_joint += joint;
            hit_novel += nearest_prototype(store, e, &novel) == y;
        }
    }
    SessionAccuracy acc;
    acc.session = session;
    acc.all = static_cast<double>(hit_all) / static_cast<double>(eval.size());
    if (n_base) {
        acc.base = static_cast<double>(hit_base) / static_cast<double>(n_base);
        acc.base_joint = static_cast<double>(hit_base_joint) / static_cast<double>(n_base);
    }
    if (n_novel) {
        acc.novel = static_cast<double>(hit_novel) / static_cast<double>(n_novel);
        acc.novel_joint = static_cast<double>(hit_novel_joint) / static_cast<double>(n_novel);
    }
    return acc;
}

double performance_dropping_rate(std::span<const double> accuracies) {
    if (accuracies.size() < 2) throw ContractError("performance dropping rate needs at least 2 sessions");
    return accuracies.front() - accuracies.back();
}

double round_to(double value, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::round(value * scale) / scale;
}

std::vector<double> Metrics::accuracies() const {
    std::vector<double> out;
    for (const auto& s : sessions) out.push_back(s.all);
    return out;
}

std::optional<double> Metrics::pd() const {
    if (sessions.size() < 2) return std::nullopt;
    const auto acc = accuracies();
    return performance_dropping_rate(acc);
}

namespace {
json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
}  // namespace

json to_json(const FlatnessReport& r, bool include_samples) {
    json doc = {{"split", r.split},          {"anchor_loss", r.anchor_loss}, {"mean_loss", r.mean_loss},
                {"indicator", r.indicator}, {"variance", r.variance},       {"sample_count", r.sample_count},
                {"bound", r.bound}};
    if (include_samples) doc["sample_losses"] = r.sample_losses;
    return doc;
}

json to_json(const SessionAccuracy& a) {
    return {{"session", a.session},
            {"acc_all", a.all},
            {"acc_base", a.base},
            {"acc_new", optional_json(a.novel)},
            {"acc_base_joint", a.base_joint},
            {"acc_new_joint", optional_json(a.novel_joint)}};
}

json to_json(const Metrics& m) {
    json doc;
    json& sessions = doc["sessions"] = json::array();
    for (const auto& s : m.sessions) sessions.push_back(to_json(s));
    doc["accuracy"] = m.accuracies();
    doc["pd"] = optional_json(m.pd());
    json& trace = doc["grad_norm_trace"] = json::array();
    for (const auto& p : m.grad_norm_trace) trace.push_back({{"step", p.step}, {"sq_norm", p.sq_norm}});
    return doc;
}

}  // namespace f2m
