#include "f2m/engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "f2m/errors.hpp"
#include "json.hpp"

namespace f2m {

using nlohmann::json;

Flags Flags::parse(const std::string& text) {
    Flags f = none();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
                   item.end());
        std::transform(item.begin(), item.end(), item.begin(), [](unsigned char c) { return std::tolower(c); });
        if (item.empty() || item == "none") continue;
        if (item == "fm") f.fm = true;
        else if (item == "pf") f.pf = true;
        else if (item == "pc") f.pc = true;
        else if (item == "pn") f.pn = true;
        else throw ConfigError("flags: unknown flag '" + item + "' (expected fm, pf, pc, pn)");
    }
    return f;
}

std::string Flags::label() const {
    std::string out;
    auto push = [&out](bool on, const char* name) {
        if (!on) return;
        if (!out.empty()) out += ',';
        out += name;
    };
    push(fm, "fm");
    push(pf, "pf");
    push(pc, "pc");
    push(pn, "pn");
    return out.empty() ? "none" : out;
}

void NoiseSpec::validate() const {
    if (!(bound > 0.0) || !std::isfinite(bound)) throw ConfigError("b: flat region bound must be positive");
    if (samples < 1) throw ConfigError("noise_samples: M must be >= 1");
}

void TrainConfig::validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr: step size must be positive");
    if (!(inc_lr > 0.0)) throw ConfigError("inc_lr: step size must be positive");
    if (lr_decay < 0.0) throw ConfigError("lr_decay: must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("lambda: must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    noise.validate();
}

NoiseVector sample_noise(const NoiseSpec& spec, const ParamSet& params, Rng& rng) {
    spec.validate();
    std::uniform_real_distribution<double> dist(-spec.bound, spec.bound);
    NoiseVector eps(params.eligible_count());
    for (double& e : eps) e = dist(rng);
    return eps;
}

ClassMeans clean_batch_prototypes(const ParamSet& params, const Dataset& batch) {
    return class_means(embed(params, batch.matrix(), kernels::Exec::serial), batch.labels, batch.classes());
}

namespace {

// Shared by the value and gradient entry points so both see the same graph.
ad::Var record_base_loss(ad::Tape& tape, const ParamSet& at, const Dataset& batch, double lambda,
                         const ClassMeans& clean) {
    const std::vector<ad::Var> vars = bind(tape, at);
    const ad::Var x = tape.constant(batch.matrix());
    const ad::Var emb = embed(at, vars, x);
    const std::size_t layers = at.embedding_layers();
    const ad::Var out = ad::linear(emb, vars[2 * layers], vars[2 * layers + 1]);

    std::vector<std::size_t> labels(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch.labels[i] < 0) throw IndexError("negative head label " + std::to_string(batch.labels[i]));
        labels[i] = static_cast<std::size_t>(batch.labels[i]);
    }
    ad::Var loss = ad::softmax_cross_entropy(out, labels);
    if (lambda == 0.0) return loss;

    const auto groups = batch.indices_by_class();
    ad::Var penalty;
    bool first = true;
    for (const auto& [c, rows] : groups) {
        auto it = clean.find(c);
        if (it == clean.end())
            throw StateError("no clean prototype for batch class " + std::to_string(c));
        const ad::Var p = ad::mean_rows(emb, rows);
        const ad::Var target = tape.constant(Tensor::vector(it->second));
        const ad::Var d = ad::squared_euclidean(p, target);
        penalty = first ? d : ad::add(penalty, d);
        first = false;
    }
    return ad::add(loss, ad::scale(penalty, lambda / static_cast<double>(groups.size())));
}

void require_finite(const LossGrad& lg) {
    if (!std::isfinite(lg.value)) throw DivergenceError("non-finite loss");
    for (const auto& g : lg.grad)
        if (!g.all_finite()) throw DivergenceError("non-finite gradient");
}

}  // namespace

double base_loss(const ParamSet& params, const NoiseVector& noise, const Dataset& batch, double lambda,
                 const ClassMeans& clean) {
    ad::Tape tape;
    return record_base_loss(tape, perturbed(params, noise), batch, lambda, clean).value().item();
}

LossGrad base_loss_grad(const ParamSet& params, const NoiseVector& noise, const Dataset& batch, double lambda,
                        const ClassMeans& clean) {
    ad::Tape tape;
    const ad::Var loss = record_base_loss(tape, perturbed(params, noise), batch, lambda, clean);
    return {loss.value().item(), tape.backward(loss)};
}

LossGrad noise_averaged(const ParamSet& params, std::span<const NoiseVector> draws, const LossGradFn& fn,
                        kernels::Exec exec) {
    if (draws.empty()) throw ContractError("noise averaging needs at least one draw");
    std::vector<LossGrad> parts(draws.size());
    // Exceptions must not escape an OpenMP region; rethrow after the join.
    std::vector<std::exception_ptr> errors(draws.size());
    kernels::parallel_for(exec, draws.size(), [&](std::size_t j) {
        try {
            parts[j] = fn(perturbed(params, draws[j]));
        } catch (...) {
            errors[j] = std::current_exception();
        }
    });
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    LossGrad avg{0.0, params.zero_gradients()};
    for (const LossGrad& part : parts) {
        if (part.grad.size() != avg.grad.size()) throw ContractError("gradient count does not match parameters");
        avg.value += part.value;
        for (std::size_t p = 0; p < avg.grad.size(); ++p) {
            auto dst = avg.grad[p].data();
            auto src = part.grad[p].data();
            if (dst.size() != src.size()) throw DimensionError("gradient shape mismatch for " + params[p].name);
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
    }
    const auto m = static_cast<double>(parts.size());
    avg.value /= m;
    for (auto& g : avg.grad)
        for (double& v : g.data()) v /= m;
    return avg;
}

LossGrad multi_noise_loss(const ParamSet& params, std::span<const NoiseVector> draws, const Dataset& batch,
                          double lambda, kernels::Exec exec) {
    const ClassMeans clean = lambda == 0.0 ? ClassMeans{} : clean_batch_prototypes(params, batch);
    return noise_averaged(
        params, draws,
        [&](const ParamSet& at) {
            ad::Tape tape;
            const ad::Var loss = record_base_loss(tape, at, batch, lambda, clean);
            return LossGrad{loss.value().item(), tape.backward(loss)};
        },
        exec);
}

LossGrad multi_noise_loss(const ParamSet& params, const NoiseSpec& spec, Rng& rng, const Dataset& batch,
                          double lambda, kernels::Exec exec) {
    std::vector<NoiseVector> draws;
    for (std::size_t j = 0; j < spec.samples; ++j) draws.push_back(sample_noise(spec, params, rng));
    return multi_noise_loss(params, draws, batch, lambda, exec);
}

void apply_update(ParamSet& params, const Gradients& grad, double step) {
    if (grad.size() != params.size()) throw ContractError("gradient count does not match parameters");
    for (const auto& g : grad)
        if (!g.all_finite()) throw DivergenceError("non-finite gradient");
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto v = params[p].value.data();
        auto g = grad[p].data();
        if (v.size() != g.size()) throw DimensionError("gradient shape mismatch for " + params[p].name);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= step * g[i];
        if (!params[p].value.all_finite()) throw DivergenceError("non-finite parameters after update of " + params[p].name);
    }
}

LossGrad base_train_step(ParamSet& params, std::span<const NoiseVector> draws, const LossGradFn& fn, double step,
                         kernels::Exec exec) {
    if (!(step > 0.0)) throw ContractError("step size must be positive");
    LossGrad lg = noise_averaged(params, draws, fn, exec);
    require_finite(lg);
    apply_update(params, lg.grad, step);
    return lg;
}

LossGrad base_train_step(ParamSet& params, std::span<const NoiseVector> draws, const Dataset& batch,
                         double lambda, double step, kernels::Exec exec) {
    if (!(step > 0.0)) throw ContractError("step size must be positive");
    LossGrad lg = multi_noise_loss(params, draws, batch, lambda, exec);
    require_finite(lg);
    apply_update(params, lg.grad, step);
    return lg;
}

Dataset to_head_labels(const Dataset& data, std::span<const int> head_classes) {
    Dataset out = data;
    for (int& y : out.labels) {
        auto it = std::lower_bound(head_classes.begin(), head_classes.end(), y);
        if (it == head_classes.end() || *it != y)
            throw StateError("class " + std::to_string(y) + " has no classifier-head slot");
        y = static_cast<int>(it - head_classes.begin());
    }
    return out;
}

BaseResult train_base(const Dataset& base_data, const NetworkConfig& net, const TrainConfig& config,
                      const EpochObserver& observer) {
    config.validate();
    const auto groups = base_data.indices_by_class();
    if (groups.size() < 2) throw ConfigError("base session needs at least 2 classes");
    for (const auto& [c, idx] : groups)
        if (idx.size() < 2)
            throw ConfigError("base class " + std::to_string(c) + " has fewer than 2 samples");

    BaseResult result;
    for (const auto& [c, _] : groups) result.head_classes.push_back(c);
    NetworkConfig cfg = net;
    cfg.class_count = result.head_classes.size();
    result.params = init_network(cfg);

    const Dataset data = to_head_labels(base_data, result.head_classes);
    const double lambda = config.flags.pf ? config.lambda : 0.0;
    Rng shuffle_rng(derive_seed(config.seed, 1));
    Rng noise_rng(derive_seed(config.noise.seed, 2));
    const NoiseVector zero(result.params.eligible_count(), 0.0);

    std::size_t k = 0;
    for (std::size_t epoch = 0; epoch < config.base_epochs; ++epoch) {
        const std::vector<std::size_t> order = permutation(data.size(), shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            const Dataset batch = data.subset(std::span(order).subspan(start, stop - start));
            std::vector<NoiseVector> draws;
            if (config.flags.fm) {
                for (std::size_t j = 0; j < config.noise.samples; ++j)
                    draws.push_back(sample_noise(config.noise, result.params, noise_rng));
            } else {
                draws.push_back(zero);
            }
            try {
                epoch_loss += base_train_step(result.params, draws, batch, lambda, config.base_step(k)).value;
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " at base epoch " + std::to_string(epoch + 1) +
                                      ", batch " + std::to_string(batches + 1));
            }
            ++k;
            ++batches;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
        if (observer) observer(epoch + 1, result.params);
    }

    result.region = FlatRegion{result.params.eligible_values(), config.noise.bound};
    const std::set<int> classes(result.head_classes.begin(), result.head_classes.end());
    for (auto& [c, v] : compute_prototypes(result.params, base_data, classes))
        result.store.add(c, std::move(v), kBaseSession);
    if (config.flags.pn) normalize_prototypes(result.store);
    return result;
}

namespace {

ad::Var record_metric_loss(ad::Tape& tape, const ParamSet& params, const ClassMeans& prototypes,
                           const Dataset& batch) {
    if (prototypes.empty()) throw StateError("metric loss without prototypes");
    std::vector<int> order;
    std::vector<double> flat;
    for (const auto& [c, v] : prototypes) {
        order.push_back(c);
        flat.insert(flat.end(), v.begin(), v.end());
    }
    const std::size_t d = prototypes.begin()->second.size();
    std::vector<std::size_t> rows(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        auto it = std::lower_bound(order.begin(), order.end(), batch.labels[i]);
        if (it == order.end() || *it != batch.labels[i])
            throw StateError("sample of class " + std::to_string(batch.labels[i]) + " has no prototype");
        rows[i] = static_cast<std::size_t>(it - order.begin());
    }
    const std::vector<ad::Var> vars = bind(tape, params);
    const ad::Var emb = embed(params, vars, tape.constant(batch.matrix()));
    const ad::Var protos = tape.constant(Tensor({order.size(), d}, std::move(flat)));
    return ad::softmax_cross_entropy(ad::neg_sq_distances(emb, protos), rows);
}

}  // namespace

double metric_loss(const ParamSet& params, const ClassMeans& prototypes, const Dataset& batch) {
    ad::Tape tape;
    return record_metric_loss(tape, params, prototypes, batch).value().item();
}

LossGrad metric_loss_grad(const ParamSet& params, const ClassMeans& prototypes, const Dataset& batch) {
    ad::Tape tape;
    const ad::Var loss = record_metric_loss(tape, params, prototypes, batch);
    return {loss.value().item(), tape.backward(loss)};
}

void clamp_to_region(ParamSet& params, const FlatRegion& region) {
    if (region.anchor.size() != params.eligible_count())
        throw ContractError("flat region covers " + std::to_string(region.anchor.size()) + " coordinates, " +
                            std::to_string(params.eligible_count()) + " are governed");
    const double b = region.bound;
    std::size_t off = 0;
    for (auto& p : params.params()) {
        if (!p.noise_eligible) continue;
        for (double& v : p.value.data()) {
            const double a = region.anchor[off++];
            v = std::min(std::max(v, a - b), a + b);
            // a +/- b may round outward; step back until |v - a| <= b holds in floating point.
            while (v - a > b) v = std::nextafter(v, a);
            while (a - v > b) v = std::nextafter(v, a);
        }
    }
}

double region_drift(const ParamSet& params, const FlatRegion& region) {
    const std::vector<double> values = params.eligible_values();
    if (values.size() != region.anchor.size()) throw ContractError("flat region does not match parameters");
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) worst = std::max(worst, std::abs(values[i] - region.anchor[i]));
    return worst;
}

RunState make_run_state(const NetworkConfig& net, BaseResult base, std::size_t exemplar_capacity) {
    RunState state;
    state.net = net;
    state.net.class_count = base.head_classes.size();
    state.params = std::move(base.params);
    state.region = std::move(base.region);
    state.store = std::move(base.store);
    state.exemplars.capacity = exemplar_capacity;
    state.head_classes = std::move(base.head_classes);
    state.last_session = kBaseSession;
    return state;
}

namespace {

void require_finite(const ClassMeans& means, int session) {
    for (const auto& [c, v] : means)
        for (double x : v)
            if (!std::isfinite(x))
                throw DivergenceError("non-finite prototype of class " + std::to_string(c) + " in session " +
                                      std::to_string(session));
}

}  // namespace

SessionLog incremental_session(RunState& state, const SessionSpec& session, const TrainConfig& config,
                               const StepObserver& observer) {
    config.validate();
    if (state.store.empty()) throw StateError("incremental session before base training");
    for (int c : session.classes)
        if (state.store.contains(c))
            throw ProtocolError("session " + std::to_string(session.index) + " reuses class " + std::to_string(c));
    const std::set<int> classes(session.classes.begin(), session.classes.end());
    for (int y : session.train.labels)
        if (!classes.count(y))
            throw ProtocolError("session data holds class " + std::to_string(y) + " outside its class list");
    if (config.flags.pc && !state.region) throw StateError("parameter clamping requested without a flat region");

    Dataset combined = session.train;
    combined.append(state.exemplars.all());

    SessionLog log;
    Rng rng(derive_seed(config.seed, 100 + static_cast<std::uint64_t>(session.index)));
    for (std::size_t epoch = 0; epoch < config.inc_epochs; ++epoch) {
        ClassMeans protos = state.store.means();
        for (auto& [c, v] : compute_prototypes(state.params, session.train, classes)) protos[c] = std::move(v);
        require_finite(protos, session.index);

        const std::vector<std::size_t> order = permutation(combined.size(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            const Dataset batch = combined.subset(std::span(order).subspan(start, stop - start));
            LossGrad lg = metric_loss_grad(state.params, protos, batch);
            if (!std::isfinite(lg.value))
                throw DivergenceError("non-finite metric loss in session " + std::to_string(session.index));
            // Only the governed (noise-eligible) embedding coordinates move.
            for (std::size_t p = 0; p < state.params.size(); ++p)
                if (!state.params[p].noise_eligible) lg.grad[p] = Tensor::zeros_like(lg.grad[p]);
            try {
                apply_update(state.params, lg.grad, config.inc_lr);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " in session " + std::to_string(session.index));
            }
            if (config.flags.pc) clamp_to_region(state.params, *state.region);
            if (observer) observer(state.params);
            total += lg.value;
            ++batches;
            ++log.steps;
        }
        log.epoch_losses.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    }

    state.exemplars.add(select_exemplars(session.train, config.exemplars_per_class,
                                         derive_seed(config.seed, 200 + static_cast<std::uint64_t>(session.index))));
    ClassMeans fresh = compute_prototypes(state.params, session.train, classes);
    require_finite(fresh, session.index);
    for (auto& [c, v] : fresh) state.store.add(c, std::move(v), session.index);
    if (config.flags.pn) normalize_prototypes(state.store);
    state.last_session = session.index;
    return log;
}

namespace {

void write_json(const std::filesystem::path& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw StateError("cannot write " + path.string());
    out << doc.dump(1) << '\n';
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw StateError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("malformed " + path.string() + ": " + e.what());
    }
}

}  // namespace

void save_run_state(const std::filesystem::path& dir, const RunState& state) {
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "checkpoint.json", state.net, state.params);
    json region = nullptr;
    if (state.region) region = {{"bound", state.region->bound}, {"anchor", state.region->anchor}};
    write_json(dir / "region.json", region);
    write_json(dir / "prototypes.json", to_json(state.store));
    write_json(dir / "exemplars.json", to_json(state.exemplars));
    write_json(dir / "state.json", {{"head_classes", state.head_classes}, {"last_session", state.last_session}});
}

RunState load_run_state(const std::filesystem::path& dir) {
    RunState state;
    auto [net, params] = load_checkpoint(dir / "checkpoint.json");
    state.net = net;
    state.params = std::move(params);
    try {
        const json region = read_json(dir / "region.json");
        if (!region.is_null())
            state.region = FlatRegion{region.at("anchor").get<std::vector<double>>(), region.at("bound").get<double>()};
        state.store = store_from_json(read_json(dir / "prototypes.json"));
        state.exemplars = exemplars_from_json(read_json(dir / "exemplars.json"));
        const json meta = read_json(dir / "state.json");
        state.head_classes = meta.at("head_classes").get<std::vector<int>>();
        state.last_session = meta.at("last_session").get<int>();
    } catch (const json::exception& e) {
        throw ParseError("malformed run state in " + dir.string() + ": " + e.what());
    }
    if (state.region && state.region->anchor.size() != state.params.eligible_count())
        throw ContractError("saved flat region does not match the checkpoint");
    return state;
}

}  // namespace f2m
