#include "f2m/net.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "f2m/errors.hpp"
#include "f2m/random.hpp"
#include "json.hpp"

namespace f2m {

using nlohmann::json;

void NetworkConfig::validate() const {
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (class_count < 1) throw ConfigError("class_count must be >= 1");
    for (auto h : hidden)
        if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
    if (noise_last_k > embedding_layers())
        throw ConfigError("noise_last_k (" + std::to_string(noise_last_k) + ") exceeds the " +
                          std::to_string(embedding_layers()) + " embedding layers");
}

ParamSet::ParamSet(std::vector<Param> params) : params_(std::move(params)) {
    for (std::size_t i = 0; i < params_.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (params_[i].name == params_[j].name)
                throw ContractError("duplicate parameter name '" + params_[i].name + "'");
}

const Param& ParamSet::get(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p;
    throw ContractError("no parameter named '" + name + "'");
}

std::size_t ParamSet::total_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

std::size_t ParamSet::eligible_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (p.noise_eligible) n += p.value.size();
    return n;
}

std::size_t ParamSet::embedding_layers() const {
    std::size_t n = 0;
    for (const auto& p : params_)
        if (p.group == Group::embedding) ++n;
    return n / 2;
}

std::vector<double> ParamSet::flatten() const {
    std::vector<double> out;
    out.reserve(total_count());
    for (const auto& p : params_) out.insert(out.end(), p.value.values().begin(), p.value.values().end());
    return out;
}

void ParamSet::unflatten(std::span<const double> values) {
    if (values.size() != total_count())
        throw DimensionError("unflatten: expected " + std::to_string(total_count()) + " values, got " +
                             std::to_string(values.size()));
    std::size_t off = 0;
    for (auto& p : params_)
        for (double& v : p.value.data()) v = values[off++];
}

std::vector<double> ParamSet::eligible_values() const {
    std::vector<double> out;
    out.reserve(eligible_count());
    for (const auto& p : params_)
        if (p.noise_eligible) out.insert(out.end(), p.value.values().begin(), p.value.values().end());
    return out;
}

void ParamSet::set_eligible_values(std::span<const double> values) {
    if (values.size() != eligible_count())
        throw ContractError("expected " + std::to_string(eligible_count()) +
                            " eligible coordinates, got " + std::to_string(values.size()));
    std::size_t off = 0;
    for (auto& p : params_)
        if (p.noise_eligible)
            for (double& v : p.value.data()) v = values[off++];
}

Gradients ParamSet::zero_gradients() const {
    Gradients g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Tensor::zeros_like(p.value));
    return g;
}

ParamSet init_network(const NetworkConfig& config) {
    config.validate();
    Rng rng(config.seed);
    std::vector<std::size_t> dims{config.input_dim};
    dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
    dims.push_back(config.embedding_dim);

    auto gaussian = [&rng](std::size_t fan_in, std::size_t fan_out) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        std::vector<double> w(fan_in * fan_out);
        for (double& v : w) v = dist(rng);
        return Tensor({fan_in, fan_out}, std::move(w));
    };

    std::vector<Param> params;
    const std::size_t layers = config.embedding_layers();
    for (std::size_t l = 0; l < layers; ++l) {
        const bool eligible = l + config.noise_last_k >= layers;
        const std::string prefix = "embed." + std::to_string(l);
        params.push_back({prefix + ".weight", gaussian(dims[l], dims[l + 1]), Group::embedding, eligible});
        params.push_back({prefix + ".bias", Tensor({dims[l + 1]}, 0.0), Group::embedding,
                          eligible && config.noise_biases});
    }
    params.push_back({"head.weight", gaussian(config.embedding_dim, config.class_count), Group::classifier, false});
    params.push_back({"head.bias", Tensor({config.class_count}, 0.0), Group::classifier, false});
    return ParamSet(std::move(params));
}

namespace {

Tensor linear_value(const Tensor& x, const Tensor& w, const Tensor& b, kernels::Exec exec) {
    if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() || b.size() != w.cols())
        throw DimensionError("linear: input " + shape_string(x.shape()) + " and weight " +
                             shape_string(w.shape()) + " do not conform");
    const std::size_t n = x.rows(), d_out = w.cols();
    std::vector<double> out(n * d_out);
    kernels::linear_forward(exec, x.data(), n, x.cols(), w.data(), d_out, b.data(), out);
    return Tensor::unchecked({n, d_out}, std::move(out));
}

void check_layout(const ParamSet& params) {
    const std::size_t layers = params.embedding_layers();
    if (layers == 0) throw ContractError("parameter set has no embedding layers");
    for (std::size_t i = 0; i < 2 * layers; ++i)
        if (params[i].group != Group::embedding)
            throw ContractError("embedding parameters must precede the classifier head");
}

}  // namespace

Tensor embed(const ParamSet& params, const Tensor& x, kernels::Exec exec) {
    check_layout(params);
    const std::size_t layers = params.embedding_layers();
    Tensor h = x;
    for (std::size_t l = 0; l < layers; ++l) {
        h = linear_value(h, params[2 * l].value, params[2 * l + 1].value, exec);
        if (l + 1 < layers)
            for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
    }
    return h;
}

Tensor logits(const ParamSet& params, const Tensor& x, kernels::Exec exec) {
    const std::size_t layers = params.embedding_layers();
    if (params.size() < 2 * layers + 2) throw ContractError("parameter set has no classifier head");
    return linear_value(embed(params, x, exec), params[2 * layers].value, params[2 * layers + 1].value, exec);
}

std::vector<ad::Var> bind(ad::Tape& tape, const ParamSet& params) {
    std::vector<ad::Var> vars;
    vars.reserve(params.size());
    for (const auto& p : params.params()) vars.push_back(tape.parameter(p.value));
    return vars;
}

ad::Var embed(const ParamSet& layout, std::span<const ad::Var> vars, ad::Var x) {
    check_layout(layout);
    const std::size_t layers = layout.embedding_layers();
    ad::Var h = x;
    for (std::size_t l = 0; l < layers; ++l) {
        h = ad::linear(h, vars[2 * l], vars[2 * l + 1]);
        if (l + 1 < layers) h = ad::relu(h);
    }
    return h;
}

ad::Var logits(const ParamSet& layout, std::span<const ad::Var> vars, ad::Var x) {
    const std::size_t layers = layout.embedding_layers();
    if (vars.size() < 2 * layers + 2) throw ContractError("parameter set has no classifier head");
    return ad::linear(embed(layout, vars, x), vars[2 * layers], vars[2 * layers + 1]);
}

ParamSet perturbed(const ParamSet& params, const NoiseVector& noise) {
    if (noise.size() != params.eligible_count())
        throw ContractError("noise has " + std::to_string(noise.size()) + " coordinates, " +
                            std::to_string(params.eligible_count()) + " are eligible");
    ParamSet out = params;
    std::size_t off = 0;
    for (auto& p : out.params())
        if (p.noise_eligible)
            for (double& v : p.value.data()) v += noise[off++];
    return out;
}

NoiseGuard::NoiseGuard(ParamSet& params, const NoiseVector& noise) : params_(&params) {
    if (noise.size() != params.eligible_count())
        throw ContractError("noise has " + std::to_string(noise.size()) + " coordinates, " +
                            std::to_string(params.eligible_count()) + " are eligible");
    saved_ = params.eligible_values();
    std::size_t off = 0;
    for (auto& p : params.params())
        if (p.noise_eligible)
            for (double& v : p.value.data()) v += noise[off++];
}

void NoiseGuard::reset() {
    if (!active_) return;
    params_->set_eligible_values(saved_);
    active_ = false;
}

namespace {

json config_json(const NetworkConfig& c) {
    return {{"input_dim", c.input_dim},       {"hidden", c.hidden},
            {"embedding_dim", c.embedding_dim}, {"class_count", c.class_count},
            {"noise_last_k", c.noise_last_k}, {"noise_biases", c.noise_biases},
            {"seed", c.seed}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config, const ParamSet& params) {
    json doc;
    doc["config"] = config_json(config);
    json& arr = doc["params"] = json::array();
    for (const auto& p : params.params())
        arr.push_back({{"name", p.name},
                       {"group", p.group == Group::embedding ? "embedding" : "classifier"},
                       {"noise_eligible", p.noise_eligible},
                       {"shape", p.value.shape()},
                       {"values", p.value.values()}});
    std::ofstream out(path);
    if (!out) throw StateError("cannot write checkpoint " + path.string());
    out << doc.dump(1) << '\n';
}

std::pair<NetworkConfig, ParamSet> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw StateError("cannot read checkpoint " + path.string());
    json doc;
    try {
        doc = json::parse(in);
        const json& c = doc.at("config");
        NetworkConfig config;
        config.input_dim = c.at("input_dim").get<std::size_t>();
        config.hidden = c.at("hidden").get<std::vector<std::size_t>>();
        config.embedding_dim = c.at("embedding_dim").get<std::size_t>();
        config.class_count = c.at("class_count").get<std::size_t>();
        config.noise_last_k = c.at("noise_last_k").get<std::size_t>();
        config.noise_biases = c.at("noise_biases").get<bool>();
        config.seed = c.at("seed").get<std::uint64_t>();
        std::vector<Param> params;
        for (const json& p : doc.at("params")) {
            const std::string group = p.at("group").get<std::string>();
            if (group != "embedding" && group != "classifier")
                throw ParseError("unknown parameter group '" + group + "'");
            params.push_back({p.at("name").get<std::string>(),
                              Tensor(p.at("shape").get<Shape>(), p.at("values").get<std::vector<double>>()),
                              group == "embedding" ? Group::embedding : Group::classifier,
                              p.at("noise_eligible").get<bool>()});
        }
        return {config, ParamSet(std::move(params))};
    } catch (const json::exception& e) {
        throw ParseError("malformed checkpoint " + path.string() + ": " + e.what());
    }
}

}  // namespace f2m
