#include "f2m/proto.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "f2m/errors.hpp"
#include "f2m/random.hpp"

namespace f2m {

using nlohmann::json;

void PrototypeStore::add(int class_id, std::vector<double> vector, int session) {
    if (contains(class_id))
        throw ProtocolError("class " + std::to_string(class_id) + " already has a stored prototype");
    for (double v : vector)
        if (!std::isfinite(v)) throw ContractError("non-finite prototype for class " + std::to_string(class_id));
    if (!protos_.empty() && protos_.begin()->second.vector.size() != vector.size())
        throw DimensionError("prototype dimension mismatch for class " + std::to_string(class_id));
    protos_.emplace(class_id, Prototype{class_id, std::move(vector), session});
}

const Prototype& PrototypeStore::at(int class_id) const {
    auto it = protos_.find(class_id);
    if (it == protos_.end()) throw StateError("no prototype for class " + std::to_string(class_id));
    return it->second;
}

std::set<int> PrototypeStore::classes() const {
    std::set<int> out;
    for (const auto& [c, _] : protos_) out.insert(c);
    return out;
}

ClassMeans PrototypeStore::means() const {
    ClassMeans out;
    for (const auto& [c, p] : protos_) out.emplace(c, p.vector);
    return out;
}

ClassMeans class_means(const Tensor& embeddings, std::span<const int> labels, const std::set<int>& classes) {
    if (embeddings.rows() != labels.size())
        throw DimensionError("class_means: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(embeddings.rows()) + " embeddings");
    const std::size_t d = embeddings.cols();
    ClassMeans sums;
    std::map<int, std::size_t> counts;
    for (int c : classes) {
        sums[c].assign(d, 0.0);
        counts[c] = 0;
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = sums.find(labels[i]);
        if (it == sums.end()) continue;
        for (std::size_t k = 0; k < d; ++k) it->second[k] += embeddings.at(i, k);
        ++counts[labels[i]];
    }
    for (auto& [c, v] : sums) {
        if (counts[c] == 0) throw EmptyClassError("class " + std::to_string(c) + " has no samples");
        for (double& x : v) x /= static_cast<double>(counts[c]);
    }
    return sums;
}

ClassMeans compute_prototypes(const ParamSet& params, const Dataset& samples, const std::set<int>& classes) {
    if (samples.empty()) {
        if (classes.empty()) return {};
        throw EmptyClassError("class " + std::to_string(*classes.begin()) + " has no samples");
    }
    return class_means(embed(params, samples.matrix()), samples.labels, classes);
}

int nearest_prototype(const PrototypeStore& store, std::span<const double> embedding,
                      const std::set<int>* candidates) {
    if (store.empty()) throw StateError("NCM classification with an empty prototype store");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    bool found = false;
    for (const auto& [c, p] : store.prototypes()) {
        if (candidates && !candidates->count(c)) continue;
        const double d = ad::squared_euclidean(embedding, p.vector);
        if (!found || d < best_d) {
            best = c;
            best_d = d;
            found = true;
        }
    }
    if (!found) throw StateError("no stored prototype among the candidate classes");
    return best;
}

int ncm_classify(const PrototypeStore& store, const ParamSet& params, std::span<const double> x) {
    if (store.empty()) throw StateError("NCM classification with an empty prototype store");
    Tensor in({1, x.size()}, std::vector<double>(x.begin(), x.end()));
    const Tensor e = embed(params, in, kernels::Exec::serial);
    return nearest_prototype(store, e.data());
}

std::vector<int> ncm_classify_batch(const PrototypeStore& store, const Tensor& embeddings,
                                    const std::set<int>* candidates) {
    const std::size_t n = embeddings.rows(), d = embeddings.cols();
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = nearest_prototype(store, embeddings.data().subspan(i * d, d), candidates);
    return out;
}

namespace {
double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}
}  // namespace

void normalize_prototypes(PrototypeStore& store) {
    for (const auto& [c, p] : store.prototypes())
        if (l2_norm(p.vector) == 0.0)
            throw DegeneratePrototypeError("prototype of class " + std::to_string(c) + " is the zero vector");
    if (!store.target_norm) {
        const NormStats base = prototype_norm_stats(store, Split::base);
        store.target_norm = base.mean;
    }
    const double target = *store.target_norm;
    for (auto& [c, p] : store.prototypes()) {
        const double factor = target / l2_norm(p.vector);
        for (double& v : p.vector) v *= factor;
    }
}

NormStats prototype_norm_stats(const PrototypeStore& store, Split split) {
    std::vector<double> norms;
    for (const auto& [c, p] : store.prototypes())
        if ((p.session == kBaseSession) == (split == Split::base)) norms.push_back(l2_norm(p.vector));
    if (norms.empty())
        throw StateError(std::string("no ") + (split == Split::base ? "base" : "new") + "-class prototypes");
    double mean = 0.0;
    for (double n : norms) mean += n;
    mean /= static_cast<double>(norms.size());
    double var = 0.0;
    for (double n : norms) var += (n - mean) * (n - mean);
    var /= static_cast<double>(norms.size());
    return {mean, std::sqrt(var)};
}

void ExemplarBuffer::add(const std::map<int, Dataset>& additions) {
    for (const auto& [c, data] : additions) {
        Dataset& slot = per_class[c];
        if (slot.dim == 0) slot.dim = data.dim;
        if (slot.size() + data.size() > capacity)
            throw ContractError("exemplar buffer for class " + std::to_string(c) + " would exceed " +
                                std::to_string(capacity) + " samples");
        slot.append(data);
    }
}

Dataset ExemplarBuffer::all() const {
    Dataset out;
    for (const auto& [c, data] : per_class) out.append(data);
    return out;
}

std::size_t ExemplarBuffer::size() const {
    std::size_t n = 0;
    for (const auto& [c, data] : per_class) n += data.size();
    return n;
}

std::map<int, Dataset> select_exemplars(const Dataset& session_data, std::size_t k, std::uint64_t seed) {
    std::map<int, Dataset> out;
    if (k == 0) return out;
    Rng rng(seed);
    for (const auto& [c, idx] : session_data.indices_by_class()) {
        std::vector<std::size_t> order = permutation(idx.size(), rng);
        order.resize(std::min(k, idx.size()));
        std::vector<std::size_t> chosen;
        for (auto o : order) chosen.push_back(idx[o]);
        out.emplace(c, session_data.subset(chosen));
    }
    return out;
}

json to_json(const PrototypeStore& store) {
    json doc;
    doc["target_norm"] = store.target_norm ? json(*store.target_norm) : json(nullptr);
    json& arr = doc["prototypes"] = json::array();
    for (const auto& [c, p] : store.prototypes())
        arr.push_back({{"class_id", c}, {"session", p.session}, {"vector", p.vector}});
    return doc;
}

PrototypeStore store_from_json(const json& doc) {
    try {
        PrototypeStore store;
        if (!doc.at("target_norm").is_null()) store.target_norm = doc.at("target_norm").get<double>();
        for (const json& p : doc.at("prototypes"))
            store.add(p.at("class_id").get<int>(), p.at("vector").get<std::vector<double>>(),
                      p.at("session").get<int>());
        return store;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed prototype store: ") + e.what());
    }
}

json to_json(const ExemplarBuffer& buffer) {
    json doc;
    doc["capacity"] = buffer.capacity;
    json& arr = doc["classes"] = json::array();
    for (const auto& [c, data] : buffer.per_class)
        arr.push_back({{"class_id", c}, {"dim", data.dim}, {"features", data.features}});
    return doc;
}

ExemplarBuffer exemplars_from_json(const json& doc) {
    try {
        ExemplarBuffer buffer;
        buffer.capacity = doc.at("capacity").get<std::size_t>();
        for (const json& entry : doc.at("classes")) {
            const int c = entry.at("class_id").get<int>();
            Dataset data(entry.at("dim").get<std::size_t>());
            data.features = entry.at("features").get<std::vector<double>>();
            if (data.dim == 0 || data.features.size() % data.dim != 0)
                throw ParseError("exemplar features for class " + std::to_string(c) + " are ragged");
            data.labels.assign(data.features.size() / data.dim, c);
            buffer.per_class.emplace(c, std::move(data));
        }
        return buffer;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed exemplar buffer: ") + e.what());
    }
}

}  // namespace f2m
