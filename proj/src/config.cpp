#include "f2m/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "f2m/errors.hpp"

namespace f2m {

using nlohmann::json;

std::string mode_name(Mode mode) {
    switch (mode) {
        case Mode::f2m: return "f2m";
        case Mode::baseline: return "baseline";
        case Mode::ablation: return "ablation";
        case Mode::sweep: return "sweep";
        case Mode::flatness: return "flatness";
        case Mode::convergence: return "convergence";
    }
    return "f2m";
}

Mode parse_mode(const std::string& text) {
    for (Mode m : {Mode::f2m, Mode::baseline, Mode::ablation, Mode::sweep, Mode::flatness, Mode::convergence})
        if (mode_name(m) == text) return m;
    throw ConfigError("mode: unknown mode '" + text + "'");
}

RunConfig default_run_config() { return RunConfig{}; }

namespace {

// A parsed literal. Scalars keep their source text so integer keys can be
// read at full 64-bit range.
struct Value {
    enum class Kind { boolean, integer, number, string, array } kind = Kind::string;
    std::string text;
    std::vector<Value> items;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool is_integer_text(const std::string& t) {
    std::size_t i = (!t.empty() && (t[0] == '-' || t[0] == '+')) ? 1 : 0;
    if (i == t.size()) return false;
    for (; i < t.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(t[i]))) return false;
    return true;
}

bool is_number_text(const std::string& t) {
    double v = 0.0;
    const char* b = t.data() + (!t.empty() && t[0] == '+' ? 1 : 0);
    auto [p, ec] = std::from_chars(b, t.data() + t.size(), v);
    return !t.empty() && ec == std::errc() && p == t.data() + t.size();
}

std::optional<Value> parse_scalar(const std::string& raw) {
    const std::string t = trim(raw);
    if (t.empty()) return std::nullopt;
    if (t.front() == '"') {
        if (t.size() < 2 || t.back() != '"') return std::nullopt;
        std::string out;
        for (std::size_t i = 1; i + 1 < t.size(); ++i) {
            if (t[i] == '\\' && i + 2 < t.size()) ++i;
            out += t[i];
        }
        return Value{Value::Kind::string, out, {}};
    }
    if (t == "true" || t == "false") return Value{Value::Kind::boolean, t, {}};
    if (is_integer_text(t)) return Value{Value::Kind::integer, t, {}};
    if (is_number_text(t)) return Value{Value::Kind::number, t, {}};
    return std::nullopt;
}

std::optional<Value> parse_value(const std::string& raw) {
    const std::string t = trim(raw);
    if (!t.empty() && t.front() == '[') {
        if (t.back() != ']') return std::nullopt;
        Value arr{Value::Kind::array, t, {}};
        const std::string body = trim(t.substr(1, t.size() - 2));
        if (body.empty()) return arr;
        std::stringstream ss(body);
        std::string item;
        while (std::getline(ss, item, ',')) {
            auto v = parse_scalar(item);
            if (!v || v->kind == Value::Kind::array) return std::nullopt;
            arr.items.push_back(*v);
        }
        return arr;
    }
    return parse_scalar(t);
}

Value from_json(const json& j) {
    if (j.is_boolean()) return {Value::Kind::boolean, j.get<bool>() ? "true" : "false", {}};
    if (j.is_number_integer()) return {Value::Kind::integer, j.dump(), {}};
    if (j.is_number_float()) return {Value::Kind::number, j.dump(), {}};
    if (j.is_string()) return {Value::Kind::string, j.get<std::string>(), {}};
    if (j.is_array()) {
        Value arr{Value::Kind::array, j.dump(), {}};
        for (const json& e : j) arr.items.push_back(from_json(e));
        return arr;
    }
    return {Value::Kind::string, j.dump(), {}};
}

[[noreturn]] void bad(const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); }

std::uint64_t as_u64(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::integer || v.text[0] == '-') bad(key, "expected a nonnegative integer, got '" + v.text + "'");
    std::uint64_t out = 0;
    const char* b = v.text.data() + (v.text[0] == '+' ? 1 : 0);
    auto [p, ec] = std::from_chars(b, v.text.data() + v.text.size(), out);
    if (ec != std::errc() || p != v.text.data() + v.text.size()) bad(key, "integer out of range");
    return out;
}

std::size_t as_size(const Value& v, const std::string& key, std::size_t min = 0,
                    std::size_t max = std::numeric_limits<std::size_t>::max()) {
    const std::uint64_t n = as_u64(v, key);
    if (n < min || n > max)
        bad(key, "must be in [" + std::to_string(min) + ", " + std::to_string(max) + "], got " + v.text);
    return static_cast<std::size_t>(n);
}

double as_double(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::integer && v.kind != Value::Kind::number) bad(key, "expected a number, got '" + v.text + "'");
    double out = 0.0;
    const char* b = v.text.data() + (v.text[0] == '+' ? 1 : 0);
    std::from_chars(b, v.text.data() + v.text.size(), out);
    if (!std::isfinite(out)) bad(key, "must be finite");
    return out;
}

double positive(const Value& v, const std::string& key) {
    const double d = as_double(v, key);
    if (!(d > 0.0)) bad(key, "must be positive, got " + v.text);
    return d;
}

double nonnegative(const Value& v, const std::string& key) {
    const double d = as_double(v, key);
    if (!(d >= 0.0)) bad(key, "must be >= 0, got " + v.text);
    return d;
}

bool as_bool(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::boolean) bad(key, "expected true or false, got '" + v.text + "'");
    return v.text == "true";
}

std::string as_string(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::string) bad(key, "expected a string, got '" + v.text + "'");
    return v.text;
}

const std::vector<Value>& as_array(const Value& v, const std::string& key) {
    if (v.kind != Value::Kind::array) bad(key, "expected an array, got '" + v.text + "'");
    return v.items;
}

struct Entry {
    const char* section;
    const char* key;
    Value::Kind kind;
    std::function<void(RunConfig&, const Value&)> set;
    std::function<json(const RunConfig&)> get;
};

const std::vector<Entry>& registry() {
    using K = Value::Kind;
    static const std::vector<Entry> entries = {
        // [run]
        {"run", "mode", K::string, [](RunConfig& c, const Value& v) { c.mode = parse_mode(as_string(v, "mode")); },
         [](const RunConfig& c) { return json(mode_name(c.mode)); }},
        {"run", "seed", K::integer, [](RunConfig& c, const Value& v) { c.experiment.seed = as_u64(v, "seed"); },
         [](const RunConfig& c) { return json(c.experiment.seed); }},
        {"run", "seeds", K::integer, [](RunConfig& c, const Value& v) { c.seeds = as_size(v, "seeds", 1); },
         [](const RunConfig& c) { return json(c.seeds); }},
        {"run", "out", K::string, [](RunConfig& c, const Value& v) { c.out = as_string(v, "out"); },
         [](const RunConfig& c) { return json(c.out); }},
        {"run", "checkpoint", K::string, [](RunConfig& c, const Value& v) { c.checkpoint = as_string(v, "checkpoint"); },
         [](const RunConfig& c) { return json(c.checkpoint); }},
        {"run", "flatness_samples", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.flatness_samples = as_size(v, "flatness_samples", 1); },
         [](const RunConfig& c) { return json(c.experiment.flatness_samples); }},
        {"run", "sweep_grid", K::array,
         [](RunConfig& c, const Value& v) {
             std::vector<double> grid;
             for (const Value& e : as_array(v, "sweep_grid")) grid.push_back(positive(e, "sweep_grid"));
             if (grid.empty()) bad("sweep_grid", "must not be empty");
             c.sweep_grid = grid;
         },
         [](const RunConfig& c) { return json(c.sweep_grid); }},
        // [data]
        {"data", "train_csv", K::string,
         [](RunConfig& c, const Value& v) { c.experiment.data.train_csv = as_string(v, "train_csv"); },
         [](const RunConfig& c) { return json(c.experiment.data.train_csv); }},
        {"data", "test_csv", K::string,
         [](RunConfig& c, const Value& v) { c.experiment.data.test_csv = as_string(v, "test_csv"); },
         [](const RunConfig& c) { return json(c.experiment.data.test_csv); }},
        {"data", "classes", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.class_count = as_size(v, "classes", 2); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.class_count); }},
        {"data", "input_dim", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.input_dim = as_size(v, "input_dim", 1); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.input_dim); }},
        {"data", "separation", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.separation = positive(v, "separation"); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.separation); }},
        {"data", "within_std", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.within_std = nonnegative(v, "within_std"); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.within_std); }},
        {"data", "base_classes", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.base_classes = as_size(v, "base_classes", 2); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.base_classes); }},
        {"data", "new_classes", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.new_classes = as_size(v, "new_classes"); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.new_classes); }},
        {"data", "train_per_class", K::integer,
         [](RunConfig& c, const Value& v) {
             c.experiment.data.synthetic.train_per_class = as_size(v, "train_per_class", 1);
         },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.train_per_class); }},
        {"data", "test_per_class", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.data.synthetic.test_per_class = as_size(v, "test_per_class", 1); },
         [](const RunConfig& c) { return json(c.experiment.data.synthetic.test_per_class); }},
        {"data", "way", K::integer, [](RunConfig& c, const Value& v) { c.experiment.data.way = as_size(v, "way", 1); },
         [](const RunConfig& c) { return json(c.experiment.data.way); }},
        {"data", "shot", K::integer, [](RunConfig& c, const Value& v) { c.experiment.data.shot = as_size(v, "shot", 1); },
         [](const RunConfig& c) { return json(c.experiment.data.shot); }},
        // [network]
        {"network", "hidden", K::array,
         [](RunConfig& c, const Value& v) {
             std::vector<std::size_t> hidden;
             for (const Value& e : as_array(v, "hidden")) hidden.push_back(as_size(e, "hidden", 1));
             c.experiment.net.hidden = hidden;
         },
         [](const RunConfig& c) { return json(c.experiment.net.hidden); }},
        {"network", "embedding_dim", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.net.embedding_dim = as_size(v, "embedding_dim", 1); },
         [](const RunConfig& c) { return json(c.experiment.net.embedding_dim); }},
        {"network", "noise_last_k", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.net.noise_last_k = as_size(v, "noise_last_k"); },
         [](const RunConfig& c) { return json(c.experiment.net.noise_last_k); }},
        {"network", "noise_biases", K::boolean,
         [](RunConfig& c, const Value& v) { c.experiment.net.noise_biases = as_bool(v, "noise_biases"); },
         [](const RunConfig& c) { return json(c.experiment.net.noise_biases); }},
        // [train]
        {"train", "base_epochs", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.train.base_epochs = as_size(v, "base_epochs"); },
         [](const RunConfig& c) { return json(c.experiment.train.base_epochs); }},
        {"train", "base_lr", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.train.base_lr = positive(v, "base_lr"); },
         [](const RunConfig& c) { return json(c.experiment.train.base_lr); }},
        {"train", "lr_decay", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.train.lr_decay = nonnegative(v, "lr_decay"); },
         [](const RunConfig& c) { return json(c.experiment.train.lr_decay); }},
        {"train", "batch_size", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.train.batch_size = as_size(v, "batch_size", 1); },
         [](const RunConfig& c) { return json(c.experiment.train.batch_size); }},
        {"train", "inc_epochs", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.train.inc_epochs = as_size(v, "inc_epochs"); },
         [](const RunConfig& c) { return json(c.experiment.train.inc_epochs); }},
        {"train", "inc_lr", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.train.inc_lr = positive(v, "inc_lr"); },
         [](const RunConfig& c) { return json(c.experiment.train.inc_lr); }},
        {"train", "lambda", K::number,
         [](RunConfig& c, const Value& v) { c.experiment.train.lambda = nonnegative(v, "lambda"); },
         [](const RunConfig& c) { return json(c.experiment.train.lambda); }},
        {"train", "b", K::number, [](RunConfig& c, const Value& v) { c.experiment.train.noise.bound = positive(v, "b"); },
         [](const RunConfig& c) { return json(c.experiment.train.noise.bound); }},
        {"train", "noise_samples", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.train.noise.samples = as_size(v, "noise_samples", 1, 8); },
         [](const RunConfig& c) { return json(c.experiment.train.noise.samples); }},
        {"train", "exemplars", K::integer,
         [](RunConfig& c, const Value& v) { c.experiment.train.exemplars_per_class = as_size(v, "exemplars"); },
         [](const RunConfig& c) { return json(c.experiment.train.exemplars_per_class); }},
        {"train", "flags", K::string,
         [](RunConfig& c, const Value& v) { c.experiment.train.flags = Flags::parse(as_string(v, "flags")); },
         [](const RunConfig& c) { return json(c.experiment.train.flags.label()); }},
    };
    return entries;
}

const Entry& lookup(const std::string& key) {
    for (const Entry& e : registry())
        if (key == e.key) return e;
    throw ConfigError(key + ": unknown key");
}

bool is_section(const std::string& s) { return s == "run" || s == "data" || s == "network" || s == "train"; }

void finish(RunConfig& c) {
    const auto& syn = c.experiment.data.synthetic;
    if (syn.base_classes + syn.new_classes != syn.class_count)
        bad("classes", "base_classes + new_classes (" + std::to_string(syn.base_classes) + " + " +
                           std::to_string(syn.new_classes) + ") must equal classes (" +
                           std::to_string(syn.class_count) + ")");
    if (c.experiment.data.train_csv.empty() && c.experiment.data.shot > syn.train_per_class)
        bad("shot", "exceeds train_per_class");
    if (c.experiment.data.train_csv.empty() != c.experiment.data.test_csv.empty())
        bad("train_csv", "train_csv and test_csv must be given together");
    NetworkConfig net = c.experiment.net;
    net.input_dim = syn.input_dim;
    net.validate();
    c.experiment.net.input_dim = syn.input_dim;
    c.experiment.train.validate();
    syn.validate();
}

void apply_overrides(RunConfig& c, const std::vector<Override>& overrides) {
    for (const auto& [key, text] : overrides) {
        const Entry& e = lookup(key);
        if (e.kind == Value::Kind::string) {
            e.set(c, Value{Value::Kind::string, text, {}});
            continue;
        }
        auto v = parse_value(text);
        if (!v) bad(key, "cannot parse value '" + text + "'");
        e.set(c, *v);
    }
}

RunConfig parse_json_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: malformed JSON: ") + e.what());
    }
    if (doc.contains("config")) doc = doc["config"];
    RunConfig c;
    for (auto& [section, body] : doc.items()) {
        if (!is_section(section) || !body.is_object()) throw ConfigError(section + ": unknown section");
        for (auto& [key, value] : body.items()) {
            const Entry& e = lookup(key);
            if (section != e.section) bad(key, "belongs in [" + std::string(e.section) + "], not [" + section + "]");
            e.set(c, from_json(value));
        }
    }
    return c;
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::vector<Override>& overrides) {
    RunConfig c;
    const std::string head = trim(text);
    if (!head.empty() && head.front() == '{') {
        c = parse_json_config(text);
    } else {
        std::stringstream ss(text);
        std::string line;
        std::string section;
        std::size_t line_no = 0;
        while (std::getline(ss, line)) {
            ++line_no;
            // Strip comments outside quoted strings.
            bool quoted = false;
            for (std::size_t i = 0; i < line.size(); ++i) {
                if (line[i] == '"') quoted = !quoted;
                if (line[i] == '#' && !quoted) {
                    line.resize(i);
                    break;
                }
            }
            const std::string t = trim(line);
            if (t.empty()) continue;
            if (t.front() == '[') {
                if (t.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": bad section header");
                section = trim(t.substr(1, t.size() - 2));
                if (!is_section(section))
                    throw ConfigError(section + ": unknown section (line " + std::to_string(line_no) + ")");
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            const Entry& e = lookup(key);
            if (!section.empty() && section != e.section)
                bad(key, "belongs in [" + std::string(e.section) + "], not [" + section + "]");
            auto v = parse_value(t.substr(eq + 1));
            if (!v) bad(key, "cannot parse value '" + trim(t.substr(eq + 1)) + "'");
            e.set(c, *v);
        }
    }
    apply_overrides(c, overrides);
    finish(c);
    return c;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& path, const std::vector<Override>& overrides) {
    std::string text;
    if (path) {
        std::ifstream in(*path);
        if (!in) throw ConfigError("config: cannot read " + path->string());
        std::stringstream buf;
        buf << in.rdbuf();
        text = buf.str();
    }
    return parse_config_text(text, overrides);
}

json to_json(const RunConfig& config) {
    json doc = json::object();
    for (const Entry& e : registry()) doc[e.section][e.key] = e.get(config);
    return doc;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const Entry& e : registry()) keys.push_back(e.key);
    return keys;
}

}  // namespace f2m
