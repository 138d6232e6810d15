#include "mhmamba_cli/config.hpp"

#include <fstream>
#include <sstream>

#include "mhmamba/errors.hpp"

namespace mhm::cli {

namespace {

const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"run.seed", "0"},
        {"run.deterministic", "true"},
        {"run.out", "out"},

        {"network.in_channels", "4"},
        {"network.num_classes", "4"},
        {"network.channels", "48,96,192,384"},
        {"network.blocks", "2,2,2,2"},
        {"network.heads", "4"},
        {"network.d_state", "16"},
        {"network.csca_reduction", "4"},
        {"network.patch", "32,32,32"},
        {"network.precision", "f32"},
        {"network.activation", "relu"},
        {"network.scan_chunk", "0"},
        {"network.zero_head", "false"},

        {"train.epochs", "150"},
        {"train.batch_size", "1"},
        {"train.lr", "0.001"},
        {"train.weight_decay", "1e-05"},
        {"train.poly_power", "0.9"},
        {"train.patch", "32,32,32"},
        {"train.flips", "true"},
        {"train.optimizer", "sgd"},
        {"train.momentum", "0"},
        {"train.beta1", "0.9"},
        {"train.beta2", "0.999"},
        {"train.adam_eps", "1e-08"},

        {"data.cases", ""},

        {"infer.checkpoint", ""},
        {"infer.inputs", ""},
        {"infer.overlap", "0.5"},

        {"eval.pred", ""},
        {"eval.gt", ""},
        {"eval.spacing", "1,1,1"},

        {"phantom.count", "2"},
        {"phantom.dims", "64,64,64"},
        {"phantom.noise", "0.05"},
        {"phantom.prefix", "case"},

        {"gradcheck.scope", "all"},
        {"gradcheck.size", "16"},

        {"bench.component", "scan"},
        {"bench.sizes", "4096,8192,16384"},
        {"bench.repeats", "5"},
    };
    return d;
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename Parse>
auto parse_value(const std::string& key, const std::string& value, Parse parse) {
    try {
        std::size_t used = 0;
        auto v = parse(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::logic_error&) {
        throw UsageError("config key '" + key + "': cannot parse '" + value + "'");
    }
}

template <std::size_t N>
std::array<std::int64_t, N> fixed_list(const ConfigMap& c, const std::string& key) {
    const auto v = c.get_int_list(key);
    if (v.size() != N) {
        throw UsageError("config key '" + key + "': expected " + std::to_string(N) + " comma-separated integers");
    }
    std::array<std::int64_t, N> out{};
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

}  // namespace

ConfigMap::ConfigMap() : values_(defaults()) {}

void ConfigMap::set(const std::string& key, const std::string& value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    it->second = value;
}

void ConfigMap::merge_text(const std::string& text, const std::string& origin) {
    std::istringstream is(text);
    std::string line;
    int number = 0;
    while (std::getline(is, line)) {
        ++number;
        const std::string where = origin + ":" + std::to_string(number);
        const std::string body = trim(line.substr(0, line.find('#')));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw UsageError(where + ": expected 'key = value', got '" + body + "'");
        const std::string key = trim(body.substr(0, eq));
        if (key.empty()) throw UsageError(where + ": missing key before '='");
        try {
            set(key, trim(body.substr(eq + 1)));
        } catch (const UsageError& e) {
            throw UsageError(where + ": " + e.what());
        }
    }
}

void ConfigMap::merge_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file " + path.string());
    std::ostringstream text;
    text << is.rdbuf();
    merge_text(text.str(), path.string());
}

void ConfigMap::set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& ConfigMap::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
    return it->second;
}

std::int64_t ConfigMap::get_int(const std::string& key) const {
    return parse_value(key, get(key), [](const std::string& s, std::size_t* n) { return std::stoll(s, n); });
}

std::uint64_t ConfigMap::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    if (!v.empty() && v[0] == '-') throw UsageError("config key '" + key + "': must be non-negative");
    return parse_value(key, v, [](const std::string& s, std::size_t* n) { return std::stoull(s, n); });
}

double ConfigMap::get_double(const std::string& key) const {
    return parse_value(key, get(key), [](const std::string& s, std::size_t* n) { return std::stod(s, n); });
}

bool ConfigMap::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw UsageError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<std::string> ConfigMap::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream is(get(key));
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::int64_t> ConfigMap::get_int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& item : get_list(key)) {
        out.push_back(parse_value(key, item, [](const std::string& s, std::size_t* n) { return std::stoll(s, n); }));
    }
    return out;
}

std::array<std::int64_t, 3> ConfigMap::get_dims(const std::string& key) const { return fixed_list<3>(*this, key); }

NetworkConfig ConfigMap::network() const {
    NetworkConfig c;
    try {
        c.in_channels = get_int("network.in_channels");
        c.num_classes = get_int("network.num_classes");
        c.channels = fixed_list<kStages>(*this, "network.channels");
        c.blocks = fixed_list<kStages>(*this, "network.blocks");
        c.heads = get_int("network.heads");
        c.d_state = get_int("network.d_state");
        c.csca_reduction = get_int("network.csca_reduction");
        c.patch = get_dims("network.patch");
        c.precision = parse_precision(get("network.precision"));
        c.activation = blocks::parse_activation(get("network.activation"));
        c.scan_chunk = get_int("network.scan_chunk");
        c.zero_head = get_bool("network.zero_head");
        c.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    return c;
}

train::TrainConfig ConfigMap::training() const {
    train::TrainConfig t;
    try {
        t.epochs = get_int("train.epochs");
        t.batch_size = get_int("train.batch_size");
        t.lr = get_double("train.lr");
        t.weight_decay = get_double("train.weight_decay");
        t.poly_power = get_double("train.poly_power");
        t.patch = get_dims("train.patch");
        t.seed = get_u64("run.seed");
        t.flips = get_bool("train.flips");
        t.optimizer = train::parse_optimizer(get("train.optimizer"));
        t.momentum = get_double("train.momentum");
        t.beta1 = get_double("train.beta1");
        t.beta2 = get_double("train.beta2");
        t.adam_eps = get_double("train.adam_eps");
        t.validate();
    } catch (const ConfigError& e) {
        throw UsageError(e.what());
    }
    return t;
}

}  // namespace mhm::cli
