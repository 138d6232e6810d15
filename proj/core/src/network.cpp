#include "mhmamba/network.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mhmamba/errors.hpp"

namespace mhm {

const char* precision_name(Precision p) {
    return p == Precision::F64 ? "f64" : "f32";
}

Precision parse_precision(std::string_view name) {
    if (name == "f32" || name == "float32") return Precision::F32;
    if (name == "f64" || name == "float64") return Precision::F64;
    throw ConfigError("unknown precision '" + std::string(name) + "' (expected f32 or f64)");
}

namespace {

constexpr std::int64_t kTotalHalvings = 16;

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError("network config: " + message);
}

}  // namespace

void NetworkConfig::validate() const {
    require(in_channels >= 1, "in_channels must be positive");
    require(num_classes >= 2, "num_classes must be at least 2");
    require(channels[0] == 48, "channels[0] must be 48, got " + std::to_string(channels[0]));
    require(heads >= 1, "heads must be positive");
    require(d_state >= 1, "d_state must be positive");
    require(csca_reduction >= 1, "csca_reduction must be positive");
    require(scan_chunk >= 0, "scan_chunk must be non-negative");
    for (std::size_t s = 0; s < kStages; ++s) {
        const std::string which = "channels[" + std::to_string(s) + "]=" + std::to_string(channels[s]);
        require(channels[s] % heads == 0, which + " is not divisible by heads=" + std::to_string(heads));
        require(channels[s] % blocks::kFusionGroups == 0, which + " is not divisible by 4");
        require(channels[s] % csca_reduction == 0,
                which + " is not divisible by csca_reduction=" + std::to_string(csca_reduction));
        require(blocks[s] >= 1, "blocks[" + std::to_string(s) + "] must be positive");
    }
    for (std::size_t a = 0; a < patch.size(); ++a) {
        require(patch[a] > 0 && patch[a] % kTotalHalvings == 0,
                "patch[" + std::to_string(a) + "]=" + std::to_string(patch[a]) +
                    " is not a positive multiple of 16");
    }
}

void NetworkConfig::validate_extent(std::int64_t depth, std::int64_t height, std::int64_t width) {
    const std::array<std::int64_t, 3> dims{depth, height, width};
    const std::array<Axis, 3> axes{kDepth, kHeight, kWidth};
    for (std::size_t a = 0; a < 3; ++a) {
        if (dims[a] % kTotalHalvings != 0) {
            throw ShapeError(std::string("network: extent ") + std::to_string(dims[a]) + " along " +
                             axis_name(axes[a]) + " axis is not divisible by 16");
        }
    }
}

bool operator==(const NetworkConfig& a, const NetworkConfig& b) {
    return a.in_channels == b.in_channels && a.num_classes == b.num_classes &&
           a.channels == b.channels && a.blocks == b.blocks && a.heads == b.heads &&
           a.d_state == b.d_state && a.csca_reduction == b.csca_reduction && a.patch == b.patch &&
           a.precision == b.precision && a.activation == b.activation &&
           a.scan_chunk == b.scan_chunk && a.zero_head == b.zero_head;
}

template <typename T>
MhMambaNet<T>::MhMambaNet(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto& ch = config_.channels;
    stem_ = blocks::StemParams<T>::init(config_.in_channels, ch[0], rng);
    for (std::size_t s = 0; s < kStages; ++s) {
        for (std::int64_t b = 0; b < config_.blocks[s]; ++b) {
            stages_[s].push_back(blocks::MHMBlockParams<T>::init(
                ch[s], config_.heads, config_.d_state, config_.csca_reduction, rng));
        }
        if (s + 1 < kStages) down_[s] = blocks::downsample_init<T>(ch[s], ch[s + 1], rng);
    }
    kernels::ConvGeometry same;
    same.padding = 1;
    for (std::size_t i = kStages - 1; i-- > 0;) {
        auto& d = decoder_[i];
        d.proj = blocks::ConvLayer<T>::init(ch[i], ch[i + 1], 1, kernels::ConvGeometry{}, rng);
        d.agf = blocks::AGFParams<T>::init(ch[i], rng);
        d.conv1 = blocks::ConvLayer<T>::init(ch[i], ch[i], 3, same, rng);
        d.norm1 = blocks::NormAffine<T>::init(ch[i]);
        d.conv2 = blocks::ConvLayer<T>::init(ch[i], ch[i], 3, same, rng);
        d.norm2 = blocks::NormAffine<T>::init(ch[i]);
    }
    head_ = blocks::ConvLayer<T>::init(config_.num_classes, ch[0], 1, kernels::ConvGeometry{}, rng);
    if (config_.zero_head) {
        head_.weight.fill(T(0));
        head_.bias.fill(T(0));
    }
}

template <typename T>
std::array<Var<T>, kStages> MhMambaNet<T>::encode(const Var<T>& x, const blocks::Probe<T>* probe) const {
    const Shape5& s = x.shape();
    if (s[kChannel] != config_.in_channels) {
        throw ShapeError("network: expected " + std::to_string(config_.in_channels) +
                         " channels along channel axis, got " + std::to_string(s[kChannel]));
    }
    NetworkConfig::validate_extent(s[kDepth], s[kHeight], s[kWidth]);

    const blocks::MhmOptions options{config_.activation, config_.scan_chunk};
    std::array<Var<T>, kStages> stages;
    Var<T> f = blocks::stem_forward(x, stem_);
    for (std::size_t st = 0; st < kStages; ++st) {
        for (const auto& block : stages_[st]) f = blocks::block_forward(f, block, options, probe);
        stages[st] = f;
        if (st + 1 < kStages) f = blocks::downsample_forward(f, down_[st]);
    }
    return stages;
}

template <typename T>
NetworkOutput<T> MhMambaNet<T>::forward(const Var<T>& x, const blocks::Probe<T>* probe) const {
    auto& tape = x.tape();
    const auto act = blocks::to_unary(config_.activation);

    NetworkOutput<T> out;
    out.stages = encode(x, probe);
    Var<T> d = out.stages[kStages - 1];
    for (std::size_t i = kStages - 1; i-- > 0;) {
        const auto& p = decoder_[i];
        const Var<T> up = ad::upsample2x(p.proj(d));
        const Var<T> fused = blocks::agf_forward(out.stages[i], up, p.agf, probe);
        d = ad::activation(ad::instance_norm(p.conv1(fused), tape.leaf(p.norm1.gamma),
                                             tape.leaf(p.norm1.beta)),
                           act);
        d = ad::activation(
            ad::instance_norm(p.conv2(d), tape.leaf(p.norm2.gamma), tape.leaf(p.norm2.beta)), act);
    }
    out.logits = head_(ad::upsample2x(d));
    return out;
}

template <typename T>
Volume5<T> MhMambaNet<T>::infer(const Volume5<T>& x) const {
    ad::Tape<T> tape(false);
    return forward(tape.leaf(x, false)).logits.value();
}

template <typename T>
std::vector<std::pair<std::string, Volume5<T>*>> MhMambaNet<T>::parameters() {
    std::vector<std::pair<std::string, Volume5<T>*>> out;
    visit([&](const std::string& name, Volume5<T>& v) { out.emplace_back(name, &v); });
    return out;
}

template <typename T>
std::vector<ModuleCount> MhMambaNet<T>::parameter_report() const {
    std::vector<ModuleCount> rows;
    visit([&](const std::string& name, const Volume5<T>& v) {
        const std::string module = name.substr(0, name.find('.'));
        if (rows.empty() || rows.back().module != module) rows.push_back({module, 0});
        rows.back().parameters += v.numel();
    });
    return rows;
}

template <typename T>
std::int64_t MhMambaNet<T>::parameter_count() const {
    std::int64_t total = 0;
    for (const auto& row : parameter_report()) total += row.parameters;
    return total;
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMagic = "MHMAMBA-CHECKPOINT 1";

template <std::size_t N>
std::string join(const std::array<std::int64_t, N>& v) {
    std::string s;
    for (std::size_t i = 0; i < N; ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

template <std::size_t N>
std::array<std::int64_t, N> split_ints(const std::string& text, const std::string& key) {
    std::array<std::int64_t, N> out{};
    std::stringstream ss(text);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= N) break;
        try {
            out[i++] = std::stoll(item);
        } catch (const std::exception&) {
            throw IoError(IoError::Code::Header, "checkpoint: bad integer list for " + key);
        }
    }
    if (i != N) throw IoError(IoError::Code::Header, "checkpoint: wrong list length for " + key);
    return out;
}

std::string shape_text(const Shape5& s) {
    std::string t;
    for (int a = 0; a < 5; ++a) {
        if (a) t += 'x';
        t += std::to_string(s[a]);
    }
    return t;
}

void write_config(std::ostream& os, const NetworkConfig& c) {
    os << "config in_channels " << c.in_channels << '\n'
       << "config num_classes " << c.num_classes << '\n'
       << "config channels " << join(c.channels) << '\n'
       << "config blocks " << join(c.blocks) << '\n'
       << "config heads " << c.heads << '\n'
       << "config d_state " << c.d_state << '\n'
       << "config csca_reduction " << c.csca_reduction << '\n'
       << "config patch " << join(c.patch) << '\n'
       << "config precision " << precision_name(c.precision) << '\n'
       << "config activation " << blocks::activation_name(c.activation) << '\n'
       << "config scan_chunk " << c.scan_chunk << '\n'
       << "config zero_head " << (c.zero_head ? 1 : 0) << '\n';
}

struct ParamEntry {
    std::string name;
    std::string shape;
    std::int64_t offset = 0;
};

struct Header {
    NetworkConfig config;
    std::vector<ParamEntry> params;
    std::streamoff payload_begin = 0;
};

Header read_header(std::istream& is, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(is, line) || line != kMagic) {
        throw IoError(IoError::Code::Header, "checkpoint " + path.string() + ": missing magic line");
    }
    Header h;
    std::map<std::string, std::string> cfg;
    bool ended = false;
    while (std::getline(is, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "config") {
            std::string key, value;
            ls >> key >> value;
            cfg[key] = value;
        } else if (kind == "param") {
            ParamEntry e;
            ls >> e.name >> e.shape >> e.offset;
            if (ls.fail()) {
                throw IoError(IoError::Code::Header, "checkpoint: malformed line '" + line + "'");
            }
            h.params.push_back(e);
        } else {
            throw IoError(IoError::Code::Header, "checkpoint: unexpected line '" + line + "'");
        }
    }
    if (!ended) throw IoError(IoError::Code::Header, "checkpoint: header has no end line");
    h.payload_begin = is.tellg();

    const auto get = [&](const std::string& key) -> const std::string& {
        auto it = cfg.find(key);
        if (it == cfg.end()) throw IoError(IoError::Code::Header, "checkpoint: missing config " + key);
        return it->second;
    };
    try {
        auto& c = h.config;
        c.in_channels = std::stoll(get("in_channels"));
        c.num_classes = std::stoll(get("num_classes"));
        c.channels = split_ints<kStages>(get("channels"), "channels");
        c.blocks = split_ints<kStages>(get("blocks"), "blocks");
        c.heads = std::stoll(get("heads"));
        c.d_state = std::stoll(get("d_state"));
        c.csca_reduction = std::stoll(get("csca_reduction"));
        c.patch = split_ints<3>(get("patch"), "patch");
        c.precision = parse_precision(get("precision"));
        c.activation = blocks::parse_activation(get("activation"));
        c.scan_chunk = std::stoll(get("scan_chunk"));
        c.zero_head = get("zero_head") == "1";
    } catch (const std::invalid_argument&) {
        throw IoError(IoError::Code::Header, "checkpoint: non-numeric config value");
    }
    return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MhMambaNet<T>& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(IoError::Code::Open, "cannot write checkpoint " + path.string());
    os << kMagic << '\n';
    write_config(os, net.config());
    std::int64_t offset = 0;
    net.visit([&](const std::string& name, const Volume5<T>& v) {
        os << "param " << name << ' ' << shape_text(v.shape()) << ' ' << offset << '\n';
        offset += v.numel();
    });
    os << "end\n";
    std::vector<char> buffer;
    net.visit([&](const std::string&, const Volume5<T>& v) {
        buffer.resize(static_cast<std::size_t>(v.numel()) * 4);
        std::size_t at = 0;
        for (T e : v.data()) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(e));
            for (int k = 0; k < 4; ++k) buffer[at++] = static_cast<char>((bits >> (8 * k)) & 0xFFu);
        }
        os.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    });
    if (!os) throw IoError(IoError::Code::Open, "failed writing checkpoint " + path.string());
}

NetworkConfig read_checkpoint_config(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoError::Code::Open, "cannot open checkpoint " + path.string());
    return read_header(is, path).config;
}

template <typename T>
MhMambaNet<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoError::Code::Open, "cannot open checkpoint " + path.string());
    const Header h = read_header(is, path);
    MhMambaNet<T> net(h.config, 0);
    auto params = net.parameters();
    if (params.size() != h.params.size()) {
        throw IoError(IoError::Code::SizeMismatch,
                      "checkpoint: " + std::to_string(h.params.size()) + " arrays listed, network has " +
                          std::to_string(params.size()));
    }
    std::int64_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = h.params[i];
        const auto& [name, v] = params[i];
        if (e.name != name || e.shape != shape_text(v->shape()) || e.offset != expected_offset) {
            throw IoError(IoError::Code::SizeMismatch,
                          "checkpoint: entry '" + e.name + " " + e.shape + "' does not match '" + name +
                              " " + shape_text(v->shape()) + "'");
        }
        expected_offset += v->numel();
    }
    std::vector<char> payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (payload.size() % 4 != 0) {
        throw IoError(IoError::Code::TruncatedPayload, "checkpoint: payload is not whole floats");
    }
    if (static_cast<std::int64_t>(payload.size() / 4) != expected_offset) {
        throw IoError(IoError::Code::SizeMismatch,
                      "checkpoint: payload holds " + std::to_string(payload.size() / 4) +
                          " values, header lists " + std::to_string(expected_offset));
    }
    std::size_t at = 0;
    for (auto& [name, v] : params) {
        for (T& e : v->data()) {
            std::uint32_t bits = 0;
            for (int k = 0; k < 4; ++k) {
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[at++])) << (8 * k);
            }
            e = static_cast<T>(std::bit_cast<float>(bits));
        }
    }
    return net;
}

template class MhMambaNet<float>;
template class MhMambaNet<double>;
template void save_checkpoint(const std::filesystem::path&, const MhMambaNet<float>&);
template void save_checkpoint(const std::filesystem::path&, const MhMambaNet<double>&);
template MhMambaNet<float> load_checkpoint<float>(const std::filesystem::path&);
template MhMambaNet<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace mhm
