#include "mhmamba/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "mhmamba/errors.hpp"
#include "mhmamba/kernels.hpp"

namespace mhm::io {

namespace fs = std::filesystem;
using nlohmann::json;

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::F32: return "f32";
        case Dtype::F64: return "f64";
        case Dtype::U8: return "u8";
    }
    return "?";
}

Dtype parse_dtype(const std::string& name) {
    if (name == "f32") return Dtype::F32;
    if (name == "f64") return Dtype::F64;
    if (name == "u8") return Dtype::U8;
    throw IoError(IoError::Code::UnknownDtype, "unknown dtype tag '" + name + "'");
}

std::size_t dtype_width(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    return 0;
}

fs::path header_path(const fs::path& path) {
    fs::path p = path;
    if (p.extension() == ".json" || p.extension() == ".raw") p.replace_extension();
    p += ".json";
    return p;
}

namespace {

template <typename T>
constexpr Dtype dtype_of() {
    if constexpr (std::is_same_v<T, float>) return Dtype::F32;
    else if constexpr (std::is_same_v<T, double>) return Dtype::F64;
    else return Dtype::U8;
}

template <typename U>
void append_le(std::vector<char>& out, U value) {
    if constexpr (sizeof(U) == 1) {
        out.push_back(static_cast<char>(value));
    } else {
        using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
        const Bits bits = std::bit_cast<Bits>(value);
        for (std::size_t k = 0; k < sizeof(U); ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFFu));
    }
}

template <typename U>
U load_le(const char* p) {
    if constexpr (sizeof(U) == 1) {
        return static_cast<U>(static_cast<unsigned char>(*p));
    } else {
        using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
        Bits bits = 0;
        for (std::size_t k = 0; k < sizeof(U); ++k) {
            bits |= static_cast<Bits>(static_cast<unsigned char>(p[k])) << (8 * k);
        }
        return std::bit_cast<U>(bits);
    }
}

void write_files(const fs::path& path, const VolumeHeader& header, const std::vector<char>& payload) {
    const fs::path hp = header_path(path);
    json j;
    j["shape"] = header.shape;
    j["dtype"] = dtype_name(header.dtype);
    j["spacing"] = header.spacing;
    j["modalities"] = header.modalities;
    j["payload"] = header.payload;
    {
        std::ofstream os(hp);
        if (!os) throw IoError(IoError::Code::Open, "cannot write " + hp.string());
        os << j.dump(2) << '\n';
    }
    const fs::path rp = hp.parent_path() / header.payload;
    std::ofstream os(rp, std::ios::binary);
    if (!os) throw IoError(IoError::Code::Open, "cannot write " + rp.string());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!os) throw IoError(IoError::Code::Open, "failed writing " + rp.string());
}

// Reads the payload and validates its length against the header.
std::vector<char> read_payload(const fs::path& path, const VolumeHeader& h) {
    const fs::path rp = header_path(path).parent_path() / h.payload;
    std::ifstream is(rp, std::ios::binary);
    if (!is) throw IoError(IoError::Code::Open, "cannot open payload " + rp.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const std::size_t width = dtype_width(h.dtype);
    if (bytes.size() % width != 0) {
        throw IoError(IoError::Code::TruncatedPayload,
                      rp.string() + ": " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                          dtype_name(h.dtype) + " values");
    }
    const auto count = static_cast<std::int64_t>(bytes.size() / width);
    if (count != h.numel()) {
        throw IoError(IoError::Code::SizeMismatch,
                      rp.string() + ": payload holds " + std::to_string(count) + " values, header shape needs " +
                          std::to_string(h.numel()));
    }
    return bytes;
}

}  // namespace

template <typename T>
void write_volume(const fs::path& path, const Volume5<T>& v, const std::vector<std::string>& modalities,
                  std::array<double, 3> spacing) {
    const Shape5& s = v.shape();
    VolumeHeader h;
    h.shape = {s[kChannel], s[kDepth], s[kHeight], s[kWidth]};
    h.dtype = dtype_of<T>();
    h.spacing = spacing;
    h.modalities = modalities;
    h.payload = header_path(path).stem().string() + ".raw";
    std::vector<char> bytes;
    bytes.reserve(static_cast<std::size_t>(h.numel()) * sizeof(T));
    const auto first = v.data().subspan(0, static_cast<std::size_t>(h.numel()));
    for (T e : first) append_le(bytes, e);
    write_files(path, h, bytes);
}

void write_labels(const fs::path& path, const LabelVolume& labels, std::array<double, 3> spacing) {
    VolumeHeader h;
    h.shape = {1, labels.depth, labels.height, labels.width};
    h.dtype = Dtype::U8;
    h.spacing = spacing;
    h.payload = header_path(path).stem().string() + ".raw";
    const std::vector<char> bytes(labels.data.begin(), labels.data.begin() + labels.spatial());
    write_files(path, h, bytes);
}

VolumeHeader read_header(const fs::path& path) {
    const fs::path hp = header_path(path);
    std::ifstream is(hp);
    if (!is) throw IoError(IoError::Code::Open, "cannot open " + hp.string());
    VolumeHeader h;
    try {
        const json j = json::parse(is);
        h.shape = j.at("shape").get<std::array<std::int64_t, 4>>();
        h.dtype = parse_dtype(j.at("dtype").get<std::string>());
        if (j.contains("spacing")) h.spacing = j.at("spacing").get<std::array<double, 3>>();
        if (j.contains("modalities")) h.modalities = j.at("modalities").get<std::vector<std::string>>();
        h.payload = j.at("payload").get<std::string>();
    } catch (const json::exception& e) {
        throw IoError(IoError::Code::Header, hp.string() + ": " + e.what());
    }
    for (std::int64_t e : h.shape) {
        if (e < 1) throw IoError(IoError::Code::Header, hp.string() + ": non-positive extent in shape");
    }
    return h;
}

template <typename T>
Volume5<T> read_volume(const fs::path& path) {
    const VolumeHeader h = read_header(path);
    const std::vector<char> bytes = read_payload(path, h);
    Volume5<T> v(Shape5(1, h.shape[0], h.shape[1], h.shape[2], h.shape[3]));
    const std::size_t width = dtype_width(h.dtype);
    auto out = v.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const char* p = bytes.data() + i * width;
        switch (h.dtype) {
            case Dtype::F32: out[i] = static_cast<T>(load_le<float>(p)); break;
            case Dtype::F64: out[i] = static_cast<T>(load_le<double>(p)); break;
            case Dtype::U8: out[i] = static_cast<T>(load_le<std::uint8_t>(p)); break;
        }
    }
    return v;
}

LabelVolume read_labels(const fs::path& path) {
    const VolumeHeader h = read_header(path);
    if (h.dtype != Dtype::U8) {
        throw IoError(IoError::Code::UnknownDtype, header_path(path).string() + ": labels must be u8");
    }
    if (h.shape[0] != 1) {
        throw IoError(IoError::Code::Header, header_path(path).string() + ": labels must have one channel");
    }
    const std::vector<char> bytes = read_payload(path, h);
    LabelVolume labels(1, h.shape[1], h.shape[2], h.shape[3]);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        labels.data[i] = static_cast<std::uint8_t>(bytes[i]);
    }
    return labels;
}

// ---------------------------------------------------------------------------

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw ConfigError("phantom: dims must be positive");
        for (int k = 0; k < 3; ++k) {
            if (!(radii[k][a] > 0.0)) throw ConfigError("phantom: radii must be positive");
        }
        if (!(radii[0][a] > radii[1][a] && radii[1][a] > radii[2][a])) {
            throw ConfigError("phantom: radii are not strictly nested along axis " + std::to_string(a));
        }
        if (center[a] - radii[0][a] < 0.0 || center[a] + radii[0][a] > static_cast<double>(dims[a] - 1)) {
            throw ConfigError("phantom: outer ellipsoid leaves the volume along axis " + std::to_string(a));
        }
    }
    if (noise < 0.0) throw ConfigError("phantom: noise must be non-negative");
}

PhantomSpec random_phantom_spec(std::uint64_t seed, std::array<std::int64_t, 3> dims) {
    PhantomSpec spec;
    spec.dims = dims;
    spec.seed = seed;
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
    std::uniform_real_distribution<double> shift(-0.06, 0.06), grow(0.85, 1.15);
    for (int a = 0; a < 3; ++a) {
        const double extent = static_cast<double>(dims[a]);
        const double scale = extent / 64.0;
        const double g = grow(rng);
        for (int k = 0; k < 3; ++k) spec.radii[k][a] = PhantomSpec{}.radii[k][a] * scale * g;
        spec.center[a] = (extent - 1.0) / 2.0 + shift(rng) * extent;
    }
    spec.validate();
    return spec;
}

std::uint8_t phantom_label(const PhantomSpec& spec, std::int64_t d, std::int64_t h, std::int64_t w) {
    const std::array<double, 3> x{static_cast<double>(d), static_cast<double>(h), static_cast<double>(w)};
    std::uint8_t label = 0;
    for (int k = 0; k < 3; ++k) {
        double r = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double t = (x[a] - spec.center[a]) / spec.radii[k][a];
            r += t * t;
        }
        if (r <= 1.0) label = static_cast<std::uint8_t>(k + 1);
    }
    return label;
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const auto [D, H, W] = spec.dims;
    Phantom out{Volume5<float>(Shape5(1, 4, D, H, W)), LabelVolume(1, D, H, W)};
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) out.labels(0, d, h, w) = phantom_label(spec, d, h, w);

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::int64_t c = 0; c < 4; ++c) {
        auto plane = out.image.plane(0, c);
        for (std::size_t i = 0; i < plane.size(); ++i) {
            const float mean = spec.means[out.labels.data[i]][static_cast<std::size_t>(c)];
            const double n = spec.noise > 0.0 ? spec.noise * gauss(rng) : 0.0;
            plane[i] = static_cast<float>(mean + n);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_crop(const Shape5& s, const std::array<std::int64_t, 3>& corner,
                const std::array<std::int64_t, 3>& size) {
    const std::array<Axis, 3> axes{kDepth, kHeight, kWidth};
    for (int a = 0; a < 3; ++a) {
        if (corner[a] < 0 || size[a] < 1 || corner[a] + size[a] > s[axes[a]]) {
            throw ShapeError(std::string("crop: window does not fit along ") + axis_name(axes[a]) + " axis");
        }
    }
}

}  // namespace

template <typename T>
Volume5<T> crop(const Volume5<T>& v, const std::array<std::int64_t, 3>& corner,
                const std::array<std::int64_t, 3>& size) {
    const Shape5& s = v.shape();
    check_crop(s, corner, size);
    Volume5<T> out(Shape5(s[kBatch], s[kChannel], size[0], size[1], size[2]));
    for (std::int64_t b = 0; b < s[kBatch]; ++b)
        for (std::int64_t c = 0; c < s[kChannel]; ++c)
            for (std::int64_t d = 0; d < size[0]; ++d)
                for (std::int64_t h = 0; h < size[1]; ++h) {
                    const T* src = v.ptr() + v.offset(b, c, corner[0] + d, corner[1] + h, corner[2]);
                    std::copy(src, src + size[2], &out(b, c, d, h, 0));
                }
    return out;
}

LabelVolume crop(const LabelVolume& v, const std::array<std::int64_t, 3>& corner,
                 const std::array<std::int64_t, 3>& size) {
    check_crop(Shape5(v.batch, 1, v.depth, v.height, v.width), corner, size);
    LabelVolume out(v.batch, size[0], size[1], size[2]);
    for (std::int64_t b = 0; b < v.batch; ++b)
        for (std::int64_t d = 0; d < size[0]; ++d)
            for (std::int64_t h = 0; h < size[1]; ++h)
                for (std::int64_t w = 0; w < size[2]; ++w)
                    out(b, d, h, w) = v(b, corner[0] + d, corner[1] + h, corner[2] + w);
    return out;
}

template <typename T>
Volume5<T> flip(const Volume5<T>& v, int axis) {
    if (axis < 0 || axis > 2) throw Error("flip: spatial axis must be 0, 1 or 2");
    const Shape5& s = v.shape();
    Volume5<T> out(s);
    for (std::int64_t b = 0; b < s[kBatch]; ++b)
        for (std::int64_t c = 0; c < s[kChannel]; ++c)
            for (std::int64_t d = 0; d < s[kDepth]; ++d)
                for (std::int64_t h = 0; h < s[kHeight]; ++h)
                    for (std::int64_t w = 0; w < s[kWidth]; ++w) {
                        const std::int64_t sd = axis == 0 ? s[kDepth] - 1 - d : d;
                        const std::int64_t sh = axis == 1 ? s[kHeight] - 1 - h : h;
                        const std::int64_t sw = axis == 2 ? s[kWidth] - 1 - w : w;
                        out(b, c, d, h, w) = v(b, c, sd, sh, sw);
                    }
    return out;
}

LabelVolume flip(const LabelVolume& v, int axis) {
    if (axis < 0 || axis > 2) throw Error("flip: spatial axis must be 0, 1 or 2");
    LabelVolume out(v.batch, v.depth, v.height, v.width);
    for (std::int64_t b = 0; b < v.batch; ++b)
        for (std::int64_t d = 0; d < v.depth; ++d)
            for (std::int64_t h = 0; h < v.height; ++h)
                for (std::int64_t w = 0; w < v.width; ++w) {
                    const std::int64_t sd = axis == 0 ? v.depth - 1 - d : d;
                    const std::int64_t sh = axis == 1 ? v.height - 1 - h : h;
                    const std::int64_t sw = axis == 2 ? v.width - 1 - w : w;
                    out(b, d, h, w) = v(b, sd, sh, sw);
                }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::int64_t> tile_starts(std::int64_t extent, std::int64_t patch, double overlap) {
    if (patch > extent) throw ShapeError("tile_starts: patch exceeds the volume");
    const auto stride =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
    std::vector<std::int64_t> starts;
    for (std::int64_t s = 0; s + patch < extent; s += stride) starts.push_back(s);
    if (starts.empty() || starts.back() != extent - patch) starts.push_back(extent - patch);
    return starts;
}

template <typename T>
SlidingWindowResult<T> sliding_window_infer(const LogitsFn<T>& model, const Volume5<T>& volume,
                                            const std::array<std::int64_t, 3>& patch, double overlap) {
    if (!(overlap >= 0.0 && overlap <= 0.9)) {
        throw ConfigError("sliding window: overlap must lie in [0, 0.9]");
    }
    const Shape5& s = volume.shape();
    const std::array<Axis, 3> axes{kDepth, kHeight, kWidth};
    for (int a = 0; a < 3; ++a) {
        if (patch[a] > s[axes[a]]) {
            throw ShapeError(std::string("sliding window: patch exceeds the volume along ") +
                             axis_name(axes[a]) + " axis");
        }
    }
    const auto sd = tile_starts(s[kDepth], patch[0], overlap);
    const auto sh = tile_starts(s[kHeight], patch[1], overlap);
    const auto sw = tile_starts(s[kWidth], patch[2], overlap);

    SlidingWindowResult<T> r;
    r.counts.assign(static_cast<std::size_t>(s.spatial()), 0);
    std::int64_t classes = 0;
    for (std::int64_t d0 : sd) {
        for (std::int64_t h0 : sh) {
            for (std::int64_t w0 : sw) {
                const std::array<std::int64_t, 3> corner{d0, h0, w0};
                const Volume5<T> probs = kernels::softmax_channels(model(crop(volume, corner, patch)));
                if (classes == 0) {
                    classes = probs.shape()[kChannel];
                    r.probabilities = Volume5<T>(Shape5(s[kBatch], classes, s[kDepth], s[kHeight], s[kWidth]));
                }
                for (std::int64_t b = 0; b < s[kBatch]; ++b)
                    for (std::int64_t c = 0; c < classes; ++c)
                        for (std::int64_t d = 0; d < patch[0]; ++d)
                            for (std::int64_t h = 0; h < patch[1]; ++h)
                                for (std::int64_t w = 0; w < patch[2]; ++w)
                                    r.probabilities(b, c, d0 + d, h0 + h, w0 + w) += probs(b, c, d, h, w);
                for (std::int64_t d = 0; d < patch[0]; ++d)
                    for (std::int64_t h = 0; h < patch[1]; ++h)
                        for (std::int64_t w = 0; w < patch[2]; ++w)
                            ++r.counts[static_cast<std::size_t>(((d0 + d) * s[kHeight] + h0 + h) * s[kWidth] + w0 + w)];
            }
        }
    }
    r.labels = LabelVolume(s[kBatch], s[kDepth], s[kHeight], s[kWidth]);
    const std::size_t spatial = static_cast<std::size_t>(s.spatial());
    for (std::int64_t b = 0; b < s[kBatch]; ++b) {
        for (std::int64_t c = 0; c < classes; ++c) {
            auto plane = r.probabilities.plane(b, c);
            for (std::size_t i = 0; i < spatial; ++i) plane[i] /= static_cast<T>(r.counts[i]);
        }
        for (std::size_t i = 0; i < spatial; ++i) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < classes; ++c) {
                if (r.probabilities.plane(b, c)[i] > r.probabilities.plane(b, best)[i]) best = c;
            }
            r.labels.data[static_cast<std::size_t>(b) * spatial + i] = static_cast<std::uint8_t>(best);
        }
    }
    return r;
}

#define MHM_INSTANTIATE(T)                                                                              \
    template void write_volume(const fs::path&, const Volume5<T>&, const std::vector<std::string>&,     \
                               std::array<double, 3>);                                                  \
    template Volume5<T> read_volume<T>(const fs::path&);                                                \
    template Volume5<T> crop(const Volume5<T>&, const std::array<std::int64_t, 3>&,                     \
                             const std::array<std::int64_t, 3>&);                                       \
    template Volume5<T> flip(const Volume5<T>&, int);                                                   \
    template SlidingWindowResult<T> sliding_window_infer(const LogitsFn<T>&, const Volume5<T>&,         \
                                                         const std::array<std::int64_t, 3>&, double);

MHM_INSTANTIATE(float)
MHM_INSTANTIATE(double)

#undef MHM_INSTANTIATE

}  // namespace mhm::io
