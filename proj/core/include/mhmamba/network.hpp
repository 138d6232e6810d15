#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mhmamba/agf.hpp"
#include "mhmamba/blocks.hpp"

namespace mhm {

enum class Precision { F32, F64 };

const char* precision_name(Precision p);
Precision parse_precision(std::string_view name);

inline constexpr std::size_t kStages = 4;

struct NetworkConfig {
    std::int64_t in_channels = 4;
    std::int64_t num_classes = 4;
    std::array<std::int64_t, kStages> channels{48, 96, 192, 384};
    std::array<std::int64_t, kStages> blocks{2, 2, 2, 2};
    std::int64_t heads = 4;
    std::int64_t d_state = 16;
    std::int64_t csca_reduction = 4;
    std::array<std::int64_t, 3> patch{32, 32, 32};
    Precision precision = Precision::F32;
    blocks::Activation activation = blocks::Activation::Relu;
    std::int64_t scan_chunk = 0;
    /// Start the segmentation head at zero (logits identically 0).
    bool zero_head = false;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
    /// Checks a (D, H, W) input extent: each divisible by 16.
    static void validate_extent(std::int64_t depth, std::int64_t height, std::int64_t width);
};

bool operator==(const NetworkConfig& a, const NetworkConfig& b);

struct ModuleCount {
    std::string module;
    std::int64_t parameters = 0;
};

template <typename T>
using Var = ad::Var<T>;

template <typename T>
struct DecoderParams {
    blocks::ConvLayer<T> proj;  ///< 1x1x1, C_{i+1} -> C_i
    blocks::AGFParams<T> agf;
    blocks::ConvLayer<T> conv1;
    blocks::NormAffine<T> norm1;
    blocks::ConvLayer<T> conv2;
    blocks::NormAffine<T> norm2;

    template <typename Fn>
    void visit(Fn&& fn) {
        blocks::visit_child(fn, "proj", proj);
        blocks::visit_child(fn, "agf", agf);
        blocks::visit_child(fn, "conv1", conv1);
        blocks::visit_child(fn, "norm1", norm1);
        blocks::visit_child(fn, "conv2", conv2);
        blocks::visit_child(fn, "norm2", norm2);
    }
};

template <typename T>
struct NetworkOutput {
    Var<T> logits;                       ///< (B, num_classes, D, H, W)
    std::array<Var<T>, kStages> stages;  ///< encoder features after each stage
};

/// Stem, four stages of MHM blocks with stride-2 downsampling between them, a
/// convolutional decoder fusing each encoder scale through AGF, and a 1x1x1 head.
template <typename T>
class MhMambaNet {
public:
    MhMambaNet(const NetworkConfig& config, std::uint64_t seed);

    const NetworkConfig& config() const { return config_; }

    /// Throws ShapeError unless x is (B, in_channels, D, H, W) with D, H, W divisible by 16.
    NetworkOutput<T> forward(const Var<T>& x, const blocks::Probe<T>* probe = nullptr) const;

    /// Stem and the four encoder stages only; same input checks as forward.
    std::array<Var<T>, kStages> encode(const Var<T>& x, const blocks::Probe<T>* probe = nullptr) const;

    /// Logits without recording gradients.
    Volume5<T> infer(const Volume5<T>& x) const;

    /// Visits every parameter array once, in a fixed order, with dotted names.
    template <typename Fn>
    void visit(Fn&& fn) {
        blocks::visit_child(fn, "stem", stem_);
        for (std::size_t s = 0; s < kStages; ++s) {
            const std::string stage = "stage" + std::to_string(s + 1);
            for (std::size_t b = 0; b < stages_[s].size(); ++b) {
                blocks::visit_child(fn, stage + ".block" + std::to_string(b + 1), stages_[s][b]);
            }
            if (s + 1 < kStages) blocks::visit_child(fn, "down" + std::to_string(s + 1), down_[s]);
        }
        for (std::size_t i = kStages - 1; i-- > 0;) {
            blocks::visit_child(fn, "decoder" + std::to_string(i + 1), decoder_[i]);
        }
        blocks::visit_child(fn, "head", head_);
    }

    template <typename Fn>
    void visit(Fn&& fn) const {
        const_cast<MhMambaNet*>(this)->visit([&](const std::string& name, Volume5<T>& v) {
            fn(name, static_cast<const Volume5<T>&>(v));
        });
    }

    std::vector<std::pair<std::string, Volume5<T>*>> parameters();

    /// Parameter counts grouped by top-level module (stem, stageN, downN, decoderN, head).
    std::vector<ModuleCount> parameter_report() const;
    std::int64_t parameter_count() const;

private:
    NetworkConfig config_;
    blocks::StemParams<T> stem_;
    std::array<std::vector<blocks::MHMBlockParams<T>>, kStages> stages_;
    std::array<blocks::ConvLayer<T>, kStages - 1> down_;
    std::array<DecoderParams<T>, kStages - 1> decoder_;
    blocks::ConvLayer<T> head_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a text header ("MHMAMBA-CHECKPOINT 1", config lines, one
// "param <name> <shape> <offset>" line per array, "end") followed by the
// parameters as 32-bit little-endian floats.

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MhMambaNet<T>& net);

/// Reads the header's config, builds a network and fills its parameters.
template <typename T>
MhMambaNet<T> load_checkpoint(const std::filesystem::path& path);

NetworkConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace mhm
