#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mhmamba/errors.hpp"

namespace mhm {

enum Axis : int { kBatch = 0, kChannel = 1, kDepth = 2, kHeight = 3, kWidth = 4 };

const char* axis_name(int axis);

/// Extents of a rank-5 (B, C, D, H, W) array. Every extent is >= 1.
struct Shape5 {
    std::array<std::int64_t, 5> dims{1, 1, 1, 1, 1};

    Shape5() = default;
    Shape5(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w);

    std::int64_t operator[](int axis) const { return dims[static_cast<std::size_t>(axis)]; }
    std::int64_t& operator[](int axis) { return dims[static_cast<std::size_t>(axis)]; }

    std::int64_t batch() const { return dims[0]; }
    std::int64_t channels() const { return dims[1]; }
    std::int64_t depth() const { return dims[2]; }
    std::int64_t height() const { return dims[3]; }
    std::int64_t width() const { return dims[4]; }

    std::int64_t spatial() const { return dims[2] * dims[3] * dims[4]; }
    std::int64_t numel() const { return dims[0] * dims[1] * spatial(); }

    Shape5 with(int axis, std::int64_t extent) const;

    std::string str() const;

    friend bool operator==(const Shape5&, const Shape5&) = default;
};

/// Dense row-major rank-5 array: the feature carrier for every kernel.
template <typename T>
class Volume5 {
public:
    using value_type = T;

    Volume5() = default;
    explicit Volume5(const Shape5& shape, T fill = T(0));
    Volume5(const Shape5& shape, std::vector<T> data);

    static Volume5 scalar(T value) { return Volume5(Shape5{}, value); }
    static Volume5 vector(std::vector<T> values);

    const Shape5& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }

    std::int64_t offset(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h,
                        std::int64_t w) const {
        return (((b * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w;
    }
    T& operator()(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w) {
        return data_[static_cast<std::size_t>(offset(b, c, d, h, w))];
    }
    T operator()(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h,
                 std::int64_t w) const {
        return data_[static_cast<std::size_t>(offset(b, c, d, h, w))];
    }
    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    T operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    /// Contiguous (D, H, W) block of channel c in batch b.
    std::span<T> plane(std::int64_t b, std::int64_t c);
    std::span<const T> plane(std::int64_t b, std::int64_t c) const;

    void fill(T value);
    /// Reinterprets the extents; the element count must not change.
    void reshape(const Shape5& shape);

    template <typename U>
    Volume5<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Volume5<U>(shape_, std::move(out));
    }

    friend bool operator==(const Volume5&, const Volume5&) = default;

private:
    Shape5 shape_{};
    std::vector<T> data_ = std::vector<T>(1, T(0));
};

/// Class-id volume (B, D, H, W) with ids in {0, 1, 2, 3}.
struct LabelVolume {
    std::int64_t batch = 1;
    std::int64_t depth = 1;
    std::int64_t height = 1;
    std::int64_t width = 1;
    std::vector<std::uint8_t> data = std::vector<std::uint8_t>(1, 0);

    LabelVolume() = default;
    LabelVolume(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w,
                std::uint8_t fill = 0);

    std::int64_t spatial() const { return depth * height * width; }
    std::int64_t numel() const { return batch * spatial(); }
    std::int64_t offset(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w) const {
        return ((b * depth + d) * height + h) * width + w;
    }
    std::uint8_t& operator()(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w) {
        return data[static_cast<std::size_t>(offset(b, d, h, w))];
    }
    std::uint8_t operator()(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w) const {
        return data[static_cast<std::size_t>(offset(b, d, h, w))];
    }

    friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

/// Throws ShapeError naming the first axis where the two shapes differ.
void require_same_shape(const Shape5& a, const Shape5& b, const char* what);

}  // namespace mhm
