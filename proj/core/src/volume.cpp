#include "mhmamba/volume.hpp"

#include <algorithm>
#include <sstream>

namespace mhm {

const char* axis_name(int axis) {
    static constexpr const char* kNames[] = {"batch", "channel", "depth", "height", "width"};
    return axis >= 0 && axis < 5 ? kNames[axis] : "?";
}

Shape5::Shape5(std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w)
    : dims{b, c, d, h, w} {
    for (int a = 0; a < 5; ++a) {
        if (dims[static_cast<std::size_t>(a)] < 1) {
            throw ShapeError(std::string("extent of ") + axis_name(a) + " axis must be >= 1, got " +
                             std::to_string(dims[static_cast<std::size_t>(a)]));
        }
    }
}

Shape5 Shape5::with(int axis, std::int64_t extent) const {
    Shape5 s = *this;
    s[axis] = extent;
    if (extent < 1) {
        throw ShapeError(std::string("extent of ") + axis_name(axis) + " axis must be >= 1");
    }
    return s;
}

std::string Shape5::str() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < 5; ++i) {
        os << (i ? "x" : "") << dims[i];
    }
    return os.str();
}

template <typename T>
Volume5<T>::Volume5(const Shape5& shape, T fill)
    : shape_(shape), data_(static_cast<std::size_t>(shape.numel()), fill) {}

template <typename T>
Volume5<T>::Volume5(const Shape5& shape, std::vector<T> data)
    : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel()) {
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_.str());
    }
}

template <typename T>
Volume5<T> Volume5<T>::vector(std::vector<T> values) {
    const auto n = static_cast<std::int64_t>(values.size());
    return Volume5(Shape5(n, 1, 1, 1, 1), std::move(values));
}

template <typename T>
std::span<T> Volume5<T>::plane(std::int64_t b, std::int64_t c) {
    const auto n = shape_.spatial();
    return std::span<T>(data_).subspan(static_cast<std::size_t>((b * shape_[1] + c) * n),
                                       static_cast<std::size_t>(n));
}

template <typename T>
std::span<const T> Volume5<T>::plane(std::int64_t b, std::int64_t c) const {
    const auto n = shape_.spatial();
    return std::span<const T>(data_).subspan(static_cast<std::size_t>((b * shape_[1] + c) * n),
                                             static_cast<std::size_t>(n));
}

template <typename T>
void Volume5<T>::fill(T value) {
    std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void Volume5<T>::reshape(const Shape5& shape) {
    if (shape.numel() != shape_.numel()) {
        throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    shape_ = shape;
}

template class Volume5<float>;
template class Volume5<double>;

LabelVolume::LabelVolume(std::int64_t b, std::int64_t d, std::int64_t h, std::int64_t w,
                         std::uint8_t fill)
    : batch(b), depth(d), height(h), width(w) {
    if (b < 1 || d < 1 || h < 1 || w < 1) {
        throw ShapeError("label volume extents must be >= 1");
    }
    data.assign(static_cast<std::size_t>(b * d * h * w), fill);
}

void require_same_shape(const Shape5& a, const Shape5& b, const char* what) {
    for (int axis = 0; axis < 5; ++axis) {
        if (a[axis] != b[axis]) {
            throw ShapeError(std::string(what) + ": " + axis_name(axis) + " axis mismatch (" +
                             std::to_string(a[axis]) + " vs " + std::to_string(b[axis]) + ")");
        }
    }
}

}  // namespace mhm
