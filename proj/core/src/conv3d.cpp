#include <Eigen/Core>
#include <algorithm>
#include <string>

#include "mhmamba/kernels.hpp"

namespace mhm::kernels {

namespace {

// Upper bound on im2col buffer elements; slabs of output depth planes are sized to fit.
constexpr std::int64_t kColumnBudget = std::int64_t{1} << 22;

struct ConvDims {
    std::int64_t batch, c_in, d, h, w;
    std::int64_t c_out, kd, kh, kw;
    std::int64_t od, oh, ow;
    std::int64_t groups, cin_g, cout_g;
    int stride, pad;

    std::int64_t rows() const { return cin_g * kd * kh * kw; }
    std::int64_t in_spatial() const { return d * h * w; }
    std::int64_t out_spatial() const { return od * oh * ow; }
    bool pointwise() const { return kd == 1 && kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvDims make_dims(const Shape5& x, const Shape5& weight, const ConvGeometry& g) {
    const Shape5 out = conv3d_output_shape(x, weight, g);
    ConvDims cd{};
    cd.batch = x[0];
    cd.c_in = x[1];
    cd.d = x[2];
    cd.h = x[3];
    cd.w = x[4];
    cd.c_out = weight[0];
    cd.kd = weight[2];
    cd.kh = weight[3];
    cd.kw = weight[4];
    cd.od = out[2];
    cd.oh = out[3];
    cd.ow = out[4];
    cd.groups = g.groups;
    cd.cin_g = x[1] / g.groups;
    cd.cout_g = weight[0] / g.groups;
    cd.stride = g.stride;
    cd.pad = g.padding;
    return cd;
}

// Rows are (ci, kd, kh, kw); columns are output voxels of depth planes [od0, od1).
template <typename T>
void im2col(const ConvDims& cd, const T* x, std::int64_t od0, std::int64_t od1, T* col) {
    const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cd.cin_g; ++ci) {
        const T* xc = x + ci * cd.in_spatial();
        for (std::int64_t a = 0; a < cd.kd; ++a) {
            for (std::int64_t b = 0; b < cd.kh; ++b) {
                for (std::int64_t c = 0; c < cd.kw; ++c, ++row) {
                    T* r = col + row * cols;
                    for (std::int64_t o_d = od0; o_d < od1; ++o_d) {
                        const std::int64_t id = o_d * cd.stride - cd.pad + a;
                        T* rd = r + (o_d - od0) * cd.oh * cd.ow;
                        if (id < 0 || id >= cd.d) {
                            std::fill(rd, rd + cd.oh * cd.ow, T(0));
                            continue;
                        }
                        for (std::int64_t o_h = 0; o_h < cd.oh; ++o_h) {
                            const std::int64_t ih = o_h * cd.stride - cd.pad + b;
                            T* rh = rd + o_h * cd.ow;
                            if (ih < 0 || ih >= cd.h) {
                                std::fill(rh, rh + cd.ow, T(0));
                                continue;
                            }
                            const T* src = xc + (id * cd.h + ih) * cd.w;
                            for (std::int64_t o_w = 0; o_w < cd.ow; ++o_w) {
                                const std::int64_t iw = o_w * cd.stride - cd.pad + c;
                                rh[o_w] = (iw >= 0 && iw < cd.w) ? src[iw] : T(0);
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvDims& cd, const T* col, std::int64_t od0, std::int64_t od1, T* gx) {
    const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
    std::int64_t row = 0;
    for (std::int64_t ci = 0; ci < cd.cin_g; ++ci) {
        T* gc = gx + ci * cd.in_spatial();
        for (std::int64_t a = 0; a < cd.kd; ++a) {
            for (std::int64_t b = 0; b < cd.kh; ++b) {
                for (std::int64_t c = 0; c < cd.kw; ++c, ++row) {
                    const T* r = col + row * cols;
                    for (std::int64_t o_d = od0; o_d < od1; ++o_d) {
                        const std::int64_t id = o_d * cd.stride - cd.pad + a;
                        if (id < 0 || id >= cd.d) {
                            continue;
                        }
                        const T* rd = r + (o_d - od0) * cd.oh * cd.ow;
                        for (std::int64_t o_h = 0; o_h < cd.oh; ++o_h) {
                            const std::int64_t ih = o_h * cd.stride - cd.pad + b;
                            if (ih < 0 || ih >= cd.h) {
                                continue;
                            }
                            const T* rh = rd + o_h * cd.ow;
                            T* dst = gc + (id * cd.h + ih) * cd.w;
                            for (std::int64_t o_w = 0; o_w < cd.ow; ++o_w) {
                                const std::int64_t iw = o_w * cd.stride - cd.pad + c;
                                if (iw >= 0 && iw < cd.w) {
                                    dst[iw] += rh[o_w];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

std::int64_t planes_per_slab(const ConvDims& cd) {
    const std::int64_t per_plane = std::max<std::int64_t>(1, cd.rows() * cd.oh * cd.ow);
    return std::clamp<std::int64_t>(kColumnBudget / per_plane, 1, cd.od);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

}  // namespace

Shape5 conv3d_output_shape(const Shape5& x, const Shape5& weight, const ConvGeometry& g) {
    if (g.groups < 1 || g.stride < 1 || g.padding < 0) {
        throw ShapeError("conv3d: groups and stride must be >= 1, padding >= 0");
    }
    if (weight[0] % g.groups != 0) {
        throw ShapeError("conv3d: output channels " + std::to_string(weight[0]) +
                         " not divisible by groups " + std::to_string(g.groups));
    }
    if (x[1] % g.groups != 0 || x[1] / g.groups != weight[1]) {
        throw ShapeError("conv3d: channel axis mismatch (input has " + std::to_string(x[1]) +
                         " channels, weight expects " + std::to_string(weight[1] * g.groups) +
                         ")");
    }
    Shape5 out(x[0], weight[0], 1, 1, 1);
    for (int axis = kDepth; axis <= kWidth; ++axis) {
        const std::int64_t padded = x[axis] + 2 * g.padding;
        if (padded < weight[axis]) {
            throw ShapeError(std::string("conv3d: kernel does not fit padded input along ") +
                             axis_name(axis) + " axis (" + std::to_string(padded) + " < " +
                             std::to_string(weight[axis]) + ")");
        }
        out[axis] = (padded - weight[axis]) / g.stride + 1;
    }
    return out;
}

template <typename T>
Volume5<T> conv3d(const Volume5<T>& x, const Volume5<T>& weight, const Volume5<T>* bias,
                  const ConvGeometry& g) {
    const ConvDims cd = make_dims(x.shape(), weight.shape(), g);
    if (bias != nullptr && bias->numel() != cd.c_out) {
        throw ShapeError("conv3d: bias length " + std::to_string(bias->numel()) +
                         " does not match output channels " + std::to_string(cd.c_out));
    }
    Volume5<T> y(Shape5(cd.batch, cd.c_out, cd.od, cd.oh, cd.ow));
    const std::int64_t n_out = cd.out_spatial();
    const std::int64_t slab = planes_per_slab(cd);
    std::vector<T> col;
    if (!cd.pointwise()) {
        col.resize(static_cast<std::size_t>(cd.rows() * slab * cd.oh * cd.ow));
    }
    for (std::int64_t b = 0; b < cd.batch; ++b) {
        for (std::int64_t grp = 0; grp < cd.groups; ++grp) {
            const T* xg = x.ptr() + (b * cd.c_in + grp * cd.cin_g) * cd.in_spatial();
            Eigen::Map<const RowMat<T>> wg(weight.ptr() + grp * cd.cout_g * cd.rows(), cd.cout_g,
                                           cd.rows());
            T* yg = y.ptr() + (b * cd.c_out + grp * cd.cout_g) * n_out;
            for (std::int64_t od0 = 0; od0 < cd.od; od0 += slab) {
                const std::int64_t od1 = std::min(cd.od, od0 + slab);
                const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
                const std::int64_t first = od0 * cd.oh * cd.ow;
                const T* src = xg + first;
                std::int64_t src_stride = cd.in_spatial();
                if (!cd.pointwise()) {
                    im2col(cd, xg, od0, od1, col.data());
                    src = col.data();
                    src_stride = cols;
                }
                ConstStridedMap<T> cm(src, cd.rows(), cols, Eigen::OuterStride<>(src_stride));
                StridedMap<T> ym(yg + first, cd.cout_g, cols, Eigen::OuterStride<>(n_out));
                ym.noalias() = wg * cm;
            }
        }
        if (bias != nullptr) {
            for (std::int64_t c = 0; c < cd.c_out; ++c) {
                const T bv = (*bias)[c];
                for (T& v : y.plane(b, c)) {
                    v += bv;
                }
            }
        }
    }
    return y;
}

template <typename T>
void conv3d_backward(const Volume5<T>& x, const Volume5<T>& weight, const ConvGeometry& g,
                     const Volume5<T>& grad_out, Volume5<T>* grad_x, Volume5<T>* grad_w,
                     Volume5<T>* grad_b) {
    const ConvDims cd = make_dims(x.shape(), weight.shape(), g);
    require_same_shape(grad_out.shape(), Shape5(cd.batch, cd.c_out, cd.od, cd.oh, cd.ow),
                       "conv3d backward");
    const std::int64_t n_out = cd.out_spatial();
    if (grad_b != nullptr) {
        for (std::int64_t b = 0; b < cd.batch; ++b) {
            for (std::int64_t c = 0; c < cd.c_out; ++c) {
                T acc = 0;
                for (T v : grad_out.plane(b, c)) {
                    acc += v;
                }
                (*grad_b)[c] += acc;
            }
        }
    }
    if (grad_x == nullptr && grad_w == nullptr) {
        return;
    }
    const std::int64_t slab = planes_per_slab(cd);
    std::vector<T> col;
    std::vector<T> gcol;
    if (!cd.pointwise()) {
        col.resize(static_cast<std::size_t>(cd.rows() * slab * cd.oh * cd.ow));
        gcol.resize(col.size());
    }
    for (std::int64_t b = 0; b < cd.batch; ++b) {
        for (std::int64_t grp = 0; grp < cd.groups; ++grp) {
            const std::int64_t in_off = (b * cd.c_in + grp * cd.cin_g) * cd.in_spatial();
            const T* xg = x.ptr() + in_off;
            Eigen::Map<const RowMat<T>> wg(weight.ptr() + grp * cd.cout_g * cd.rows(), cd.cout_g,
                                           cd.rows());
            const T* gyg = grad_out.ptr() + (b * cd.c_out + grp * cd.cout_g) * n_out;
            for (std::int64_t od0 = 0; od0 < cd.od; od0 += slab) {
                const std::int64_t od1 = std::min(cd.od, od0 + slab);
                const std::int64_t cols = (od1 - od0) * cd.oh * cd.ow;
                const std::int64_t first = od0 * cd.oh * cd.ow;
                ConstStridedMap<T> gy(gyg + first, cd.cout_g, cols, Eigen::OuterStride<>(n_out));
                if (grad_w != nullptr) {
                    const T* src = xg + first;
                    std::int64_t src_stride = cd.in_spatial();
                    if (!cd.pointwise()) {
                        im2col(cd, xg, od0, od1, col.data());
                        src = col.data();
                        src_stride = cols;
                    }
                    ConstStridedMap<T> cm(src, cd.rows(), cols, Eigen::OuterStride<>(src_stride));
                    Eigen::Map<RowMat<T>> gw(grad_w->ptr() + grp * cd.cout_g * cd.rows(),
                                             cd.cout_g, cd.rows());
                    gw.noalias() += gy * cm.transpose();
                }
                if (grad_x != nullptr) {
                    T* gxg = grad_x->ptr() + in_off;
                    if (cd.pointwise()) {
                        StridedMap<T> gxm(gxg + first, cd.rows(), cols,
                                          Eigen::OuterStride<>(cd.in_spatial()));
                        gxm.noalias() += wg.transpose() * gy;
                    } else {
                        Eigen::Map<RowMat<T>> gc(gcol.data(), cd.rows(), cols);
                        gc.noalias() = wg.transpose() * gy;
                        col2im(cd, gcol.data(), od0, od1, gxg);
                    }
                }
            }
        }
    }
}

template Volume5<float> conv3d(const Volume5<float>&, const Volume5<float>&, const Volume5<float>*,
                               const ConvGeometry&);
template Volume5<double> conv3d(const Volume5<double>&, const Volume5<double>&,
                                const Volume5<double>*, const ConvGeometry&);
template void conv3d_backward(const Volume5<float>&, const Volume5<float>&, const ConvGeometry&,
                              const Volume5<float>&, Volume5<float>*, Volume5<float>*,
                              Volume5<float>*);
template void conv3d_backward(const Volume5<double>&, const Volume5<double>&, const ConvGeometry&,
                              const Volume5<double>&, Volume5<double>*, Volume5<double>*,
                              Volume5<double>*);

}  // namespace mhm::kernels
