#include "crowncut/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace crowncut::kernels {

namespace {

// Lane-blocked dot product. The lane discipline (fixed number of independent
// partial sums, reduced in index order) is part of the kernel contract: the
// parallel and serial variants share it, so their results are bit-identical,
// and the compiler can vectorize the lanes without reassociating
// floating-point math.
template <typename T>
inline T lane_dot(const T* __restrict__ a, const T* __restrict__ b, int n) {
    constexpr int L = int(64 / sizeof(T)) * 4;
    T lanes[L] = {};
    const int nb = n - n % L;
    for (int x = 0; x < nb; x += L)
        for (int l = 0; l < L; ++l) lanes[l] += a[x + l] * b[x + l];
    for (int x = nb; x < n; ++x) lanes[x - nb] += a[x] * b[x];
    T s = T(0);
    for (int l = 0; l < L; ++l) s += lanes[l];
    return s;
}

template <typename T>
inline T lane_dot_stride2(const T* __restrict__ a, const T* __restrict__ b,
                          int n) {
    constexpr int L = int(64 / sizeof(T)) * 2;
    T lanes[L] = {};
    const int nb = n - n % L;
    for (int x = 0; x < nb; x += L)
        for (int l = 0; l < L; ++l) lanes[l] += a[x + l] * b[2 * (x + l)];
    for (int x = nb; x < n; ++x) lanes[x - nb] += a[x] * b[2 * x];
    T s = T(0);
    for (int l = 0; l < L; ++l) s += lanes[l];
    return s;
}

// One output row of a 3x3 valid convolution for one input channel,
// accumulated on top of orow.
template <typename T>
inline void conv3x3_row_acc(T* __restrict__ orow, const T* __restrict__ r0,
                            const T* __restrict__ r1, const T* __restrict__ r2,
                            const T* __restrict__ w, int ow) {
    const T w00 = w[0], w01 = w[1], w02 = w[2];
    const T w10 = w[3], w11 = w[4], w12 = w[5];
    const T w20 = w[6], w21 = w[7], w22 = w[8];
    for (int x = 0; x < ow; ++x) {
        orow[x] += w00 * r0[x] + w01 * r0[x + 1] + w02 * r0[x + 2] +
                   w10 * r1[x] + w11 * r1[x + 1] + w12 * r1[x + 2] +
                   w20 * r2[x] + w21 * r2[x + 1] + w22 * r2[x + 2];
    }
}

// Same, two output channels at once; the input rows are loaded once and the
// accumulator pair keeps the FMA pipes busy.
template <typename T>
inline void conv3x3_row_acc2(T* __restrict__ o0, T* __restrict__ o1,
                             const T* __restrict__ r0, const T* __restrict__ r1,
                             const T* __restrict__ r2, const T* __restrict__ wa,
                             const T* __restrict__ wb, int ow) {
    for (int x = 0; x < ow; ++x) {
        const T s0 = r0[x], s1 = r0[x + 1], s2 = r0[x + 2];
        const T s3 = r1[x], s4 = r1[x + 1], s5 = r1[x + 2];
        const T s6 = r2[x], s7 = r2[x + 1], s8 = r2[x + 2];
        o0[x] += wa[0] * s0 + wa[1] * s1 + wa[2] * s2 + wa[3] * s3 +
                 wa[4] * s4 + wa[5] * s5 + wa[6] * s6 + wa[7] * s7 + wa[8] * s8;
        o1[x] += wb[0] * s0 + wb[1] * s1 + wb[2] * s2 + wb[3] * s3 +
                 wb[4] * s4 + wb[5] * s5 + wb[6] * s6 + wb[7] * s7 + wb[8] * s8;
    }
}

template <typename T>
inline void conv_generic_row_acc(T* __restrict__ orow, const Tensor3<T>& in,
                                 const Tensor4<T>& w, int o, int ci, int y,
                                 int ow) {
    for (int ky = 0; ky < w.kh; ++ky) {
        const T* irow = in.row(ci, y + ky);
        const T* taps = w.tap(o, ci, ky);
        for (int kx = 0; kx < w.kw; ++kx) {
            const T wv = taps[kx];
            const T* __restrict__ src = irow + kx;
            for (int x = 0; x < ow; ++x) orow[x] += wv * src[x];
        }
    }
}

template <typename T>
inline void conv_out_row_single(const Tensor3<T>& in, const Tensor4<T>& w,
                                const std::vector<T>& bias, bool relu,
                                Tensor3<T>& out, int o, int y) {
    const int ow = out.w;
    T* orow = out.row(o, y);
    for (int x = 0; x < ow; ++x) orow[x] = bias[o];
    if (w.kh == 3 && w.kw == 3) {
        for (int ci = 0; ci < w.ic; ++ci) {
            const T* base = in.row(ci, y);
            conv3x3_row_acc(orow, base, base + in.w, base + 2 * in.w,
                            w.tap(o, ci, 0), ow);
        }
    } else {
        for (int ci = 0; ci < w.ic; ++ci)
            conv_generic_row_acc(orow, in, w, o, ci, y, ow);
    }
    if (relu)
        for (int x = 0; x < ow; ++x) orow[x] = std::max(orow[x], T(0));
}

template <typename T>
inline void conv_out_row_pair(const Tensor3<T>& in, const Tensor4<T>& w,
                              const std::vector<T>& bias, bool relu,
                              Tensor3<T>& out, int o, int y) {
    const int ow = out.w;
    T* o0 = out.row(o, y);
    T* o1 = out.row(o + 1, y);
    for (int x = 0; x < ow; ++x) {
        o0[x] = bias[o];
        o1[x] = bias[o + 1];
    }
    for (int ci = 0; ci < w.ic; ++ci) {
        const T* base = in.row(ci, y);
        conv3x3_row_acc2(o0, o1, base, base + in.w, base + 2 * in.w,
                         w.tap(o, ci, 0), w.tap(o + 1, ci, 0), ow);
    }
    if (relu) {
        for (int x = 0; x < ow; ++x) {
            o0[x] = std::max(o0[x], T(0));
            o1[x] = std::max(o1[x], T(0));
        }
    }
}

// All nine 3x3 weight gradients for one (out, in) channel pair in a single
// pass. Sixteen independent partial-sum lanes per tap, reduced in index
// order; the discipline is shared with the serial variant.
template <typename T>
inline void conv3x3_tap_grads(const T* __restrict__ g,
                              const T* __restrict__ in, int oh, int ow,
                              int in_w, T* __restrict__ out9) {
    constexpr int L = 16;
    T lanes[9][L];
    std::memset(lanes, 0, sizeof(lanes));
    const int nb = ow - ow % L;
    for (int y = 0; y < oh; ++y) {
        const T* __restrict__ gr = g + size_t(y) * ow;
        const T* __restrict__ r0 = in + size_t(y) * in_w;
        const T* __restrict__ r1 = r0 + in_w;
        const T* __restrict__ r2 = r1 + in_w;
        for (int x = 0; x < nb; x += L) {
            for (int l = 0; l < L; ++l) {
                const T gv = gr[x + l];
                lanes[0][l] += gv * r0[x + l];
                lanes[1][l] += gv * r0[x + l + 1];
                lanes[2][l] += gv * r0[x + l + 2];
                lanes[3][l] += gv * r1[x + l];
                lanes[4][l] += gv * r1[x + l + 1];
                lanes[5][l] += gv * r1[x + l + 2];
                lanes[6][l] += gv * r2[x + l];
                lanes[7][l] += gv * r2[x + l + 1];
                lanes[8][l] += gv * r2[x + l + 2];
            }
        }
        for (int x = nb; x < ow; ++x) {
            const T gv = gr[x];
            lanes[0][x - nb] += gv * r0[x];
            lanes[1][x - nb] += gv * r0[x + 1];
            lanes[2][x - nb] += gv * r0[x + 2];
            lanes[3][x - nb] += gv * r1[x];
            lanes[4][x - nb] += gv * r1[x + 1];
            lanes[5][x - nb] += gv * r1[x + 2];
            lanes[6][x - nb] += gv * r2[x];
            lanes[7][x - nb] += gv * r2[x + 1];
            lanes[8][x - nb] += gv * r2[x + 2];
        }
    }
    for (int t = 0; t < 9; ++t) {
        T s = T(0);
        for (int l = 0; l < L; ++l) s += lanes[t][l];
        out9[t] = s;
    }
}

template <typename T>
void bias_grad(const Tensor3<T>& grad, std::vector<T>& db, bool parallel) {
    db.assign(size_t(grad.c), T(0));
#pragma omp parallel for schedule(static) if (parallel)
    for (int o = 0; o < grad.c; ++o) {
        T s = T(0);
        for (int y = 0; y < grad.h; ++y) {
            const T* g = grad.row(o, y);
            T rs = T(0);
            for (int x = 0; x < grad.w; ++x) rs += g[x];
            s += rs;
        }
        db[o] = s;
    }
}

// Zero-pad grad by (kh-1, kw-1) on every side and transpose+flip the weights;
// the input gradient is then a plain valid convolution, which reuses the fast
// forward path.
template <typename T>
void make_padded_grad(const Tensor3<T>& grad, int ph, int pw, Tensor3<T>& out) {
    out.reshape(grad.c, grad.h + 2 * ph, grad.w + 2 * pw);
    for (int ci = 0; ci < grad.c; ++ci)
        for (int y = 0; y < grad.h; ++y)
            std::memcpy(out.row(ci, y + ph) + pw, grad.row(ci, y),
                        sizeof(T) * size_t(grad.w));
}

template <typename T>
void make_flipped_transpose(const Tensor4<T>& w, Tensor4<T>& wt) {
    wt = Tensor4<T>(w.ic, w.oc, w.kh, w.kw);
    for (int o = 0; o < w.oc; ++o)
        for (int ci = 0; ci < w.ic; ++ci)
            for (int ky = 0; ky < w.kh; ++ky)
                for (int kx = 0; kx < w.kw; ++kx)
                    wt.at(ci, o, ky, kx) =
                        w.at(o, ci, w.kh - 1 - ky, w.kw - 1 - kx);
}

template <typename T>
inline T bilinear_sample(const T* src, int w, int h, double u, double v,
                         bool& ok) {
    // sub-nanopixel tolerance so floating-point noise at the border does not
    // invalidate exact-identity warps
    constexpr double tol = 1e-9;
    if (u < -tol || v < -tol || u > double(w - 1) + tol ||
        v > double(h - 1) + tol) {
        ok = false;
        return T(0);
    }
    if (u < 0.0) u = 0.0;
    if (v < 0.0) v = 0.0;
    ok = true;
    int x0 = int(u);
    int y0 = int(v);
    if (x0 > w - 2) x0 = w - 2;
    if (y0 > h - 2) y0 = h - 2;
    if (x0 < 0) x0 = 0;
    if (y0 < 0) y0 = 0;
    const double fx = u - x0;
    const double fy = v - y0;
    const T* p0 = src + size_t(y0) * w + x0;
    const T* p1 = p0 + w;
    const double top = p0[0] + fx * (p0[1] - p0[0]);
    const double bot = p1[0] + fx * (p1[1] - p1[0]);
    return T(top + fy * (bot - top));
}

struct DiscSpan {
    int dy;
    int half; // |dx| <= half
};

std::vector<DiscSpan> disc_spans(int radius) {
    std::vector<DiscSpan> spans;
    for (int dy = -radius; dy <= radius; ++dy) {
        int half = int(std::floor(
            std::sqrt(double(radius) * radius - double(dy) * dy)));
        spans.push_back({dy, half});
    }
    return spans;
}

template <typename T>
void conv2d_valid_impl(const Tensor3<T>& in, const Tensor4<T>& w,
                       const std::vector<T>& bias, bool relu, Tensor3<T>& out,
                       bool parallel) {
    const int oh = in.h - w.kh + 1;
    const int ow = in.w - w.kw + 1;
    out.reshape(w.oc, oh, ow);
    if (w.kh == 3 && w.kw == 3 && w.oc % 2 == 0) {
        const int pairs = w.oc / 2;
#pragma omp parallel for schedule(static) if (parallel)
        for (int p = 0; p < pairs; ++p)
            for (int y = 0; y < oh; ++y)
                conv_out_row_pair(in, w, bias, relu, out, 2 * p, y);
    } else {
#pragma omp parallel for schedule(static) if (parallel)
        for (int o = 0; o < w.oc; ++o)
            for (int y = 0; y < oh; ++y)
                conv_out_row_single(in, w, bias, relu, out, o, y);
    }
}

template <typename T>
void conv2d_grad_weights_impl(const Tensor3<T>& in, const Tensor3<T>& grad,
                              Tensor4<T>& dw, std::vector<T>& db,
                              bool parallel) {
    const int oh = grad.h, ow = grad.w;
    bias_grad(grad, db, parallel);
    if (dw.kh == 3 && dw.kw == 3) {
#pragma omp parallel for schedule(static) if (parallel)
        for (int o = 0; o < dw.oc; ++o)
            for (int ci = 0; ci < dw.ic; ++ci)
                conv3x3_tap_grads(grad.row(o, 0), in.row(ci, 0), oh, ow, in.w,
                                  dw.tap(o, ci, 0));
    } else {
#pragma omp parallel for collapse(2) schedule(static) if (parallel)
        for (int o = 0; o < dw.oc; ++o) {
            for (int ci = 0; ci < dw.ic; ++ci) {
                for (int ky = 0; ky < dw.kh; ++ky) {
                    T* taps = dw.tap(o, ci, ky);
                    for (int kx = 0; kx < dw.kw; ++kx) {
                        T acc = T(0);
                        for (int y = 0; y < oh; ++y)
                            acc += lane_dot(grad.row(o, y),
                                            in.row(ci, y + ky) + kx, ow);
                        taps[kx] = acc;
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_grad_input_impl(const Tensor3<T>& grad, const Tensor4<T>& w,
                            int in_h, int in_w, Tensor3<T>& din,
                            bool parallel) {
    Tensor3<T> padded;
    make_padded_grad(grad, w.kh - 1, w.kw - 1, padded);
    Tensor4<T> wt;
    make_flipped_transpose(w, wt);
    const std::vector<T> zero_bias(size_t(w.ic), T(0));
    conv2d_valid_impl(padded, wt, zero_bias, false, din, parallel);
    (void)in_h;
    (void)in_w; // din dims follow from grad dims: grad + kernel - 1
}

} // namespace

// ---- convolution stack ----

template <typename T>
void conv2d_valid(const Tensor3<T>& in, const Tensor4<T>& w,
                  const std::vector<T>& bias, bool relu, Tensor3<T>& out) {
    conv2d_valid_impl(in, w, bias, relu, out, true);
}

template <typename T>
void conv2d_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                         Tensor4<T>& dw, std::vector<T>& db) {
    conv2d_grad_weights_impl(in, grad, dw, db, true);
}

template <typename T>
void conv2d_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w, int in_h,
                       int in_w, Tensor3<T>& din) {
    conv2d_grad_input_impl(grad, w, in_h, in_w, din, true);
}

template <typename T>
void upconv2x2(const Tensor3<T>& in, const Tensor4<T>& w,
               const std::vector<T>& bias, Tensor3<T>& out) {
    out.reshape(w.oc, in.h * 2, in.w * 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int o = 0; o < w.oc; ++o) {
        for (int yy = 0; yy < 2 * in.h; ++yy) {
            T* __restrict__ orow = out.row(o, yy);
            const int yi = yy >> 1;
            const int dy = yy & 1;
            for (int x = 0; x < out.w; ++x) orow[x] = bias[o];
            for (int ci = 0; ci < w.ic; ++ci) {
                const T* __restrict__ irow = in.row(ci, yi);
                const T w0 = w.at(o, ci, dy, 0);
                const T w1 = w.at(o, ci, dy, 1);
                for (int xi = 0; xi < in.w; ++xi) {
                    orow[2 * xi] += w0 * irow[xi];
                    orow[2 * xi + 1] += w1 * irow[xi];
                }
            }
        }
    }
}

template <typename T>
void upconv2x2_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                            Tensor4<T>& dw, std::vector<T>& db) {
    bias_grad(grad, db, true);
#pragma omp parallel for collapse(2) schedule(static)
    for (int o = 0; o < dw.oc; ++o) {
        for (int ci = 0; ci < dw.ic; ++ci) {
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    T acc = T(0);
                    for (int yi = 0; yi < in.h; ++yi)
                        acc += lane_dot_stride2(in.row(ci, yi),
                                                grad.row(o, 2 * yi + dy) + dx,
                                                in.w);
                    dw.at(o, ci, dy, dx) = acc;
                }
            }
        }
    }
}

template <typename T>
void upconv2x2_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w,
                          Tensor3<T>& din) {
    din.reshape(w.ic, grad.h / 2, grad.w / 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < w.ic; ++ci) {
        for (int yi = 0; yi < grad.h / 2; ++yi) {
            T* __restrict__ drow = din.row(ci, yi);
            for (int o = 0; o < w.oc; ++o) {
                for (int dy = 0; dy < 2; ++dy) {
                    const T* __restrict__ g = grad.row(o, 2 * yi + dy);
                    const T w0 = w.at(o, ci, dy, 0);
                    const T w1 = w.at(o, ci, dy, 1);
                    for (int xi = 0; xi < din.w; ++xi)
                        drow[xi] += w0 * g[2 * xi] + w1 * g[2 * xi + 1];
                }
            }
        }
    }
}

template <typename T>
void maxpool2x2(const Tensor3<T>& in, Tensor3<T>& out,
                std::vector<uint8_t>& argmax) {
    out.reshape(in.c, in.h / 2, in.w / 2);
    argmax.assign(out.size(), 0);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        for (int y = 0; y < in.h / 2; ++y) {
            const T* r0 = in.row(ci, 2 * y);
            const T* r1 = in.row(ci, 2 * y + 1);
            T* orow = out.row(ci, y);
            uint8_t* arow = argmax.data() + (size_t(ci) * out.h + y) * out.w;
            for (int x = 0; x < out.w; ++x) {
                T best = r0[2 * x];
                uint8_t bi = 0;
                if (r0[2 * x + 1] > best) { best = r0[2 * x + 1]; bi = 1; }
                if (r1[2 * x] > best) { best = r1[2 * x]; bi = 2; }
                if (r1[2 * x + 1] > best) { best = r1[2 * x + 1]; bi = 3; }
                orow[x] = best;
                arow[x] = bi;
            }
        }
    }
}

template <typename T>
void maxpool2x2_backward(const Tensor3<T>& grad,
                         const std::vector<uint8_t>& argmax, int in_h, int in_w,
                         Tensor3<T>& din) {
    din.reshape(grad.c, in_h, in_w);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < grad.c; ++ci) {
        for (int y = 0; y < grad.h; ++y) {
            const T* g = grad.row(ci, y);
            const uint8_t* a =
                argmax.data() + (size_t(ci) * grad.h + y) * grad.w;
            T* r0 = din.row(ci, 2 * y);
            T* r1 = din.row(ci, 2 * y + 1);
            for (int x = 0; x < grad.w; ++x) {
                switch (a[x]) {
                    case 0: r0[2 * x] = g[x]; break;
                    case 1: r0[2 * x + 1] = g[x]; break;
                    case 2: r1[2 * x] = g[x]; break;
                    default: r1[2 * x + 1] = g[x]; break;
                }
            }
        }
    }
}

template <typename T>
void relu_backward_inplace(const Tensor3<T>& act, Tensor3<T>& grad) {
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < grad.c; ++ci) {
        const T* a = act.v.data() + size_t(ci) * act.plane();
        T* g = grad.v.data() + size_t(ci) * grad.plane();
        const size_t n = grad.plane();
        for (size_t i = 0; i < n; ++i)
            if (!(a[i] > T(0))) g[i] = T(0);
    }
}

template void conv2d_valid<float>(const Tensor3<float>&, const Tensor4<float>&,
                                  const std::vector<float>&, bool,
                                  Tensor3<float>&);
template void conv2d_valid<double>(const Tensor3<double>&,
                                   const Tensor4<double>&,
                                   const std::vector<double>&, bool,
                                   Tensor3<double>&);
template void conv2d_grad_weights<float>(const Tensor3<float>&,
                                         const Tensor3<float>&,
                                         Tensor4<float>&, std::vector<float>&);
template void conv2d_grad_weights<double>(const Tensor3<double>&,
                                          const Tensor3<double>&,
                                          Tensor4<double>&,
                                          std::vector<double>&);
template void conv2d_grad_input<float>(const Tensor3<float>&,
                                       const Tensor4<float>&, int, int,
                                       Tensor3<float>&);
template void conv2d_grad_input<double>(const Tensor3<double>&,
                                        const Tensor4<double>&, int, int,
                                        Tensor3<double>&);
template void upconv2x2<float>(const Tensor3<float>&, const Tensor4<float>&,
                               const std::vector<float>&, Tensor3<float>&);
template void upconv2x2<double>(const Tensor3<double>&, const Tensor4<double>&,
                                const std::vector<double>&, Tensor3<double>&);
template void upconv2x2_grad_weights<float>(const Tensor3<float>&,
                                            const Tensor3<float>&,
                                            Tensor4<float>&,
                                            std::vector<float>&);
template void upconv2x2_grad_weights<double>(const Tensor3<double>&,
                                             const Tensor3<double>&,
                                             Tensor4<double>&,
                                             std::vector<double>&);
template void upconv2x2_grad_input<float>(const Tensor3<float>&,
                                          const Tensor4<float>&,
                                          Tensor3<float>&);
template void upconv2x2_grad_input<double>(const Tensor3<double>&,
                                           const Tensor4<double>&,
                                           Tensor3<double>&);
template void maxpool2x2<float>(const Tensor3<float>&, Tensor3<float>&,
                                std::vector<uint8_t>&);
template void maxpool2x2<double>(const Tensor3<double>&, Tensor3<double>&,
                                 std::vector<uint8_t>&);
template void maxpool2x2_backward<float>(const Tensor3<float>&,
                                         const std::vector<uint8_t>&, int, int,
                                         Tensor3<float>&);
template void maxpool2x2_backward<double>(const Tensor3<double>&,
                                          const std::vector<uint8_t>&, int,
                                          int, Tensor3<double>&);
template void relu_backward_inplace<float>(const Tensor3<float>&,
                                           Tensor3<float>&);
template void relu_backward_inplace<double>(const Tensor3<double>&,
                                            Tensor3<double>&);

// ---- integer kernels ----

void conv2d_valid_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                     const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                     Tensor3<int32_t>& out) {
    const int oh = in.h - w.kh + 1;
    const int ow = in.w - w.kw + 1;
    out.reshape(w.oc, oh, ow);
#pragma omp parallel for collapse(2) schedule(static)
    for (int o = 0; o < w.oc; ++o) {
        for (int y = 0; y < oh; ++y) {
            int32_t* __restrict__ orow = out.row(o, y);
            for (int x = 0; x < ow; ++x) orow[x] = bias[o];
            for (int ci = 0; ci < w.ic; ++ci) {
                for (int ky = 0; ky < w.kh; ++ky) {
                    const int8_t* irow = in.row(ci, y + ky);
                    const int8_t* taps = w.tap(o, ci, ky);
                    for (int kx = 0; kx < w.kw; ++kx) {
                        const int32_t wv = taps[kx];
                        const int8_t* __restrict__ src = irow + kx;
                        for (int x = 0; x < ow; ++x)
                            orow[x] += (int32_t(src[x]) - in_zp) * wv;
                    }
                }
            }
        }
    }
}

void upconv2x2_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                  const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                  Tensor3<int32_t>& out) {
    out.reshape(w.oc, in.h * 2, in.w * 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int o = 0; o < w.oc; ++o) {
        for (int yy = 0; yy < 2 * in.h; ++yy) {
            int32_t* __restrict__ orow = out.row(o, yy);
            const int yi = yy >> 1;
            const int dy = yy & 1;
            for (int x = 0; x < out.w; ++x) orow[x] = bias[o];
            for (int ci = 0; ci < w.ic; ++ci) {
                const int8_t* __restrict__ irow = in.row(ci, yi);
                const int32_t w0 = w.at(o, ci, dy, 0);
                const int32_t w1 = w.at(o, ci, dy, 1);
                for (int xi = 0; xi < in.w; ++xi) {
                    const int32_t v = int32_t(irow[xi]) - in_zp;
                    orow[2 * xi] += w0 * v;
                    orow[2 * xi + 1] += w1 * v;
                }
            }
        }
    }
}

void maxpool2x2_s8(const Tensor3<int8_t>& in, Tensor3<int8_t>& out) {
    out.reshape(in.c, in.h / 2, in.w / 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        for (int y = 0; y < in.h / 2; ++y) {
            const int8_t* r0 = in.row(ci, 2 * y);
            const int8_t* r1 = in.row(ci, 2 * y + 1);
            int8_t* orow = out.row(ci, y);
            for (int x = 0; x < out.w; ++x) {
                int8_t m = r0[2 * x];
                m = std::max(m, r0[2 * x + 1]);
                m = std::max(m, r1[2 * x]);
                m = std::max(m, r1[2 * x + 1]);
                orow[x] = m;
            }
        }
    }
}

FixedMultiplier fixed_multiplier(double value) {
    // value = m * 2^-s with m normalized to [2^30, 2^31)
    int exp = 0;
    double frac = std::frexp(value, &exp); // frac in [0.5, 1)
    int64_t m = std::llround(frac * double(int64_t(1) << 31));
    if (m == (int64_t(1) << 31)) {
        m >>= 1;
        ++exp;
    }
    return {int32_t(m), 31 - exp};
}

int32_t fixed_mul(int32_t acc, FixedMultiplier fm) {
    const int64_t p = int64_t(acc) * fm.m;
    const bool neg = p < 0;
    const uint64_t ap = neg ? uint64_t(-p) : uint64_t(p);
    uint64_t r;
    if (fm.s > 0) {
        r = (ap + (uint64_t(1) << (fm.s - 1))) >> fm.s; // round half away
    } else {
        r = ap << -fm.s;
    }
    int64_t out = neg ? -int64_t(r) : int64_t(r);
    out = std::clamp<int64_t>(out, INT32_MIN, INT32_MAX);
    return int32_t(out);
}

void requantize_s8(const Tensor3<int32_t>& acc, FixedMultiplier fm, int32_t zp,
                   bool relu_floor, Tensor3<int8_t>& out) {
    out.reshape(acc.c, acc.h, acc.w);
    const int32_t lo = relu_floor ? std::max<int32_t>(-128, zp) : -128;
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < acc.c; ++ci) {
        const int32_t* a = acc.v.data() + size_t(ci) * acc.plane();
        int8_t* o = out.v.data() + size_t(ci) * out.plane();
        const size_t n = acc.plane();
        for (size_t i = 0; i < n; ++i) {
            int32_t q = zp + fixed_mul(a[i], fm);
            o[i] = int8_t(std::clamp<int32_t>(q, lo, 127));
        }
    }
}

void rescale_s8(const Tensor3<int8_t>& in, int32_t in_zp, FixedMultiplier fm,
                int32_t out_zp, Tensor3<int8_t>& out) {
    out.reshape(in.c, in.h, in.w);
#pragma omp parallel for schedule(static)
    for (int ci = 0; ci < in.c; ++ci) {
        const int8_t* a = in.v.data() + size_t(ci) * in.plane();
        int8_t* o = out.v.data() + size_t(ci) * out.plane();
        const size_t n = in.plane();
        for (size_t i = 0; i < n; ++i) {
            int32_t q = out_zp + fixed_mul(int32_t(a[i]) - in_zp, fm);
            o[i] = int8_t(std::clamp<int32_t>(q, -128, 127));
        }
    }
}

// ---- image kernels ----

void min_filter_disc(const double* in, int w, int h, int radius, double* out) {
    const auto spans = disc_spans(radius);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double m = in[size_t(y) * w + x];
            for (const auto& sp : spans) {
                const int yy = y + sp.dy;
                if (yy < 0 || yy >= h) continue;
                const int x0 = std::max(0, x - sp.half);
                const int x1 = std::min(w - 1, x + sp.half);
                const double* row = in + size_t(yy) * w;
                for (int xx = x0; xx <= x1; ++xx) m = std::min(m, row[xx]);
            }
            out[size_t(y) * w + x] = m;
        }
    }
}

void median_filter_disc(const double* in, int w, int h, int radius,
                        double* out) {
    const auto spans = disc_spans(radius);
    const size_t cap = size_t(2 * radius + 1) * (2 * radius + 1);
#pragma omp parallel
    {
        std::vector<double> buf(cap);
#pragma omp for schedule(static)
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                size_t n = 0;
                for (const auto& sp : spans) {
                    const int yy = y + sp.dy;
                    if (yy < 0 || yy >= h) continue;
                    const int x0 = std::max(0, x - sp.half);
                    const int x1 = std::min(w - 1, x + sp.half);
                    const double* row = in + size_t(yy) * w;
                    for (int xx = x0; xx <= x1; ++xx) buf[n++] = row[xx];
                }
                // lower median for even counts
                const size_t k = (n - 1) / 2;
                std::nth_element(buf.begin(), buf.begin() + k, buf.begin() + n);
                out[size_t(y) * w + x] = buf[k];
            }
        }
    }
}

void box_blur3(const double* in, int w, int h, double* out) {
#pragma omp parallel for schedule(static)
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy) {
                const int yy = std::clamp(y + dy, 0, h - 1);
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1);
                    s += in[size_t(yy) * w + xx];
                }
            }
            out[size_t(y) * w + x] = s / 9.0;
        }
    }
}

void warp_bilinear(const double* src, int src_w, int src_h,
                   const double hinv[9], int x0, int y0, int out_w, int out_h,
                   double* out, uint8_t* valid) {
#pragma omp parallel for schedule(static)
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const double X = double(x + x0);
            const double Y = double(y + y0);
            const double d = hinv[6] * X + hinv[7] * Y + hinv[8];
            const size_t idx = size_t(y) * out_w + x;
            if (d == 0.0) {
                out[idx] = 0.0;
                valid[idx] = 0;
                continue;
            }
            const double u = (hinv[0] * X + hinv[1] * Y + hinv[2]) / d;
            const double v = (hinv[3] * X + hinv[4] * Y + hinv[5]) / d;
            bool ok = false;
            const double s = bilinear_sample(src, src_w, src_h, u, v, ok);
            out[idx] = ok ? s : 0.0;
            valid[idx] = ok ? 1 : 0;
        }
    }
}

void resample_bilinear(const double* in, int w, int h, int out_w, int out_h,
                       double* out) {
    const double sx = double(w) / out_w;
    const double sy = double(h) / out_h;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < out_h; ++y) {
        const double v = std::clamp((y + 0.5) * sy - 0.5, 0.0, double(h - 1));
        for (int x = 0; x < out_w; ++x) {
            const double u =
                std::clamp((x + 0.5) * sx - 0.5, 0.0, double(w - 1));
            bool ok = false;
            out[size_t(y) * out_w + x] = bilinear_sample(in, w, h, u, v, ok);
        }
    }
}

void resample_nearest(const uint8_t* in, int w, int h, int out_w, int out_h,
                      uint8_t* out) {
    const double sx = double(w) / out_w;
    const double sy = double(h) / out_h;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < out_h; ++y) {
        const int yy = std::clamp(int((y + 0.5) * sy), 0, h - 1);
        for (int x = 0; x < out_w; ++x) {
            const int xx = std::clamp(int((x + 0.5) * sx), 0, w - 1);
            out[size_t(y) * out_w + x] = in[size_t(yy) * w + xx];
        }
    }
}

// ---- serial reference implementations ----

namespace serial {

template <typename T>
void conv2d_valid(const Tensor3<T>& in, const Tensor4<T>& w,
                  const std::vector<T>& bias, bool relu, Tensor3<T>& out) {
    conv2d_valid_impl(in, w, bias, relu, out, false);
}

template <typename T>
void conv2d_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                         Tensor4<T>& dw, std::vector<T>& db) {
    conv2d_grad_weights_impl(in, grad, dw, db, false);
}

template <typename T>
void conv2d_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w, int in_h,
                       int in_w, Tensor3<T>& din) {
    conv2d_grad_input_impl(grad, w, in_h, in_w, din, false);
}

template void conv2d_valid<float>(const Tensor3<float>&, const Tensor4<float>&,
                                  const std::vector<float>&, bool,
                                  Tensor3<float>&);
template void conv2d_valid<double>(const Tensor3<double>&,
                                   const Tensor4<double>&,
                                   const std::vector<double>&, bool,
                                   Tensor3<double>&);
template void conv2d_grad_weights<float>(const Tensor3<float>&,
                                         const Tensor3<float>&,
                                         Tensor4<float>&, std::vector<float>&);
template void conv2d_grad_weights<double>(const Tensor3<double>&,
                                          const Tensor3<double>&,
                                          Tensor4<double>&,
                                          std::vector<double>&);
template void conv2d_grad_input<float>(const Tensor3<float>&,
                                       const Tensor4<float>&, int, int,
                                       Tensor3<float>&);
template void conv2d_grad_input<double>(const Tensor3<double>&,
                                        const Tensor4<double>&, int, int,
                                        Tensor3<double>&);

void conv2d_valid_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                     const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                     Tensor3<int32_t>& out) {
    const int oh = in.h - w.kh + 1;
    const int ow = in.w - w.kw + 1;
    out.reshape(w.oc, oh, ow);
    for (int o = 0; o < w.oc; ++o) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                int32_t acc = bias[o];
                for (int ci = 0; ci < w.ic; ++ci)
                    for (int ky = 0; ky < w.kh; ++ky)
                        for (int kx = 0; kx < w.kw; ++kx)
                            acc += (int32_t(in.at(ci, y + ky, x + kx)) -
                                    in_zp) *
                                   int32_t(w.at(o, ci, ky, kx));
                out.at(o, y, x) = acc;
            }
        }
    }
}

void min_filter_disc(const double* in, int w, int h, int radius, double* out) {
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double m = in[size_t(y) * w + x];
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dy * dy + dx * dx > radius * radius) continue;
                    const int yy = y + dy;
                    const int xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    m = std::min(m, in[size_t(yy) * w + xx]);
                }
            }
            out[size_t(y) * w + x] = m;
        }
    }
}

void median_filter_disc(const double* in, int w, int h, int radius,
                        double* out) {
    std::vector<double> buf;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            buf.clear();
            for (int dy = -radius; dy <= radius; ++dy) {
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (dy * dy + dx * dx > radius * radius) continue;
                    const int yy = y + dy;
                    const int xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    buf.push_back(in[size_t(yy) * w + xx]);
                }
            }
            const size_t k = (buf.size() - 1) / 2;
            std::nth_element(buf.begin(), buf.begin() + k, buf.end());
            out[size_t(y) * w + x] = buf[k];
        }
    }
}

void warp_bilinear(const double* src, int src_w, int src_h,
                   const double hinv[9], int x0, int y0, int out_w, int out_h,
                   double* out, uint8_t* valid) {
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const double X = double(x + x0);
            const double Y = double(y + y0);
            const double d = hinv[6] * X + hinv[7] * Y + hinv[8];
            const size_t idx = size_t(y) * out_w + x;
            if (d == 0.0) {
                out[idx] = 0.0;
                valid[idx] = 0;
                continue;
            }
            const double u = (hinv[0] * X + hinv[1] * Y + hinv[2]) / d;
            const double v = (hinv[3] * X + hinv[4] * Y + hinv[5]) / d;
            bool ok = false;
            const double s = bilinear_sample(src, src_w, src_h, u, v, ok);
            out[idx] = ok ? s : 0.0;
            valid[idx] = ok ? 1 : 0;
        }
    }
}

} // namespace serial

} // namespace crowncut::kernels
