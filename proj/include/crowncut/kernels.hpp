#pragma once

#include <cstdint>
#include <vector>

#include "crowncut/tensor.hpp"

// Data-parallel inner kernels. The primary entry points are OpenMP-parallel;
// kernels::serial holds plain single-threaded implementations of the same
// arithmetic, kept for testing and for the kernel benchmark. Every kernel is
// deterministic: each output element is produced by exactly one thread with a
// fixed accumulation order, so results are bit-identical across thread counts
// and match the serial reference exactly.

namespace crowncut::kernels {

// ---- float/double convolution stack (instantiated for float and double) ----

// Valid (unpadded) convolution; out dims (w.oc, inH-kh+1, inW-kw+1).
// Optionally applies ReLU to the output in the same pass.
template <typename T>
void conv2d_valid(const Tensor3<T>& in, const Tensor4<T>& w,
                  const std::vector<T>& bias, bool relu, Tensor3<T>& out);

// dW/db for conv2d_valid. grad has the output shape; in is the forward input.
template <typename T>
void conv2d_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                         Tensor4<T>& dw, std::vector<T>& db);

// dIn for conv2d_valid, accumulated into din (resized and zeroed here).
template <typename T>
void conv2d_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w, int in_h,
                       int in_w, Tensor3<T>& din);

// 2x2 stride-2 transposed convolution; out dims (w.oc, 2*inH, 2*inW).
template <typename T>
void upconv2x2(const Tensor3<T>& in, const Tensor4<T>& w,
               const std::vector<T>& bias, Tensor3<T>& out);

template <typename T>
void upconv2x2_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                            Tensor4<T>& dw, std::vector<T>& db);

template <typename T>
void upconv2x2_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w,
                          Tensor3<T>& din);

// 2x2 stride-2 max pooling; argmax stores the winning sub-position (dy*2+dx),
// first-in-scan-order on ties.
template <typename T>
void maxpool2x2(const Tensor3<T>& in, Tensor3<T>& out,
                std::vector<uint8_t>& argmax);

template <typename T>
void maxpool2x2_backward(const Tensor3<T>& grad,
                         const std::vector<uint8_t>& argmax, int in_h, int in_w,
                         Tensor3<T>& din);

// out = grad where act > 0 else 0 (in place on grad).
template <typename T>
void relu_backward_inplace(const Tensor3<T>& act, Tensor3<T>& grad);

// ---- integer inference kernels ----

// int8 valid convolution with int32 accumulation: for each output element,
// acc = bias[oc] + sum (in - in_zp) * w. Weight zero point is 0 by scheme.
void conv2d_valid_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                     const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                     Tensor3<int32_t>& out);

void upconv2x2_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                  const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                  Tensor3<int32_t>& out);

void maxpool2x2_s8(const Tensor3<int8_t>& in, Tensor3<int8_t>& out);

// Fixed-point multiplier for requantization: value = m * 2^-s with
// m in [2^30, 2^31). Rounds half away from zero.
struct FixedMultiplier {
    int32_t m = 0;
    int s = 0; // right shift; negative means left shift
};

FixedMultiplier fixed_multiplier(double value); // value > 0

int32_t fixed_mul(int32_t acc, FixedMultiplier fm);

// out = clamp(zp + fixed_mul(acc), -128, 127), applied elementwise; when
// relu_floor is true values are additionally clamped below at zp (ReLU in the
// quantized domain).
void requantize_s8(const Tensor3<int32_t>& acc, FixedMultiplier fm, int32_t zp,
                   bool relu_floor, Tensor3<int8_t>& out);

// Per-element rescale between two int8 quantizations (used at concat).
void rescale_s8(const Tensor3<int8_t>& in, int32_t in_zp, FixedMultiplier fm,
                int32_t out_zp, Tensor3<int8_t>& out);

// ---- image kernels (double) ----

// Minimum over the disc of given radius (pixels with center distance <=
// radius), disc clipped at the borders.
void min_filter_disc(const double* in, int w, int h, int radius, double* out);

// Median over the clipped disc; even-count windows take the lower median.
void median_filter_disc(const double* in, int w, int h, int radius,
                        double* out);

// 3x3 box blur with clamped borders.
void box_blur3(const double* in, int w, int h, double* out);

// Inverse-mapped bilinear warp: for each output pixel (x, y) in the extent
// [x0, y0, out_w, out_h], samples src at map(x, y) = hinv * (x, y, 1).
// Out-of-source samples are marked invalid (0 in the mask, 0 in the output).
void warp_bilinear(const double* src, int src_w, int src_h,
                   const double hinv[9], int x0, int y0, int out_w, int out_h,
                   double* out, uint8_t* valid);

// Bilinear resample to a new size (for network inputs).
void resample_bilinear(const double* in, int w, int h, int out_w, int out_h,
                       double* out);

// Nearest-neighbour resample (for masks).
void resample_nearest(const uint8_t* in, int w, int h, int out_w, int out_h,
                      uint8_t* out);

// ---- serial reference implementations (testing / benchmark baseline) ----

namespace serial {

template <typename T>
void conv2d_valid(const Tensor3<T>& in, const Tensor4<T>& w,
                  const std::vector<T>& bias, bool relu, Tensor3<T>& out);

template <typename T>
void conv2d_grad_weights(const Tensor3<T>& in, const Tensor3<T>& grad,
                         Tensor4<T>& dw, std::vector<T>& db);

template <typename T>
void conv2d_grad_input(const Tensor3<T>& grad, const Tensor4<T>& w, int in_h,
                       int in_w, Tensor3<T>& din);

void conv2d_valid_s8(const Tensor3<int8_t>& in, int32_t in_zp,
                     const Tensor4<int8_t>& w, const std::vector<int32_t>& bias,
                     Tensor3<int32_t>& out);

void min_filter_disc(const double* in, int w, int h, int radius, double* out);

void median_filter_disc(const double* in, int w, int h, int radius,
                        double* out);

void warp_bilinear(const double* src, int src_w, int src_h,
                   const double hinv[9], int x0, int y0, int out_w, int out_h,
                   double* out, uint8_t* valid);

} // namespace serial

} // namespace crowncut::kernels
