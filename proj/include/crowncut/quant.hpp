#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crowncut/unet.hpp"

namespace crowncut {

// Affine int8 quantization: x ~ scale * (q - zero_point).
struct QuantParams {
    double scale = 1.0;
    int32_t zero_point = 0; // in [-128, 127]
};

int8_t quantize_value(double x, const QuantParams& qp);
double dequantize_value(int8_t q, const QuantParams& qp);

// Asymmetric affine params over [lo, hi], widened to include 0 so that the
// zero point is exact.
QuantParams params_from_range(double lo, double hi);

struct QuantConvLayer {
    Tensor4<int8_t> w; // symmetric, zero_point 0
    double w_scale = 1.0;
    std::vector<int32_t> bias; // at in_scale * w_scale
};

struct QuantizedUNet {
    UNetConfig config;
    std::vector<QuantConvLayer> enc;
    QuantConvLayer bot_a, bot_b;
    std::vector<QuantConvLayer> up;
    std::vector<QuantConvLayer> dec;
    QuantConvLayer head;
    // per-activation-tensor params from calibration, keyed by tensor name
    std::map<std::string, QuantParams> activations;
};

// Activation tensor names produced by the forward pass, in evaluation order:
// input, enc{i}.conv_a/conv_b/pool, bottleneck.conv_a/conv_b,
// dec{i}.upconv/concat/conv_a/conv_b (deep to shallow), logits.
std::vector<std::string> activation_names(const UNetConfig& config);

struct CalibrationStats {
    std::map<std::string, std::pair<double, double>> ranges; // min, max
    int images = 0;
};

// Float forward over n images recording running per-tensor min/max; ranges
// are widened to include 0.
CalibrationStats calibrate(const UNetModel& model,
                           const std::vector<Tensor3<float>>& calib_images,
                           int n);

// Per-tensor symmetric int8 weights (scale = max|w|/127), asymmetric
// activations over the calibrated ranges, int32 biases at combined scale.
QuantizedUNet quantize_model(const UNetModel& model,
                             const CalibrationStats& calibration);

size_t quantized_payload_bytes(const QuantizedUNet& q);
size_t float_payload_bytes(const UNetModel& m);

Tensor3<int8_t> quantize_input(const QuantizedUNet& q,
                               const Tensor3<float>& input);

// Pure-integer forward: int8 convolutions with int32 accumulation and
// fixed-point requantization between layers; the final tensor is kept as an
// unsigned 8-bit map (int8 + 128) and dequantized once at the end.
Tensor3<float> int_forward(const QuantizedUNet& q, const Tensor3<int8_t>& input);

SegmentationMask int_predict_mask(const QuantizedUNet& q,
                                  const Tensor3<float>& input);

struct ModelComparison {
    double float_acc = 0.0;
    double quant_acc = 0.0;
    double delta = 0.0; // quant - float, in accuracy points
    double size_ratio = 0.0;
};

ModelComparison compare_models(const UNetModel& model, const QuantizedUNet& q,
                               const std::vector<Sample<float>>& eval_set);

// .qunet container: same envelope as .unet with int8/int32 blobs and the
// QuantParams tables in the JSON header.
void save_qmodel(const QuantizedUNet& q, const std::filesystem::path& path);
QuantizedUNet load_qmodel(const std::filesystem::path& path);

} // namespace crowncut
