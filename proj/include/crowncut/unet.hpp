#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crowncut/raster.hpp"
#include "crowncut/tensor.hpp"

namespace crowncut {

// Encoder-decoder with skip connections. Channels double at every
// down-sampling and halve on the way up; with two 3x3 convolutions per stage,
// one 2x2 up-convolution per decoder stage and the final 1x1 head the model
// has 5*depth + 3 convolutional layers (23 at depth 4).
struct UNetConfig {
    int in_channels = 3; // 3 = pseudo-RGB, 1 = one-band, 4 = full composite
    int num_classes = 2;
    int depth = 4;
    int base_channels = 64;
    int input_size = 256; // H == W; divisible by 2^depth
    // padding: the whole input is mirror-padded once; convolutions stay
    // unpadded and the logits align 1:1 with input pixels

    void validate() const; // throws InvalidConfig
    int conv_layer_count() const { return 5 * depth + 3; }
    int channels_at(int stage) const { return base_channels << stage; }
};

// Mirror-pad geometry. pad_left is the exact receptive-field offset so that
// output pixel (0,0) sits on input pixel (0,0); pad_right adds the slack that
// makes every pooling stage divide evenly, and the surplus output rows and
// columns are cropped after the head.
struct UNetGeometry {
    int pad_left = 0;
    int pad_right = 0;
    int padded = 0;
    int out_full = 0;
};

UNetGeometry unet_geometry(const UNetConfig& config);

// Mirror padding (reflect without repeating the edge pixel), center crop and
// channel concatenation as used by the forward pass; shared with the integer
// inference path, which must reproduce the same geometry on int8 tensors.
template <typename T>
Tensor3<T> mirror_pad(const Tensor3<T>& in, int pad_left, int pad_right);

template <typename T>
void center_crop_to(const Tensor3<T>& src, int out_h, int out_w, Tensor3<T>& dst,
                    int& off_y, int& off_x);

template <typename T>
void concat_channels(const Tensor3<T>& first, const Tensor3<T>& second,
                     Tensor3<T>& out);

template <typename T>
struct ConvLayer {
    Tensor4<T> w;
    std::vector<T> b;
};

template <typename T>
struct UNetModelT {
    UNetConfig config;
    uint64_t init_seed = 0;
    std::vector<ConvLayer<T>> enc; // 2 per stage: conv_a, conv_b
    ConvLayer<T> bot_a, bot_b;
    std::vector<ConvLayer<T>> up;  // per stage: 2x2 up-convolution
    std::vector<ConvLayer<T>> dec; // 2 per stage
    ConvLayer<T> head;             // 1x1
};

using UNetModel = UNetModelT<float>;

// Layer manifest in fixed order (encoder, bottleneck, decoder deep-to-
// shallow, head); the same order is used by the optimizer and the container.
std::vector<std::string> layer_names(const UNetConfig& config);

template <typename T>
std::vector<ConvLayer<T>*> layer_list(UNetModelT<T>& model);
template <typename T>
std::vector<const ConvLayer<T>*> layer_list(const UNetModelT<T>& model);

// He-style uniform initialization (+-sqrt(6/fan_in)), deterministic in seed.
template <typename T>
UNetModelT<T> build_model(const UNetConfig& config, uint64_t seed);

// Zero-filled clone with the same layer shapes (gradient / moment storage).
template <typename T>
UNetModelT<T> make_like(const UNetModelT<T>& model);

template <typename T>
struct EncStageCache {
    Tensor3<T> a1, a2, pooled;
    std::vector<uint8_t> argmax;
};

template <typename T>
struct DecStageCache {
    Tensor3<T> up, cat, a1, a2;
    int crop_off_y = 0, crop_off_x = 0;
};

template <typename T>
struct ForwardCache {
    Tensor3<T> padded;
    std::vector<EncStageCache<T>> enc;
    Tensor3<T> b1, b2;
    std::vector<DecStageCache<T>> dec; // indexed by stage, run deep-to-shallow
    Tensor3<T> logits_full;
};

// Logits shaped (num_classes, input_size, input_size); cache may be null.
template <typename T>
Tensor3<T> forward(const UNetModelT<T>& model, const Tensor3<T>& input,
                   ForwardCache<T>* cache = nullptr);

template <typename T>
struct Sample {
    Tensor3<T> image; // in_channels x input_size x input_size, values in [0,1]
    SegmentationMask target;
};

// Mean softmax cross-entropy over pixels (and over the batch), with analytic
// gradients accumulated by reverse traversal of the cached forward pass.
template <typename T>
double loss_and_gradients(const UNetModelT<T>& model,
                          const std::vector<Sample<T>>& batch,
                          UNetModelT<T>& grads);

template <typename T>
SegmentationMask predict_mask(const UNetModelT<T>& model,
                              const Tensor3<T>& input);

struct TrainingConfig {
    int epochs = 70;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 4;
    double split_ratio = 0.8;
    uint64_t rng_seed = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
};

struct TrainResult {
    UNetModel model;
    std::vector<EpochStats> trace;
    std::vector<size_t> train_indices;
    std::vector<size_t> test_indices;
};

// Deterministic split by rng_seed, Adam updates per batch, per-epoch trace of
// train loss and held-out pixel accuracy.
TrainResult train(const std::vector<Sample<float>>& dataset,
                  const TrainingConfig& tc, const UNetConfig& uc);

// Runs Adam on an explicit train/test index split (the dataset-size sweep
// reuses this with externally chosen subsets).
TrainResult train_on_split(const std::vector<Sample<float>>& dataset,
                           const std::vector<size_t>& train_idx,
                           const std::vector<size_t>& test_idx,
                           const TrainingConfig& tc, const UNetConfig& uc);

// Single file: magic, JSON header (config, init seed, layer manifest with
// byte offsets), then raw little-endian float32 blobs in manifest order.
void save_model(const UNetModel& model, const std::filesystem::path& path);
UNetModel load_model(const std::filesystem::path& path);

// Input assembly: channels scaled to [0,1], bilinear-resampled to input_size;
// masks resampled nearest-neighbour.
Tensor3<float> sample_from_pseudo_rgb(const PseudoRgbImage& rgb,
                                      int input_size);
Tensor3<float> sample_from_band(const RasterGrid& band, int input_size);
SegmentationMask resample_mask(const SegmentationMask& mask, int input_size);

double pixel_accuracy(const SegmentationMask& pred,
                      const SegmentationMask& truth);

} // namespace crowncut
