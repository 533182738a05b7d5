#include "crowncut/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "crowncut/kernels.hpp"
#include "crowncut/rng.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace crowncut {

namespace {

constexpr char kMagic[4] = {'C', 'C', 'U', 'N'};

int mirror_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - m;
}

template <typename T>
void add_inplace(Tensor3<T>& dst, const Tensor3<T>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.v[i] += src.v[i];
}

struct LayerShape {
    std::string name;
    int oc, ic, kh, kw;
};

std::vector<LayerShape> layer_plan(const UNetConfig& c) {
    std::vector<LayerShape> plan;
    for (int i = 0; i < c.depth; ++i) {
        const int ci = c.channels_at(i);
        const int prev = i == 0 ? c.in_channels : c.channels_at(i - 1);
        plan.push_back({"enc" + std::to_string(i) + ".conv_a", ci, prev, 3, 3});
        plan.push_back({"enc" + std::to_string(i) + ".conv_b", ci, ci, 3, 3});
    }
    const int cd = c.channels_at(c.depth);
    plan.push_back({"bottleneck.conv_a", cd, c.channels_at(c.depth - 1), 3, 3});
    plan.push_back({"bottleneck.conv_b", cd, cd, 3, 3});
    for (int i = c.depth - 1; i >= 0; --i) {
        const int ci = c.channels_at(i);
        plan.push_back(
            {"dec" + std::to_string(i) + ".upconv", ci, c.channels_at(i + 1), 2, 2});
        plan.push_back({"dec" + std::to_string(i) + ".conv_a", ci, 2 * ci, 3, 3});
        plan.push_back({"dec" + std::to_string(i) + ".conv_b", ci, ci, 3, 3});
    }
    plan.push_back({"head", c.num_classes, c.base_channels, 1, 1});
    return plan;
}

template <typename T>
void adam_step(UNetModelT<T>& model, const UNetModelT<T>& grads,
               UNetModelT<T>& m1, UNetModelT<T>& m2, const TrainingConfig& tc,
               long t) {
    const double bc1 = 1.0 - std::pow(tc.beta1, double(t));
    const double bc2 = 1.0 - std::pow(tc.beta2, double(t));
    auto ws = layer_list(model);
    auto gs = layer_list(const_cast<UNetModelT<T>&>(grads));
    auto m1s = layer_list(m1);
    auto m2s = layer_list(m2);
    for (size_t li = 0; li < ws.size(); ++li) {
        auto update = [&](T* w, const T* g, T* a, T* b, size_t n) {
            for (size_t i = 0; i < n; ++i) {
                const double gi = double(g[i]);
                const double ai =
                    tc.beta1 * double(a[i]) + (1.0 - tc.beta1) * gi;
                const double bi =
                    tc.beta2 * double(b[i]) + (1.0 - tc.beta2) * gi * gi;
                a[i] = T(ai);
                b[i] = T(bi);
                const double mhat = ai / bc1;
                const double vhat = bi / bc2;
                w[i] = T(double(w[i]) -
                         tc.learning_rate * mhat / (std::sqrt(vhat) + tc.adam_eps));
            }
        };
        update(ws[li]->w.v.data(), gs[li]->w.v.data(), m1s[li]->w.v.data(),
               m2s[li]->w.v.data(), ws[li]->w.size());
        update(ws[li]->b.data(), gs[li]->b.data(), m1s[li]->b.data(),
               m2s[li]->b.data(), ws[li]->b.size());
    }
}

template <typename T>
void zero_grads(UNetModelT<T>& grads) {
    for (auto* layer : layer_list(grads)) {
        std::fill(layer->w.v.begin(), layer->w.v.end(), T(0));
        std::fill(layer->b.begin(), layer->b.end(), T(0));
    }
}

template <typename T>
void accumulate_grads(UNetModelT<T>& total, const UNetModelT<T>& part) {
    auto ts = layer_list(total);
    auto ps = layer_list(const_cast<UNetModelT<T>&>(part));
    for (size_t li = 0; li < ts.size(); ++li) {
        for (size_t i = 0; i < ts[li]->w.size(); ++i)
            ts[li]->w.v[i] += ps[li]->w.v[i];
        for (size_t i = 0; i < ts[li]->b.size(); ++i)
            ts[li]->b[i] += ps[li]->b[i];
    }
}

template <typename T>
void scale_grads(UNetModelT<T>& grads, T f) {
    for (auto* layer : layer_list(grads)) {
        for (auto& v : layer->w.v) v *= f;
        for (auto& v : layer->b) v *= f;
    }
}

// softmax cross-entropy over the logit crop; returns mean loss per pixel and
// writes dloss/dlogits (already divided by the pixel count)
template <typename T>
double softmax_ce(const Tensor3<T>& logits, const SegmentationMask& target,
                  Tensor3<T>& dlogits) {
    const int k = logits.c, h = logits.h, w = logits.w;
    if (target.width != w || target.height != h)
        throw ShapeMismatch("target mask does not match logits");
    dlogits.reshape(k, h, w);
    const double inv_pixels = 1.0 / (double(h) * double(w));
    double loss = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double maxl = -1e300;
            for (int c = 0; c < k; ++c)
                maxl = std::max(maxl, double(logits.at(c, y, x)));
            double sum = 0.0;
            for (int c = 0; c < k; ++c)
                sum += std::exp(double(logits.at(c, y, x)) - maxl);
            const double lse = maxl + std::log(sum);
            const int t = target.at(x, y);
            loss += lse - double(logits.at(t, y, x));
            for (int c = 0; c < k; ++c) {
                const double p =
                    std::exp(double(logits.at(c, y, x)) - lse);
                dlogits.at(c, y, x) =
                    T((p - (c == t ? 1.0 : 0.0)) * inv_pixels);
            }
        }
    }
    return loss * inv_pixels;
}

// Backward pass for one sample; per-layer gradients are written into part.
template <typename T>
void backward(const UNetModelT<T>& model, const ForwardCache<T>& cache,
              const Tensor3<T>& dlogits_cropped, UNetModelT<T>& part) {
    const UNetConfig& c = model.config;
    const int depth = c.depth;

    // spread the cropped logit gradient onto the full network output
    Tensor3<T> d(dlogits_cropped.c, cache.logits_full.h, cache.logits_full.w);
    for (int ch = 0; ch < d.c; ++ch)
        for (int y = 0; y < dlogits_cropped.h; ++y)
            std::memcpy(d.row(ch, y), dlogits_cropped.row(ch, y),
                        sizeof(T) * size_t(dlogits_cropped.w));

    // head (1x1)
    const Tensor3<T>& head_in = cache.dec[0].a2;
    kernels::conv2d_grad_weights(head_in, d, part.head.w, part.head.b);
    Tensor3<T> cur;
    kernels::conv2d_grad_input(d, model.head.w, head_in.h, head_in.w, cur);

    // decoder stages in reverse run order (shallow to deep)
    std::vector<Tensor3<T>> skip_grads(static_cast<size_t>(depth));
    for (int i = 0; i < depth; ++i) {
        const DecStageCache<T>& dc = cache.dec[size_t(i)];
        kernels::relu_backward_inplace(dc.a2, cur);
        kernels::conv2d_grad_weights(dc.a1, cur, part.dec[size_t(2 * i + 1)].w,
                                     part.dec[size_t(2 * i + 1)].b);
        Tensor3<T> d1;
        kernels::conv2d_grad_input(cur, model.dec[size_t(2 * i + 1)].w, dc.a1.h,
                                   dc.a1.w, d1);
        kernels::relu_backward_inplace(dc.a1, d1);
        kernels::conv2d_grad_weights(dc.cat, d1, part.dec[size_t(2 * i)].w,
                                     part.dec[size_t(2 * i)].b);
        Tensor3<T> dcat;
        kernels::conv2d_grad_input(d1, model.dec[size_t(2 * i)].w, dc.cat.h,
                                   dc.cat.w, dcat);

        // split: first half skip, second half up-convolution output
        const int ci = c.channels_at(i);
        Tensor3<T> dskip(ci, dcat.h, dcat.w);
        Tensor3<T> dup(ci, dcat.h, dcat.w);
        std::memcpy(dskip.v.data(), dcat.v.data(), sizeof(T) * dskip.size());
        std::memcpy(dup.v.data(), dcat.v.data() + dskip.size(),
                    sizeof(T) * dup.size());

        // scatter the skip gradient back into the encoder activation extent
        const Tensor3<T>& enc_a2 = cache.enc[size_t(i)].a2;
        Tensor3<T>& sg = skip_grads[size_t(i)];
        sg.reshape(enc_a2.c, enc_a2.h, enc_a2.w);
        for (int ch = 0; ch < ci; ++ch)
            for (int y = 0; y < dskip.h; ++y)
                std::memcpy(sg.row(ch, y + dc.crop_off_y) + dc.crop_off_x,
                            dskip.row(ch, y), sizeof(T) * size_t(dskip.w));

        const Tensor3<T>& up_in =
            i == depth - 1 ? cache.b2 : cache.dec[size_t(i + 1)].a2;
        kernels::upconv2x2_grad_weights(up_in, dup, part.up[size_t(i)].w,
                                        part.up[size_t(i)].b);
        kernels::upconv2x2_grad_input(dup, model.up[size_t(i)].w, cur);
    }

    // bottleneck
    kernels::relu_backward_inplace(cache.b2, cur);
    kernels::conv2d_grad_weights(cache.b1, cur, part.bot_b.w, part.bot_b.b);
    Tensor3<T> tmp;
    kernels::conv2d_grad_input(cur, model.bot_b.w, cache.b1.h, cache.b1.w, tmp);
    kernels::relu_backward_inplace(cache.b1, tmp);
    const Tensor3<T>& bot_in = cache.enc[size_t(depth - 1)].pooled;
    kernels::conv2d_grad_weights(bot_in, tmp, part.bot_a.w, part.bot_a.b);
    kernels::conv2d_grad_input(tmp, model.bot_a.w, bot_in.h, bot_in.w, cur);

    // encoder stages deep to shallow
    for (int i = depth - 1; i >= 0; --i) {
        const EncStageCache<T>& ec = cache.enc[size_t(i)];
        Tensor3<T> da2;
        kernels::maxpool2x2_backward(cur, ec.argmax, ec.a2.h, ec.a2.w, da2);
        add_inplace(da2, skip_grads[size_t(i)]);
        kernels::relu_backward_inplace(ec.a2, da2);
        kernels::conv2d_grad_weights(ec.a1, da2, part.enc[size_t(2 * i + 1)].w,
                                     part.enc[size_t(2 * i + 1)].b);
        Tensor3<T> d1;
        kernels::conv2d_grad_input(da2, model.enc[size_t(2 * i + 1)].w, ec.a1.h,
                                   ec.a1.w, d1);
        kernels::relu_backward_inplace(ec.a1, d1);
        const Tensor3<T>& in =
            i == 0 ? cache.padded : cache.enc[size_t(i - 1)].pooled;
        kernels::conv2d_grad_weights(in, d1, part.enc[size_t(2 * i)].w,
                                     part.enc[size_t(2 * i)].b);
        if (i > 0)
            kernels::conv2d_grad_input(d1, model.enc[size_t(2 * i)].w, in.h,
                                       in.w, cur);
        // the padded input needs no gradient
    }
}

} // namespace

template <typename T>
Tensor3<T> mirror_pad(const Tensor3<T>& in, int pad_left, int pad_right) {
    Tensor3<T> out(in.c, in.h + pad_left + pad_right,
                   in.w + pad_left + pad_right);
    for (int c = 0; c < in.c; ++c) {
        for (int y = 0; y < out.h; ++y) {
            const int sy = mirror_index(y - pad_left, in.h);
            const T* src = in.row(c, sy);
            T* dst = out.row(c, y);
            for (int x = 0; x < out.w; ++x)
                dst[x] = src[mirror_index(x - pad_left, in.w)];
        }
    }
    return out;
}

template <typename T>
void center_crop_to(const Tensor3<T>& src, int out_h, int out_w, Tensor3<T>& dst,
                    int& off_y, int& off_x) {
    off_y = (src.h - out_h) / 2;
    off_x = (src.w - out_w) / 2;
    dst.reshape(src.c, out_h, out_w);
    for (int c = 0; c < src.c; ++c)
        for (int y = 0; y < out_h; ++y)
            std::memcpy(dst.row(c, y), src.row(c, y + off_y) + off_x,
                        sizeof(T) * size_t(out_w));
}

template <typename T>
void concat_channels(const Tensor3<T>& first, const Tensor3<T>& second,
                     Tensor3<T>& out) {
    out.reshape(first.c + second.c, first.h, first.w);
    std::memcpy(out.v.data(), first.v.data(), sizeof(T) * first.size());
    std::memcpy(out.v.data() + first.size(), second.v.data(),
                sizeof(T) * second.size());
}

template Tensor3<float> mirror_pad(const Tensor3<float>&, int, int);
template Tensor3<double> mirror_pad(const Tensor3<double>&, int, int);
template Tensor3<int8_t> mirror_pad(const Tensor3<int8_t>&, int, int);
template void center_crop_to(const Tensor3<float>&, int, int, Tensor3<float>&,
                             int&, int&);
template void center_crop_to(const Tensor3<double>&, int, int, Tensor3<double>&,
                             int&, int&);
template void center_crop_to(const Tensor3<int8_t>&, int, int, Tensor3<int8_t>&,
                             int&, int&);
template void concat_channels(const Tensor3<float>&, const Tensor3<float>&,
                              Tensor3<float>&);
template void concat_channels(const Tensor3<double>&, const Tensor3<double>&,
                              Tensor3<double>&);
template void concat_channels(const Tensor3<int8_t>&, const Tensor3<int8_t>&,
                              Tensor3<int8_t>&);

void UNetConfig::validate() const {
    if (in_channels != 1 && in_channels != 3 && in_channels != 4)
        throw InvalidConfig("in_channels must be 1, 3 or 4");
    if (num_classes < 2) throw InvalidConfig("num_classes must be >= 2");
    if (depth < 1 || depth > 8) throw InvalidConfig("depth out of range");
    if (base_channels < 1) throw InvalidConfig("base_channels must be >= 1");
    if (input_size < 1 || input_size % (1 << depth) != 0)
        throw InvalidConfig("input_size must be divisible by 2^depth");
}

UNetGeometry unet_geometry(const UNetConfig& config) {
    config.validate();
    const int pad_base = 12 * (1 << config.depth) - 8;
    const int pad_left = pad_base / 2;
    for (int extra = 0; extra <= (1 << config.depth); ++extra) {
        const int padded = config.input_size + pad_base + extra;
        int s = padded;
        bool ok = true;
        for (int i = 0; i < config.depth; ++i) {
            s -= 4;
            if (s < 2 || s % 2 != 0) {
                ok = false;
                break;
            }
            s /= 2;
        }
        if (!ok || s - 4 < 1) continue;
        return {pad_left, pad_base - pad_left + extra, padded,
                padded - pad_base};
    }
    throw InvalidConfig("no valid padded size for this input_size/depth");
}

std::vector<std::string> layer_names(const UNetConfig& config) {
    std::vector<std::string> names;
    for (const auto& ls : layer_plan(config)) names.push_back(ls.name);
    return names;
}

template <typename T>
std::vector<ConvLayer<T>*> layer_list(UNetModelT<T>& model) {
    std::vector<ConvLayer<T>*> out;
    for (auto& l : model.enc) out.push_back(&l);
    out.push_back(&model.bot_a);
    out.push_back(&model.bot_b);
    for (int i = model.config.depth - 1; i >= 0; --i) {
        out.push_back(&model.up[size_t(i)]);
        out.push_back(&model.dec[size_t(2 * i)]);
        out.push_back(&model.dec[size_t(2 * i + 1)]);
    }
    out.push_back(&model.head);
    return out;
}

template <typename T>
std::vector<const ConvLayer<T>*> layer_list(const UNetModelT<T>& model) {
    auto mut = layer_list(const_cast<UNetModelT<T>&>(model));
    return {mut.begin(), mut.end()};
}

template <typename T>
UNetModelT<T> build_model(const UNetConfig& config, uint64_t seed) {
    config.validate();
    unet_geometry(config); // reject configs with no consistent padding
    UNetModelT<T> model;
    model.config = config;
    model.init_seed = seed;
    model.enc.resize(size_t(2 * config.depth));
    model.up.resize(size_t(config.depth));
    model.dec.resize(size_t(2 * config.depth));

    const auto plan = layer_plan(config);
    auto layers = layer_list(model);
    Rng rng(seed);
    for (size_t i = 0; i < plan.size(); ++i) {
        const LayerShape& ls = plan[i];
        layers[i]->w = Tensor4<T>(ls.oc, ls.ic, ls.kh, ls.kw);
        layers[i]->b.assign(size_t(ls.oc), T(0));
        const double bound = std::sqrt(6.0 / (double(ls.ic) * ls.kh * ls.kw));
        for (auto& v : layers[i]->w.v) v = T(rng.uniform(-bound, bound));
    }
    return model;
}

template <typename T>
UNetModelT<T> make_like(const UNetModelT<T>& model) {
    UNetModelT<T> out;
    out.config = model.config;
    out.init_seed = model.init_seed;
    out.enc.resize(model.enc.size());
    out.up.resize(model.up.size());
    out.dec.resize(model.dec.size());
    auto src = layer_list(model);
    auto dst = layer_list(out);
    for (size_t i = 0; i < src.size(); ++i) {
        const auto& w = src[i]->w;
        dst[i]->w = Tensor4<T>(w.oc, w.ic, w.kh, w.kw);
        dst[i]->b.assign(src[i]->b.size(), T(0));
    }
    return out;
}

template <typename T>
Tensor3<T> forward(const UNetModelT<T>& model, const Tensor3<T>& input,
                   ForwardCache<T>* cache) {
    const UNetConfig& c = model.config;
    if (input.c != c.in_channels || input.h != c.input_size ||
        input.w != c.input_size)
        throw ShapeMismatch("network input must be in_channels x input_size^2");

    ForwardCache<T> local;
    ForwardCache<T>& cc = cache ? *cache : local;
    cc.enc.resize(size_t(c.depth));
    cc.dec.resize(size_t(c.depth));

    const UNetGeometry geo = unet_geometry(c);
    cc.padded = mirror_pad(input, geo.pad_left, geo.pad_right);

    const Tensor3<T>* cur = &cc.padded;
    for (int i = 0; i < c.depth; ++i) {
        EncStageCache<T>& ec = cc.enc[size_t(i)];
        kernels::conv2d_valid(*cur, model.enc[size_t(2 * i)].w,
                              model.enc[size_t(2 * i)].b, true, ec.a1);
        kernels::conv2d_valid(ec.a1, model.enc[size_t(2 * i + 1)].w,
                              model.enc[size_t(2 * i + 1)].b, true, ec.a2);
        kernels::maxpool2x2(ec.a2, ec.pooled, ec.argmax);
        cur = &ec.pooled;
    }

    kernels::conv2d_valid(*cur, model.bot_a.w, model.bot_a.b, true, cc.b1);
    kernels::conv2d_valid(cc.b1, model.bot_b.w, model.bot_b.b, true, cc.b2);
    cur = &cc.b2;

    for (int i = c.depth - 1; i >= 0; --i) {
        DecStageCache<T>& dc = cc.dec[size_t(i)];
        kernels::upconv2x2(*cur, model.up[size_t(i)].w, model.up[size_t(i)].b,
                           dc.up);
        Tensor3<T> cropped;
        center_crop_to(cc.enc[size_t(i)].a2, dc.up.h, dc.up.w, cropped,
                       dc.crop_off_y, dc.crop_off_x);
        concat_channels(cropped, dc.up, dc.cat);
        kernels::conv2d_valid(dc.cat, model.dec[size_t(2 * i)].w,
                              model.dec[size_t(2 * i)].b, true, dc.a1);
        kernels::conv2d_valid(dc.a1, model.dec[size_t(2 * i + 1)].w,
                              model.dec[size_t(2 * i + 1)].b, true, dc.a2);
        cur = &dc.a2;
    }

    kernels::conv2d_valid(*cur, model.head.w, model.head.b, false,
                          cc.logits_full);

    Tensor3<T> logits(c.num_classes, c.input_size, c.input_size);
    for (int ch = 0; ch < c.num_classes; ++ch)
        for (int y = 0; y < c.input_size; ++y)
            std::memcpy(logits.row(ch, y), cc.logits_full.row(ch, y),
                        sizeof(T) * size_t(c.input_size));
    return logits;
}

template <typename T>
double loss_and_gradients(const UNetModelT<T>& model,
                          const std::vector<Sample<T>>& batch,
                          UNetModelT<T>& grads) {
    if (batch.empty()) throw EmptyDataset("empty batch");
    zero_grads(grads);
    UNetModelT<T> part = make_like(model);
    ForwardCache<T> cache;
    Tensor3<T> dlogits;
    double loss = 0.0;
    for (const Sample<T>& s : batch) {
        Tensor3<T> logits = forward(model, s.image, &cache);
        loss += softmax_ce(logits, s.target, dlogits);
        backward(model, cache, dlogits, part);
        accumulate_grads(grads, part);
    }
    scale_grads(grads, T(1.0 / double(batch.size())));
    return loss / double(batch.size());
}

template <typename T>
SegmentationMask predict_mask(const UNetModelT<T>& model,
                              const Tensor3<T>& input) {
    Tensor3<T> logits = forward(model, input);
    SegmentationMask mask(logits.w, logits.h, 0);
    for (int y = 0; y < logits.h; ++y) {
        for (int x = 0; x < logits.w; ++x) {
            int best = 0;
            T bv = logits.at(0, y, x);
            for (int c = 1; c < logits.c; ++c) {
                if (logits.at(c, y, x) > bv) { // ties keep the lower class
                    bv = logits.at(c, y, x);
                    best = c;
                }
            }
            mask.at(x, y) = uint8_t(best);
        }
    }
    return mask;
}

double pixel_accuracy(const SegmentationMask& pred,
                      const SegmentationMask& truth) {
    if (pred.width != truth.width || pred.height != truth.height)
        throw ShapeMismatch("mask dimensions differ");
    size_t correct = 0;
    for (size_t i = 0; i < pred.pixel_count(); ++i)
        correct += pred.labels[i] == truth.labels[i];
    return double(correct) / double(pred.pixel_count());
}

TrainResult train_on_split(const std::vector<Sample<float>>& dataset,
                           const std::vector<size_t>& train_idx,
                           const std::vector<size_t>& test_idx,
                           const TrainingConfig& tc, const UNetConfig& uc) {
    if (dataset.empty() || train_idx.empty())
        throw EmptyDataset("training needs at least one pair");
    if (tc.epochs < 1 || tc.batch_size < 1)
        throw InvalidConfig("epochs and batch_size must be >= 1");
    for (size_t i : train_idx)
        if (i >= dataset.size()) throw InvalidConfig("train index out of range");
    for (size_t i : test_idx)
        if (i >= dataset.size()) throw InvalidConfig("test index out of range");

    Rng root(tc.rng_seed);
    Rng shuffle_rng = root.fork(1);
    const uint64_t init_seed = root.fork(2).next_u64();

    TrainResult result;
    result.model = build_model<float>(uc, init_seed);
    result.train_indices = train_idx;
    result.test_indices = test_idx;

    UNetModel grads = make_like(result.model);
    UNetModel m1 = make_like(result.model);
    UNetModel m2 = make_like(result.model);

    std::vector<size_t> order = train_idx;
    std::vector<Sample<float>> batch;
    long t = 0;
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        size_t seen = 0;
        for (size_t pos = 0; pos < order.size(); pos += size_t(tc.batch_size)) {
            batch.clear();
            const size_t end =
                std::min(order.size(), pos + size_t(tc.batch_size));
            for (size_t i = pos; i < end; ++i)
                batch.push_back(dataset[order[i]]); // copies are cheap enough
            const double loss = loss_and_gradients(result.model, batch, grads);
            adam_step(result.model, grads, m1, m2, tc, ++t);
            epoch_loss += loss * double(batch.size());
            seen += batch.size();
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = seen ? epoch_loss / double(seen) : 0.0;
        if (!test_idx.empty()) {
            size_t correct = 0, total = 0;
            for (size_t i : test_idx) {
                SegmentationMask pred =
                    predict_mask(result.model, dataset[i].image);
                const SegmentationMask& truth = dataset[i].target;
                for (size_t p = 0; p < pred.pixel_count(); ++p)
                    correct += pred.labels[p] == truth.labels[p];
                total += pred.pixel_count();
            }
            stats.test_accuracy = total ? double(correct) / double(total) : 0.0;
        }
        result.trace.push_back(stats);
    }
    return result;
}

TrainResult train(const std::vector<Sample<float>>& dataset,
                  const TrainingConfig& tc, const UNetConfig& uc) {
    if (dataset.size() < 2)
        throw EmptyDataset("dataset must contain at least 2 pairs");
    if (!(tc.split_ratio > 0.0 && tc.split_ratio < 1.0))
        throw InvalidConfig("split_ratio must lie in (0, 1)");

    Rng split_rng = Rng(tc.rng_seed).fork(0);
    std::vector<size_t> idx(dataset.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    split_rng.shuffle(idx);
    size_t n_train = size_t(std::llround(tc.split_ratio * double(idx.size())));
    n_train = std::clamp<size_t>(n_train, 1, idx.size() - 1);
    std::vector<size_t> train_idx(idx.begin(), idx.begin() + long(n_train));
    std::vector<size_t> test_idx(idx.begin() + long(n_train), idx.end());
    return train_on_split(dataset, train_idx, test_idx, tc, uc);
}

void save_model(const UNetModel& model, const fs::path& path) {
    const auto plan = layer_plan(model.config);
    auto layers = layer_list(model);

    json manifest = json::array();
    uint64_t offset = 0;
    for (size_t i = 0; i < plan.size(); ++i) {
        const auto& l = *layers[i];
        json entry;
        entry["name"] = plan[i].name;
        entry["shape"] = {l.w.oc, l.w.ic, l.w.kh, l.w.kw};
        entry["weight_offset"] = offset;
        entry["weight_bytes"] = l.w.size() * 4;
        offset += l.w.size() * 4;
        entry["bias_offset"] = offset;
        entry["bias_bytes"] = l.b.size() * 4;
        offset += l.b.size() * 4;
        manifest.push_back(entry);
    }

    json header;
    header["format"] = "crowncut-unet";
    header["version"] = 1;
    header["dtype"] = "float32-le";
    header["config"] = {{"in_channels", model.config.in_channels},
                        {"num_classes", model.config.num_classes},
                        {"depth", model.config.depth},
                        {"base_channels", model.config.base_channels},
                        {"input_size", model.config.input_size}};
    header["init_seed"] = model.init_seed;
    header["layers"] = manifest;
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoFailure("cannot write " + path.string());
    out.write(kMagic, 4);
    const uint32_t hlen = uint32_t(htext.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(htext.data(), std::streamsize(htext.size()));
    for (const auto* l : layers) {
        out.write(reinterpret_cast<const char*>(l->w.v.data()),
                  std::streamsize(l->w.size() * 4));
        out.write(reinterpret_cast<const char*>(l->b.data()),
                  std::streamsize(l->b.size() * 4));
    }
    if (!out) throw IoFailure("short write to " + path.string());
}

UNetModel load_model(const fs::path& path) {
    if (!fs::exists(path)) throw MissingFile(path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open " + path.string());
    std::vector<char> data((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    if (data.size() < 8 || std::memcmp(data.data(), kMagic, 4) != 0)
        throw MalformedModelFile(path.string() + ": bad magic");
    uint32_t hlen = 0;
    std::memcpy(&hlen, data.data() + 4, 4);
    if (data.size() < 8 + size_t(hlen))
        throw MalformedModelFile(path.string() + ": truncated header");

    json header;
    try {
        header = json::parse(data.begin() + 8, data.begin() + 8 + hlen);
    } catch (const json::exception& e) {
        throw MalformedModelFile(path.string() + ": " + e.what());
    }

    UNetModel model;
    try {
        const auto& jc = header.at("config");
        model.config.in_channels = jc.at("in_channels");
        model.config.num_classes = jc.at("num_classes");
        model.config.depth = jc.at("depth");
        model.config.base_channels = jc.at("base_channels");
        model.config.input_size = jc.at("input_size");
        model.init_seed = header.at("init_seed");
    } catch (const json::exception& e) {
        throw MalformedModelFile(path.string() + ": " + e.what());
    }
    model.config.validate();

    const auto plan = layer_plan(model.config);
    const auto& manifest = header.at("layers");
    if (manifest.size() != plan.size())
        throw ConfigMismatch(path.string() + ": layer count does not match");

    model.enc.resize(size_t(2 * model.config.depth));
    model.up.resize(size_t(model.config.depth));
    model.dec.resize(size_t(2 * model.config.depth));
    auto layers = layer_list(model);
    const size_t payload = 8 + size_t(hlen);
    for (size_t i = 0; i < plan.size(); ++i) {
        const auto& entry = manifest.at(i);
        const auto& shape = entry.at("shape");
        if (int(shape.at(0)) != plan[i].oc || int(shape.at(1)) != plan[i].ic ||
            int(shape.at(2)) != plan[i].kh || int(shape.at(3)) != plan[i].kw)
            throw ConfigMismatch(path.string() + ": layer " + plan[i].name +
                                 " has unexpected shape");
        auto& l = *layers[i];
        l.w = Tensor4<float>(plan[i].oc, plan[i].ic, plan[i].kh, plan[i].kw);
        l.b.assign(size_t(plan[i].oc), 0.0f);
        const uint64_t woff = entry.at("weight_offset");
        const uint64_t wbytes = entry.at("weight_bytes");
        const uint64_t boff = entry.at("bias_offset");
        const uint64_t bbytes = entry.at("bias_bytes");
        if (wbytes != l.w.size() * 4 || bbytes != l.b.size() * 4 ||
            payload + woff + wbytes > data.size() ||
            payload + boff + bbytes > data.size())
            throw MalformedModelFile(path.string() + ": truncated weights for " +
                                     plan[i].name);
        std::memcpy(l.w.v.data(), data.data() + payload + woff, wbytes);
        std::memcpy(l.b.data(), data.data() + payload + boff, bbytes);
    }
    for (const auto* l : layers)
        for (float v : l->w.v)
            if (!std::isfinite(v))
                throw MalformedModelFile(path.string() + ": non-finite weight");
    return model;
}

Tensor3<float> sample_from_pseudo_rgb(const PseudoRgbImage& rgb,
                                      int input_size) {
    Tensor3<float> out(3, input_size, input_size);
    std::vector<double> plane(size_t(input_size) * input_size);
    for (int c = 0; c < 3; ++c) {
        kernels::resample_bilinear(rgb.channels[size_t(c)].data(), rgb.width,
                                   rgb.height, input_size, input_size,
                                   plane.data());
        for (size_t i = 0; i < plane.size(); ++i)
            out.v[size_t(c) * plane.size() + i] = float(plane[i]);
    }
    return out;
}

Tensor3<float> sample_from_band(const RasterGrid& band, int input_size) {
    if (!(band.max_value > 0.0)) throw InvalidConfig("band max_value");
    std::vector<double> scaled(band.pixel_count());
    for (size_t i = 0; i < scaled.size(); ++i)
        scaled[i] = band.values[i] / band.max_value;
    Tensor3<float> out(1, input_size, input_size);
    std::vector<double> plane(size_t(input_size) * input_size);
    kernels::resample_bilinear(scaled.data(), band.width, band.height,
                               input_size, input_size, plane.data());
    for (size_t i = 0; i < plane.size(); ++i) out.v[i] = float(plane[i]);
    return out;
}

SegmentationMask resample_mask(const SegmentationMask& mask, int input_size) {
    SegmentationMask out(input_size, input_size, 0);
    kernels::resample_nearest(mask.labels.data(), mask.width, mask.height,
                              input_size, input_size, out.labels.data());
    return out;
}

// explicit instantiations
template std::vector<ConvLayer<float>*> layer_list(UNetModelT<float>&);
template std::vector<ConvLayer<double>*> layer_list(UNetModelT<double>&);
template std::vector<const ConvLayer<float>*> layer_list(
    const UNetModelT<float>&);
template std::vector<const ConvLayer<double>*> layer_list(
    const UNetModelT<double>&);
template UNetModelT<float> build_model<float>(const UNetConfig&, uint64_t);
template UNetModelT<double> build_model<double>(const UNetConfig&, uint64_t);
template UNetModelT<float> make_like(const UNetModelT<float>&);
template UNetModelT<double> make_like(const UNetModelT<double>&);
template Tensor3<float> forward(const UNetModelT<float>&, const Tensor3<float>&,
                                ForwardCache<float>*);
template Tensor3<double> forward(const UNetModelT<double>&,
                                 const Tensor3<double>&,
                                 ForwardCache<double>*);
template double loss_and_gradients(const UNetModelT<float>&,
                                   const std::vector<Sample<float>>&,
                                   UNetModelT<float>&);
template double loss_and_gradients(const UNetModelT<double>&,
                                   const std::vector<Sample<double>>&,
                                   UNetModelT<double>&);
template SegmentationMask predict_mask(const UNetModelT<float>&,
                                       const Tensor3<float>&);
template SegmentationMask predict_mask(const UNetModelT<double>&,
                                       const Tensor3<double>&);

} // namespace crowncut
