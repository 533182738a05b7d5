#include "crowncut/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "crowncut/kernels.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace crowncut {

namespace {

constexpr char kMagic[4] = {'C', 'C', 'Q', 'N'};

// rounding is half away from zero everywhere (std::llround semantics)
int8_t clamp_s8(long v) {
    return int8_t(std::clamp<long>(v, -128, 127));
}

struct NamedTensor {
    std::string name;
    const Tensor3<float>* t;
};

// Activation tensors of a cached forward pass, in evaluation order.
std::vector<NamedTensor> cache_tensors(const UNetConfig& c,
                                       const Tensor3<float>& input,
                                       const ForwardCache<float>& cache) {
    std::vector<NamedTensor> out;
    out.push_back({"input", &input});
    for (int i = 0; i < c.depth; ++i) {
        const std::string p = "enc" + std::to_string(i);
        out.push_back({p + ".conv_a", &cache.enc[size_t(i)].a1});
        out.push_back({p + ".conv_b", &cache.enc[size_t(i)].a2});
        out.push_back({p + ".pool", &cache.enc[size_t(i)].pooled});
    }
    out.push_back({"bottleneck.conv_a", &cache.b1});
    out.push_back({"bottleneck.conv_b", &cache.b2});
    for (int i = c.depth - 1; i >= 0; --i) {
        const std::string p = "dec" + std::to_string(i);
        out.push_back({p + ".upconv", &cache.dec[size_t(i)].up});
        out.push_back({p + ".concat", &cache.dec[size_t(i)].cat});
        out.push_back({p + ".conv_a", &cache.dec[size_t(i)].a1});
        out.push_back({p + ".conv_b", &cache.dec[size_t(i)].a2});
    }
    out.push_back({"logits", &cache.logits_full});
    return out;
}

// name of the tensor feeding each weight layer, in layer-manifest order
std::vector<std::string> input_tensor_names(const UNetConfig& c) {
    std::vector<std::string> in;
    for (int i = 0; i < c.depth; ++i) {
        in.push_back(i == 0 ? "input"
                            : "enc" + std::to_string(i - 1) + ".pool");
        in.push_back("enc" + std::to_string(i) + ".conv_a");
    }
    in.push_back("enc" + std::to_string(c.depth - 1) + ".pool");
    in.push_back("bottleneck.conv_a");
    for (int i = c.depth - 1; i >= 0; --i) {
        in.push_back(i == c.depth - 1 ? "bottleneck.conv_b"
                                      : "dec" + std::to_string(i + 1) +
                                            ".conv_b");
        in.push_back("dec" + std::to_string(i) + ".concat");
        in.push_back("dec" + std::to_string(i) + ".conv_a");
    }
    in.push_back("dec0.conv_b");
    return in;
}

std::vector<QuantConvLayer*> qlayer_list(QuantizedUNet& q) {
    std::vector<QuantConvLayer*> out;
    for (auto& l : q.enc) out.push_back(&l);
    out.push_back(&q.bot_a);
    out.push_back(&q.bot_b);
    for (int i = q.config.depth - 1; i >= 0; --i) {
        out.push_back(&q.up[size_t(i)]);
        out.push_back(&q.dec[size_t(2 * i)]);
        out.push_back(&q.dec[size_t(2 * i + 1)]);
    }
    out.push_back(&q.head);
    return out;
}

std::vector<const QuantConvLayer*> qlayer_list(const QuantizedUNet& q) {
    auto mut = qlayer_list(const_cast<QuantizedUNet&>(q));
    return {mut.begin(), mut.end()};
}

const QuantParams& act(const QuantizedUNet& q, const std::string& name) {
    auto it = q.activations.find(name);
    if (it == q.activations.end()) throw MissingCalibration(name);
    return it->second;
}

// conv + requantize into the named output tensor
void qconv(const Tensor3<int8_t>& in, const QuantParams& in_p,
           const QuantConvLayer& layer, const QuantParams& out_p, bool relu,
           Tensor3<int8_t>& out, Tensor3<int32_t>& acc) {
    kernels::conv2d_valid_s8(in, in_p.zero_point, layer.w, layer.bias, acc);
    const double m = in_p.scale * layer.w_scale / out_p.scale;
    kernels::requantize_s8(acc, kernels::fixed_multiplier(m), out_p.zero_point,
                           relu, out);
}

void qupconv(const Tensor3<int8_t>& in, const QuantParams& in_p,
             const QuantConvLayer& layer, const QuantParams& out_p,
             Tensor3<int8_t>& out, Tensor3<int32_t>& acc) {
    kernels::upconv2x2_s8(in, in_p.zero_point, layer.w, layer.bias, acc);
    const double m = in_p.scale * layer.w_scale / out_p.scale;
    kernels::requantize_s8(acc, kernels::fixed_multiplier(m), out_p.zero_point,
                           false, out);
}

} // namespace

int8_t quantize_value(double x, const QuantParams& qp) {
    return clamp_s8(std::llround(x / qp.scale) + qp.zero_point);
}

double dequantize_value(int8_t q, const QuantParams& qp) {
    return qp.scale * (int32_t(q) - qp.zero_point);
}

QuantParams params_from_range(double lo, double hi) {
    lo = std::min(lo, 0.0);
    hi = std::max(hi, 0.0);
    if (hi - lo < 1e-12) hi = lo + 1e-12; // degenerate range
    QuantParams qp;
    qp.scale = (hi - lo) / 255.0;
    qp.zero_point =
        int32_t(std::clamp<long>(std::llround(-128.0 - lo / qp.scale),
                                 -128, 127));
    return qp;
}

std::vector<std::string> activation_names(const UNetConfig& config) {
    std::vector<std::string> names;
    names.push_back("input");
    for (int i = 0; i < config.depth; ++i) {
        const std::string p = "enc" + std::to_string(i);
        names.push_back(p + ".conv_a");
        names.push_back(p + ".conv_b");
        names.push_back(p + ".pool");
    }
    names.push_back("bottleneck.conv_a");
    names.push_back("bottleneck.conv_b");
    for (int i = config.depth - 1; i >= 0; --i) {
        const std::string p = "dec" + std::to_string(i);
        names.push_back(p + ".upconv");
        names.push_back(p + ".concat");
        names.push_back(p + ".conv_a");
        names.push_back(p + ".conv_b");
    }
    names.push_back("logits");
    return names;
}

CalibrationStats calibrate(const UNetModel& model,
                           const std::vector<Tensor3<float>>& calib_images,
                           int n) {
    if (n < 1 || calib_images.empty())
        throw EmptyCalibrationSet("calibration needs at least one image");
    const int use = std::min<int>(n, int(calib_images.size()));

    CalibrationStats stats;
    ForwardCache<float> cache;
    for (int i = 0; i < use; ++i) {
        forward(model, calib_images[size_t(i)], &cache);
        for (const NamedTensor& nt :
             cache_tensors(model.config, calib_images[size_t(i)], cache)) {
            float lo = nt.t->v[0], hi = nt.t->v[0];
            for (float v : nt.t->v) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            auto it = stats.ranges.find(nt.name);
            if (it == stats.ranges.end()) {
                stats.ranges[nt.name] = {double(lo), double(hi)};
            } else {
                it->second.first = std::min(it->second.first, double(lo));
                it->second.second = std::max(it->second.second, double(hi));
            }
        }
        ++stats.images;
    }
    // widen to include zero
    for (auto& [name, range] : stats.ranges) {
        range.first = std::min(range.first, 0.0);
        range.second = std::max(range.second, 0.0);
    }
    return stats;
}

QuantizedUNet quantize_model(const UNetModel& model,
                             const CalibrationStats& calibration) {
    QuantizedUNet q;
    q.config = model.config;
    q.enc.resize(model.enc.size());
    q.up.resize(model.up.size());
    q.dec.resize(model.dec.size());

    for (const std::string& name : activation_names(model.config)) {
        auto it = calibration.ranges.find(name);
        if (it == calibration.ranges.end()) throw MissingCalibration(name);
        q.activations[name] =
            params_from_range(it->second.first, it->second.second);
    }
    // pooling and cropping are value-preserving; the pool tensor inherits its
    // source params so the integer path never rescales across them
    for (int i = 0; i < model.config.depth; ++i) {
        const std::string p = "enc" + std::to_string(i);
        q.activations[p + ".pool"] = q.activations[p + ".conv_b"];
    }

    auto fsrc = layer_list(model);
    auto qdst = qlayer_list(q);
    const auto in_names = input_tensor_names(model.config);
    for (size_t li = 0; li < fsrc.size(); ++li) {
        const auto& fl = *fsrc[li];
        QuantConvLayer& ql = *qdst[li];
        double maxabs = 0.0;
        for (float v : fl.w.v) maxabs = std::max(maxabs, std::fabs(double(v)));
        ql.w_scale = maxabs > 0.0 ? maxabs / 127.0 : 1.0;
        ql.w = Tensor4<int8_t>(fl.w.oc, fl.w.ic, fl.w.kh, fl.w.kw);
        for (size_t i = 0; i < fl.w.size(); ++i)
            ql.w.v[i] = clamp_s8(std::llround(double(fl.w.v[i]) / ql.w_scale));

        const QuantParams in_p = act(q, in_names[li]);
        const double bias_scale = in_p.scale * ql.w_scale;
        ql.bias.resize(fl.b.size());
        for (size_t i = 0; i < fl.b.size(); ++i) {
            const double b = double(fl.b[i]) / bias_scale;
            ql.bias[i] = int32_t(std::clamp<double>(
                std::llround(b), double(INT32_MIN), double(INT32_MAX)));
        }
    }
    return q;
}

size_t quantized_payload_bytes(const QuantizedUNet& q) {
    size_t bytes = 0;
    for (const auto* l : qlayer_list(q))
        bytes += l->w.size() + l->bias.size() * 4;
    return bytes;
}

size_t float_payload_bytes(const UNetModel& m) {
    size_t bytes = 0;
    for (const auto* l : layer_list(m)) bytes += (l->w.size() + l->b.size()) * 4;
    return bytes;
}

Tensor3<int8_t> quantize_input(const QuantizedUNet& q,
                               const Tensor3<float>& input) {
    const QuantParams& p = act(q, "input");
    Tensor3<int8_t> out(input.c, input.h, input.w);
    for (size_t i = 0; i < input.size(); ++i)
        out.v[i] = quantize_value(double(input.v[i]), p);
    return out;
}

Tensor3<float> int_forward(const QuantizedUNet& q,
                           const Tensor3<int8_t>& input) {
    const UNetConfig& c = q.config;
    if (input.c != c.in_channels || input.h != c.input_size ||
        input.w != c.input_size)
        throw ShapeMismatch("quantized input must be in_channels x input_size^2");

    const UNetGeometry geo = unet_geometry(c);
    Tensor3<int8_t> cur = mirror_pad(input, geo.pad_left, geo.pad_right);
    QuantParams cur_p = act(q, "input");

    Tensor3<int32_t> acc;
    std::vector<Tensor3<int8_t>> skips(size_t(c.depth));
    Tensor3<int8_t> t1;

    for (int i = 0; i < c.depth; ++i) {
        const std::string p = "enc" + std::to_string(i);
        const QuantParams pa = act(q, p + ".conv_a");
        qconv(cur, cur_p, q.enc[size_t(2 * i)], pa, true, t1, acc);
        const QuantParams pb = act(q, p + ".conv_b");
        qconv(t1, pa, q.enc[size_t(2 * i + 1)], pb, true, skips[size_t(i)], acc);
        kernels::maxpool2x2_s8(skips[size_t(i)], cur);
        cur_p = act(q, p + ".pool"); // same params as conv_b by construction
    }

    {
        const QuantParams pa = act(q, "bottleneck.conv_a");
        qconv(cur, cur_p, q.bot_a, pa, true, t1, acc);
        const QuantParams pb = act(q, "bottleneck.conv_b");
        qconv(t1, pa, q.bot_b, pb, true, cur, acc);
        cur_p = pb;
    }

    Tensor3<int8_t> up, crop, cat, rs;
    for (int i = c.depth - 1; i >= 0; --i) {
        const std::string p = "dec" + std::to_string(i);
        const QuantParams pu = act(q, p + ".upconv");
        qupconv(cur, cur_p, q.up[size_t(i)], pu, up, acc);

        int oy = 0, ox = 0;
        center_crop_to(skips[size_t(i)], up.h, up.w, crop, oy, ox);
        const QuantParams pskip =
            act(q, "enc" + std::to_string(i) + ".conv_b");
        const QuantParams pcat = act(q, p + ".concat");

        // bring both sources onto the concat tensor's quantization
        Tensor3<int8_t> skip_rs, up_rs;
        kernels::rescale_s8(crop, pskip.zero_point,
                            kernels::fixed_multiplier(pskip.scale / pcat.scale),
                            pcat.zero_point, skip_rs);
        kernels::rescale_s8(up, pu.zero_point,
                            kernels::fixed_multiplier(pu.scale / pcat.scale),
                            pcat.zero_point, up_rs);
        concat_channels(skip_rs, up_rs, cat);

        const QuantParams pa = act(q, p + ".conv_a");
        qconv(cat, pcat, q.dec[size_t(2 * i)], pa, true, t1, acc);
        const QuantParams pb = act(q, p + ".conv_b");
        qconv(t1, pa, q.dec[size_t(2 * i + 1)], pb, true, cur, acc);
        cur_p = pb;
    }

    const QuantParams pl = act(q, "logits");
    qconv(cur, cur_p, q.head, pl, false, t1, acc);

    // final tensor held as unsigned 8-bit (offset-binary int8) before the
    // single dequantization
    std::vector<uint8_t> stored(t1.size());
    for (size_t i = 0; i < t1.size(); ++i)
        stored[i] = uint8_t(int32_t(t1.v[i]) + 128);

    Tensor3<float> logits(c.num_classes, c.input_size, c.input_size);
    for (int ch = 0; ch < c.num_classes; ++ch)
        for (int y = 0; y < c.input_size; ++y)
            for (int x = 0; x < c.input_size; ++x) {
                const size_t si = (size_t(ch) * t1.h + y) * t1.w + x;
                const int32_t qv = int32_t(stored[si]) - 128;
                logits.at(ch, y, x) =
                    float(pl.scale * double(qv - pl.zero_point));
            }
    return logits;
}

SegmentationMask int_predict_mask(const QuantizedUNet& q,
                                  const Tensor3<float>& input) {
    Tensor3<float> logits = int_forward(q, quantize_input(q, input));
    SegmentationMask mask(logits.w, logits.h, 0);
    for (int y = 0; y < logits.h; ++y) {
        for (int x = 0; x < logits.w; ++x) {
            int best = 0;
            float bv = logits.at(0, y, x);
            for (int ch = 1; ch < logits.c; ++ch) {
                if (logits.at(ch, y, x) > bv) {
                    bv = logits.at(ch, y, x);
                    best = ch;
                }
            }
            mask.at(x, y) = uint8_t(best);
        }
    }
    return mask;
}

ModelComparison compare_models(const UNetModel& model, const QuantizedUNet& q,
                               const std::vector<Sample<float>>& eval_set) {
    if (eval_set.empty()) throw EmptyDataset("empty evaluation set");
    size_t f_correct = 0, q_correct = 0, total = 0;
    for (const Sample<float>& s : eval_set) {
        const SegmentationMask fp = predict_mask(model, s.image);
        const SegmentationMask qp = int_predict_mask(q, s.image);
        for (size_t i = 0; i < fp.pixel_count(); ++i) {
            f_correct += fp.labels[i] == s.target.labels[i];
            q_correct += qp.labels[i] == s.target.labels[i];
        }
        total += fp.pixel_count();
    }
    ModelComparison cmp;
    cmp.float_acc = double(f_correct) / double(total);
    cmp.quant_acc = double(q_correct) / double(total);
    cmp.delta = cmp.quant_acc - cmp.float_acc;
    cmp.size_ratio = double(quantized_payload_bytes(q)) /
                     double(float_payload_bytes(model));
    return cmp;
}

void save_qmodel(const QuantizedUNet& q, const fs::path& path) {
    auto layers = qlayer_list(q);
    auto names = layer_names(q.config);

    json manifest = json::array();
    uint64_t offset = 0;
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = *layers[i];
        json entry;
        entry["name"] = names[i];
        entry["shape"] = {l.w.oc, l.w.ic, l.w.kh, l.w.kw};
        entry["w_scale"] = l.w_scale;
        entry["weight_offset"] = offset;
        entry["weight_bytes"] = l.w.size();
        offset += l.w.size();
        entry["bias_offset"] = offset;
        entry["bias_bytes"] = l.bias.size() * 4;
        offset += l.bias.size() * 4;
        manifest.push_back(entry);
    }

    json acts;
    for (const auto& [name, p] : q.activations)
        acts[name] = {{"scale", p.scale}, {"zero_point", p.zero_point}};

    json header;
    header["format"] = "crowncut-qunet";
    header["version"] = 1;
    header["config"] = {{"in_channels", q.config.in_channels},
                        {"num_classes", q.config.num_classes},
                        {"depth", q.config.depth},
                        {"base_channels", q.config.base_channels},
                        {"input_size", q.config.input_size}};
    header["activations"] = acts;
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
                  std::streamsize(l->w.size()));
        out.write(reinterpret_cast<const char*>(l->bias.data()),
                  std::streamsize(l->bias.size() * 4));
    }
    if (!out) throw IoFailure("short write to " + path.string());
}

QuantizedUNet load_qmodel(const fs::path& path) {
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

    QuantizedUNet q;
    try {
        const auto& jc = header.at("config");
        q.config.in_channels = jc.at("in_channels");
        q.config.num_classes = jc.at("num_classes");
        q.config.depth = jc.at("depth");
        q.config.base_channels = jc.at("base_channels");
        q.config.input_size = jc.at("input_size");
        for (const auto& [name, jp] : header.at("activations").items())
            q.activations[name] = {jp.at("scale"), jp.at("zero_point")};
    } catch (const json::exception& e) {
        throw MalformedModelFile(path.string() + ": " + e.what());
    }
    q.config.validate();

    q.enc.resize(size_t(2 * q.config.depth));
    q.up.resize(size_t(q.config.depth));
    q.dec.resize(size_t(2 * q.config.depth));
    auto layers = qlayer_list(q);
    const auto& manifest = header.at("layers");
    if (manifest.size() != layers.size())
        throw ConfigMismatch(path.string() + ": layer count does not match");
    const size_t payload = 8 + size_t(hlen);
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& entry = manifest.at(i);
        const auto& shape = entry.at("shape");
        auto& l = *layers[i];
        l.w = Tensor4<int8_t>(shape.at(0), shape.at(1), shape.at(2),
                              shape.at(3));
        l.w_scale = entry.at("w_scale");
        l.bias.resize(size_t(int(shape.at(0))));
        const uint64_t woff = entry.at("weight_offset");
        const uint64_t wbytes = entry.at("weight_bytes");
        const uint64_t boff = entry.at("bias_offset");
        const uint64_t bbytes = entry.at("bias_bytes");
        if (wbytes != l.w.size() || bbytes != l.bias.size() * 4 ||
            payload + woff + wbytes > data.size() ||
            payload + boff + bbytes > data.size())
            throw MalformedModelFile(path.string() + ": truncated payload");
        std::memcpy(l.w.v.data(), data.data() + payload + woff, wbytes);
        std::memcpy(l.bias.data(), data.data() + payload + boff, bbytes);
    }
    return q;
}

} // namespace crowncut
