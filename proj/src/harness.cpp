#include "crowncut/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "crowncut/groundtruth.hpp"
#include "crowncut/image_io.hpp"
#include "crowncut/kernels.hpp"

namespace fs = std::filesystem;

namespace crowncut {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

double lower_median(std::vector<double> v) {
    const size_t k = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + long(k), v.end());
    return v[k];
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename Forward>
BenchRecord time_forward(const std::string& label, const std::string& path,
                         const std::vector<Tensor3<float>>& inputs, int reps,
                         Forward&& fwd) {
    if (reps < 3) throw InvalidConfig("timing needs reps >= 3");
    if (inputs.empty()) throw EmptyDataset("timing needs at least one input");
    BenchRecord rec;
    rec.model = label;
    rec.path = path;
    rec.reps = reps;
    fwd(inputs[0]); // warm-up, discarded
    for (int r = 0; r < reps; ++r) {
        const auto& in = inputs[size_t(r) % inputs.size()];
        const double t0 = now_ms();
        fwd(in);
        rec.inference_samples.push_back(now_ms() - t0);
    }
    rec.inference_ms = lower_median(rec.inference_samples);
    return rec;
}

} // namespace

EvalResult evaluate(const SegmentationMask& pred,
                    const SegmentationMask& truth) {
    if (pred.width != truth.width || pred.height != truth.height)
        throw ShapeMismatch("prediction and truth masks differ in size");
    EvalResult r;
    for (size_t i = 0; i < pred.pixel_count(); ++i)
        ++r.cm.counts[truth.labels[i]][pred.labels[i]];
    const double total = double(r.cm.total());
    r.accuracy = (double(r.cm.tp()) + double(r.cm.tn())) / total;
    const double denom =
        double(r.cm.tp()) + double(r.cm.fp()) + double(r.cm.fn());
    r.iou = denom == 0.0 ? 1.0 : double(r.cm.tp()) / denom;
    return r;
}

BenchRecord time_inference(const UNetModel& model,
                           const std::vector<Tensor3<float>>& inputs,
                           int reps) {
    return time_forward("unet", "float", inputs, reps,
                        [&](const Tensor3<float>& in) { forward(model, in); });
}

BenchRecord time_inference(const QuantizedUNet& qmodel,
                           const std::vector<Tensor3<float>>& inputs,
                           int reps) {
    return time_forward("unet", "quantized", inputs, reps,
                        [&](const Tensor3<float>& in) {
                            int_forward(qmodel, quantize_input(qmodel, in));
                        });
}

BenchRecord bench_pipeline(const UNetModel* model, const QuantizedUNet* qmodel,
                           const ScenePaths& scene, InputSetup setup,
                           int reps) {
    if (!model && !qmodel) throw InvalidConfig("bench needs a model");
    if (reps < 3) throw InvalidConfig("timing needs reps >= 3");
    const UNetConfig& cfg = model ? model->config : qmodel->config;
    const bool multi = setup == InputSetup::Multispectral;
    if (multi && cfg.in_channels != 3)
        throw ConfigMismatch("multispectral bench needs a 3-channel model");
    if (!multi && cfg.in_channels != 1)
        throw ConfigMismatch("one-band bench needs a 1-channel model");

    BenchRecord rec;
    rec.model = model ? "unet-float" : "unet-quantized";
    rec.path = model ? "float" : "quantized";
    rec.reps = reps;

    std::vector<double> io_samples, pre_samples;
    Tensor3<float> input;
    for (int r = 0; r < reps + 1; ++r) { // first full pass is the warm-up
        double t0 = now_ms();
        std::map<BandId, RasterGrid> bands;
        if (multi) {
            bands = load_scene_bands(scene);
        } else {
            bands.emplace(BandId::GRE,
                          load_band(scene.bands.at(BandId::GRE), BandId::GRE));
        }
        const double t_io = now_ms() - t0;

        t0 = now_ms();
        if (multi) {
            AlignResult aligned = align_frame(bands);
            input = sample_from_pseudo_rgb(make_pseudo_rgb(aligned.frame).image,
                                           cfg.input_size);
        } else {
            input = sample_from_band(bands.at(BandId::GRE), cfg.input_size);
        }
        const double t_pre = now_ms() - t0;

        t0 = now_ms();
        if (model)
            forward(*model, input);
        else
            int_forward(*qmodel, quantize_input(*qmodel, input));
        const double t_inf = now_ms() - t0;

        if (r == 0) continue;
        io_samples.push_back(t_io);
        pre_samples.push_back(t_pre);
        rec.inference_samples.push_back(t_inf);
    }
    rec.io_ms = lower_median(io_samples);
    rec.preprocess_ms = lower_median(pre_samples);
    rec.inference_ms = lower_median(rec.inference_samples);
    return rec;
}

Sample<float> scene_to_sample(const SyntheticScene& scene, InputSetup setup,
                              int input_size) {
    Sample<float> s;
    if (setup == InputSetup::Multispectral) {
        MultispectralFrame frame = MultispectralFrame::from_aligned(
            scene.ideal.at(BandId::GRE), scene.ideal.at(BandId::RED),
            scene.ideal.at(BandId::REG), scene.ideal.at(BandId::NIR));
        s.image =
            sample_from_pseudo_rgb(make_pseudo_rgb(frame).image, input_size);
    } else {
        s.image = sample_from_band(scene.ideal.at(BandId::GRE), input_size);
    }
    s.target = resample_mask(scene.true_mask, input_size);
    return s;
}

std::vector<Sample<float>> scenes_to_samples(
    const std::vector<SyntheticScene>& scenes, InputSetup setup,
    int input_size) {
    std::vector<Sample<float>> out;
    out.reserve(scenes.size());
    for (const auto& scene : scenes)
        out.push_back(scene_to_sample(scene, setup, input_size));
    return out;
}

SweepResult dataset_size_sweep(const std::vector<int>& sizes, int repeats,
                               const SweepConfig& cfg) {
    if (sizes.empty()) throw InvalidConfig("sweep needs at least one size");
    for (int s : sizes)
        if (s < 1) throw InvalidConfig("sweep sizes must be >= 1");
    if (repeats < 1) throw InvalidConfig("sweep repeats must be >= 1");
    const int max_size = *std::max_element(sizes.begin(), sizes.end());

    // fixed evaluation pool, shared by every run
    SceneSpec eval_spec = cfg.scene;
    std::vector<SyntheticScene> eval_scenes =
        generate_scenes(eval_spec, cfg.eval_count, cfg.data_seed ^ 0xe7a1u);
    std::vector<Sample<float>> eval_samples =
        scenes_to_samples(eval_scenes, cfg.setup, cfg.unet.input_size);

    SweepResult result;
    std::map<int, double> sums;
    for (int rep = 0; rep < repeats; ++rep) {
        // one training pool per repeat; sizes take nested prefixes
        std::vector<SyntheticScene> pool = generate_scenes(
            cfg.scene, max_size, cfg.data_seed + 0x9e37u * uint64_t(rep + 1));
        std::vector<Sample<float>> pool_samples =
            scenes_to_samples(pool, cfg.setup, cfg.unet.input_size);

        std::vector<Sample<float>> dataset = pool_samples;
        dataset.insert(dataset.end(), eval_samples.begin(), eval_samples.end());
        std::vector<size_t> eval_idx;
        for (size_t i = pool_samples.size(); i < dataset.size(); ++i)
            eval_idx.push_back(i);

        for (int size : sizes) {
            std::vector<size_t> train_idx;
            for (int i = 0; i < size; ++i) train_idx.push_back(size_t(i));
            TrainingConfig tc = cfg.training;
            tc.rng_seed = cfg.training.rng_seed ^
                          (uint64_t(size) << 20) ^ uint64_t(rep + 1);
            TrainResult tr =
                train_on_split(dataset, train_idx, eval_idx, tc, cfg.unet);
            SweepRow row{size, rep, tr.trace.back().test_accuracy};
            result.rows.push_back(row);
            sums[size] += row.accuracy;
        }
    }
    for (const auto& [size, sum] : sums)
        result.mean_by_size[size] = sum / double(repeats);
    return result;
}

void write_bench_csv(const std::vector<BenchRecord>& records,
                     const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "# crowncut bench.csv schema v1\n";
    out << "model,path,stage,ms_median,reps\n";
    for (const auto& r : records) {
        out << r.model << "," << r.path << ",preprocess,"
            << fmt(r.preprocess_ms) << "," << r.reps << "\n";
        out << r.model << "," << r.path << ",io," << fmt(r.io_ms) << ","
            << r.reps << "\n";
        out << r.model << "," << r.path << ",inference,"
            << fmt(r.inference_ms) << "," << r.reps << "\n";
    }
    if (!out) throw IoFailure("short write to " + path.string());
}

void write_sweep_csv(const SweepResult& sweep, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "# crowncut sweep.csv schema v1\n";
    out << "train_size,repeat,accuracy\n";
    for (const auto& row : sweep.rows)
        out << row.train_size << "," << row.repeat << ","
            << fmt(row.accuracy) << "\n";
    if (!out) throw IoFailure("short write to " + path.string());
}

void write_eval_csv(const std::vector<SceneEval>& evals, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "# crowncut eval.csv schema v1\n";
    out << "scene,tn,fp,fn,tp,accuracy,iou\n";
    for (const auto& e : evals) {
        out << e.scene << "," << e.eval.cm.tn() << "," << e.eval.cm.fp() << ","
            << e.eval.cm.fn() << "," << e.eval.cm.tp() << ","
            << fmt(e.eval.accuracy) << "," << fmt(e.eval.iou) << "\n";
    }
    if (!out) throw IoFailure("short write to " + path.string());
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile(path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

} // namespace crowncut
