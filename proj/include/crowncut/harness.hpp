#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crowncut/image_io.hpp"
#include "crowncut/quant.hpp"
#include "crowncut/synthdata.hpp"
#include "crowncut/unet.hpp"

namespace crowncut {

// [[TN, FP], [FN, TP]]; rows = true class, cols = predicted class.
struct ConfusionMatrix {
    std::array<std::array<uint64_t, 2>, 2> counts{{{0, 0}, {0, 0}}};

    uint64_t tn() const { return counts[0][0]; }
    uint64_t fp() const { return counts[0][1]; }
    uint64_t fn() const { return counts[1][0]; }
    uint64_t tp() const { return counts[1][1]; }
    uint64_t total() const { return tn() + fp() + fn() + tp(); }
};

struct EvalResult {
    ConfusionMatrix cm;
    double accuracy = 0.0;
    double iou = 0.0; // TP / (TP+FP+FN), 1 when the denominator is 0
};

EvalResult evaluate(const SegmentationMask& pred, const SegmentationMask& truth);

struct BenchRecord {
    std::string model;
    std::string path; // "float" or "quantized"
    double preprocess_ms = 0.0;
    double io_ms = 0.0;
    double inference_ms = 0.0;
    std::vector<double> inference_samples; // raw per-rep times
    int reps = 0;
    double accuracy = -1.0; // negative when not evaluated
};

// Median forward-call time over reps (a discarded warm-up run comes first);
// decode/resample work is excluded and reported separately by the pipeline
// bench. Cycles through inputs when more than one is given.
BenchRecord time_inference(const UNetModel& model,
                           const std::vector<Tensor3<float>>& inputs, int reps);
BenchRecord time_inference(const QuantizedUNet& qmodel,
                           const std::vector<Tensor3<float>>& inputs, int reps);

enum class InputSetup { Multispectral, OneBand };

// Full per-scene pipeline timing with the stage split of the reports:
// io = band decode, preprocess = alignment + composite + resampling for the
// multispectral setup and plain resampling for the one-band setup,
// inference = the forward call. Medians over reps, first run discarded.
BenchRecord bench_pipeline(const UNetModel* model, const QuantizedUNet* qmodel,
                           const ScenePaths& scene, InputSetup setup, int reps);

// Dataset assembly from synthetic scenes: pseudo-RGB of the co-registered
// bands (or the GRE band alone), targets from the generator's true masks.
Sample<float> scene_to_sample(const SyntheticScene& scene, InputSetup setup,
                              int input_size);
std::vector<Sample<float>> scenes_to_samples(
    const std::vector<SyntheticScene>& scenes, InputSetup setup,
    int input_size);

struct SweepConfig {
    UNetConfig unet;
    TrainingConfig training;
    SceneSpec scene;
    InputSetup setup = InputSetup::Multispectral;
    int eval_count = 48;
    uint64_t data_seed = 7;
};

struct SweepRow {
    int train_size = 0;
    int repeat = 0;
    double accuracy = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    std::map<int, double> mean_by_size;
};

// Trains a fresh model per (size, repeat) on synthetic data and reports the
// held-out accuracy on a fixed evaluation pool.
SweepResult dataset_size_sweep(const std::vector<int>& sizes, int repeats,
                               const SweepConfig& cfg);

// CSV reports. Schemas (versioned in the leading comment line):
//   bench.csv: model,path,stage,ms_median,reps
//   sweep.csv: train_size,repeat,accuracy
//   eval.csv:  scene,tn,fp,fn,tp,accuracy,iou
// Numbers are printed with max_digits10 so files re-parse to exact values.
void write_bench_csv(const std::vector<BenchRecord>& records,
                     const std::filesystem::path& path);
void write_sweep_csv(const SweepResult& sweep,
                     const std::filesystem::path& path);

struct SceneEval {
    std::string scene;
    EvalResult eval;
};

void write_eval_csv(const std::vector<SceneEval>& evals,
                    const std::filesystem::path& path);

// Reads back the numeric cells of a CSV written by the functions above
// (comment lines skipped); used to verify lossless round-trips.
std::vector<std::vector<std::string>> read_csv(
    const std::filesystem::path& path);

} // namespace crowncut
