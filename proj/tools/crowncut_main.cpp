// crowncut: tree-crown delineation pipeline on multispectral imagery.
// Subcommands cover the whole flow: synthetic data, band alignment,
// classical ground-truth masks, U-Net training, int8 quantization,
// inference, evaluation, benchmarking and the dataset-size sweep.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <omp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "crowncut/groundtruth.hpp"
#include "crowncut/harness.hpp"
#include "crowncut/image_io.hpp"
#include "crowncut/quant.hpp"
#include "crowncut/synthdata.hpp"
#include "crowncut/unet.hpp"

namespace fs = std::filesystem;
using namespace crowncut;

namespace {

constexpr const char* kVersion =
    "crowncut 1.0.0 (model containers: unet v1, qunet v1; "
    "csv schemas: bench v1, sweep v1, eval v1)";

std::array<double, 4> parse_rp(const std::string& text) {
    std::array<double, 4> rp{};
    if (std::sscanf(text.c_str(), "%lf,%lf,%lf,%lf", &rp[0], &rp[1], &rp[2],
                    &rp[3]) != 4)
        throw InvalidConfig("--rp expects four comma-separated values");
    return rp;
}

// files named <stem><suffix> under root, recursive, sorted by stem
std::map<std::string, fs::path> find_by_suffix(const fs::path& root,
                                               const std::string& suffix) {
    std::map<std::string, fs::path> out;
    if (!fs::exists(root)) throw MissingFile(root.string());
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) ==
                0)
            out[name.substr(0, name.size() - suffix.size())] = entry.path();
    }
    return out;
}

struct SceneKnobs {
    int width = 256, height = 256, trees = 4;
    double radius_min = 26.0, radius_max = 36.0;
    double noise = 0.02;
    double misalign_px = 4.0, misalign_deg = 1.0;
    bool no_road = false;

    SceneSpec to_spec(uint64_t seed) const {
        SceneSpec spec;
        spec.width = width;
        spec.height = height;
        spec.tree_count = trees;
        spec.radius_min = radius_min;
        spec.radius_max = radius_max;
        spec.noise_sigma = noise;
        spec.misalign_translation = misalign_px;
        spec.misalign_rotation_deg = misalign_deg;
        spec.road = !no_road;
        spec.rng_seed = seed;
        return spec;
    }

    void attach(CLI::App* cmd) {
        cmd->add_option("--width", width, "scene width in px");
        cmd->add_option("--height", height, "scene height in px");
        cmd->add_option("--trees", trees, "trees per scene");
        cmd->add_option("--radius-min", radius_min, "min tree radius (px)");
        cmd->add_option("--radius-max", radius_max, "max tree radius (px)");
        cmd->add_option("--noise", noise, "noise sigma as range fraction");
        cmd->add_option("--misalign-px", misalign_px,
                        "max per-band translation (px)");
        cmd->add_option("--misalign-deg", misalign_deg,
                        "max per-band rotation (deg)");
        cmd->add_flag("--no-road", no_road, "omit the road stripe");
    }
};

std::vector<Sample<float>> load_pairs(const fs::path& dir,
                                      const std::string& setup,
                                      bool use_truth, int input_size) {
    const std::string mask_suffix =
        use_truth ? "_truth.pgm" : "_mask.pgm";
    auto masks = find_by_suffix(dir, mask_suffix);
    std::vector<Sample<float>> out;
    if (setup == "multispectral") {
        auto rgbs = find_by_suffix(dir, "_rgb.pgm");
        for (const auto& [stem, mask_path] : masks) {
            auto it = rgbs.find(stem);
            if (it == rgbs.end()) continue;
            Sample<float> s;
            s.image = sample_from_pseudo_rgb(load_ppm(it->second), input_size);
            s.target = resample_mask(load_mask(mask_path), input_size);
            out.push_back(std::move(s));
        }
    } else {
        auto scenes = scan_scenes(dir);
        std::map<std::string, fs::path> gre;
        for (const auto& sp : scenes) gre[sp.stem] = sp.bands.at(BandId::GRE);
        // one-band pairs also accept loose <stem>_GRE files without full scenes
        for (const auto& [stem, mask_path] : masks) {
            auto it = gre.find(stem);
            if (it == gre.end()) continue;
            Sample<float> s;
            s.image = sample_from_band(load_band(it->second, BandId::GRE),
                                       input_size);
            s.target = resample_mask(load_mask(mask_path), input_size);
            out.push_back(std::move(s));
        }
    }
    if (out.empty())
        throw EmptyDataset("no (image, mask) pairs under " + dir.string());
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"tree-crown delineation pipeline"};
    app.require_subcommand(0, 1);
    app.set_version_flag("--version", kVersion);

    uint64_t seed = 1;
    int threads = 0;
    app.add_option("--seed", seed, "global RNG seed")->capture_default_str();
    app.add_option("--threads", threads,
                   "worker threads (0 = hardware default)");

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
    int synth_count = 5;
    std::string synth_out;
    SceneKnobs knobs;
    synth->add_option("--count", synth_count, "number of scenes")
        ->capture_default_str();
    synth->add_option("--out", synth_out, "output directory")->required();
    knobs.attach(synth);

    // align
    auto* align = app.add_subcommand("align", "estimate alignment chains");
    std::string align_in, align_out;
    align->add_option("--in", align_in, "scene directory")->required();
    align->add_option("--out", align_out,
                      "output directory (default: scene directory)");

    // groundtruth
    auto* gt = app.add_subcommand(
        "groundtruth", "classical mask generation (alignment + watershed)");
    std::string gt_in, gt_out, gt_rp = "1.29,1.0,3.13,2.76";
    int gt_k = 5, gt_rmin = 5;
    double gt_theta_m = 0.15, gt_theta_bg = 0.5, gt_red_floor = 0.01;
    bool gt_assume_aligned = false;
    gt->add_option("--in", gt_in, "scene directory")->required();
    gt->add_option("--out", gt_out, "output directory")->required();
    gt->add_option("--rp", gt_rp, "reference point (GRE,RED,REG,NIR)")
        ->capture_default_str();
    gt->add_option("--k", gt_k, "median disc radius")->capture_default_str();
    gt->add_option("--rmin", gt_rmin, "min-filter disc radius")
        ->capture_default_str();
    gt->add_option("--theta-m", gt_theta_m, "tree marker threshold")
        ->capture_default_str();
    gt->add_option("--theta-bg", gt_theta_bg, "background marker threshold")
        ->capture_default_str();
    gt->add_option("--red-floor", gt_red_floor, "RED reliability floor")
        ->capture_default_str();
    gt->add_flag("--assume-aligned", gt_assume_aligned,
                 "treat raw bands as co-registered");

    // train
    auto* train_cmd = app.add_subcommand("train", "train the U-Net");
    std::string train_in, train_out, train_setup = "multispectral";
    bool train_use_truth = false;
    TrainingConfig tc;
    UNetConfig uc;
    train_cmd->add_option("--in", train_in, "directory with images and masks")
        ->required();
    train_cmd->add_option("--out", train_out, "output .unet path")->required();
    train_cmd
        ->add_option("--setup", train_setup,
                     "input setup: multispectral | oneband")
        ->check(CLI::IsMember({"multispectral", "oneband"}))
        ->capture_default_str();
    train_cmd->add_flag("--use-truth", train_use_truth,
                        "train on *_truth.pgm masks instead of *_mask.pgm");
    train_cmd->add_option("--epochs", tc.epochs)->capture_default_str();
    train_cmd->add_option("--lr", tc.learning_rate)->capture_default_str();
    train_cmd->add_option("--batch", tc.batch_size)->capture_default_str();
    train_cmd->add_option("--split", tc.split_ratio)->capture_default_str();
    train_cmd->add_option("--base", uc.base_channels)->capture_default_str();
    train_cmd->add_option("--depth", uc.depth)->capture_default_str();
    train_cmd->add_option("--input-size", uc.input_size)
        ->capture_default_str();

    // quantize
    auto* quant_cmd =
        app.add_subcommand("quantize", "post-training int8 quantization");
    std::string q_model, q_in, q_out;
    int q_count = 10;
    quant_cmd->add_option("--model", q_model, "trained .unet")->required();
    quant_cmd->add_option("--in", q_in, "calibration scene directory")
        ->required();
    quant_cmd->add_option("--count", q_count, "calibration image count")
        ->capture_default_str();
    quant_cmd->add_option("--out", q_out, "output .qunet path")->required();

    // infer
    auto* infer = app.add_subcommand("infer", "run a model on a scene");
    std::string inf_model, inf_in, inf_out, inf_band = "GRE";
    infer->add_option("--model", inf_model, ".unet or .qunet")->required();
    infer->add_option("--in", inf_in, "scene directory or single band file")
        ->required();
    infer->add_option("--band", inf_band, "band for one-band models")
        ->capture_default_str();
    infer->add_option("--out", inf_out, "output mask path")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "confusion matrix / IoU");
    std::string eval_pred, eval_truth, eval_out;
    eval_cmd->add_option("--pred", eval_pred, "mask file or directory")
        ->required();
    eval_cmd->add_option("--truth", eval_truth, "mask file or directory")
        ->required();
    eval_cmd->add_option("--out", eval_out, "eval.csv path");

    // bench
    auto* bench_cmd = app.add_subcommand("bench", "pipeline stage timings");
    std::vector<std::string> bench_models;
    std::string bench_in, bench_out;
    int bench_reps = 5;
    bench_cmd
        ->add_option("--model", bench_models,
                     ".unet/.qunet paths (repeatable)")
        ->required();
    bench_cmd->add_option("--in", bench_in, "scene directory")->required();
    bench_cmd->add_option("--reps", bench_reps)->capture_default_str();
    bench_cmd->add_option("--out", bench_out, "bench.csv path");

    // sweep
    auto* sweep_cmd =
        app.add_subcommand("sweep", "accuracy vs training-set size");
    std::string sweep_sizes = "8,16,32,64", sweep_out;
    int sweep_repeats = 5, sweep_eval_count = 48;
    TrainingConfig sweep_tc;
    sweep_tc.epochs = 15;
    UNetConfig sweep_uc;
    sweep_uc.base_channels = 8;
    sweep_uc.input_size = 64;
    sweep_cmd->add_option("--sizes", sweep_sizes, "comma-separated sizes")
        ->capture_default_str();
    sweep_cmd->add_option("--repeats", sweep_repeats)->capture_default_str();
    sweep_cmd->add_option("--epochs", sweep_tc.epochs)->capture_default_str();
    sweep_cmd->add_option("--base", sweep_uc.base_channels)
        ->capture_default_str();
    sweep_cmd->add_option("--input-size", sweep_uc.input_size)
        ->capture_default_str();
    sweep_cmd->add_option("--eval-count", sweep_eval_count)
        ->capture_default_str();
    sweep_cmd->add_option("--out", sweep_out, "sweep.csv path")->required();

    // let the global --seed/--threads appear after the subcommand too
    for (CLI::App* sc :
         app.get_subcommands([](const CLI::App*) { return true; }))
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (threads > 0) omp_set_num_threads(threads);

    if (app.got_subcommand(synth)) {
        generate_dataset(knobs.to_spec(seed), synth_count, seed, synth_out);
        std::cout << "wrote " << synth_count << " scenes to " << synth_out
                  << "\n";
        return 0;
    }

    if (app.got_subcommand(align)) {
        const fs::path out_dir = align_out.empty() ? fs::path(align_in)
                                                   : fs::path(align_out);
        fs::create_directories(out_dir);
        auto scenes = scan_scenes(align_in);
        if (scenes.empty()) throw MissingFile("no scenes under " + align_in);
        for (const auto& sp : scenes) {
            AlignResult res = align_frame(load_scene_bands(sp));
            const fs::path out = out_dir / (sp.stem + "_chain.json");
            std::ofstream f(out);
            f << res.chain.to_json() << "\n";
            std::cout << sp.stem << ": extent " << res.chain.valid_extent.w
                      << "x" << res.chain.valid_extent.h << " -> " << out
                      << "\n";
        }
        return 0;
    }

    if (app.got_subcommand(gt)) {
        GroundTruthParams params;
        params.rp.rp = parse_rp(gt_rp);
        params.k = gt_k;
        params.r_min = gt_rmin;
        params.theta_m = gt_theta_m;
        params.theta_bg = gt_theta_bg;
        params.red_floor = gt_red_floor;
        GroundTruthConfig cfg;
        cfg.assume_aligned = gt_assume_aligned;

        auto scenes = scan_scenes(gt_in);
        if (scenes.empty()) throw MissingFile("no scenes under " + gt_in);
        fs::create_directories(gt_out);
        for (const auto& sp : scenes) {
            GroundTruthResult res =
                generate_groundtruth(load_scene_bands(sp), params, cfg);
            save_mask(res.mask, fs::path(gt_out) / (sp.stem + "_mask.pgm"));
            save_ppm(res.pseudo_rgb,
                     fs::path(gt_out) / (sp.stem + "_rgb.pgm"));
            nlohmann::json sidecar;
            sidecar["scene"] = sp.stem;
            sidecar["params"] = {
                {"rp", params.rp.rp},       {"k", params.k},
                {"rmin", params.r_min},     {"theta_m", params.theta_m},
                {"theta_bg", params.theta_bg}, {"red_floor", params.red_floor},
                {"assume_aligned", cfg.assume_aligned}};
            sidecar["chain"] = nlohmann::json::parse(res.chain.to_json());
            std::ofstream f(fs::path(gt_out) / (sp.stem + "_groundtruth.json"));
            f << sidecar.dump(2) << "\n";
            std::cout << sp.stem << ": mask " << res.mask.width << "x"
                      << res.mask.height << "\n";
        }
        return 0;
    }

    if (app.got_subcommand(train_cmd)) {
        uc.in_channels = train_setup == "multispectral" ? 3 : 1;
        tc.rng_seed = seed;
        auto pairs =
            load_pairs(train_in, train_setup, train_use_truth, uc.input_size);
        std::cout << "training on " << pairs.size() << " pairs ("
                  << train_setup << ", base " << uc.base_channels << ", input "
                  << uc.input_size << ")\n";
        TrainResult res = train(pairs, tc, uc);
        for (const auto& s : res.trace)
            std::cout << "epoch " << s.epoch << ": loss " << s.train_loss
                      << ", test acc " << s.test_accuracy << "\n";
        save_model(res.model, train_out);
        std::cout << "saved " << train_out << "\n";
        return 0;
    }

    if (app.got_subcommand(quant_cmd)) {
        UNetModel model = load_model(q_model);
        const std::string setup =
            model.config.in_channels == 1 ? "oneband" : "multispectral";
        auto pairs = load_pairs(q_in, setup, true, model.config.input_size);
        std::vector<Tensor3<float>> calib;
        for (auto& p : pairs) calib.push_back(std::move(p.image));
        CalibrationStats stats = calibrate(model, calib, q_count);
        QuantizedUNet q = quantize_model(model, stats);
        save_qmodel(q, q_out);
        std::cout << "calibrated on " << stats.images << " images; payload "
                  << quantized_payload_bytes(q) << " bytes ("
                  << double(quantized_payload_bytes(q)) /
                         double(float_payload_bytes(model))
                  << "x float)\n";
        return 0;
    }

    if (app.got_subcommand(infer)) {
        const bool quantized = fs::path(inf_model).extension() == ".qunet";
        SegmentationMask mask;
        if (quantized) {
            QuantizedUNet q = load_qmodel(inf_model);
            Tensor3<float> input;
            if (fs::is_directory(inf_in)) {
                auto scenes = scan_scenes(inf_in);
                if (scenes.empty())
                    throw MissingFile("no scenes under " + inf_in);
                if (q.config.in_channels == 1) {
                    input = sample_from_band(
                        load_band(scenes[0].bands.at(band_from_name(inf_band)),
                                  band_from_name(inf_band)),
                        q.config.input_size);
                } else {
                    AlignResult a = align_frame(load_scene_bands(scenes[0]));
                    input = sample_from_pseudo_rgb(
                        make_pseudo_rgb(a.frame).image, q.config.input_size);
                }
            } else {
                if (q.config.in_channels != 1)
                    throw ConfigMismatch(
                        "single-file input needs a one-band model");
                input = sample_from_band(
                    load_band(inf_in, band_from_name(inf_band)),
                    q.config.input_size);
            }
            mask = int_predict_mask(q, input);
        } else {
            UNetModel model = load_model(inf_model);
            Tensor3<float> input;
            if (fs::is_directory(inf_in)) {
                auto scenes = scan_scenes(inf_in);
                if (scenes.empty())
                    throw MissingFile("no scenes under " + inf_in);
                if (model.config.in_channels == 1) {
                    input = sample_from_band(
                        load_band(scenes[0].bands.at(band_from_name(inf_band)),
                                  band_from_name(inf_band)),
                        model.config.input_size);
                } else {
                    AlignResult a = align_frame(load_scene_bands(scenes[0]));
                    input = sample_from_pseudo_rgb(
                        make_pseudo_rgb(a.frame).image,
                        model.config.input_size);
                }
            } else {
                if (model.config.in_channels != 1)
                    throw ConfigMismatch(
                        "single-file input needs a one-band model");
                input = sample_from_band(
                    load_band(inf_in, band_from_name(inf_band)),
                    model.config.input_size);
            }
            mask = predict_mask(model, input);
        }
        save_mask(mask, inf_out);
        std::cout << "wrote " << inf_out << "\n";
        return 0;
    }

    if (app.got_subcommand(eval_cmd)) {
        std::vector<SceneEval> evals;
        if (fs::is_directory(eval_pred)) {
            auto preds = find_by_suffix(eval_pred, "_mask.pgm");
            auto truths = find_by_suffix(eval_truth, "_truth.pgm");
            auto sidecars = find_by_suffix(eval_pred, "_groundtruth.json");
            for (const auto& [stem, pred_path] : preds) {
                auto it = truths.find(stem);
                if (it == truths.end()) continue;
                SegmentationMask pred = load_mask(pred_path);
                SegmentationMask truth = load_mask(it->second);
                // masks from the aligned pipeline live in the cropped frame;
                // the sidecar's valid extent locates them in the raw frame
                auto side = sidecars.find(stem);
                if (side != sidecars.end() &&
                    (truth.width != pred.width || truth.height != pred.height)) {
                    std::ifstream f(side->second);
                    nlohmann::json j = nlohmann::json::parse(f);
                    AlignmentChain chain = AlignmentChain::from_json(
                        j.at("chain").dump());
                    const Rect& ve = chain.valid_extent;
                    if (ve.w == pred.width && ve.h == pred.height &&
                        ve.x + ve.w <= truth.width &&
                        ve.y + ve.h <= truth.height) {
                        SegmentationMask cropped(ve.w, ve.h, 0);
                        for (int y = 0; y < ve.h; ++y)
                            for (int x = 0; x < ve.w; ++x)
                                cropped.at(x, y) =
                                    truth.at(ve.x + x, ve.y + y);
                        truth = std::move(cropped);
                    }
                }
                evals.push_back({stem, evaluate(pred, truth)});
            }
            if (evals.empty())
                throw MissingFile("no matching mask/truth pairs");
        } else {
            evals.push_back({fs::path(eval_pred).stem().string(),
                             evaluate(load_mask(eval_pred),
                                      load_mask(eval_truth))});
        }
        double acc = 0, iou = 0;
        for (const auto& e : evals) {
            std::cout << e.scene << ": accuracy " << e.eval.accuracy
                      << ", IoU " << e.eval.iou << "\n";
            acc += e.eval.accuracy;
            iou += e.eval.iou;
        }
        std::cout << "mean accuracy " << acc / double(evals.size())
                  << ", mean IoU " << iou / double(evals.size()) << "\n";
        if (!eval_out.empty()) write_eval_csv(evals, eval_out);
        return 0;
    }

    if (app.got_subcommand(bench_cmd)) {
        auto scenes = scan_scenes(bench_in);
        if (scenes.empty()) throw MissingFile("no scenes under " + bench_in);
        std::vector<BenchRecord> records;
        for (const std::string& mpath : bench_models) {
            BenchRecord rec;
            if (fs::path(mpath).extension() == ".qunet") {
                QuantizedUNet q = load_qmodel(mpath);
                rec = bench_pipeline(nullptr, &q, scenes[0],
                                     q.config.in_channels == 1
                                         ? InputSetup::OneBand
                                         : InputSetup::Multispectral,
                                     bench_reps);
            } else {
                UNetModel m = load_model(mpath);
                rec = bench_pipeline(&m, nullptr, scenes[0],
                                     m.config.in_channels == 1
                                         ? InputSetup::OneBand
                                         : InputSetup::Multispectral,
                                     bench_reps);
            }
            rec.model = fs::path(mpath).stem().string();
            records.push_back(rec);
            std::cout << rec.model << " [" << rec.path << "]: io " << rec.io_ms
                      << " ms, preprocess " << rec.preprocess_ms
                      << " ms, inference " << rec.inference_ms << " ms\n";
        }
        if (!bench_out.empty()) write_bench_csv(records, bench_out);
        return 0;
    }

    if (app.got_subcommand(sweep_cmd)) {
        std::vector<int> sizes;
        std::stringstream ss(sweep_sizes);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) sizes.push_back(std::stoi(tok));
        SweepConfig cfg;
        cfg.unet = sweep_uc;
        cfg.unet.in_channels = 3;
        cfg.training = sweep_tc;
        cfg.training.rng_seed = seed;
        cfg.eval_count = sweep_eval_count;
        cfg.data_seed = seed;
        cfg.scene.misalign_translation = 0.0;
        cfg.scene.misalign_rotation_deg = 0.0;
        SweepResult res = dataset_size_sweep(sizes, sweep_repeats, cfg);
        for (const auto& [size, mean] : res.mean_by_size)
            std::cout << "size " << size << ": mean accuracy " << mean << "\n";
        write_sweep_csv(res, sweep_out);
        return 0;
    }

    std::cout << app.help();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const CrownError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
