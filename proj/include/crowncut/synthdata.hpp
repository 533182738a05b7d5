#pragma once

#include <array>
#include <filesystem>
#include <map>

#include "crowncut/raster.hpp"
#include "crowncut/registration.hpp"
#include "crowncut/rng.hpp"

namespace crowncut {

// Stand-in for field data: tree discs whose spectra red-normalize near the
// reference point, soil background and an optional road stripe far from it,
// Gaussian pixel noise, and known per-band misalignments.
struct SceneSpec {
    int width = 256;
    int height = 256;
    int tree_count = 4;
    double radius_min = 26.0;
    double radius_max = 36.0;
    // band order GRE, RED, REG, NIR; tree signature red-normalizes to
    // (1.29, 1.00, 3.13, 2.76)
    std::array<double, 4> tree_signature{12900, 10000, 31300, 27600};
    std::array<double, 4> tree_sigma{300, 250, 700, 600};
    std::array<double, 4> background_signature{18000, 20000, 16000, 14000};
    std::array<double, 4> background_sigma{400, 400, 400, 400};
    bool road = true;
    std::array<double, 4> road_signature{27000, 29000, 26000, 24000};
    double road_width = 14.0;
    double misalign_translation = 4.0; // max |dx|,|dy| in px, NIR stays fixed
    double misalign_rotation_deg = 1.0;
    double noise_sigma = 0.02; // fraction of the dynamic range
    double max_value = 65535.0;
    uint64_t rng_seed = 1;
};

struct SyntheticScene {
    std::map<BandId, RasterGrid> raw;   // misaligned, as a camera would give
    std::map<BandId, RasterGrid> ideal; // co-registered, pre-misalignment
    SegmentationMask true_mask;
    std::map<BandId, Homography3x3> true_homographies; // band -> NIR frame
};

// Deterministic given spec.rng_seed. Throws PlacementFailure when tree_count
// non-overlapping discs cannot be placed.
SyntheticScene generate_scene(const SceneSpec& spec);

// count scenes with per-scene seeds derived from master_seed.
std::vector<SyntheticScene> generate_scenes(const SceneSpec& spec_template,
                                            int count, uint64_t master_seed);

// Writes scene directories (<out>/scene_000/scene_000_GRE.pgm, ...) plus
// <stem>_truth.pgm and <stem>_truth.json per scene.
void write_scene(const SyntheticScene& scene, const SceneSpec& spec,
                 const std::filesystem::path& dir, const std::string& stem);

void generate_dataset(const SceneSpec& spec_template, int count,
                      uint64_t master_seed, const std::filesystem::path& out);

} // namespace crowncut
