#pragma once

#include <array>
#include <map>

#include "crowncut/raster.hpp"
#include "crowncut/registration.hpp"

namespace crowncut {

// Spectral signature of the target species in red-normalized band-ratio
// space, (GRE, RED, REG, NIR) order with the RED component fixed at 1.
struct ReferencePoint {
    std::array<double, 4> rp{1.29, 1.00, 3.13, 2.76};

    void validate() const; // throws InvalidConfig
};

// Normalized per-pixel distance in [0, 1]; same extent as its source frame.
struct ScoreMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    ScoreMap() = default;
    ScoreMap(int w, int h, double fill = 0.0)
        : width(w), height(h), values(size_t(w) * size_t(h), fill) {}

    double& at(int x, int y) { return values[size_t(y) * width + x]; }
    double at(int x, int y) const { return values[size_t(y) * width + x]; }
    size_t pixel_count() const { return values.size(); }
};

enum class Marker : uint8_t { UNKNOWN = 0, TREE = 1, BACKGROUND = 2 };

struct MarkerField {
    int width = 0;
    int height = 0;
    std::vector<Marker> values;

    Marker& at(int x, int y) { return values[size_t(y) * width + x]; }
    Marker at(int x, int y) const { return values[size_t(y) * width + x]; }
};

struct GroundTruthParams {
    ReferencePoint rp;
    int r_min = 5;         // min-filter disc radius
    int k = 5;             // median disc radius
    double theta_m = 0.15; // tree marker threshold
    double theta_bg = 0.5; // background marker threshold
    double red_floor = 0.01;

    void validate() const; // throws InvalidConfig
};

// Euclidean distance of each pixel's red-normalized vector from the
// reference point; unreliable pixels take the map maximum; the map is then
// divided by its maximum (an all-equal map normalizes to all zeros).
ScoreMap distance_map(const MultispectralFrame& frame, const ReferencePoint& rp,
                      double red_floor = 0.01);

ScoreMap min_filter_disc(const ScoreMap& map, int radius);
ScoreMap median_filter_disc(const ScoreMap& map, int k);

// value < theta_m -> TREE, value > theta_bg -> BACKGROUND, else UNKNOWN.
MarkerField threshold_markers(const ScoreMap& map, double theta_m,
                              double theta_bg);

// Marker-controlled flooding of the score map treated as elevation:
// priority-queue flood from all markers at once, ascending by elevation with
// FIFO tie-breaking, 4-connected. TREE basins map to 1. No TREE markers ->
// all-zero mask.
SegmentationMask watershed_segment(const ScoreMap& map,
                                   const MarkerField& markers);

struct GroundTruthResult {
    SegmentationMask mask;
    MultispectralFrame frame;
    PseudoRgbImage pseudo_rgb;
    AlignmentChain chain;
};

struct GroundTruthConfig {
    RegistrationConfig registration;
    bool assume_aligned = false; // skip estimation, treat raw as co-registered
};

// The full ground-truth sequence: alignment, composite, distance, minimum
// filter, median denoising, thresholds, watershed.
GroundTruthResult generate_groundtruth(const std::map<BandId, RasterGrid>& raw,
                                       const GroundTruthParams& params,
                                       const GroundTruthConfig& cfg = {});

} // namespace crowncut
