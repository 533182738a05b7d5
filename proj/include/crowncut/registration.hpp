#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>

#include "crowncut/raster.hpp"

namespace crowncut {

// 3x3 projective transform, stored row-major and normalized so m[8] == 1.
// Used as a point map: y = H(x) in pixel coordinates.
struct Homography3x3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography3x3 identity() { return {}; }
    static Homography3x3 translation(double dx, double dy);

    // (x, y) -> (x', y'); throws on vanishing denominator
    std::array<double, 2> apply(double x, double y) const;

    Homography3x3 inverse() const;            // throws CrownError if singular
    Homography3x3 compose(const Homography3x3& rhs) const; // this after rhs
    Homography3x3 normalized() const;         // scale so m[8] == 1
    double det() const;
};

struct Rect {
    int x = 0, y = 0, w = 0, h = 0;
    bool empty() const { return w <= 0 || h <= 0; }
};

struct RegistrationConfig {
    int max_iters = 100;     // per pyramid level
    double eps = 1e-6;       // stop when the correlation increment drops below
    int pyramid_levels = 3;
    double correlation_floor = 0.5;
};

struct HomographyEstimate {
    Homography3x3 h; // moving -> fixed point map
    double correlation = 0.0;
};

// Direct intensity alignment: Gauss-Newton on a full projective warp,
// maximizing the correlation of gradient-magnitude images over a coarse-to-
// fine pyramid. Gradient magnitude makes the criterion robust to the
// contrast inversions between spectral bands.
HomographyEstimate estimate_homography(const RasterGrid& moving,
                                       const RasterGrid& fixed,
                                       const RegistrationConfig& cfg = {});

struct WarpedBand {
    RasterGrid grid;
    std::vector<uint8_t> valid; // 1 where the source sample was inside
};

// Inverse-mapped bilinear resampling of band onto out_extent, where h is the
// band -> output point map.
WarpedBand warp_band(const RasterGrid& band, const Homography3x3& h,
                     const Rect& out_extent);

// Per-band homographies into the NIR reference frame plus the common crop.
struct AlignmentChain {
    std::map<BandId, Homography3x3> to_reference; // NIR entry is identity
    Rect valid_extent;
    std::map<BandId, double> correlations;

    std::string to_json() const;
    static AlignmentChain from_json(const std::string& text);
};

struct AlignResult {
    MultispectralFrame frame;
    AlignmentChain chain;
};

// Pairwise estimation in the order (RED to GRE), (GRE to REG), (REG to NIR),
// with the first band of each pair moving; compositions map every band into
// the NIR frame. All bands are warped, validity masks intersected, and the
// frame cropped to the largest rectangle that is valid in all four bands.
AlignResult align_frame(const std::map<BandId, RasterGrid>& raw,
                        const RegistrationConfig& cfg = {});

struct PseudoRgbResult {
    PseudoRgbImage image;
    std::array<bool, 3> constant_channel{false, false, false};
};

// (GRE, RED, REG) channels, each min-max rescaled to [0, 1]; constant bands
// come back all-zero with their warning flag set.
PseudoRgbResult make_pseudo_rgb(const MultispectralFrame& frame);

// Largest axis-aligned rectangle whose pixels are all non-zero.
Rect largest_valid_rect(const std::vector<uint8_t>& mask, int w, int h);

} // namespace crowncut
