#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crowncut/errors.hpp"

namespace crowncut {

// The four bands of the multispectral camera, with nominal wavelengths.
enum class BandId : int { GRE = 0, RED = 1, REG = 2, NIR = 3 };

constexpr std::array<BandId, 4> kAllBands{BandId::GRE, BandId::RED, BandId::REG,
                                          BandId::NIR};

constexpr int wavelength_nm(BandId b) {
    switch (b) {
        case BandId::GRE: return 550;
        case BandId::RED: return 660;
        case BandId::REG: return 735;
        case BandId::NIR: return 790;
    }
    return 0; // unreachable
}

const char* band_name(BandId b);
BandId band_from_name(const std::string& name); // case-insensitive, throws MalformedRaster

// Single-band 2-D intensity image, row-major. Intensities are stored as
// doubles regardless of the source bit depth; max_value records the nominal
// dynamic-range maximum of the source (255 or 65535).
struct RasterGrid {
    int width = 0;
    int height = 0;
    double max_value = 255.0;
    std::vector<double> values;

    RasterGrid() = default;
    RasterGrid(int w, int h, double fill = 0.0, double maxv = 255.0)
        : width(w), height(h), max_value(maxv),
          values(size_t(w) * size_t(h), fill) {}

    double& at(int x, int y) { return values[size_t(y) * width + x]; }
    double at(int x, int y) const { return values[size_t(y) * width + x]; }
    size_t pixel_count() const { return values.size(); }

    bool same_shape(const RasterGrid& o) const {
        return width == o.width && height == o.height;
    }
};

// Throws if the grid violates its invariants (dims, finiteness, sign).
void validate(const RasterGrid& g, const std::string& what);

// Per-pixel class labels, 0 = not-tree, 1 = tree.
struct SegmentationMask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> labels;

    SegmentationMask() = default;
    SegmentationMask(int w, int h, uint8_t fill = 0)
        : width(w), height(h), labels(size_t(w) * size_t(h), fill) {}

    uint8_t& at(int x, int y) { return labels[size_t(y) * width + x]; }
    uint8_t at(int x, int y) const { return labels[size_t(y) * width + x]; }
    size_t pixel_count() const { return labels.size(); }
};

// Four co-registered bands with a shared extent. Construction goes through
// from_aligned so that call sites declare co-registration explicitly; the
// aligner and the synthetic generator are the intended producers.
class MultispectralFrame {
public:
    static MultispectralFrame from_aligned(RasterGrid gre, RasterGrid red,
                                           RasterGrid reg, RasterGrid nir);

    const RasterGrid& band(BandId b) const { return bands_[size_t(b)]; }
    int width() const { return bands_[0].width; }
    int height() const { return bands_[0].height; }
    size_t pixel_count() const { return bands_[0].pixel_count(); }
    double max_value() const;

private:
    MultispectralFrame() = default;
    std::array<RasterGrid, 4> bands_;
};

// 3-channel composite in fixed (GRE, RED, REG) order, each channel
// independently min-max rescaled to [0, 1].
struct PseudoRgbImage {
    int width = 0;
    int height = 0;
    std::array<std::vector<double>, 3> channels; // GRE, RED, REG
};

// Output of red_normalize: per-pixel band ratios (GRE/RED, 1, REG/RED,
// NIR/RED), with pixels whose RED falls below the floor flagged unreliable
// instead of producing a vector.
struct NormalizedField {
    int width = 0;
    int height = 0;
    std::vector<std::array<double, 4>> vec;
    std::vector<uint8_t> unreliable;

    size_t pixel_count() const { return vec.size(); }
};

// red_floor is a fraction of the frame's dynamic-range max, in (0, 1).
NormalizedField red_normalize(const MultispectralFrame& frame,
                              double red_floor = 0.01);

} // namespace crowncut
