#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crowncut/raster.hpp"

namespace crowncut {

// Supported inputs: binary PGM (P5, 8- or 16-bit big-endian) and uncompressed
// single-band grayscale TIFF (8/16-bit, either byte order). Masks are P5,
// 8-bit, exactly {0, 255} on disk.

RasterGrid load_raster(const std::filesystem::path& path);
RasterGrid load_band(const std::filesystem::path& path, BandId band);

// Writes P5; 1 byte per pixel when max_value <= 255, else 2 bytes big-endian.
void save_pgm(const RasterGrid& grid, const std::filesystem::path& path);

void save_mask(const SegmentationMask& mask, const std::filesystem::path& path);
SegmentationMask load_mask(const std::filesystem::path& path);

// P6, 8-bit, channels assumed in [0, 1].
void save_ppm(const PseudoRgbImage& img, const std::filesystem::path& path);
PseudoRgbImage load_ppm(const std::filesystem::path& path);

// A scene on disk: files named <stem>_<BAND>.pgm|tif, case-insensitive band.
struct ScenePaths {
    std::string stem;
    std::filesystem::path dir;
    std::map<BandId, std::filesystem::path> bands;
};

// Finds every scene with all four bands under root (recursive), sorted by stem.
std::vector<ScenePaths> scan_scenes(const std::filesystem::path& root);

std::map<BandId, RasterGrid> load_scene_bands(const ScenePaths& scene);

} // namespace crowncut
