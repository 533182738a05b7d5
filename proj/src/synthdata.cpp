#include "crowncut/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "crowncut/image_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace crowncut {

namespace {

struct Tree {
    double cx, cy, r;
    std::array<double, 4> sig;
};

Homography3x3 rigid_about_center(double cx, double cy, double angle_rad,
                                 double dx, double dy) {
    const double c = std::cos(angle_rad);
    const double s = std::sin(angle_rad);
    Homography3x3 h;
    h.m = {c, -s, cx - c * cx + s * cy + dx,
           s, c,  cy - s * cx - c * cy + dy,
           0, 0,  1};
    return h;
}

} // namespace

SyntheticScene generate_scene(const SceneSpec& spec) {
    if (spec.width < 8 || spec.height < 8 || spec.tree_count < 0 ||
        spec.radius_min < 1.0 || spec.radius_max < spec.radius_min)
        throw InvalidConfig("scene spec");
    Rng rng(spec.rng_seed);

    // place trees fully inside the image, without overlap
    std::vector<Tree> trees;
    const int max_attempts = std::max(1, spec.tree_count) * 200;
    int attempts = 0;
    while (int(trees.size()) < spec.tree_count) {
        if (++attempts > max_attempts)
            throw PlacementFailure("cannot place " +
                                   std::to_string(spec.tree_count) +
                                   " non-overlapping trees");
        const double r = rng.uniform(spec.radius_min, spec.radius_max);
        if (2.0 * r + 2.0 > std::min(spec.width, spec.height))
            throw PlacementFailure("tree radius exceeds scene size");
        const double cx = rng.uniform(r + 1.0, spec.width - r - 1.0);
        const double cy = rng.uniform(r + 1.0, spec.height - r - 1.0);
        bool clash = false;
        for (const Tree& t : trees) {
            const double d = std::hypot(t.cx - cx, t.cy - cy);
            if (d < t.r + r + 2.0) {
                clash = true;
                break;
            }
        }
        if (clash) continue;
        Tree t{cx, cy, r, {}};
        for (int b = 0; b < 4; ++b)
            t.sig[b] = std::max(
                1.0, rng.normal(spec.tree_signature[b], spec.tree_sigma[b]));
        trees.push_back(t);
    }

    // per-scene background level and road geometry
    std::array<double, 4> bg;
    for (int b = 0; b < 4; ++b)
        bg[b] = std::max(1.0, rng.normal(spec.background_signature[b],
                                         spec.background_sigma[b]));
    const double road_angle = rng.uniform(0.0, M_PI);
    const double road_off = rng.uniform(0.2, 0.8);
    const double rnx = std::cos(road_angle);
    const double rny = std::sin(road_angle);
    const double rpx = road_off * spec.width;
    const double rpy = road_off * spec.height;

    SyntheticScene scene;
    scene.true_mask = SegmentationMask(spec.width, spec.height, 0);
    for (BandId b : kAllBands)
        scene.ideal[b] =
            RasterGrid(spec.width, spec.height, 0.0, spec.max_value);

    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            std::array<double, 4> px = bg;
            if (spec.road) {
                const double dist =
                    std::fabs((x - rpx) * rnx + (y - rpy) * rny);
                if (dist < spec.road_width) px = spec.road_signature;
            }
            for (const Tree& t : trees) {
                const double rho = std::hypot(x - t.cx, y - t.cy);
                if (rho > t.r) continue;
                // soft edge: blend toward local background over the outer 20%
                const double a = std::clamp((rho - 0.8 * t.r) / (0.2 * t.r),
                                            0.0, 1.0);
                for (int b = 0; b < 4; ++b)
                    px[b] = (1.0 - a) * t.sig[b] + a * px[b];
                scene.true_mask.at(x, y) = 1;
                break; // trees do not overlap
            }
            for (int b = 0; b < 4; ++b)
                scene.ideal[kAllBands[size_t(b)]].at(x, y) = px[b];
        }
    }

    // pixel noise, clipped to the valid range
    for (BandId b : kAllBands) {
        RasterGrid& g = scene.ideal[b];
        for (double& v : g.values)
            v = std::clamp(v + rng.normal(0.0, spec.noise_sigma * spec.max_value),
                           0.0, spec.max_value);
    }

    // misalign all bands except the NIR reference
    for (BandId b : kAllBands) {
        if (b == BandId::NIR) {
            scene.true_homographies[b] = Homography3x3::identity();
            scene.raw[b] = scene.ideal[b];
            continue;
        }
        const double dx =
            rng.uniform(-spec.misalign_translation, spec.misalign_translation);
        const double dy =
            rng.uniform(-spec.misalign_translation, spec.misalign_translation);
        const double ang = rng.uniform(-spec.misalign_rotation_deg,
                                       spec.misalign_rotation_deg) *
                           M_PI / 180.0;
        const Homography3x3 h = rigid_about_center(
            0.5 * spec.width, 0.5 * spec.height, ang, dx, dy);
        scene.true_homographies[b] = h;
        WarpedBand wb = warp_band(scene.ideal[b], h.inverse(),
                                  {0, 0, spec.width, spec.height});
        // fill pixels that fell outside the source with background + noise
        for (size_t i = 0; i < wb.valid.size(); ++i) {
            if (!wb.valid[i]) {
                wb.grid.values[i] = std::clamp(
                    bg[size_t(b)] +
                        rng.normal(0.0, spec.noise_sigma * spec.max_value),
                    0.0, spec.max_value);
            }
        }
        scene.raw[b] = std::move(wb.grid);
    }
    return scene;
}

std::vector<SyntheticScene> generate_scenes(const SceneSpec& spec_template,
                                            int count, uint64_t master_seed) {
    if (count < 1) throw InvalidConfig("scene count must be >= 1");
    std::vector<SyntheticScene> scenes;
    scenes.reserve(size_t(count));
    Rng master(master_seed);
    for (int i = 0; i < count; ++i) {
        SceneSpec spec = spec_template;
        spec.rng_seed = master.fork(uint64_t(i)).next_u64();
        scenes.push_back(generate_scene(spec));
    }
    return scenes;
}

void write_scene(const SyntheticScene& scene, const SceneSpec& spec,
                 const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    for (BandId b : kAllBands)
        save_pgm(scene.raw.at(b),
                 dir / (stem + "_" + band_name(b) + ".pgm"));
    save_mask(scene.true_mask, dir / (stem + "_truth.pgm"));

    json j;
    j["stem"] = stem;
    j["spec"] = {{"width", spec.width},
                 {"height", spec.height},
                 {"tree_count", spec.tree_count},
                 {"radius_min", spec.radius_min},
                 {"radius_max", spec.radius_max},
                 {"noise_sigma", spec.noise_sigma},
                 {"misalign_translation", spec.misalign_translation},
                 {"misalign_rotation_deg", spec.misalign_rotation_deg},
                 {"rng_seed", spec.rng_seed},
                 {"max_value", spec.max_value}};
    json homos;
    for (const auto& [band, h] : scene.true_homographies) {
        json rows = json::array();
        for (int r = 0; r < 3; ++r)
            rows.push_back({h.m[3 * r], h.m[3 * r + 1], h.m[3 * r + 2]});
        homos[band_name(band)] = rows;
    }
    j["true_homographies"] = homos;
    std::ofstream out(dir / (stem + "_truth.json"));
    if (!out) throw IoFailure("cannot write truth sidecar");
    out << j.dump(2) << "\n";
}

void generate_dataset(const SceneSpec& spec_template, int count,
                      uint64_t master_seed, const fs::path& out) {
    if (count < 1) throw InvalidConfig("scene count must be >= 1");
    fs::create_directories(out);
    Rng master(master_seed);
    for (int i = 0; i < count; ++i) {
        SceneSpec spec = spec_template;
        spec.rng_seed = master.fork(uint64_t(i)).next_u64();
        char stem[32];
        std::snprintf(stem, sizeof(stem), "scene_%03d", i);
        write_scene(generate_scene(spec), spec, out / stem, stem);
    }
}

} // namespace crowncut
