#include <doctest.h>

#include <cmath>

#include "crowncut/registration.hpp"
#include "crowncut/rng.hpp"
#include "crowncut/synthdata.hpp"

using namespace crowncut;

namespace {

// analytically sampled textured image, so shifted copies have no warping
// artifacts or invalid borders
double texture(double x, double y) {
    double v = 120.0;
    v += 35.0 * std::sin(0.21 * x) * std::cos(0.17 * y);
    v += 25.0 * std::sin(0.05 * x * y * 0.1 + 1.0);
    auto bump = [&](double cx, double cy, double s, double a) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        return a * std::exp(-d2 / (2.0 * s * s));
    };
    v += bump(40, 30, 8, 60) + bump(80, 90, 12, -50) + bump(100, 40, 6, 45);
    return v;
}

RasterGrid textured(int w, int h, double dx, double dy) {
    RasterGrid g(w, h, 0.0, 255.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) g.at(x, y) = texture(x + dx, y + dy);
    return g;
}

double mean_reprojection_error(const Homography3x3& est,
                               const Homography3x3& truth, int w, int h) {
    double sum = 0.0;
    int n = 0;
    for (int y = 0; y < h; y += 16) {
        for (int x = 0; x < w; x += 16) {
            const auto a = est.apply(x, y);
            const auto b = truth.apply(x, y);
            sum += std::hypot(a[0] - b[0], a[1] - b[1]);
            ++n;
        }
    }
    return sum / n;
}

} // namespace

TEST_CASE("homography algebra") {
    const Homography3x3 t = Homography3x3::translation(3.5, -2.0);
    const auto p = t.apply(10.0, 20.0);
    CHECK(p[0] == 13.5);
    CHECK(p[1] == 18.0);

    const Homography3x3 inv = t.inverse();
    const auto q = inv.apply(p[0], p[1]);
    CHECK(q[0] == doctest::Approx(10.0));
    CHECK(q[1] == doctest::Approx(20.0));

    const Homography3x3 c = t.compose(inv); // t after inv == identity
    for (int i = 0; i < 9; ++i)
        CHECK(c.m[i] == doctest::Approx(Homography3x3::identity().m[i])
                            .epsilon(1e-12));

    Homography3x3 singular;
    singular.m = {1, 2, 3, 2, 4, 6, 0, 0, 1};
    CHECK_THROWS_AS(singular.inverse(), CrownError);
}

TEST_CASE("estimate_homography: self-alignment is the identity") {
    RasterGrid img = textured(96, 96, 0, 0);
    const auto est = estimate_homography(img, img);
    const auto id = Homography3x3::identity();
    for (int i = 0; i < 9; ++i)
        CHECK(std::fabs(est.h.m[i] - id.m[i]) < 1e-6);
    CHECK(est.correlation > 0.99);
}

TEST_CASE("estimate_homography recovers a known translation") {
    // moving(x) = fixed(x + (3, -2)), so moving -> fixed is a shift by (3,-2)
    RasterGrid fixed = textured(128, 128, 0, 0);
    RasterGrid moving = textured(128, 128, 3.0, -2.0);
    const auto est = estimate_homography(moving, fixed);
    CHECK(std::fabs(est.h.m[2] - 3.0) < 0.25);
    CHECK(std::fabs(est.h.m[5] - (-2.0)) < 0.25);
}

TEST_CASE("estimate_homography is deterministic") {
    RasterGrid fixed = textured(96, 96, 0, 0);
    RasterGrid moving = textured(96, 96, 2.0, 1.0);
    const auto a = estimate_homography(moving, fixed);
    const auto b = estimate_homography(moving, fixed);
    CHECK(a.h.m == b.h.m);
    CHECK(a.correlation == b.correlation);
}

TEST_CASE("estimate_homography rejects degenerate input") {
    RasterGrid flat(64, 64, 7.0);
    RasterGrid img = textured(64, 64, 0, 0);
    CHECK_THROWS_AS(estimate_homography(flat, img), DegenerateImage);
    CHECK_THROWS_AS(estimate_homography(img, flat), DegenerateImage);
}

TEST_CASE("warp_band: identity keeps everything valid and equal") {
    RasterGrid img = textured(48, 48, 0, 0);
    WarpedBand wb =
        warp_band(img, Homography3x3::identity(), {0, 0, 48, 48});
    CHECK(wb.grid.values == img.values);
    for (uint8_t v : wb.valid) CHECK(v == 1);
}

TEST_CASE("warp composition matches the composed homography") {
    RasterGrid img = textured(96, 96, 0, 0);
    Homography3x3 h1 = Homography3x3::translation(2.3, -1.1);
    Homography3x3 h2;
    h2.m = {0.998, 0.015, 1.0, -0.015, 0.998, 0.5, 0, 0, 1};

    WarpedBand step1 = warp_band(img, h1, {0, 0, 96, 96});
    WarpedBand step2 = warp_band(step1.grid, h2, {0, 0, 96, 96});
    WarpedBand direct = warp_band(img, h2.compose(h1), {0, 0, 96, 96});

    double err = 0.0;
    int n = 0;
    for (size_t i = 0; i < direct.grid.pixel_count(); ++i) {
        if (!step2.valid[i] || !direct.valid[i]) continue;
        err += std::fabs(step2.grid.values[i] - direct.grid.values[i]);
        ++n;
    }
    REQUIRE(n > 1000);
    CHECK(err / n < 0.01 * 255.0);
}

TEST_CASE("align_frame on already-aligned bands: identity, no crop") {
    // four copies of one band: every pair estimation is self-alignment
    RasterGrid img = textured(128, 128, 0, 0);
    std::map<BandId, RasterGrid> raw;
    for (BandId b : kAllBands) raw[b] = img;

    AlignResult res = align_frame(raw);
    CHECK(res.frame.width() == 128);
    CHECK(res.frame.height() == 128);
    CHECK(res.chain.valid_extent.x == 0);
    CHECK(res.chain.valid_extent.y == 0);
    for (BandId b : kAllBands) {
        const auto& h = res.chain.to_reference.at(b);
        for (int i = 0; i < 9; ++i)
            CHECK(std::fabs(h.m[i] - Homography3x3::identity().m[i]) < 1e-6);
    }
}

TEST_CASE("align_frame recovers synthetic misalignments under 1 px") {
    double total = 0.0;
    int count = 0;
    for (uint64_t seed : {101u, 202u, 303u}) {
        SceneSpec spec;
        spec.rng_seed = seed;
        spec.misalign_translation = 8.0;
        spec.misalign_rotation_deg = 2.0;
        SyntheticScene scene = generate_scene(spec);
        AlignResult res = align_frame(scene.raw);
        CHECK(res.frame.width() < spec.width);
        for (BandId b : {BandId::GRE, BandId::RED, BandId::REG}) {
            total += mean_reprojection_error(res.chain.to_reference.at(b),
                                             scene.true_homographies.at(b),
                                             spec.width, spec.height);
            ++count;
        }
    }
    CHECK(total / count < 1.0);
}

TEST_CASE("align_frame tags the failing pair") {
    SceneSpec spec;
    spec.rng_seed = 4;
    SyntheticScene scene = generate_scene(spec);
    scene.raw[BandId::GRE] = RasterGrid(spec.width, spec.height, 3.0);
    try {
        align_frame(scene.raw);
        FAIL("expected AlignmentPairError");
    } catch (const AlignmentPairError& e) {
        CHECK(e.moving_band() == "RED");
        CHECK(e.fixed_band() == "GRE");
    }
}

TEST_CASE("make_pseudo_rgb rescales each channel to [0,1]") {
    SceneSpec spec;
    spec.rng_seed = 9;
    spec.misalign_translation = 0.0;
    spec.misalign_rotation_deg = 0.0;
    SyntheticScene scene = generate_scene(spec);
    auto frame = MultispectralFrame::from_aligned(
        scene.ideal.at(BandId::GRE), scene.ideal.at(BandId::RED),
        scene.ideal.at(BandId::REG), scene.ideal.at(BandId::NIR));
    PseudoRgbResult rgb = make_pseudo_rgb(frame);
    CHECK(!rgb.constant_channel[0]);

    const std::array<BandId, 3> order{BandId::GRE, BandId::RED, BandId::REG};
    for (int c = 0; c < 3; ++c) {
        const auto& ch = rgb.image.channels[size_t(c)];
        const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
        CHECK(*lo == 0.0);
        CHECK(*hi == 1.0);
        // monotone rescale preserves the argmax pixel
        const auto& band = frame.band(order[size_t(c)]).values;
        const size_t band_arg =
            size_t(std::max_element(band.begin(), band.end()) - band.begin());
        const size_t ch_arg =
            size_t(std::max_element(ch.begin(), ch.end()) - ch.begin());
        CHECK(band_arg == ch_arg);
    }
}

TEST_CASE("make_pseudo_rgb flags constant channels") {
    RasterGrid flat(8, 8, 42.0);
    RasterGrid vary(8, 8, 0.0);
    for (size_t i = 0; i < vary.pixel_count(); ++i)
        vary.values[i] = double(i);
    auto frame = MultispectralFrame::from_aligned(flat, vary, vary, vary);
    PseudoRgbResult rgb = make_pseudo_rgb(frame);
    CHECK(rgb.constant_channel[0]);
    CHECK(!rgb.constant_channel[1]);
    for (double v : rgb.image.channels[0]) CHECK(v == 0.0);
}

TEST_CASE("alignment chain JSON round-trips") {
    AlignmentChain chain;
    chain.to_reference[BandId::NIR] = Homography3x3::identity();
    chain.to_reference[BandId::RED] = Homography3x3::translation(1.5, -0.25);
    Homography3x3 h;
    h.m = {0.99, 0.01, 2.0, -0.01, 0.99, -3.0, 1e-5, -2e-5, 1.0};
    chain.to_reference[BandId::GRE] = h;
    chain.to_reference[BandId::REG] = h.inverse();
    chain.valid_extent = {3, 4, 100, 90};
    chain.correlations[BandId::RED] = 0.987;

    AlignmentChain back = AlignmentChain::from_json(chain.to_json());
    CHECK(back.valid_extent.x == 3);
    CHECK(back.valid_extent.h == 90);
    for (BandId b : kAllBands)
        for (int i = 0; i < 9; ++i)
            CHECK(back.to_reference.at(b).m[i] ==
                  doctest::Approx(chain.to_reference.at(b).m[i])
                      .epsilon(1e-15));
    CHECK(back.correlations.at(BandId::RED) == 0.987);
}

TEST_CASE("largest_valid_rect finds the biggest all-valid rectangle") {
    // 6x4 mask with an L-shaped hole
    const int w = 6, h = 4;
    std::vector<uint8_t> mask(size_t(w) * h, 1);
    mask[0] = 0;            // (0,0)
    mask[size_t(3) * w + 5] = 0; // (5,3)
    Rect r = largest_valid_rect(mask, w, h);
    CHECK(r.w * r.h == 16); // the 4x4 block spanning columns 1..4
}
