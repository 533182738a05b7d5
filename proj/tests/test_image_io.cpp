#include <doctest.h>

#include "crowncut/image_io.hpp"
#include "crowncut/rng.hpp"
#include "helpers.hpp"

using namespace crowncut;
using testutil::TempDir;

TEST_CASE("PGM decode: 16-bit values pass through unscaled") {
    TempDir dir("pgm16");
    // 2x2, maxval 300 -> two bytes per sample, big-endian
    std::vector<uint8_t> bytes = {'P', '5', '\n', '2', ' ', '2', '\n',
                                  '3', '0', '0', '\n'};
    for (uint16_t v : {0, 100, 200, 300}) {
        bytes.push_back(uint8_t(v >> 8));
        bytes.push_back(uint8_t(v & 0xff));
    }
    const auto p = dir.path() / "a.pgm";
    testutil::write_file(p, bytes);
    RasterGrid g = load_band(p, BandId::GRE);
    CHECK(g.width == 2);
    CHECK(g.height == 2);
    CHECK(g.values == std::vector<double>{0, 100, 200, 300});
    CHECK(g.max_value == 65535.0);
}

TEST_CASE("PGM decode: 8-bit stays in [0,255]") {
    TempDir dir("pgm8");
    std::vector<uint8_t> bytes = {'P', '5', '\n', '2', ' ', '1', '\n',
                                  '2', '5', '5', '\n', 7, 255};
    const auto p = dir.path() / "b.pgm";
    testutil::write_file(p, bytes);
    RasterGrid g = load_raster(p);
    CHECK(g.values == std::vector<double>{7, 255});
    CHECK(g.max_value == 255.0);
}

TEST_CASE("PGM decode: truncated payload is malformed") {
    TempDir dir("trunc");
    std::vector<uint8_t> bytes = {'P', '5', '\n', '4', ' ', '4', '\n',
                                  '2', '5', '5', '\n', 1, 2, 3};
    const auto p = dir.path() / "t.pgm";
    testutil::write_file(p, bytes);
    CHECK_THROWS_AS(load_raster(p), MalformedRaster);
}

TEST_CASE("missing file and bad magic") {
    TempDir dir("missing");
    CHECK_THROWS_AS(load_raster(dir.path() / "nope.pgm"), MissingFile);
    testutil::write_file(dir.path() / "bad.pgm", {'P', '2', ' ', '1'});
    CHECK_THROWS_AS(load_raster(dir.path() / "bad.pgm"), MalformedRaster);
}

TEST_CASE("mask round-trips bit-exactly") {
    TempDir dir("mask");
    SegmentationMask zeros(4, 4, 0);
    SegmentationMask ones(4, 4, 1);
    SegmentationMask checker(8, 8, 0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) checker.at(x, y) = uint8_t((x + y) % 2);

    int i = 0;
    for (const auto& m : {zeros, ones, checker}) {
        const auto p = dir.path() / ("m" + std::to_string(i++) + ".pgm");
        save_mask(m, p);
        SegmentationMask back = load_mask(p);
        CHECK(back.width == m.width);
        CHECK(back.labels == m.labels);
    }
}

TEST_CASE("raster save/load round-trips integer data (property)") {
    TempDir dir("round");
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        const bool wide = trial % 2 == 1;
        RasterGrid g(5, 7, 0.0, wide ? 65535.0 : 255.0);
        for (auto& v : g.values)
            v = double(rng.next_below(wide ? 65536 : 256));
        const auto p = dir.path() / ("r" + std::to_string(trial) + ".pgm");
        save_pgm(g, p);
        RasterGrid back = load_raster(p);
        CHECK(back.values == g.values);
        CHECK(back.max_value == g.max_value);

        // decode -> encode -> decode is the identity
        const auto p2 = dir.path() / "again.pgm";
        save_pgm(back, p2);
        CHECK(load_raster(p2).values == back.values);
    }
}

TEST_CASE("TIFF decode: 8/16-bit, both byte orders") {
    TempDir dir("tiff");
    std::vector<uint16_t> px = {0, 1, 2, 3, 40, 500};
    for (bool little : {true, false}) {
        for (int bits : {8, 16}) {
            std::vector<uint16_t> vals = px;
            if (bits == 8)
                for (auto& v : vals) v = uint16_t(v % 256);
            const auto p = dir.path() / (std::string("t") +
                                         (little ? "le" : "be") +
                                         std::to_string(bits) + ".tif");
            testutil::write_file(p, testutil::make_tiff(vals, 3, 2, bits,
                                                        little));
            RasterGrid g = load_raster(p);
            CHECK(g.width == 3);
            CHECK(g.height == 2);
            CHECK(g.max_value == (bits == 16 ? 65535.0 : 255.0));
            for (size_t i = 0; i < vals.size(); ++i)
                CHECK(g.values[i] == double(vals[i]));
        }
    }
}

TEST_CASE("TIFF decode: compressed data is rejected") {
    TempDir dir("tiffc");
    auto bytes = testutil::make_tiff({1, 2, 3, 4}, 2, 2, 8, true);
    // compression entry value lives at a fixed spot: patch tag 259's value.
    // Entries start at 8 + data; entry 3 (index 3) holds compression.
    const size_t ifd = 8 + 4;
    const size_t entry_off = ifd + 2 + 3 * 12 + 8;
    bytes[entry_off] = 5; // LZW
    const auto p = dir.path() / "c.tif";
    testutil::write_file(p, bytes);
    CHECK_THROWS_AS(load_raster(p), MalformedRaster);
}

TEST_CASE("scene scanning follows the band suffix convention") {
    TempDir dir("scan");
    RasterGrid g(2, 2, 5.0);
    for (const char* b : {"GRE", "RED", "REG", "NIR"})
        save_pgm(g, dir.path() / ("plot1_" + std::string(b) + ".pgm"));
    // lower-case suffix also accepted
    for (const char* b : {"gre", "red", "reg", "nir"})
        save_pgm(g, dir.path() / ("plot2_" + std::string(b) + ".pgm"));
    // incomplete scene ignored
    save_pgm(g, dir.path() / "plot3_GRE.pgm");

    auto scenes = scan_scenes(dir.path());
    REQUIRE(scenes.size() == 2);
    CHECK(scenes[0].stem == "plot1");
    CHECK(scenes[1].stem == "plot2");
    CHECK(scenes[0].bands.size() == 4);
    auto bands = load_scene_bands(scenes[0]);
    CHECK(bands.at(BandId::NIR).values == g.values);
}
