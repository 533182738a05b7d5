#pragma once

#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crowncut/raster.hpp"

namespace testutil {

// Unique temp directory, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("crowncut_test_" + tag + "_" + std::to_string(::getpid()) +
                 "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p,
                       const std::vector<uint8_t>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              std::streamsize(bytes.size()));
}

// Minimal uncompressed grayscale TIFF writer (test-side only, independent of
// the library's reader).
inline std::vector<uint8_t> make_tiff(const std::vector<uint16_t>& pixels,
                                      int w, int h, int bits,
                                      bool little_endian) {
    std::vector<uint8_t> d;
    auto put16 = [&](uint16_t v) {
        if (little_endian) {
            d.push_back(uint8_t(v & 0xff));
            d.push_back(uint8_t(v >> 8));
        } else {
            d.push_back(uint8_t(v >> 8));
            d.push_back(uint8_t(v & 0xff));
        }
    };
    auto put32 = [&](uint32_t v) {
        if (little_endian) {
            put16(uint16_t(v & 0xffff));
            put16(uint16_t(v >> 16));
        } else {
            put16(uint16_t(v >> 16));
            put16(uint16_t(v & 0xffff));
        }
    };
    d.push_back(little_endian ? 'I' : 'M');
    d.push_back(little_endian ? 'I' : 'M');
    put16(42);
    const uint32_t data_bytes = uint32_t(pixels.size()) * (bits / 8);
    const uint32_t ifd_off = 8 + data_bytes;
    put32(ifd_off);
    // pixel strip right after the header
    for (uint16_t p : pixels) {
        if (bits == 8)
            d.push_back(uint8_t(p));
        else
            put16(p);
    }
    // IFD: 8 entries
    put16(8);
    auto entry = [&](uint16_t tag, uint16_t type, uint32_t count,
                     uint32_t value) {
        put16(tag);
        put16(type);
        put32(count);
        if (type == 3) { // SHORT packed into the first two value bytes
            put16(uint16_t(value));
            put16(0);
        } else {
            put32(value);
        }
    };
    entry(256, 4, 1, uint32_t(w));       // width
    entry(257, 4, 1, uint32_t(h));       // length
    entry(258, 3, 1, uint32_t(bits));    // bits per sample
    entry(259, 3, 1, 1);                 // compression: none
    entry(262, 3, 1, 1);                 // photometric: BlackIsZero
    entry(273, 4, 1, 8);                 // strip offset
    entry(277, 3, 1, 1);                 // samples per pixel
    entry(279, 4, 1, data_bytes);        // strip byte count
    put32(0);                            // next IFD
    return d;
}

inline crowncut::RasterGrid constant_grid(int w, int h, double v,
                                          double maxv = 255.0) {
    crowncut::RasterGrid g(w, h, v, maxv);
    return g;
}

} // namespace testutil
