#include "crowncut/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>

namespace fs = std::filesystem;

namespace crowncut {

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<uint8_t> read_file(const fs::path& path) {
    if (!fs::exists(path)) throw MissingFile(path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open " + path.string());
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    return data;
}

// ---- PGM ----

// Skips PNM whitespace and '#' comments; returns the next unsigned integer.
long pnm_int(const std::vector<uint8_t>& d, size_t& pos, const fs::path& path) {
    while (pos < d.size()) {
        if (d[pos] == '#') {
            while (pos < d.size() && d[pos] != '\n') ++pos;
        } else if (std::isspace(d[pos])) {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= d.size() || !std::isdigit(d[pos]))
        throw MalformedRaster(path.string() + ": bad PNM header");
    long v = 0;
    while (pos < d.size() && std::isdigit(d[pos])) {
        v = v * 10 + (d[pos] - '0');
        if (v > 1000000000)
            throw MalformedRaster(path.string() + ": header value out of range");
        ++pos;
    }
    return v;
}

RasterGrid load_pgm(const std::vector<uint8_t>& d, const fs::path& path) {
    if (d.size() < 2 || d[0] != 'P' || d[1] != '5')
        throw MalformedRaster(path.string() + ": not a P5 PGM");
    size_t pos = 2;
    long w = pnm_int(d, pos, path);
    long h = pnm_int(d, pos, path);
    long maxval = pnm_int(d, pos, path);
    if (pos >= d.size() || !std::isspace(d[pos]))
        throw MalformedRaster(path.string() + ": bad PNM header");
    ++pos; // single whitespace before binary payload
    if (w < 1 || h < 1)
        throw MalformedRaster(path.string() + ": bad dimensions");
    if (maxval < 1 || maxval > 65535)
        throw UnsupportedBitDepth(path.string() + ": maxval " +
                                  std::to_string(maxval));
    const size_t n = size_t(w) * size_t(h);
    const int bytes = maxval > 255 ? 2 : 1;
    if (d.size() - pos < n * size_t(bytes))
        throw MalformedRaster(path.string() + ": truncated pixel data");

    RasterGrid g(int(w), int(h), 0.0, double(maxval > 255 ? 65535 : 255));
    if (bytes == 1) {
        for (size_t i = 0; i < n; ++i) g.values[i] = double(d[pos + i]);
    } else {
        for (size_t i = 0; i < n; ++i) {
            g.values[i] =
                double((unsigned(d[pos + 2 * i]) << 8) | d[pos + 2 * i + 1]);
        }
    }
    return g;
}

// ---- TIFF (uncompressed, single-band grayscale) ----

struct TiffReader {
    const std::vector<uint8_t>& d;
    const fs::path& path;
    bool little = true;

    uint16_t u16(size_t off) const {
        check(off, 2);
        return little ? uint16_t(d[off] | (d[off + 1] << 8))
                      : uint16_t((d[off] << 8) | d[off + 1]);
    }
    uint32_t u32(size_t off) const {
        check(off, 4);
        if (little)
            return uint32_t(d[off]) | (uint32_t(d[off + 1]) << 8) |
                   (uint32_t(d[off + 2]) << 16) | (uint32_t(d[off + 3]) << 24);
        return (uint32_t(d[off]) << 24) | (uint32_t(d[off + 1]) << 16) |
               (uint32_t(d[off + 2]) << 8) | uint32_t(d[off + 3]);
    }
    void check(size_t off, size_t len) const {
        if (off + len > d.size())
            throw MalformedRaster(path.string() + ": truncated TIFF");
    }
};

struct TiffEntry {
    uint16_t type = 0;
    uint32_t count = 0;
    size_t value_off = 0; // offset of the value field itself
};

uint32_t tiff_entry_scalar(const TiffReader& r, const TiffEntry& e,
                           uint32_t index = 0) {
    if (e.type != 3 && e.type != 4)
        throw MalformedRaster(r.path.string() + ": unsupported TIFF entry type");
    size_t elem = e.type == 3 ? 2 : 4; // SHORT or LONG
    size_t base = e.value_off;
    if (e.count * elem > 4) base = r.u32(e.value_off); // stored out of line
    size_t off = base + index * elem;
    return elem == 2 ? r.u16(off) : r.u32(off);
}

RasterGrid load_tiff(const std::vector<uint8_t>& d, const fs::path& path) {
    if (d.size() < 8)
        throw MalformedRaster(path.string() + ": truncated TIFF");
    TiffReader r{d, path};
    if (d[0] == 'I' && d[1] == 'I')
        r.little = true;
    else if (d[0] == 'M' && d[1] == 'M')
        r.little = false;
    else
        throw MalformedRaster(path.string() + ": not a TIFF");
    if (r.u16(2) != 42)
        throw MalformedRaster(path.string() + ": bad TIFF magic");

    size_t ifd = r.u32(4);
    uint16_t nent = r.u16(ifd);
    std::map<uint16_t, TiffEntry> tags;
    for (uint16_t i = 0; i < nent; ++i) {
        size_t off = ifd + 2 + size_t(i) * 12;
        uint16_t tag = r.u16(off);
        TiffEntry e;
        e.type = r.u16(off + 2);
        e.count = r.u32(off + 4);
        e.value_off = off + 8;
        tags[tag] = e;
    }

    auto get = [&](uint16_t tag, uint32_t fallback,
                   bool required) -> uint32_t {
        auto it = tags.find(tag);
        if (it == tags.end()) {
            if (required)
                throw MalformedRaster(path.string() + ": TIFF tag " +
                                      std::to_string(tag) + " missing");
            return fallback;
        }
        return tiff_entry_scalar(r, it->second);
    };

    uint32_t width = get(256, 0, true);
    uint32_t height = get(257, 0, true);
    uint32_t bits = get(258, 1, false);
    uint32_t compression = get(259, 1, false);
    uint32_t samples = get(277, 1, false);
    uint32_t rows_per_strip = get(278, height, false);

    if (width < 1 || height < 1)
        throw MalformedRaster(path.string() + ": bad TIFF dimensions");
    if (compression != 1)
        throw MalformedRaster(path.string() + ": compressed TIFF unsupported");
    if (samples != 1)
        throw MalformedRaster(path.string() + ": multi-sample TIFF unsupported");
    if (bits != 8 && bits != 16)
        throw UnsupportedBitDepth(path.string() + ": " + std::to_string(bits) +
                                  " bits per sample");

    auto strips_it = tags.find(273);
    if (strips_it == tags.end())
        throw MalformedRaster(path.string() + ": TIFF strip offsets missing");
    const TiffEntry& strips = strips_it->second;

    RasterGrid g(int(width), int(height), 0.0, bits == 16 ? 65535.0 : 255.0);
    const size_t bpp = bits / 8;
    size_t out = 0;
    for (uint32_t s = 0; s < strips.count; ++s) {
        size_t off = tiff_entry_scalar(r, strips, s);
        uint32_t rows = std::min<uint32_t>(rows_per_strip,
                                           height - s * rows_per_strip);
        size_t n = size_t(rows) * width;
        r.check(off, n * bpp);
        for (size_t i = 0; i < n; ++i) {
            if (bpp == 1)
                g.values[out++] = double(d[off + i]);
            else
                g.values[out++] = double(r.u16(off + 2 * i));
        }
    }
    if (out != g.pixel_count())
        throw MalformedRaster(path.string() + ": TIFF strip data incomplete");
    return g;
}

bool is_tiff_ext(const std::string& ext) {
    return ext == ".tif" || ext == ".tiff";
}

} // namespace

RasterGrid load_raster(const fs::path& path) {
    std::vector<uint8_t> data = read_file(path);
    std::string ext = lower(path.extension().string());
    if (ext == ".pgm") return load_pgm(data, path);
    if (is_tiff_ext(ext)) return load_tiff(data, path);
    // No extension hint: sniff the magic bytes.
    if (data.size() >= 2 && data[0] == 'P' && data[1] == '5')
        return load_pgm(data, path);
    if (data.size() >= 2 && (data[0] == 'I' || data[0] == 'M'))
        return load_tiff(data, path);
    throw MalformedRaster(path.string() + ": unrecognized raster format");
}

RasterGrid load_band(const fs::path& path, BandId band) {
    RasterGrid g = load_raster(path);
    validate(g, std::string("band ") + band_name(band));
    return g;
}

void save_pgm(const RasterGrid& grid, const fs::path& path) {
    const bool wide = grid.max_value > 255.0;
    const long maxval = wide ? 65535 : 255;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "P5\n" << grid.width << " " << grid.height << "\n" << maxval << "\n";
    std::vector<uint8_t> buf;
    buf.reserve(grid.pixel_count() * (wide ? 2 : 1));
    for (double v : grid.values) {
        long q = std::lround(std::clamp(v, 0.0, double(maxval)));
        if (wide) {
            buf.push_back(uint8_t(q >> 8));
            buf.push_back(uint8_t(q & 0xff));
        } else {
            buf.push_back(uint8_t(q));
        }
    }
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size()));
    if (!out) throw IoFailure("short write to " + path.string());
}

void save_mask(const SegmentationMask& mask, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    std::vector<uint8_t> buf(mask.pixel_count());
    for (size_t i = 0; i < mask.pixel_count(); ++i)
        buf[i] = mask.labels[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size()));
    if (!out) throw IoFailure("short write to " + path.string());
}

SegmentationMask load_mask(const fs::path& path) {
    RasterGrid g = load_raster(path);
    SegmentationMask m(g.width, g.height);
    for (size_t i = 0; i < g.pixel_count(); ++i)
        m.labels[i] = g.values[i] >= 128.0 ? 1 : 0;
    return m;
}

void save_ppm(const PseudoRgbImage& img, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoFailure("cannot write " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    const size_t n = size_t(img.width) * size_t(img.height);
    std::vector<uint8_t> buf(n * 3);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            buf[3 * i + c] = uint8_t(
                std::lround(std::clamp(img.channels[c][i], 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size()));
    if (!out) throw IoFailure("short write to " + path.string());
}

PseudoRgbImage load_ppm(const fs::path& path) {
    std::vector<uint8_t> d = read_file(path);
    if (d.size() < 2 || d[0] != 'P' || d[1] != '6')
        throw MalformedRaster(path.string() + ": not a P6 PPM");
    size_t pos = 2;
    long w = pnm_int(d, pos, path);
    long h = pnm_int(d, pos, path);
    long maxval = pnm_int(d, pos, path);
    if (pos >= d.size() || !std::isspace(d[pos]))
        throw MalformedRaster(path.string() + ": bad PNM header");
    ++pos;
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
        throw MalformedRaster(path.string() + ": unsupported P6 header");
    const size_t n = size_t(w) * size_t(h);
    if (d.size() - pos < n * 3)
        throw MalformedRaster(path.string() + ": truncated pixel data");
    PseudoRgbImage img;
    img.width = int(w);
    img.height = int(h);
    for (int c = 0; c < 3; ++c) img.channels[c].assign(n, 0.0);
    for (size_t i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
            img.channels[c][i] = double(d[pos + 3 * i + c]) / double(maxval);
    return img;
}

std::vector<ScenePaths> scan_scenes(const fs::path& root) {
    if (!fs::exists(root)) throw MissingFile(root.string());
    // stem -> (dir, band -> path)
    std::map<std::string, ScenePaths> by_stem;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const fs::path& p = entry.path();
        std::string ext = lower(p.extension().string());
        if (ext != ".pgm" && !is_tiff_ext(ext)) continue;
        std::string name = p.stem().string();
        size_t us = name.rfind('_');
        if (us == std::string::npos || name.size() - us - 1 != 3) continue;
        std::string suffix = lower(name.substr(us + 1));
        BandId band;
        if (suffix == "gre") band = BandId::GRE;
        else if (suffix == "red") band = BandId::RED;
        else if (suffix == "reg") band = BandId::REG;
        else if (suffix == "nir") band = BandId::NIR;
        else continue;
        std::string stem = name.substr(0, us);
        ScenePaths& sp = by_stem[stem];
        sp.stem = stem;
        sp.dir = p.parent_path();
        sp.bands[band] = p;
    }
    std::vector<ScenePaths> out;
    for (auto& [stem, sp] : by_stem)
        if (sp.bands.size() == 4) out.push_back(std::move(sp));
    return out; // std::map iteration is already stem-sorted
}

std::map<BandId, RasterGrid> load_scene_bands(const ScenePaths& scene) {
    std::map<BandId, RasterGrid> out;
    for (const auto& [band, path] : scene.bands)
        out.emplace(band, load_band(path, band));
    return out;
}

} // namespace crowncut
