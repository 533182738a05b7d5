#include "crowncut/raster.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace crowncut {

const char* band_name(BandId b) {
    switch (b) {
        case BandId::GRE: return "GRE";
        case BandId::RED: return "RED";
        case BandId::REG: return "REG";
        case BandId::NIR: return "NIR";
    }
    return "?";
}

BandId band_from_name(const std::string& name) {
    std::string up;
    up.reserve(name.size());
    for (char c : name) up.push_back(char(std::toupper(static_cast<unsigned char>(c))));
    if (up == "GRE") return BandId::GRE;
    if (up == "RED") return BandId::RED;
    if (up == "REG") return BandId::REG;
    if (up == "NIR") return BandId::NIR;
    throw MalformedRaster("unknown band name: " + name);
}

void validate(const RasterGrid& g, const std::string& what) {
    if (g.width < 1 || g.height < 1)
        throw MalformedRaster(what + ": empty extent");
    if (g.values.size() != size_t(g.width) * size_t(g.height))
        throw MalformedRaster(what + ": value count does not match extent");
    for (double v : g.values) {
        if (!std::isfinite(v) || v < 0.0)
            throw MalformedRaster(what + ": non-finite or negative intensity");
    }
}

MultispectralFrame MultispectralFrame::from_aligned(RasterGrid gre,
                                                    RasterGrid red,
                                                    RasterGrid reg,
                                                    RasterGrid nir) {
    if (!gre.same_shape(red) || !gre.same_shape(reg) || !gre.same_shape(nir))
        throw ShapeMismatch("frame bands must share one extent");
    validate(gre, "GRE");
    validate(red, "RED");
    validate(reg, "REG");
    validate(nir, "NIR");
    MultispectralFrame f;
    f.bands_[size_t(BandId::GRE)] = std::move(gre);
    f.bands_[size_t(BandId::RED)] = std::move(red);
    f.bands_[size_t(BandId::REG)] = std::move(reg);
    f.bands_[size_t(BandId::NIR)] = std::move(nir);
    return f;
}

double MultispectralFrame::max_value() const {
    double m = 0.0;
    for (const auto& b : bands_) m = std::max(m, b.max_value);
    return m;
}

NormalizedField red_normalize(const MultispectralFrame& frame,
                              double red_floor) {
    if (!(red_floor > 0.0 && red_floor < 1.0))
        throw InvalidConfig("red_floor must lie in (0, 1)");
    const double floor_abs = red_floor * frame.max_value();
    const RasterGrid& gre = frame.band(BandId::GRE);
    const RasterGrid& red = frame.band(BandId::RED);
    const RasterGrid& reg = frame.band(BandId::REG);
    const RasterGrid& nir = frame.band(BandId::NIR);

    NormalizedField out;
    out.width = frame.width();
    out.height = frame.height();
    out.vec.assign(frame.pixel_count(), {0.0, 0.0, 0.0, 0.0});
    out.unreliable.assign(frame.pixel_count(), 0);

    for (size_t i = 0; i < frame.pixel_count(); ++i) {
        const double r = red.values[i];
        if (r < floor_abs) {
            out.unreliable[i] = 1;
            continue;
        }
        out.vec[i] = {gre.values[i] / r, 1.0, reg.values[i] / r,
                      nir.values[i] / r};
    }
    return out;
}

} // namespace crowncut
