#include "crowncut/registration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "crowncut/kernels.hpp"

namespace crowncut {

namespace {

using json = nlohmann::json;

// 2x2 box downsample (truncates odd edges).
RasterGrid downsample2(const RasterGrid& g) {
    RasterGrid out(g.width / 2, g.height / 2, 0.0, g.max_value);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            out.at(x, y) = 0.25 * (g.at(2 * x, 2 * y) + g.at(2 * x + 1, 2 * y) +
                                   g.at(2 * x, 2 * y + 1) +
                                   g.at(2 * x + 1, 2 * y + 1));
    return out;
}

RasterGrid gradient_magnitude(const RasterGrid& g) {
    RasterGrid out(g.width, g.height, 0.0, g.max_value);
    const int w = g.width, h = g.height;
#pragma omp parallel for schedule(static)
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int xl = std::max(0, x - 1), xr = std::min(w - 1, x + 1);
            const int yu = std::max(0, y - 1), yd = std::min(h - 1, y + 1);
            const double gx = 0.5 * (g.at(xr, y) - g.at(xl, y));
            const double gy = 0.5 * (g.at(x, yd) - g.at(x, yu));
            out.at(x, y) = std::sqrt(gx * gx + gy * gy);
        }
    }
    return out;
}

RasterGrid blur3(const RasterGrid& g) {
    RasterGrid out(g.width, g.height, 0.0, g.max_value);
    kernels::box_blur3(g.values.data(), g.width, g.height, out.values.data());
    return out;
}

double grid_variance(const RasterGrid& g) {
    double mean = 0.0;
    for (double v : g.values) mean += v;
    mean /= double(g.pixel_count());
    double var = 0.0;
    for (double v : g.values) var += (v - mean) * (v - mean);
    return var / double(g.pixel_count());
}

// Warp parameterization: p maps fixed coordinates to moving coordinates,
//   u = ((1+p0) x + p1 y + p2) / D,  v = (p3 x + (1+p4) y + p5) / D,
//   D = p6 x + p7 y + 1.
struct WarpParams {
    std::array<double, 8> p{0, 0, 0, 0, 0, 0, 0, 0};

    Homography3x3 to_matrix() const {
        Homography3x3 h;
        h.m = {1 + p[0], p[1], p[2], p[3], 1 + p[4], p[5], p[6], p[7], 1};
        return h;
    }

    // Rescale to the next finer pyramid level: H_fine = S H S^-1, S=diag(2,2,1)
    void to_finer() {
        p[2] *= 2.0;
        p[5] *= 2.0;
        p[6] *= 0.5;
        p[7] *= 0.5;
    }
};

// Per-row partial sums merged in row order keep the accumulation
// deterministic across thread counts.
struct GnAccum {
    double hessian[36] = {}; // upper triangle of 8x8
    double rhs[8] = {};
    double sum_f = 0, sum_m = 0, sum_ff = 0, sum_mm = 0, sum_fm = 0;
    double count = 0;

    void merge(const GnAccum& o) {
        for (int i = 0; i < 36; ++i) hessian[i] += o.hessian[i];
        for (int i = 0; i < 8; ++i) rhs[i] += o.rhs[i];
        sum_f += o.sum_f;
        sum_m += o.sum_m;
        sum_ff += o.sum_ff;
        sum_mm += o.sum_mm;
        sum_fm += o.sum_fm;
        count += o.count;
    }
};

// Solve the (damped) 8x8 normal equations by Gaussian elimination with
// partial pivoting.
bool solve8(const double htri[36], const double rhs[8], double out[8]) {
    double a[8][9];
    // rebuild full matrix from the packed upper triangle
    double full[8][8];
    int k = 0;
    for (int i = 0; i < 8; ++i)
        for (int j = i; j < 8; ++j) {
            full[i][j] = htri[k];
            full[j][i] = htri[k];
            ++k;
        }
    double trace = 0.0;
    for (int i = 0; i < 8; ++i) trace += full[i][i];
    const double damp = 1e-9 * (trace > 0 ? trace : 1.0);
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) a[i][j] = full[i][j];
        a[i][i] += damp;
        a[i][8] = rhs[i];
    }
    for (int col = 0; col < 8; ++col) {
        int piv = col;
        for (int r = col + 1; r < 8; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
        if (std::fabs(a[piv][col]) < 1e-14) return false;
        if (piv != col)
            for (int j = 0; j < 9; ++j) std::swap(a[piv][j], a[col][j]);
        for (int r = 0; r < 8; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int j = col; j < 9; ++j) a[r][j] -= f * a[col][j];
        }
    }
    for (int i = 0; i < 8; ++i) out[i] = a[i][8] / a[i][i];
    return true;
}

struct LevelData {
    RasterGrid fixed_gm;
    RasterGrid moving_gm;
    RasterGrid moving_gx; // spatial gradient of moving_gm
    RasterGrid moving_gy;
};

double sample_or(const RasterGrid& g, double u, double v, bool& ok) {
    constexpr double tol = 1e-9;
    if (u < -tol || v < -tol || u > g.width - 1.0 + tol ||
        v > g.height - 1.0 + tol) {
        ok = false;
        return 0.0;
    }
    if (u < 0.0) u = 0.0;
    if (v < 0.0) v = 0.0;
    ok = true;
    int x0 = std::min(int(u), g.width - 2);
    int y0 = std::min(int(v), g.height - 2);
    const double fx = u - x0, fy = v - y0;
    const double top = g.at(x0, y0) + fx * (g.at(x0 + 1, y0) - g.at(x0, y0));
    const double bot =
        g.at(x0, y0 + 1) + fx * (g.at(x0 + 1, y0 + 1) - g.at(x0, y0 + 1));
    return top + fy * (bot - top);
}

// One Gauss-Newton pass at a fixed level; returns the Pearson correlation of
// the gradient-magnitude images under the current warp and accumulates the
// normal equations of the next step.
double gn_accumulate(const LevelData& lv, const WarpParams& wp, GnAccum& total) {
    const int w = lv.fixed_gm.width, h = lv.fixed_gm.height;
    const auto& p = wp.p;
    std::vector<GnAccum> rows(h);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < h; ++y) {
        GnAccum& acc = rows[y];
        for (int x = 0; x < w; ++x) {
            const double D = p[6] * x + p[7] * y + 1.0;
            if (D == 0.0) continue;
            const double u = ((1 + p[0]) * x + p[1] * y + p[2]) / D;
            const double v = (p[3] * x + (1 + p[4]) * y + p[5]) / D;
            bool ok = false;
            const double mw = sample_or(lv.moving_gm, u, v, ok);
            if (!ok) continue;
            bool okg = false;
            const double gx = sample_or(lv.moving_gx, u, v, okg);
            const double gy = sample_or(lv.moving_gy, u, v, okg);
            const double f = lv.fixed_gm.at(x, y);

            acc.sum_f += f;
            acc.sum_m += mw;
            acc.sum_ff += f * f;
            acc.sum_mm += mw * mw;
            acc.sum_fm += f * mw;
            acc.count += 1.0;

            // steepest-descent image
            const double du[8] = {x / D, y / D,      1.0 / D, 0,
                                  0,     0,          -u * x / D, -u * y / D};
            const double dv[8] = {0,     0,          0,       x / D,
                                  y / D, 1.0 / D,    -v * x / D, -v * y / D};
            double sd[8];
            for (int i = 0; i < 8; ++i) sd[i] = gx * du[i] + gy * dv[i];
            const double e = f - mw;
            int k = 0;
            for (int i = 0; i < 8; ++i) {
                acc.rhs[i] += sd[i] * e;
                for (int j = i; j < 8; ++j) acc.hessian[k++] += sd[i] * sd[j];
            }
        }
    }
    for (int y = 0; y < h; ++y) total.merge(rows[y]);

    if (total.count < 64.0) return -1.0;
    const double n = total.count;
    const double cf = total.sum_ff - total.sum_f * total.sum_f / n;
    const double cm = total.sum_mm - total.sum_m * total.sum_m / n;
    const double cfm = total.sum_fm - total.sum_f * total.sum_m / n;
    if (cf <= 0.0 || cm <= 0.0) return -1.0;
    return cfm / std::sqrt(cf * cm);
}

const std::array<std::pair<BandId, BandId>, 3> kPairOrder{{
    {BandId::RED, BandId::GRE},
    {BandId::GRE, BandId::REG},
    {BandId::REG, BandId::NIR},
}};

} // namespace

Homography3x3 Homography3x3::translation(double dx, double dy) {
    Homography3x3 h;
    h.m = {1, 0, dx, 0, 1, dy, 0, 0, 1};
    return h;
}

std::array<double, 2> Homography3x3::apply(double x, double y) const {
    const double d = m[6] * x + m[7] * y + m[8];
    if (d == 0.0) throw CrownError("homography maps point to infinity");
    return {(m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d};
}

double Homography3x3::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography3x3 Homography3x3::inverse() const {
    const double d = det();
    if (std::fabs(d) < 1e-12) throw CrownError("singular homography");
    Homography3x3 r;
    r.m[0] = (m[4] * m[8] - m[5] * m[7]) / d;
    r.m[1] = (m[2] * m[7] - m[1] * m[8]) / d;
    r.m[2] = (m[1] * m[5] - m[2] * m[4]) / d;
    r.m[3] = (m[5] * m[6] - m[3] * m[8]) / d;
    r.m[4] = (m[0] * m[8] - m[2] * m[6]) / d;
    r.m[5] = (m[2] * m[3] - m[0] * m[5]) / d;
    r.m[6] = (m[3] * m[7] - m[4] * m[6]) / d;
    r.m[7] = (m[1] * m[6] - m[0] * m[7]) / d;
    r.m[8] = (m[0] * m[4] - m[1] * m[3]) / d;
    return r.normalized();
}

Homography3x3 Homography3x3::compose(const Homography3x3& rhs) const {
    Homography3x3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += m[3 * i + k] * rhs.m[3 * k + j];
            r.m[3 * i + j] = s;
        }
    return r.normalized();
}

Homography3x3 Homography3x3::normalized() const {
    Homography3x3 r = *this;
    if (r.m[8] == 0.0) throw CrownError("homography not normalizable");
    for (double& v : r.m) v /= m[8];
    r.m[8] = 1.0;
    return r;
}

HomographyEstimate estimate_homography(const RasterGrid& moving,
                                       const RasterGrid& fixed,
                                       const RegistrationConfig& cfg) {
    if (!moving.same_shape(fixed))
        throw ShapeMismatch("estimate_homography inputs must share dimensions");
    if (cfg.max_iters < 1 || cfg.eps <= 0.0 || cfg.pyramid_levels < 1)
        throw InvalidConfig("registration config");
    if (grid_variance(moving) <= 0.0)
        throw DegenerateImage("moving image has zero variance");
    if (grid_variance(fixed) <= 0.0)
        throw DegenerateImage("fixed image has zero variance");

    // Pyramid of blurred intensities; gradient magnitude per level.
    std::vector<LevelData> levels;
    RasterGrid mb = blur3(moving);
    RasterGrid fb = blur3(fixed);
    for (int l = 0; l < cfg.pyramid_levels; ++l) {
        if (l > 0) {
            if (mb.width < 32 || mb.height < 32) break; // too coarse
            mb = downsample2(mb);
            fb = downsample2(fb);
        }
        LevelData lv;
        lv.moving_gm = gradient_magnitude(mb);
        lv.fixed_gm = gradient_magnitude(fb);
        lv.moving_gx = RasterGrid(mb.width, mb.height);
        lv.moving_gy = RasterGrid(mb.width, mb.height);
        for (int y = 0; y < mb.height; ++y) {
            for (int x = 0; x < mb.width; ++x) {
                const int xl = std::max(0, x - 1),
                          xr = std::min(mb.width - 1, x + 1);
                const int yu = std::max(0, y - 1),
                          yd = std::min(mb.height - 1, y + 1);
                lv.moving_gx.at(x, y) =
                    0.5 * (lv.moving_gm.at(xr, y) - lv.moving_gm.at(xl, y));
                lv.moving_gy.at(x, y) =
                    0.5 * (lv.moving_gm.at(x, yd) - lv.moving_gm.at(x, yu));
            }
        }
        levels.push_back(std::move(lv));
    }

    WarpParams wp;
    double corr = -1.0;
    for (int li = int(levels.size()) - 1; li >= 0; --li) {
        const LevelData& lv = levels[li];
        double prev = -2.0;
        for (int it = 0; it < cfg.max_iters; ++it) {
            GnAccum acc;
            corr = gn_accumulate(lv, wp, acc);
            if (corr <= -1.0) break;
            if (std::fabs(corr - prev) < cfg.eps) break;
            prev = corr;
            double step[8];
            if (!solve8(acc.hessian, acc.rhs, step)) break;
            bool sane = true;
            for (double s : step)
                if (!std::isfinite(s)) sane = false;
            if (!sane) break;
            for (int i = 0; i < 8; ++i) wp.p[i] += step[i];
        }
        if (li > 0) wp.to_finer();
    }

    if (!(corr >= cfg.correlation_floor))
        throw DivergedEstimate("correlation " + std::to_string(corr) +
                               " below floor " +
                               std::to_string(cfg.correlation_floor));

    HomographyEstimate est;
    est.h = wp.to_matrix().inverse(); // sampling map is fixed -> moving
    est.correlation = corr;
    return est;
}

WarpedBand warp_band(const RasterGrid& band, const Homography3x3& h,
                     const Rect& out_extent) {
    if (out_extent.empty()) throw InvalidConfig("empty warp extent");
    WarpedBand out;
    out.grid = RasterGrid(out_extent.w, out_extent.h, 0.0, band.max_value);
    out.valid.assign(out.grid.pixel_count(), 0);
    const Homography3x3 hinv = h.inverse();
    kernels::warp_bilinear(band.values.data(), band.width, band.height,
                           hinv.m.data(), out_extent.x, out_extent.y,
                           out_extent.w, out_extent.h, out.grid.values.data(),
                           out.valid.data());
    return out;
}

Rect largest_valid_rect(const std::vector<uint8_t>& mask, int w, int h) {
    // max rectangle under histogram, row by row
    std::vector<int> height(size_t(w), 0);
    Rect best;
    long best_area = 0;
    std::vector<int> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            height[x] = mask[size_t(y) * w + x] ? height[x] + 1 : 0;
        stack.clear();
        for (int x = 0; x <= w; ++x) {
            const int cur = x < w ? height[x] : 0;
            int start = x;
            while (!stack.empty() && height[stack.back()] >= cur) {
                const int top = stack.back();
                stack.pop_back();
                const int hh = height[top];
                const int left = stack.empty() ? 0 : stack.back() + 1;
                const long area = long(hh) * (x - left);
                if (area > best_area) {
                    best_area = area;
                    best = {left, y - hh + 1, x - left, hh};
                }
                start = left;
            }
            (void)start;
            stack.push_back(x);
        }
    }
    return best;
}

AlignResult align_frame(const std::map<BandId, RasterGrid>& raw,
                        const RegistrationConfig& cfg) {
    for (BandId b : kAllBands)
        if (!raw.count(b))
            throw ShapeMismatch(std::string("missing band ") + band_name(b));
    const RasterGrid& nir = raw.at(BandId::NIR);
    for (BandId b : kAllBands)
        if (!raw.at(b).same_shape(nir))
            throw ShapeMismatch("raw bands must share dimensions");

    // successive pairs, first element moving
    std::map<BandId, HomographyEstimate> pairwise;
    for (const auto& [mov, fix] : kPairOrder) {
        try {
            pairwise[mov] = estimate_homography(raw.at(mov), raw.at(fix), cfg);
        } catch (const CrownError& e) {
            throw AlignmentPairError(band_name(mov), band_name(fix), e.what());
        }
    }

    AlignmentChain chain;
    chain.to_reference[BandId::NIR] = Homography3x3::identity();
    chain.to_reference[BandId::REG] = pairwise[BandId::REG].h;
    chain.to_reference[BandId::GRE] =
        chain.to_reference[BandId::REG].compose(pairwise[BandId::GRE].h);
    chain.to_reference[BandId::RED] =
        chain.to_reference[BandId::GRE].compose(pairwise[BandId::RED].h);
    for (const auto& [mov, est] : pairwise)
        chain.correlations[mov] = est.correlation;

    const Rect full{0, 0, nir.width, nir.height};
    std::map<BandId, WarpedBand> warped;
    std::vector<uint8_t> joint(nir.pixel_count(), 1);
    for (BandId b : kAllBands) {
        warped[b] = warp_band(raw.at(b), chain.to_reference.at(b), full);
        for (size_t i = 0; i < joint.size(); ++i)
            joint[i] = joint[i] && warped[b].valid[i];
    }

    Rect crop = largest_valid_rect(joint, nir.width, nir.height);
    if (crop.empty())
        throw DivergedEstimate("aligned bands share no valid region");
    chain.valid_extent = crop;

    auto cut = [&](BandId b) {
        const RasterGrid& src = warped[b].grid;
        RasterGrid out(crop.w, crop.h, 0.0, src.max_value);
        for (int y = 0; y < crop.h; ++y)
            for (int x = 0; x < crop.w; ++x)
                out.at(x, y) = src.at(crop.x + x, crop.y + y);
        return out;
    };
    AlignResult result{
        MultispectralFrame::from_aligned(cut(BandId::GRE), cut(BandId::RED),
                                         cut(BandId::REG), cut(BandId::NIR)),
        chain};
    return result;
}

PseudoRgbResult make_pseudo_rgb(const MultispectralFrame& frame) {
    PseudoRgbResult out;
    out.image.width = frame.width();
    out.image.height = frame.height();
    const std::array<BandId, 3> order{BandId::GRE, BandId::RED, BandId::REG};
    for (int c = 0; c < 3; ++c) {
        const RasterGrid& band = frame.band(order[c]);
        auto [lo_it, hi_it] =
            std::minmax_element(band.values.begin(), band.values.end());
        const double lo = *lo_it, hi = *hi_it;
        auto& ch = out.image.channels[c];
        ch.assign(band.pixel_count(), 0.0);
        if (hi - lo <= 0.0) {
            out.constant_channel[c] = true; // all-zero channel
            continue;
        }
        const double scale = 1.0 / (hi - lo);
        for (size_t i = 0; i < ch.size(); ++i)
            ch[i] = (band.values[i] - lo) * scale;
    }
    return out;
}

std::string AlignmentChain::to_json() const {
    json j;
    j["ref"] = "NIR";
    j["pair_convention"] = "first band moving: RED->GRE, GRE->REG, REG->NIR";
    json homos;
    for (const auto& [band, h] : to_reference) {
        json rows = json::array();
        for (int r = 0; r < 3; ++r)
            rows.push_back({h.m[3 * r], h.m[3 * r + 1], h.m[3 * r + 2]});
        homos[band_name(band)] = rows;
    }
    j["homographies"] = homos;
    j["valid_extent"] = {valid_extent.x, valid_extent.y, valid_extent.w,
                         valid_extent.h};
    if (!correlations.empty()) {
        json c;
        for (const auto& [band, corr] : correlations) c[band_name(band)] = corr;
        j["correlations"] = c;
    }
    return j.dump(2);
}

AlignmentChain AlignmentChain::from_json(const std::string& text) {
    AlignmentChain chain;
    json j = json::parse(text);
    for (const auto& [name, rows] : j.at("homographies").items()) {
        Homography3x3 h;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) h.m[3 * r + c] = rows.at(r).at(c);
        chain.to_reference[band_from_name(name)] = h;
    }
    const auto& ve = j.at("valid_extent");
    chain.valid_extent = {ve.at(0), ve.at(1), ve.at(2), ve.at(3)};
    if (j.contains("correlations"))
        for (const auto& [name, corr] : j.at("correlations").items())
            chain.correlations[band_from_name(name)] = corr;
    return chain;
}

} // namespace crowncut
