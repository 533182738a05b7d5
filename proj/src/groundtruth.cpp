#include "crowncut/groundtruth.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include "crowncut/kernels.hpp"

namespace crowncut {

void ReferencePoint::validate() const {
    if (rp[1] != 1.0)
        throw InvalidConfig("reference point must be RED-normalized");
    for (double v : rp)
        if (!(v > 0.0) || !std::isfinite(v))
            throw InvalidConfig("reference point components must be positive");
}

void GroundTruthParams::validate() const {
    rp.validate();
    if (r_min < 1 || k < 1)
        throw InvalidConfig("filter radii must be >= 1");
    if (!(theta_m > 0.0 && theta_m < theta_bg && theta_bg <= 1.0))
        throw InvalidConfig("need 0 < theta_m < theta_bg <= 1");
    if (!(red_floor > 0.0 && red_floor < 1.0))
        throw InvalidConfig("red_floor must lie in (0, 1)");
}

ScoreMap distance_map(const MultispectralFrame& frame, const ReferencePoint& rp,
                      double red_floor) {
    rp.validate();
    const NormalizedField field = red_normalize(frame, red_floor);
    ScoreMap map(field.width, field.height);

    double maxd = 0.0;
#pragma omp parallel for schedule(static) reduction(max : maxd)
    for (int y = 0; y < map.height; ++y) {
        for (int x = 0; x < map.width; ++x) {
            const size_t i = size_t(y) * map.width + x;
            if (field.unreliable[i]) continue;
            double s = 0.0;
            for (int b = 0; b < 4; ++b) {
                const double d = field.vec[i][b] - rp.rp[b];
                s += d * d;
            }
            const double dist = std::sqrt(s);
            map.values[i] = dist;
            maxd = std::max(maxd, dist);
        }
    }

    double mind = maxd;
    for (size_t i = 0; i < map.pixel_count(); ++i) {
        if (field.unreliable[i])
            map.values[i] = maxd;
        else
            mind = std::min(mind, map.values[i]);
    }
    if (maxd <= mind) {
        // all-equal map (constant frame or everything unreliable)
        std::fill(map.values.begin(), map.values.end(), 0.0);
        return map;
    }
    const double inv = 1.0 / maxd;
    for (double& v : map.values) v *= inv;
    return map;
}

ScoreMap min_filter_disc(const ScoreMap& map, int radius) {
    if (radius < 1) throw InvalidConfig("min filter radius must be >= 1");
    ScoreMap out(map.width, map.height);
    kernels::min_filter_disc(map.values.data(), map.width, map.height, radius,
                             out.values.data());
    return out;
}

ScoreMap median_filter_disc(const ScoreMap& map, int k) {
    if (k < 1) throw InvalidConfig("median filter radius must be >= 1");
    ScoreMap out(map.width, map.height);
    kernels::median_filter_disc(map.values.data(), map.width, map.height, k,
                                out.values.data());
    return out;
}

MarkerField threshold_markers(const ScoreMap& map, double theta_m,
                              double theta_bg) {
    if (!(theta_m > 0.0 && theta_m < theta_bg && theta_bg <= 1.0))
        throw InvalidConfig("need 0 < theta_m < theta_bg <= 1");
    MarkerField out;
    out.width = map.width;
    out.height = map.height;
    out.values.assign(map.pixel_count(), Marker::UNKNOWN);
    for (size_t i = 0; i < map.pixel_count(); ++i) {
        if (map.values[i] < theta_m)
            out.values[i] = Marker::TREE;
        else if (map.values[i] > theta_bg)
            out.values[i] = Marker::BACKGROUND;
    }
    return out;
}

SegmentationMask watershed_segment(const ScoreMap& map,
                                   const MarkerField& markers) {
    if (map.width != markers.width || map.height != markers.height)
        throw ShapeMismatch("marker field must match the score map");
    const int w = map.width, h = map.height;
    SegmentationMask mask(w, h, 0);

    bool any_tree = false;
    for (Marker m : markers.values)
        if (m == Marker::TREE) {
            any_tree = true;
            break;
        }
    if (!any_tree) return mask; // no seeds, nothing to flood

    struct Entry {
        double elevation;
        uint64_t order; // FIFO among equal elevations
        int idx;
        bool operator>(const Entry& o) const {
            if (elevation != o.elevation) return elevation > o.elevation;
            return order > o.order;
        }
    };
    std::priority_queue<Entry, std::vector<Entry>, std::greater<Entry>> queue;
    std::vector<uint8_t> label(map.pixel_count(), 0); // 0 unknown, 1 tree, 2 bg
    uint64_t counter = 0;

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = size_t(y) * w + x;
            if (markers.values[i] == Marker::UNKNOWN) continue;
            label[i] = markers.values[i] == Marker::TREE ? 1 : 2;
            queue.push({map.values[i], counter++, int(i)});
        }
    }

    const int dx[4] = {0, -1, 1, 0};
    const int dy[4] = {-1, 0, 0, 1};
    while (!queue.empty()) {
        const Entry e = queue.top();
        queue.pop();
        const int x = e.idx % w;
        const int y = e.idx / w;
        const uint8_t lab = label[size_t(e.idx)];
        for (int n = 0; n < 4; ++n) {
            const int nx = x + dx[n];
            const int ny = y + dy[n];
            if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
            const size_t ni = size_t(ny) * w + nx;
            if (label[ni] != 0) continue;
            label[ni] = lab;
            queue.push({map.values[ni], counter++, int(ni)});
        }
    }

    for (size_t i = 0; i < mask.pixel_count(); ++i)
        mask.labels[i] = label[i] == 1 ? 1 : 0;
    return mask;
}

GroundTruthResult generate_groundtruth(const std::map<BandId, RasterGrid>& raw,
                                       const GroundTruthParams& params,
                                       const GroundTruthConfig& cfg) {
    params.validate();

    AlignResult aligned = [&] {
        if (cfg.assume_aligned) {
            for (BandId b : kAllBands)
                if (!raw.count(b))
                    throw ShapeMismatch(std::string("missing band ") +
                                        band_name(b));
            AlignResult r{MultispectralFrame::from_aligned(
                              raw.at(BandId::GRE), raw.at(BandId::RED),
                              raw.at(BandId::REG), raw.at(BandId::NIR)),
                          AlignmentChain{}};
            for (BandId b : kAllBands)
                r.chain.to_reference[b] = Homography3x3::identity();
            r.chain.valid_extent = {0, 0, r.frame.width(), r.frame.height()};
            return r;
        }
        return align_frame(raw, cfg.registration);
    }();

    ScoreMap dist = distance_map(aligned.frame, params.rp, params.red_floor);
    ScoreMap filtered = min_filter_disc(dist, params.r_min);
    ScoreMap denoised = median_filter_disc(filtered, params.k);
    MarkerField markers =
        threshold_markers(denoised, params.theta_m, params.theta_bg);
    SegmentationMask mask = watershed_segment(denoised, markers);

    PseudoRgbImage rgb = make_pseudo_rgb(aligned.frame).image;
    GroundTruthResult result{std::move(mask), std::move(aligned.frame),
                             std::move(rgb), std::move(aligned.chain)};
    return result;
}

} // namespace crowncut
