#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include <omp.h>

#include "crowncut/kernels.hpp"
#include "crowncut/rng.hpp"

using namespace crowncut;
namespace k = crowncut::kernels;

namespace {

template <typename T>
void fill_uniform(std::vector<T>& v, Rng& rng, double lo = -1.0,
                  double hi = 1.0) {
    for (auto& x : v) x = T(rng.uniform(lo, hi));
}

// independent brute-force window oracle: gather by offset list, then reduce
std::vector<double> window_oracle(const std::vector<double>& in, int w, int h,
                                  int radius, bool median) {
    std::vector<std::pair<int, int>> offsets;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius)
                offsets.emplace_back(dx, dy);
    std::vector<double> out(in.size());
    std::vector<double> window;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            window.clear();
            for (auto [dx, dy] : offsets) {
                const int xx = x + dx, yy = y + dy;
                if (xx < 0 || xx >= w || yy < 0 || yy >= h) continue;
                window.push_back(in[size_t(yy) * w + xx]);
            }
            std::sort(window.begin(), window.end());
            out[size_t(y) * w + x] =
                median ? window[(window.size() - 1) / 2] : window.front();
        }
    }
    return out;
}

} // namespace

TEST_CASE("parallel kernels match the serial reference bit-for-bit") {
    Rng rng(2024);
    for (int trial = 0; trial < 4; ++trial) {
        const int C = 1 + int(rng.next_below(5));
        const int OC = trial == 3 ? 3 : 2 * (1 + int(rng.next_below(4)));
        const int H = 12 + int(rng.next_below(30));
        const int W = 12 + int(rng.next_below(30));
        Tensor3<float> in(C, H, W);
        Tensor4<float> w(OC, C, 3, 3);
        std::vector<float> b(static_cast<size_t>(OC));
        fill_uniform(in.v, rng);
        fill_uniform(w.v, rng);
        fill_uniform(b, rng);

        Tensor3<float> out_p, out_s;
        k::conv2d_valid(in, w, b, true, out_p);
        k::serial::conv2d_valid(in, w, b, true, out_s);
        CHECK(out_p.v == out_s.v);

        Tensor3<float> g(OC, H - 2, W - 2);
        fill_uniform(g.v, rng);
        Tensor4<float> dwp(OC, C, 3, 3), dws(OC, C, 3, 3);
        std::vector<float> dbp, dbs;
        k::conv2d_grad_weights(in, g, dwp, dbp);
        k::serial::conv2d_grad_weights(in, g, dws, dbs);
        CHECK(dwp.v == dws.v);
        CHECK(dbp == dbs);

        Tensor3<float> dip, dis;
        k::conv2d_grad_input(g, w, H, W, dip);
        k::serial::conv2d_grad_input(g, w, H, W, dis);
        CHECK(dip.v == dis.v);
    }
}

TEST_CASE("kernel output is bit-identical across thread counts") {
    Rng rng(5);
    Tensor3<float> in(8, 40, 40);
    Tensor4<float> w(8, 8, 3, 3);
    std::vector<float> b(8);
    fill_uniform(in.v, rng);
    fill_uniform(w.v, rng);
    fill_uniform(b, rng);

    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    Tensor3<float> out1;
    k::conv2d_valid(in, w, b, true, out1);
    std::vector<double> m1(40 * 40), f1(40 * 40);
    fill_uniform(m1, rng, 0.0, 1.0);
    k::min_filter_disc(m1.data(), 40, 40, 3, f1.data());

    omp_set_num_threads(4);
    Tensor3<float> out4;
    k::conv2d_valid(in, w, b, true, out4);
    std::vector<double> f4(40 * 40);
    k::min_filter_disc(m1.data(), 40, 40, 3, f4.data());
    omp_set_num_threads(saved);

    CHECK(out1.v == out4.v);
    CHECK(f1 == f4);
}

TEST_CASE("single 3x3 convolution matches a hand-computed oracle") {
    // 5x5 input, one channel; oracle computed with explicit loops in double
    Tensor3<double> in(1, 5, 5);
    Tensor4<double> w(1, 1, 3, 3);
    std::vector<double> b{0.25};
    Rng rng(3);
    fill_uniform(in.v, rng);
    fill_uniform(w.v, rng);
    Tensor3<double> out;
    k::conv2d_valid(in, w, b, false, out);
    REQUIRE(out.h == 3);
    REQUIRE(out.w == 3);
    for (int y = 0; y < 3; ++y) {
        for (int x = 0; x < 3; ++x) {
            double acc = b[0];
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    acc += w.at(0, 0, ky, kx) * in.at(0, y + ky, x + kx);
            CHECK(out.at(0, y, x) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("finite differences validate each kernel's gradients") {
    Rng rng(17);
    const double h = 1e-6;
    const double tol = 1e-6;

    auto fd_check = [&](auto eval, double* param, double analytic) {
        const double save = *param;
        *param = save + h;
        const double up = eval();
        *param = save - h;
        const double down = eval();
        *param = save;
        const double fd = (up - down) / (2.0 * h);
        CHECK(std::fabs(fd - analytic) <=
              tol * std::max({1.0, std::fabs(fd), std::fabs(analytic)}));
    };

    SUBCASE("conv3x3 weights and input") {
        Tensor3<double> in(2, 8, 8);
        Tensor4<double> w(2, 2, 3, 3);
        std::vector<double> b(2);
        fill_uniform(in.v, rng);
        fill_uniform(w.v, rng);
        fill_uniform(b, rng);
        Tensor3<double> proj(2, 6, 6);
        fill_uniform(proj.v, rng);

        auto loss = [&] {
            Tensor3<double> out;
            k::conv2d_valid(in, w, b, false, out);
            double s = 0;
            for (size_t i = 0; i < out.size(); ++i) s += out.v[i] * proj.v[i];
            return s;
        };
        Tensor4<double> dw(2, 2, 3, 3);
        std::vector<double> db;
        k::conv2d_grad_weights(in, proj, dw, db);
        Tensor3<double> din;
        k::conv2d_grad_input(proj, w, in.h, in.w, din);

        for (size_t i = 0; i < w.v.size(); i += 7)
            fd_check(loss, &w.v[i], dw.v[i]);
        fd_check(loss, &b[0], db[0]);
        fd_check(loss, &b[1], db[1]);
        for (size_t i = 0; i < in.v.size(); i += 23)
            fd_check(loss, &in.v[i], din.v[i]);
    }

    SUBCASE("upconv2x2 weights and input") {
        Tensor3<double> in(2, 5, 5);
        Tensor4<double> w(3, 2, 2, 2);
        std::vector<double> b(3);
        fill_uniform(in.v, rng);
        fill_uniform(w.v, rng);
        fill_uniform(b, rng);
        Tensor3<double> proj(3, 10, 10);
        fill_uniform(proj.v, rng);

        auto loss = [&] {
            Tensor3<double> out;
            k::upconv2x2(in, w, b, out);
            double s = 0;
            for (size_t i = 0; i < out.size(); ++i) s += out.v[i] * proj.v[i];
            return s;
        };
        Tensor4<double> dw(3, 2, 2, 2);
        std::vector<double> db;
        k::upconv2x2_grad_weights(in, proj, dw, db);
        Tensor3<double> din;
        k::upconv2x2_grad_input(proj, w, din);

        for (size_t i = 0; i < w.v.size(); i += 3)
            fd_check(loss, &w.v[i], dw.v[i]);
        fd_check(loss, &b[2], db[2]);
        for (size_t i = 0; i < in.v.size(); i += 11)
            fd_check(loss, &in.v[i], din.v[i]);
    }

    SUBCASE("maxpool routing") {
        Tensor3<double> in(1, 6, 6);
        fill_uniform(in.v, rng);
        Tensor3<double> proj(1, 3, 3);
        fill_uniform(proj.v, rng);

        auto loss = [&] {
            Tensor3<double> out;
            std::vector<uint8_t> am;
            k::maxpool2x2(in, out, am);
            double s = 0;
            for (size_t i = 0; i < out.size(); ++i) s += out.v[i] * proj.v[i];
            return s;
        };
        Tensor3<double> out;
        std::vector<uint8_t> am;
        k::maxpool2x2(in, out, am);
        Tensor3<double> din;
        k::maxpool2x2_backward(proj, am, in.h, in.w, din);
        for (size_t i = 0; i < in.v.size(); i += 5)
            fd_check(loss, &in.v[i], din.v[i]);
    }

    SUBCASE("conv1x1") {
        Tensor3<double> in(4, 5, 5);
        Tensor4<double> w(2, 4, 1, 1);
        std::vector<double> b(2);
        fill_uniform(in.v, rng);
        fill_uniform(w.v, rng);
        Tensor3<double> proj(2, 5, 5);
        fill_uniform(proj.v, rng);

        auto loss = [&] {
            Tensor3<double> out;
            k::conv2d_valid(in, w, b, false, out);
            double s = 0;
            for (size_t i = 0; i < out.size(); ++i) s += out.v[i] * proj.v[i];
            return s;
        };
        Tensor4<double> dw(2, 4, 1, 1);
        std::vector<double> db;
        k::conv2d_grad_weights(in, proj, dw, db);
        Tensor3<double> din;
        k::conv2d_grad_input(proj, w, in.h, in.w, din);
        for (size_t i = 0; i < w.v.size(); ++i) fd_check(loss, &w.v[i], dw.v[i]);
        for (size_t i = 0; i < in.v.size(); i += 13)
            fd_check(loss, &in.v[i], din.v[i]);
    }
}

TEST_CASE("disc filters match brute-force enumeration") {
    Rng rng(31);
    for (int radius : {1, 2, 3, 5}) {
        std::vector<double> in(16 * 16);
        fill_uniform(in, rng, 0.0, 1.0);
        std::vector<double> got(in.size());

        k::min_filter_disc(in.data(), 16, 16, radius, got.data());
        CHECK(got == window_oracle(in, 16, 16, radius, false));

        k::median_filter_disc(in.data(), 16, 16, radius, got.data());
        CHECK(got == window_oracle(in, 16, 16, radius, true));
    }
}

TEST_CASE("min filter: single zero dilates to the disc footprint") {
    std::vector<double> in(9 * 9, 1.0);
    in[4 * 9 + 4] = 0.0;
    std::vector<double> out(in.size());
    k::min_filter_disc(in.data(), 9, 9, 2, out.data());
    int zeros = 0;
    for (double v : out) zeros += v == 0.0;
    CHECK(zeros == 13); // disc of radius 2
}

TEST_CASE("median filter: lower median on even windows, impulse removed") {
    // an isolated impulse vanishes under a radius-2 median
    std::vector<double> in(9 * 9, 0.0);
    in[4 * 9 + 4] = 1.0;
    std::vector<double> out(in.size());
    k::median_filter_disc(in.data(), 9, 9, 2, out.data());
    CHECK(*std::max_element(out.begin(), out.end()) == 0.0);

    // 2x1 image, radius 1: window holds both pixels, lower median applies
    std::vector<double> two = {3.0, 5.0};
    std::vector<double> tout(2);
    k::median_filter_disc(two.data(), 2, 1, 1, tout.data());
    CHECK(tout[0] == 3.0);
    CHECK(tout[1] == 3.0);
}

TEST_CASE("fixed-point requantization tracks the real rescale within 1 ulp") {
    Rng rng(404);
    for (int trial = 0; trial < 5000; ++trial) {
        const double mag = std::pow(2.0, rng.uniform(-20.0, 2.0));
        const int32_t acc = int32_t(rng.next_below(1u << 25)) - (1 << 24);
        const auto fm = k::fixed_multiplier(mag);
        const int32_t got = k::fixed_mul(acc, fm);
        const long double exact = (long double)(acc)*mag;
        const long long want = llroundl(exact);
        CHECK(std::llabs(want - got) <= 1);
    }
}

TEST_CASE("int8 conv is monotone for nonnegative weights and inputs") {
    Rng rng(88);
    Tensor3<int8_t> a(2, 8, 8), bigger(2, 8, 8);
    Tensor4<int8_t> w(2, 2, 3, 3);
    std::vector<int32_t> bias(2, 0);
    for (size_t i = 0; i < a.size(); ++i) {
        a.v[i] = int8_t(rng.next_below(60));
        bigger.v[i] = int8_t(int(a.v[i]) + int(rng.next_below(40)));
    }
    for (auto& x : w.v) x = int8_t(rng.next_below(50));
    Tensor3<int32_t> oa, ob;
    k::conv2d_valid_s8(a, 0, w, bias, oa);
    k::conv2d_valid_s8(bigger, 0, w, bias, ob);
    for (size_t i = 0; i < oa.size(); ++i) CHECK(ob.v[i] >= oa.v[i]);
}

TEST_CASE("warp: identity, integer shift, inverse round-trip") {
    Rng rng(61);
    const int W = 32, H = 32;
    std::vector<double> src(size_t(W) * H);
    // smooth content so interpolation error stays small
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            src[size_t(y) * W + x] =
                100.0 + 40.0 * std::sin(x * 0.3) * std::cos(y * 0.2);

    std::vector<double> out(src.size());
    std::vector<uint8_t> valid(src.size());

    SUBCASE("identity") {
        const double id[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        k::warp_bilinear(src.data(), W, H, id, 0, 0, W, H, out.data(),
                         valid.data());
        CHECK(out == src);
        CHECK(std::count(valid.begin(), valid.end(), 1) == W * H);
    }

    SUBCASE("integer shift needs no interpolation") {
        // sample source at (x-1, y): pure +1 px translation
        const double hinv[9] = {1, 0, -1, 0, 1, 0, 0, 0, 1};
        k::warp_bilinear(src.data(), W, H, hinv, 0, 0, W, H, out.data(),
                         valid.data());
        for (int y = 0; y < H; ++y)
            for (int x = 1; x < W; ++x) {
                CHECK(valid[size_t(y) * W + x] == 1);
                CHECK(out[size_t(y) * W + x] == src[size_t(y) * W + x - 1]);
            }
        for (int y = 0; y < H; ++y) CHECK(valid[size_t(y) * W] == 0);
    }

    SUBCASE("warp then inverse warp stays within 1% of range") {
        const double fwd[9] = {0.995, 0.02, 1.7, -0.02, 0.995, -1.2,
                               1e-5,  -1e-5, 1};
        // inverse via cofactors (small 3x3)
        auto inv3 = [](const double m[9], double r[9]) {
            const double det =
                m[0] * (m[4] * m[8] - m[5] * m[7]) -
                m[1] * (m[3] * m[8] - m[5] * m[6]) +
                m[2] * (m[3] * m[7] - m[4] * m[6]);
            r[0] = (m[4] * m[8] - m[5] * m[7]) / det;
            r[1] = (m[2] * m[7] - m[1] * m[8]) / det;
            r[2] = (m[1] * m[5] - m[2] * m[4]) / det;
            r[3] = (m[5] * m[6] - m[3] * m[8]) / det;
            r[4] = (m[0] * m[8] - m[2] * m[6]) / det;
            r[5] = (m[2] * m[3] - m[0] * m[5]) / det;
            r[6] = (m[3] * m[7] - m[4] * m[6]) / det;
            r[7] = (m[1] * m[6] - m[0] * m[7]) / det;
            r[8] = (m[0] * m[4] - m[1] * m[3]) / det;
        };
        double bwd[9];
        inv3(fwd, bwd);
        std::vector<double> mid(src.size()), back(src.size());
        std::vector<uint8_t> v1(src.size()), v2(src.size());
        k::warp_bilinear(src.data(), W, H, fwd, 0, 0, W, H, mid.data(),
                         v1.data());
        k::warp_bilinear(mid.data(), W, H, bwd, 0, 0, W, H, back.data(),
                         v2.data());
        double err = 0;
        int count = 0;
        const int margin = 3; // stay off the invalid border
        for (int y = margin; y < H - margin; ++y)
            for (int x = margin; x < W - margin; ++x) {
                const size_t i = size_t(y) * W + x;
                if (!v1[i] || !v2[i]) continue;
                err += std::fabs(back[i] - src[i]);
                ++count;
            }
        REQUIRE(count > 0);
        CHECK(err / count < 0.01 * 140.0); // 1% of the value range
    }
}
