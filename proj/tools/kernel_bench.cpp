// Compares the OpenMP kernels against their serial reference
// implementations: wall time, speedup, and a bit-exactness check.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include <omp.h>

#include "crowncut/kernels.hpp"
#include "crowncut/rng.hpp"

using namespace crowncut;
namespace k = crowncut::kernels;

namespace {

template <typename F>
double time_ms(F&& f, int reps) {
    f(); // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms,
            bool bitexact) {
    std::printf("%-22s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   %s\n",
                name, serial_ms, parallel_ms, serial_ms / parallel_ms,
                bitexact ? "bit-exact" : "MISMATCH");
}

template <typename T>
bool same(const std::vector<T>& a, const std::vector<T>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (!(a[i] == b[i])) return false;
    return true;
}

} // namespace

int main() {
    std::printf("threads: %d\n\n", omp_get_max_threads());
    Rng rng(42);

    { // conv2d forward + gradients, float
        const int C = 16, H = 250, W = 250, OC = 16;
        Tensor3<float> in(C, H, W);
        Tensor4<float> w(OC, C, 3, 3);
        std::vector<float> b(OC, 0.1f);
        for (auto& v : in.v) v = float(rng.uniform(-1, 1));
        for (auto& v : w.v) v = float(rng.uniform(-1, 1));

        Tensor3<float> out_p, out_s;
        double tp = time_ms([&] { k::conv2d_valid(in, w, b, true, out_p); }, 10);
        double ts = time_ms(
            [&] { k::serial::conv2d_valid(in, w, b, true, out_s); }, 10);
        report("conv3x3 fwd f32", ts, tp, same(out_p.v, out_s.v));

        Tensor3<float> g(OC, H - 2, W - 2);
        for (auto& v : g.v) v = float(rng.uniform(-1, 1));
        Tensor4<float> dw_p(OC, C, 3, 3), dw_s(OC, C, 3, 3);
        std::vector<float> db_p, db_s;
        tp = time_ms([&] { k::conv2d_grad_weights(in, g, dw_p, db_p); }, 10);
        ts = time_ms(
            [&] { k::serial::conv2d_grad_weights(in, g, dw_s, db_s); }, 10);
        report("conv3x3 dW f32", ts, tp,
               same(dw_p.v, dw_s.v) && same(db_p, db_s));

        Tensor3<float> di_p, di_s;
        tp = time_ms([&] { k::conv2d_grad_input(g, w, H, W, di_p); }, 10);
        ts = time_ms(
            [&] { k::serial::conv2d_grad_input(g, w, H, W, di_s); }, 10);
        report("conv3x3 dIn f32", ts, tp, same(di_p.v, di_s.v));
    }

    { // int8 conv
        const int C = 16, H = 130, W = 130, OC = 16;
        Tensor3<int8_t> in(C, H, W);
        Tensor4<int8_t> w(OC, C, 3, 3);
        std::vector<int32_t> b(OC, 7);
        for (auto& v : in.v) v = int8_t(rng.next_below(255)) ;
        for (auto& v : w.v) v = int8_t(int(rng.next_below(255)) - 127);
        Tensor3<int32_t> out_p, out_s;
        double tp =
            time_ms([&] { k::conv2d_valid_s8(in, -3, w, b, out_p); }, 10);
        double ts = time_ms(
            [&] { k::serial::conv2d_valid_s8(in, -3, w, b, out_s); }, 10);
        report("conv3x3 int8", ts, tp, same(out_p.v, out_s.v));
    }

    { // disc filters
        const int W = 512, H = 512, R = 5;
        std::vector<double> in(size_t(W) * H), out_p(in.size()), out_s(in.size());
        for (auto& v : in) v = rng.uniform();
        double tp =
            time_ms([&] { k::min_filter_disc(in.data(), W, H, R, out_p.data()); }, 5);
        double ts = time_ms(
            [&] { k::serial::min_filter_disc(in.data(), W, H, R, out_s.data()); },
            5);
        report("min filter r=5", ts, tp, same(out_p, out_s));

        tp = time_ms(
            [&] { k::median_filter_disc(in.data(), W, H, R, out_p.data()); }, 3);
        ts = time_ms(
            [&] {
                k::serial::median_filter_disc(in.data(), W, H, R, out_s.data());
            },
            3);
        report("median filter r=5", ts, tp, same(out_p, out_s));
    }

    { // warp
        const int W = 512, H = 512;
        std::vector<double> src(size_t(W) * H), out_p(src.size()),
            out_s(src.size());
        std::vector<uint8_t> vm_p(src.size()), vm_s(src.size());
        for (auto& v : src) v = rng.uniform();
        const double hinv[9] = {0.999, 0.02, 3.5, -0.02, 0.999, -2.5,
                                1e-6,  -1e-6, 1.0};
        double tp = time_ms(
            [&] {
                k::warp_bilinear(src.data(), W, H, hinv, 0, 0, W, H,
                                 out_p.data(), vm_p.data());
            },
            5);
        double ts = time_ms(
            [&] {
                k::serial::warp_bilinear(src.data(), W, H, hinv, 0, 0, W, H,
                                         out_s.data(), vm_s.data());
            },
            5);
        report("warp bilinear", ts, tp, same(out_p, out_s) && same(vm_p, vm_s));
    }

    return 0;
}
