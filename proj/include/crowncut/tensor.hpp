#pragma once

#include <cassert>
#include <cstdint>
#include <vector>

namespace crowncut {

// Dense CHW tensor, row-major within a channel.
template <typename T>
struct Tensor3 {
    int c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor3() = default;
    Tensor3(int c_, int h_, int w_, T fill = T(0))
        : c(c_), h(h_), w(w_), v(size_t(c_) * h_ * w_, fill) {}

    void reshape(int c_, int h_, int w_) {
        c = c_; h = h_; w = w_;
        v.assign(size_t(c_) * h_ * w_, T(0));
    }

    size_t size() const { return v.size(); }
    size_t plane() const { return size_t(h) * w; }

    T* row(int ci, int y) { return v.data() + (size_t(ci) * h + y) * w; }
    const T* row(int ci, int y) const {
        return v.data() + (size_t(ci) * h + y) * w;
    }
    T& at(int ci, int y, int x) { return v[(size_t(ci) * h + y) * w + x]; }
    T at(int ci, int y, int x) const { return v[(size_t(ci) * h + y) * w + x]; }
};

// Convolution weights, (out_ch, in_ch, kh, kw). For the 2x2 up-convolution the
// same layout is used with (kh, kw) indexing the output sub-position.
template <typename T>
struct Tensor4 {
    int oc = 0, ic = 0, kh = 0, kw = 0;
    std::vector<T> v;

    Tensor4() = default;
    Tensor4(int oc_, int ic_, int kh_, int kw_, T fill = T(0))
        : oc(oc_), ic(ic_), kh(kh_), kw(kw_),
          v(size_t(oc_) * ic_ * kh_ * kw_, fill) {}

    size_t size() const { return v.size(); }

    T* tap(int o, int i, int y) {
        return v.data() + ((size_t(o) * ic + i) * kh + y) * kw;
    }
    const T* tap(int o, int i, int y) const {
        return v.data() + ((size_t(o) * ic + i) * kh + y) * kw;
    }
    T& at(int o, int i, int y, int x) {
        return v[((size_t(o) * ic + i) * kh + y) * kw + x];
    }
    T at(int o, int i, int y, int x) const {
        return v[((size_t(o) * ic + i) * kh + y) * kw + x];
    }
};

} // namespace crowncut
