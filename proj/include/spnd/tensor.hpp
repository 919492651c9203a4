#pragma once
// Minimal NCHW batch tensor used by the backbone. Sample-major, channel
// planes contiguous, so per-channel statistics and per-sample GEMMs both see
// contiguous memory.

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace spnd {

template <class T>
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, T fill = T(0))
        : n(n_), c(c_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t numel() const { return v.size(); }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t sample_stride() const { return static_cast<std::size_t>(c) * h * w; }

    T* sample(int i) { return v.data() + static_cast<std::size_t>(i) * sample_stride(); }
    const T* sample(int i) const { return v.data() + static_cast<std::size_t>(i) * sample_stride(); }
    T* channel(int i, int ch) { return sample(i) + static_cast<std::size_t>(ch) * plane(); }
    const T* channel(int i, int ch) const { return sample(i) + static_cast<std::size_t>(ch) * plane(); }

    T& at(int i, int ch, int y, int x) { return channel(i, ch)[static_cast<std::size_t>(y) * w + x]; }
    T at(int i, int ch, int y, int x) const { return channel(i, ch)[static_cast<std::size_t>(y) * w + x]; }

    bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

    void require_shape(int n_, int c_, int h_, int w_, const char* who) const {
        if (n != n_ || c != c_ || h != h_ || w != w_) throw std::invalid_argument(std::string(who) + ": shape mismatch");
    }
};

} // namespace spnd
