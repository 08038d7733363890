#pragma once

#include <random>

#include "mgir/tensor.hpp"

namespace mgir {

// Dense spectral-spatial cube, bands first: data is [D, H, W].
template <typename S>
struct HyperCube {
    Tensor<S> data;                  // [D, H, W], values in [0, 1]
    std::vector<double> wavelengths_nm;  // strictly increasing, length D

    std::size_t bands() const { return data.extent(0); }
    std::size_t height() const { return data.extent(1); }
    std::size_t width() const { return data.extent(2); }

    void validate() const {
        if (data.rank() != 3)
            throw shape_error("HyperCube: data must be rank 3 [D,H,W]");
        if (wavelengths_nm.size() != bands())
            throw value_error("HyperCube: wavelength count " +
                              std::to_string(wavelengths_nm.size()) + " != band count " +
                              std::to_string(bands()));
        for (std::size_t i = 1; i < wavelengths_nm.size(); ++i)
            if (wavelengths_nm[i] <= wavelengths_nm[i - 1])
                throw value_error("HyperCube: wavelengths must be strictly increasing");
    }
};

inline std::vector<double> linspace_nm(double lo, double hi, std::size_t n) {
    std::vector<double> v(n);
    if (n == 1) {
        v[0] = (lo + hi) / 2;
        return v;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * double(i) / double(n - 1);
    return v;
}

template <typename S>
struct CodedMask {
    Tensor<S> data;  // [H, W], entries in [0, 1]
    std::uint64_t seed = 0;
};

template <typename S>
struct Measurement {
    Tensor<S> data;  // [H, W + shift_d * (D - 1)]
    std::size_t shift_d = 0;
    std::size_t band_count = 0;

    std::size_t height() const { return data.extent(0); }
    std::size_t scene_width() const { return data.extent(1) - shift_d * (band_count - 1); }
};

// Bernoulli mask; identical (seed, dims, density) always yields identical bits.
template <typename S>
CodedMask<S> make_mask(std::size_t height, std::size_t width, double density,
                       std::uint64_t seed) {
    if (height < 1 || width < 1) throw value_error("make_mask: extents must be >= 1");
    if (!(density > 0.0 && density < 1.0))
        throw value_error("make_mask: density must lie in (0,1), got " + std::to_string(density));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor<S> m({height, width});
    for (std::size_t i = 0; i < height * width; ++i)
        m.data()[i] = u(rng) < density ? S(1) : S(0);
    return {std::move(m), seed};
}

// Eq: F = L (.) M, per band.
template <typename S>
Tensor<S> encode(const HyperCube<S>& cube, const CodedMask<S>& mask) {
    const std::size_t D = cube.bands(), H = cube.height(), W = cube.width();
    if (mask.data.extent(0) != H || mask.data.extent(1) != W)
        throw shape_error("encode: mask " + shape_str(mask.data.shape()) +
                          " does not match scene spatial extents " +
                          shape_str({H, W}));
    Tensor<S> out({D, H, W});
    for (std::size_t b = 0; b < D; ++b)
        for (std::size_t i = 0; i < H * W; ++i)
            out.data()[b * H * W + i] = cube.data.data()[b * H * W + i] * mask.data.data()[i];
    return out;
}

// Integer per-band column shift, then detector integration over bands:
// g[u, v] = sum_b enc[b, u, v - shift_d * b].
template <typename S>
Measurement<S> disperse_integrate(const Tensor<S>& encoded, std::size_t shift_d) {
    if (encoded.rank() != 3)
        throw shape_error("disperse_integrate: expected rank 3 [D,H,W]");
    const std::size_t D = encoded.extent(0), H = encoded.extent(1), W = encoded.extent(2);
    const std::size_t Wm = W + shift_d * (D - 1);
    Tensor<S> g({H, Wm});
    for (std::size_t b = 0; b < D; ++b) {
        const std::size_t off = shift_d * b;
        for (std::size_t u = 0; u < H; ++u) {
            const S* src = encoded.data() + (b * H + u) * W;
            S* dst = g.data() + u * Wm + off;
            for (std::size_t v = 0; v < W; ++v) dst[v] += src[v];
        }
    }
    return {std::move(g), shift_d, D};
}

// Shift-back crop: slice b = columns [shift_d*b, shift_d*b + W) of the
// measurement, stacked along the band axis with a unit channel axis.
template <typename S>
Tensor<S> lift_measurement(const Measurement<S>& meas) {
    const std::size_t D = meas.band_count;
    const std::size_t H = meas.height();
    const std::size_t Wm = meas.data.extent(1);
    if (Wm < meas.shift_d * (D - 1) + 1)
        throw shape_error("lift_measurement: measurement width inconsistent with shift/bands");
    const std::size_t W = Wm - meas.shift_d * (D - 1);
    Tensor<S> m0({1, D, H, W});
    for (std::size_t b = 0; b < D; ++b) {
        const std::size_t off = meas.shift_d * b;
        for (std::size_t u = 0; u < H; ++u)
            std::memcpy(m0.data() + (b * H + u) * W, meas.data.data() + u * Wm + off,
                        W * sizeof(S));
    }
    return m0;
}

template <typename S>
Measurement<S> simulate(const HyperCube<S>& cube, const CodedMask<S>& mask,
                        std::size_t shift_d) {
    return disperse_integrate(encode(cube, mask), shift_d);
}

}  // namespace mgir
