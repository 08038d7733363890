#pragma once

#include "mgir/cassi.hpp"

namespace mgir {

// Smooth synthetic scenes: a handful of spatial Gaussian blobs, each with its
// own smooth spectral profile (a raised cosine bump over the band axis), plus
// a gentle global ramp. Values land in [0, 1] and the spectra are continuous,
// so the scene is a fair target for coordinate-based reconstruction.
template <typename S>
HyperCube<S> synthetic_scene(std::size_t bands, std::size_t height, std::size_t width,
                             std::uint64_t seed, std::size_t blobs = 6,
                             std::pair<double, double> wavelength_range_nm = {400.0, 700.0}) {
    if (bands < 1 || height < 1 || width < 1)
        throw value_error("synthetic_scene: extents must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);

    struct Blob {
        double cy, cx, sy, sx;   // spatial center and spread (normalized units)
        double lc, lw, amp;      // spectral center, width, amplitude
    };
    std::vector<Blob> bs(blobs);
    for (auto& b : bs) {
        b.cy = u01(rng);
        b.cx = u01(rng);
        b.sy = 0.05 + 0.2 * u01(rng);
        b.sx = 0.05 + 0.2 * u01(rng);
        b.lc = u01(rng);
        b.lw = 0.2 + 0.5 * u01(rng);
        b.amp = 0.3 + 0.7 * u01(rng);
    }

    HyperCube<S> cube;
    cube.data = Tensor<S>({bands, height, width});
    cube.wavelengths_nm = linspace_nm(wavelength_range_nm.first, wavelength_range_nm.second, bands);
    double peak = 0.0;
    std::vector<double> vals(bands * height * width, 0.0);
    for (std::size_t k = 0; k < bands; ++k) {
        const double l = bands == 1 ? 0.5 : double(k) / double(bands - 1);
        for (std::size_t y = 0; y < height; ++y) {
            const double py = height == 1 ? 0.5 : double(y) / double(height - 1);
            for (std::size_t x = 0; x < width; ++x) {
                const double px = width == 1 ? 0.5 : double(x) / double(width - 1);
                double v = 0.08 + 0.04 * l + 0.03 * px;  // gentle base ramp
                for (const Blob& b : bs) {
                    const double dy = (py - b.cy) / b.sy;
                    const double dx = (px - b.cx) / b.sx;
                    const double dl = (l - b.lc) / b.lw;
                    if (std::abs(dl) >= 1.0) continue;
                    const double spectral = 0.5 * (1.0 + std::cos(dl * 3.14159265358979323846));
                    v += b.amp * spectral * std::exp(-0.5 * (dy * dy + dx * dx));
                }
                vals[(k * height + y) * width + x] = v;
                peak = std::max(peak, v);
            }
        }
    }
    for (std::size_t i = 0; i < vals.size(); ++i)
        cube.data.data()[i] = S(vals[i] / std::max(peak, 1.0));
    return cube;
}

}  // namespace mgir
