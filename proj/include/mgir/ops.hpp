#pragma once

#include <array>
#include <cmath>

#include "mgir/tensor.hpp"

namespace mgir {

struct Triple {
    std::size_t d = 1, h = 1, w = 1;
};

// ---- matmul: [..., m, k] x [k, n] -> [..., m, n] (shared right operand) ----
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() < 2 || b.rank() != 2)
        throw shape_error("matmul: expected a rank >= 2 and b rank 2, got " +
                          shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t k = a.extent(a.rank() - 1);
    if (b.extent(0) != k)
        throw shape_error("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const std::size_t m = a.extent(a.rank() - 2);
    const std::size_t n = b.extent(1);
    std::size_t batch = 1;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.back() = m;
    out_shape.push_back(n);
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.extent(i);

    Tensor<S> out(out_shape);
    const S* ad = a.data();
    const S* bd = b.data();
    S* od = out.data();
    for (std::size_t bi = 0; bi < batch; ++bi) {
        const S* A = ad + bi * m * k;
        S* O = od + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            S* orow = O + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const S av = A[i * k + p];
                const S* brow = bd + p * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    count_macs(batch * m * k * n);

    if (detail::tracking<S>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        Tape<S>::active()->record([as, bs, os, batch, m, k, n] {
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const S* A = as->data.data() + bi * m * k;
                const S* G = os->grad.data() + bi * m * n;
                if (!as->grad.empty()) {
                    S* GA = as->grad.data() + bi * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const S g = G[i * n + j];
                            const S* brow = bs->data.data() + j;
                            for (std::size_t p = 0; p < k; ++p)
                                GA[i * k + p] += g * brow[p * n];
                        }
                }
                if (!bs->grad.empty()) {
                    for (std::size_t p = 0; p < k; ++p) {
                        S* gb = bs->grad.data() + p * n;
                        for (std::size_t i = 0; i < m; ++i) {
                            const S av = A[i * k + p];
                            const S* grow = G + i * n;
                            for (std::size_t j = 0; j < n; ++j) gb[j] += av * grow[j];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- batched matmul: [B, m, k] x [B, k, n] -> [B, m, n] ----
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
        a.extent(2) != b.extent(1))
        throw shape_error("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const std::size_t B = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    Tensor<S> out({B, m, n});
    for (std::size_t bi = 0; bi < B; ++bi) {
        const S* A = a.data() + bi * m * k;
        const S* Bm = b.data() + bi * k * n;
        S* O = out.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const S av = A[i * k + p];
                const S* brow = Bm + p * n;
                S* orow = O + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
    }
    count_macs(B * m * k * n);

    if (detail::tracking<S>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        Tape<S>::active()->record([as, bs, os, B, m, k, n] {
            for (std::size_t bi = 0; bi < B; ++bi) {
                const S* A = as->data.data() + bi * m * k;
                const S* Bm = bs->data.data() + bi * k * n;
                const S* G = os->grad.data() + bi * m * n;
                if (!as->grad.empty()) {
                    S* GA = as->grad.data() + bi * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) {
                            const S g = G[i * n + j];
                            for (std::size_t p = 0; p < k; ++p)
                                GA[i * k + p] += g * Bm[p * n + j];
                        }
                }
                if (!bs->grad.empty()) {
                    S* GB = bs->grad.data() + bi * k * n;
                    for (std::size_t p = 0; p < k; ++p)
                        for (std::size_t i = 0; i < m; ++i) {
                            const S av = A[i * k + p];
                            const S* grow = G + i * n;
                            S* gbrow = GB + p * n;
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        });
    }
    return out;
}

// ---- linear: [..., in] x W[in, out] + b[out] ----
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
    Shape flat{x.size() / x.extent(x.rank() - 1), x.extent(x.rank() - 1)};
    Tensor<S> y = matmul(reshape(x, flat), w);
    if (bias.defined()) {
        if (bias.size() != w.extent(1))
            throw shape_error("linear: bias length does not match output dim");
        const std::size_t rows = y.extent(0), n = y.extent(1);
        Tensor<S> out(y.shape());
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j)
                out.data()[r * n + j] = y.data()[r * n + j] + bias.data()[j];
        if (detail::tracking<S>({&y, &bias})) {
            detail::mark_tracked(out);
            auto ys = y.storage(), bs = bias.storage(), os = out.storage();
            Tape<S>::active()->record([ys, bs, os, rows, n] {
                if (!ys->grad.empty())
                    for (std::size_t i = 0; i < rows * n; ++i) ys->grad[i] += os->grad[i];
                if (!bs->grad.empty())
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j)
                            bs->grad[j] += os->grad[r * n + j];
            });
        }
        y = out;
    }
    Shape out_shape = x.shape();
    out_shape.back() = w.extent(1);
    return reshape(y, out_shape);
}

// ---- softmax along an axis, max-subtracted ----
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
    if (axis >= x.rank()) throw shape_error("softmax: axis out of range");
    const std::size_t len = x.extent(axis);
    std::size_t outer = 1, inner = 1;
    for (std::size_t k = 0; k < axis; ++k) outer *= x.extent(k);
    for (std::size_t k = axis + 1; k < x.rank(); ++k) inner *= x.extent(k);

    Tensor<S> out(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const S* src = x.data() + o * len * inner + in;
            S* dst = out.data() + o * len * inner + in;
            S mx = src[0];
            for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, src[i * inner]);
            S denom = 0;
            for (std::size_t i = 0; i < len; ++i) {
                S e = std::exp(src[i * inner] - mx);
                dst[i * inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < len; ++i) dst[i * inner] /= denom;
        }

    if (detail::tracking<S>({&x})) {
        detail::mark_tracked(out);
        auto xs = x.storage();
        auto os = out.storage();
        Tape<S>::active()->record([xs, os, outer, inner, len] {
            if (xs->grad.empty()) return;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const S* y = os->data.data() + o * len * inner + in;
                    const S* g = os->grad.data() + o * len * inner + in;
                    S* gx = xs->grad.data() + o * len * inner + in;
                    S dot = 0;
                    for (std::size_t i = 0; i < len; ++i) dot += y[i * inner] * g[i * inner];
                    for (std::size_t i = 0; i < len; ++i)
                        gx[i * inner] += y[i * inner] * (g[i * inner] - dot);
                }
        });
    }
    return out;
}

// ---- layer norm over the last axis ----
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, std::size_t normalized_extent, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps) {
    if (normalized_extent == 0) throw shape_error("layer_norm: empty normalized axis");
    if (eps <= S(0)) throw value_error("layer_norm: eps must be positive");
    if (x.extent(x.rank() - 1) != normalized_extent)
        throw shape_error("layer_norm: last extent " + std::to_string(x.extent(x.rank() - 1)) +
                          " != normalized_extent " + std::to_string(normalized_extent));
    if (gamma.size() != normalized_extent || beta.size() != normalized_extent)
        throw shape_error("layer_norm: gamma/beta length mismatch");
    const std::size_t rows = x.size() / normalized_extent;
    const std::size_t n = normalized_extent;

    Tensor<S> out(x.shape());
    auto stats = std::make_shared<std::vector<S>>(rows * 2);  // mean, inv_std per row
    for (std::size_t r = 0; r < rows; ++r) {
        const S* src = x.data() + r * n;
        S mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += src[i];
        mean /= S(n);
        S var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            S d = src[i] - mean;
            var += d * d;
        }
        var /= S(n);
        const S inv_std = S(1) / std::sqrt(var + eps);
        (*stats)[2 * r] = mean;
        (*stats)[2 * r + 1] = inv_std;
        S* dst = out.data() + r * n;
        for (std::size_t i = 0; i < n; ++i)
            dst[i] = (src[i] - mean) * inv_std * gamma.data()[i] + beta.data()[i];
    }

    if (detail::tracking<S>({&x, &gamma, &beta})) {
        detail::mark_tracked(out);
        auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
        Tape<S>::active()->record([xs, gs, bs, os, stats, rows, n] {
            for (std::size_t r = 0; r < rows; ++r) {
                const S mean = (*stats)[2 * r];
                const S inv_std = (*stats)[2 * r + 1];
                const S* src = xs->data.data() + r * n;
                const S* g = os->grad.data() + r * n;
                if (!gs->grad.empty() || !bs->grad.empty()) {
                    for (std::size_t i = 0; i < n; ++i) {
                        const S xhat = (src[i] - mean) * inv_std;
                        if (!gs->grad.empty()) gs->grad[i] += g[i] * xhat;
                        if (!bs->grad.empty()) bs->grad[i] += g[i];
                    }
                }
                if (!xs->grad.empty()) {
                    S sum_g = 0, sum_gx = 0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const S gi = g[i] * gs->data[i];
                        const S xhat = (src[i] - mean) * inv_std;
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        const S gi = g[i] * gs->data[i];
                        const S xhat = (src[i] - mean) * inv_std;
                        xs->grad[r * n + i] +=
                            inv_std * (gi - sum_g / S(n) - xhat * sum_gx / S(n));
                    }
                }
            }
        });
    }
    return out;
}

// ---- conv3d: [N, Cin, D, H, W] * [Cout, Cin, kd, kh, kw] ----
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight, Triple stride = {},
                 Triple padding = {0, 0, 0}) {
    if (input.rank() != 5)
        throw shape_error("conv3d: input must be rank 5 [N,C,D,H,W], got " +
                          shape_str(input.shape()));
    if (weight.rank() != 5)
        throw shape_error("conv3d: weight must be rank 5 [Cout,Cin,kd,kh,kw], got " +
                          shape_str(weight.shape()));
    if (input.extent(1) != weight.extent(1))
        throw shape_error("conv3d: input channel axis " + std::to_string(input.extent(1)) +
                          " != weight channel axis " + std::to_string(weight.extent(1)));
    if (stride.d < 1 || stride.h < 1 || stride.w < 1)
        throw value_error("conv3d: stride components must be >= 1");
    const std::size_t N = input.extent(0), Cin = input.extent(1), D = input.extent(2),
                      H = input.extent(3), W = input.extent(4);
    const std::size_t Cout = weight.extent(0), kd = weight.extent(2), kh = weight.extent(3),
                      kw = weight.extent(4);
    if (kd > D + 2 * padding.d || kh > H + 2 * padding.h || kw > W + 2 * padding.w)
        throw shape_error("conv3d: kernel exceeds padded input extents");
    const std::size_t Do = (D + 2 * padding.d - kd) / stride.d + 1;
    const std::size_t Ho = (H + 2 * padding.h - kh) / stride.h + 1;
    const std::size_t Wo = (W + 2 * padding.w - kw) / stride.w + 1;

    Tensor<S> out({N, Cout, Do, Ho, Wo});
    const S* in = input.data();
    const S* wt = weight.data();
    S* od = out.data();
    const std::size_t in_c = D * H * W, in_n = Cin * in_c;
    const std::size_t out_c = Do * Ho * Wo, out_n = Cout * out_c;
    const std::size_t w_ci = kd * kh * kw, w_co = Cin * w_ci;

    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t zo = 0; zo < Do; ++zo)
                for (std::size_t yo = 0; yo < Ho; ++yo)
                    for (std::size_t xo = 0; xo < Wo; ++xo) {
                        S acc = 0;
                        const long z0 = long(zo * stride.d) - long(padding.d);
                        const long y0 = long(yo * stride.h) - long(padding.h);
                        const long x0 = long(xo * stride.w) - long(padding.w);
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            const S* ip = in + n * in_n + ci * in_c;
                            const S* wp = wt + co * w_co + ci * w_ci;
                            for (std::size_t z = 0; z < kd; ++z) {
                                const long zi = z0 + long(z);
                                if (zi < 0 || zi >= long(D)) continue;
                                for (std::size_t y = 0; y < kh; ++y) {
                                    const long yi = y0 + long(y);
                                    if (yi < 0 || yi >= long(H)) continue;
                                    const S* irow = ip + (std::size_t(zi) * H + std::size_t(yi)) * W;
                                    const S* wrow = wp + (z * kh + y) * kw;
                                    for (std::size_t xk = 0; xk < kw; ++xk) {
                                        const long xi = x0 + long(xk);
                                        if (xi < 0 || xi >= long(W)) continue;
                                        acc += irow[std::size_t(xi)] * wrow[xk];
                                    }
                                }
                            }
                        }
                        od[n * out_n + co * out_c + (zo * Ho + yo) * Wo + xo] = acc;
                    }
    count_macs(N * Cout * out_c * Cin * w_ci);

    if (detail::tracking<S>({&input, &weight})) {
        detail::mark_tracked(out);
        auto is = input.storage(), ws = weight.storage(), os = out.storage();
        Tape<S>::active()->record([is, ws, os, N, Cin, Cout, D, H, W, Do, Ho, Wo, kd, kh, kw,
                                   stride, padding, in_c, in_n, out_c, out_n, w_ci, w_co] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t zo = 0; zo < Do; ++zo)
                        for (std::size_t yo = 0; yo < Ho; ++yo)
                            for (std::size_t xo = 0; xo < Wo; ++xo) {
                                const S g =
                                    os->grad[n * out_n + co * out_c + (zo * Ho + yo) * Wo + xo];
                                if (g == S(0)) continue;
                                const long z0 = long(zo * stride.d) - long(padding.d);
                                const long y0 = long(yo * stride.h) - long(padding.h);
                                const long x0 = long(xo * stride.w) - long(padding.w);
                                for (std::size_t ci = 0; ci < Cin; ++ci)
                                    for (std::size_t z = 0; z < kd; ++z) {
                                        const long zi = z0 + long(z);
                                        if (zi < 0 || zi >= long(D)) continue;
                                        for (std::size_t y = 0; y < kh; ++y) {
                                            const long yi = y0 + long(y);
                                            if (yi < 0 || yi >= long(H)) continue;
                                            for (std::size_t xk = 0; xk < kw; ++xk) {
                                                const long xi = x0 + long(xk);
                                                if (xi < 0 || xi >= long(W)) continue;
                                                const std::size_t ii =
                                                    n * in_n + ci * in_c +
                                                    (std::size_t(zi) * H + std::size_t(yi)) * W +
                                                    std::size_t(xi);
                                                const std::size_t wi =
                                                    co * w_co + ci * w_ci + (z * kh + y) * kw + xk;
                                                if (!is->grad.empty())
                                                    is->grad[ii] += g * ws->data[wi];
                                                if (!ws->grad.empty())
                                                    ws->grad[wi] += g * is->data[ii];
                                            }
                                        }
                                    }
                            }
        });
    }
    return out;
}

// ---- depthwise conv3d with same padding: [N, C, D, H, W] * [C, 1, kd, kh, kw] ----
template <typename S>
Tensor<S> depthwise_conv3d(const Tensor<S>& input, const Tensor<S>& weight) {
    if (input.rank() != 5 || weight.rank() != 5)
        throw shape_error("depthwise_conv3d: expected rank-5 input and weight");
    if (weight.extent(1) != 1)
        throw shape_error("depthwise_conv3d: weight channel multiplier axis must be 1");
    if (input.extent(1) != weight.extent(0))
        throw shape_error("depthwise_conv3d: channel axis mismatch, input " +
                          std::to_string(input.extent(1)) + " vs weight " +
                          std::to_string(weight.extent(0)));
    const std::size_t kd = weight.extent(2), kh = weight.extent(3), kw = weight.extent(4);
    if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0)
        throw value_error("depthwise_conv3d: even kernel extents unsupported with same padding");
    const std::size_t N = input.extent(0), C = input.extent(1), D = input.extent(2),
                      H = input.extent(3), W = input.extent(4);
    const Triple pad{kd / 2, kh / 2, kw / 2};

    Tensor<S> out(input.shape());
    const std::size_t plane = D * H * W;
    const std::size_t w_c = kd * kh * kw;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const S* ip = input.data() + (n * C + c) * plane;
            const S* wp = weight.data() + c * w_c;
            S* op = out.data() + (n * C + c) * plane;
            for (std::size_t zo = 0; zo < D; ++zo)
                for (std::size_t yo = 0; yo < H; ++yo)
                    for (std::size_t xo = 0; xo < W; ++xo) {
                        S acc = 0;
                        for (std::size_t z = 0; z < kd; ++z) {
                            const long zi = long(zo + z) - long(pad.d);
                            if (zi < 0 || zi >= long(D)) continue;
                            for (std::size_t y = 0; y < kh; ++y) {
                                const long yi = long(yo + y) - long(pad.h);
                                if (yi < 0 || yi >= long(H)) continue;
                                const S* irow = ip + (std::size_t(zi) * H + std::size_t(yi)) * W;
                                const S* wrow = wp + (z * kh + y) * kw;
                                for (std::size_t xk = 0; xk < kw; ++xk) {
                                    const long xi = long(xo + xk) - long(pad.w);
                                    if (xi < 0 || xi >= long(W)) continue;
                                    acc += irow[std::size_t(xi)] * wrow[xk];
                                }
                            }
                        }
                        op[(zo * H + yo) * W + xo] = acc;
                    }
        }
    count_macs(N * C * plane * w_c);

    if (detail::tracking<S>({&input, &weight})) {
        detail::mark_tracked(out);
        auto is = input.storage(), ws = weight.storage(), os = out.storage();
        Tape<S>::active()->record([is, ws, os, N, C, D, H, W, kd, kh, kw, pad, plane, w_c] {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (n * C + c) * plane;
                    for (std::size_t zo = 0; zo < D; ++zo)
                        for (std::size_t yo = 0; yo < H; ++yo)
                            for (std::size_t xo = 0; xo < W; ++xo) {
                                const S g = os->grad[base + (zo * H + yo) * W + xo];
                                if (g == S(0)) continue;
                                for (std::size_t z = 0; z < kd; ++z) {
                                    const long zi = long(zo + z) - long(pad.d);
                                    if (zi < 0 || zi >= long(D)) continue;
                                    for (std::size_t y = 0; y < kh; ++y) {
                                        const long yi = long(yo + y) - long(pad.h);
                                        if (yi < 0 || yi >= long(H)) continue;
                                        for (std::size_t xk = 0; xk < kw; ++xk) {
                                            const long xi = long(xo + xk) - long(pad.w);
                                            if (xi < 0 || xi >= long(W)) continue;
                                            const std::size_t ii =
                                                base + (std::size_t(zi) * H + std::size_t(yi)) * W +
                                                std::size_t(xi);
                                            const std::size_t wi =
                                                c * w_c + (z * kh + y) * kw + xk;
                                            if (!is->grad.empty())
                                                is->grad[ii] += g * ws->data[wi];
                                            if (!ws->grad.empty())
                                                ws->grad[wi] += g * is->data[ii];
                                        }
                                    }
                                }
                            }
                }
        });
    }
    return out;
}

// ---- trilinear sampling on [C, D, H, W] at normalized points [P, 3] ----
//
// Normalized coordinate of voxel index i on an axis of extent N is
// -1 + (2i + 1) / N (cell centers). Out-of-range points clamp to the border.
namespace detail {

template <typename S>
inline S to_continuous_index(S coord, std::size_t extent) {
    return (coord + S(1)) * S(extent) * S(0.5) - S(0.5);
}

}  // namespace detail

template <typename S>
Tensor<S> trilinear_sample(const Tensor<S>& grid, const Tensor<S>& points) {
    if (grid.rank() != 4)
        throw shape_error("trilinear_sample: grid must be rank 4 [C,D,H,W]");
    for (std::size_t k = 0; k < 4; ++k)
        if (grid.extent(k) == 0) throw shape_error("trilinear_sample: empty grid");
    if (points.rank() != 2 || points.extent(1) != 3)
        throw shape_error("trilinear_sample: points must be [P,3]");
    const std::size_t C = grid.extent(0), D = grid.extent(1), H = grid.extent(2),
                      W = grid.extent(3);
    const std::size_t P = points.extent(0);
    const std::size_t plane = D * H * W;

    Tensor<S> out({P, C});
    // Cached cell corners and weights: per point, per axis: i0, frac, in-range flag.
    struct AxisSample {
        std::size_t i0, i1;
        S frac;    // interpolation weight toward i1
        S dfrac;   // d frac / d continuous-index (0 when clamped)
    };
    auto samples = std::make_shared<std::vector<std::array<AxisSample, 3>>>(P);
    const std::size_t extents[3] = {D, H, W};
    for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t ax = 0; ax < 3; ++ax) {
            const std::size_t N = extents[ax];
            S t = detail::to_continuous_index(points.data()[p * 3 + ax], N);
            S dfrac = S(1);
            if (t <= S(0)) {
                t = S(0);
                dfrac = S(0);
            } else if (t >= S(N - 1)) {
                t = S(N - 1);
                dfrac = S(0);
            }
            const std::size_t i0 = std::min<std::size_t>(std::size_t(std::floor(t)), N - 1);
            const std::size_t i1 = std::min<std::size_t>(i0 + 1, N - 1);
            (*samples)[p][ax] = {i0, i1, t - S(i0), dfrac};
        }
        const auto& sz = (*samples)[p][0];
        const auto& sy = (*samples)[p][1];
        const auto& sx = (*samples)[p][2];
        for (std::size_t c = 0; c < C; ++c) {
            const S* g = grid.data() + c * plane;
            auto at = [&](std::size_t z, std::size_t y, std::size_t x) {
                return g[(z * H + y) * W + x];
            };
            const S v00 = at(sz.i0, sy.i0, sx.i0) * (S(1) - sx.frac) + at(sz.i0, sy.i0, sx.i1) * sx.frac;
            const S v01 = at(sz.i0, sy.i1, sx.i0) * (S(1) - sx.frac) + at(sz.i0, sy.i1, sx.i1) * sx.frac;
            const S v10 = at(sz.i1, sy.i0, sx.i0) * (S(1) - sx.frac) + at(sz.i1, sy.i0, sx.i1) * sx.frac;
            const S v11 = at(sz.i1, sy.i1, sx.i0) * (S(1) - sx.frac) + at(sz.i1, sy.i1, sx.i1) * sx.frac;
            const S v0 = v00 * (S(1) - sy.frac) + v01 * sy.frac;
            const S v1 = v10 * (S(1) - sy.frac) + v11 * sy.frac;
            out.data()[p * C + c] = v0 * (S(1) - sz.frac) + v1 * sz.frac;
        }
    }

    if (detail::tracking<S>({&grid, &points})) {
        detail::mark_tracked(out);
        auto gs = grid.storage(), ps = points.storage(), os = out.storage();
        Tape<S>::active()->record([gs, ps, os, samples, C, D, H, W, P, plane] {
            for (std::size_t p = 0; p < P; ++p) {
                const auto& sz = (*samples)[p][0];
                const auto& sy = (*samples)[p][1];
                const auto& sx = (*samples)[p][2];
                const S wz[2] = {S(1) - sz.frac, sz.frac};
                const S wy[2] = {S(1) - sy.frac, sy.frac};
                const S wx[2] = {S(1) - sx.frac, sx.frac};
                const std::size_t iz[2] = {sz.i0, sz.i1};
                const std::size_t iy[2] = {sy.i0, sy.i1};
                const std::size_t ix[2] = {sx.i0, sx.i1};
                S gcoord[3] = {0, 0, 0};
                for (std::size_t c = 0; c < C; ++c) {
                    const S g = os->grad[p * C + c];
                    if (g == S(0)) continue;
                    const S* gd = gs->data.data() + c * plane;
                    for (int a = 0; a < 2; ++a)
                        for (int b = 0; b < 2; ++b)
                            for (int d = 0; d < 2; ++d) {
                                const std::size_t idx =
                                    c * plane + (iz[a] * H + iy[b]) * W + ix[d];
                                if (!gs->grad.empty())
                                    gs->grad[idx] += g * wz[a] * wy[b] * wx[d];
                                const S v = gd[(iz[a] * H + iy[b]) * W + ix[d]];
                                const S sa = a ? S(1) : S(-1);
                                const S sb = b ? S(1) : S(-1);
                                const S sd = d ? S(1) : S(-1);
                                gcoord[0] += g * v * sa * wy[b] * wx[d];
                                gcoord[1] += g * v * wz[a] * sb * wx[d];
                                gcoord[2] += g * v * wz[a] * wy[b] * sd;
                            }
                }
                if (!ps->grad.empty()) {
                    // chain through the index map t = (x + 1) * N / 2 - 1/2
                    const S dts[3] = {sz.dfrac * S(D) * S(0.5), sy.dfrac * S(H) * S(0.5),
                                      sx.dfrac * S(W) * S(0.5)};
                    for (std::size_t ax = 0; ax < 3; ++ax)
                        ps->grad[p * 3 + ax] += gcoord[ax] * dts[ax];
                }
            }
        });
    }
    return out;
}

// ---- gather channel vectors at integer cells: grid [C,D,H,W], cells [P*K][3] ----
// Differentiable w.r.t. the grid (scatter-add); cell indices are data.
template <typename S>
Tensor<S> gather_cells(const Tensor<S>& grid, const std::vector<std::size_t>& cells,
                       std::size_t P, std::size_t K) {
    if (grid.rank() != 4) throw shape_error("gather_cells: grid must be rank 4 [C,D,H,W]");
    if (cells.size() != P * K * 3) throw shape_error("gather_cells: index buffer size mismatch");
    const std::size_t C = grid.extent(0), D = grid.extent(1), H = grid.extent(2),
                      W = grid.extent(3);
    const std::size_t plane = D * H * W;
    auto offs = std::make_shared<std::vector<std::size_t>>(P * K);
    for (std::size_t i = 0; i < P * K; ++i) {
        const std::size_t z = cells[i * 3], y = cells[i * 3 + 1], x = cells[i * 3 + 2];
        if (z >= D || y >= H || x >= W) throw shape_error("gather_cells: cell index out of range");
        (*offs)[i] = (z * H + y) * W + x;
    }
    Tensor<S> out({P, K, C});
    for (std::size_t i = 0; i < P * K; ++i)
        for (std::size_t c = 0; c < C; ++c)
            out.data()[i * C + c] = grid.data()[c * plane + (*offs)[i]];

    if (detail::tracking<S>({&grid})) {
        detail::mark_tracked(out);
        auto gs = grid.storage();
        auto os = out.storage();
        Tape<S>::active()->record([gs, os, offs, P, K, C, plane] {
            if (gs->grad.empty()) return;
            for (std::size_t i = 0; i < P * K; ++i)
                for (std::size_t c = 0; c < C; ++c)
                    gs->grad[c * plane + (*offs)[i]] += os->grad[i * C + c];
        });
    }
    return out;
}

// ---- resize [C, D, H, W] to new extents ----
// Trilinear variant samples the input at the output cell centers under the
// shared cell-center convention; nearest picks the closest cell.
template <typename S>
Tensor<S> upsample(const Tensor<S>& x, std::size_t Do, std::size_t Ho, std::size_t Wo,
                   bool trilinear = true) {
    if (x.rank() != 4) throw shape_error("upsample: input must be rank 4 [C,D,H,W]");
    if (Do == 0 || Ho == 0 || Wo == 0) throw shape_error("upsample: empty target");
    const std::size_t C = x.extent(0), D = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (!trilinear) {
        auto map = [](std::size_t o, std::size_t No, std::size_t Ni) {
            const double t = (double(o) + 0.5) * double(Ni) / double(No) - 0.5;
            long i = std::lround(t);
            return std::size_t(std::clamp<long>(i, 0, long(Ni) - 1));
        };
        auto idx = std::make_shared<std::vector<std::size_t>>(Do * Ho * Wo);
        for (std::size_t z = 0; z < Do; ++z)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xx = 0; xx < Wo; ++xx)
                    (*idx)[(z * Ho + y) * Wo + xx] =
                        (map(z, Do, D) * H + map(y, Ho, H)) * W + map(xx, Wo, W);
        const std::size_t po = Do * Ho * Wo, pi = D * H * W;
        Tensor<S> outt({C, Do, Ho, Wo});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < po; ++i)
                outt.data()[c * po + i] = x.data()[c * pi + (*idx)[i]];
        if (detail::tracking<S>({&x})) {
            detail::mark_tracked(outt);
            auto xs = x.storage();
            auto os = outt.storage();
            Tape<S>::active()->record([xs, os, idx, C, po, pi] {
                if (xs->grad.empty()) return;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < po; ++i)
                        xs->grad[c * pi + (*idx)[i]] += os->grad[c * po + i];
            });
        }
        return outt;
    }
    // Trilinear resize reuses the sampling kernel on the output cell centers.
    Tensor<S> pts({Do * Ho * Wo, 3});
    std::size_t r = 0;
    for (std::size_t z = 0; z < Do; ++z)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx, ++r) {
                pts.data()[r * 3 + 0] = S(-1) + S(2 * z + 1) / S(Do);
                pts.data()[r * 3 + 1] = S(-1) + S(2 * y + 1) / S(Ho);
                pts.data()[r * 3 + 2] = S(-1) + S(2 * xx + 1) / S(Wo);
            }
    Tensor<S> sampled = trilinear_sample(x, pts);           // [P, C]
    Tensor<S> perm = permute(sampled, {1, 0});              // [C, P]
    return reshape(perm, {C, Do, Ho, Wo});
}

}  // namespace mgir
