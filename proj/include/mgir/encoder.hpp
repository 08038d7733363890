#pragma once

#include "mgir/ops.hpp"
#include "mgir/params.hpp"

namespace mgir {

enum class Fusion { Addition, Concatenation };

struct EncoderConfig {
    std::size_t base_channels = 8;
    std::array<std::size_t, 4> stage_depths{2, 2, 4, 4};
    std::size_t spatial_kernel = 5;
    std::size_t spectral_kernel = 5;
    std::size_t mlp_ratio = 2;
    Fusion fusion = Fusion::Addition;

    static constexpr std::size_t stages = 4;

    std::size_t stage_channels(std::size_t stage) const {
        return base_channels << (stage - 1);  // stage in 1..4
    }

    void validate() const {
        if (base_channels == 0) throw config_error("encoder: base_channels must be >= 1");
        if (spatial_kernel % 2 == 0 || spectral_kernel % 2 == 0)
            throw config_error("encoder: depthwise kernels must be odd");
        for (std::size_t d : stage_depths)
            if (d == 0) throw config_error("encoder: stage depths must be >= 1");
    }
};

template <typename S>
struct LatentPyramid {
    std::vector<Tensor<S>> levels;  // level i (1-based): [2^(i-1)*C, D_i, H/2^(i-1), W/2^(i-1)]
};

namespace detail {

template <typename S>
Tensor<S> channel_bias(const Tensor<S>& x, const Tensor<S>& bias) {
    // x: [N, C, ...], bias: [C]
    const std::size_t C = x.extent(1);
    if (bias.size() != C) throw shape_error("channel_bias: bias length != channel count");
    const std::size_t N = x.extent(0);
    const std::size_t inner = x.size() / (N * C);
    Tensor<S> out(x.shape());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const S b = bias.data()[c];
            const S* src = x.data() + (n * C + c) * inner;
            S* dst = out.data() + (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i] + b;
        }
    if (tracking<S>({&x, &bias})) {
        mark_tracked(out);
        auto xs = x.storage(), bs = bias.storage(), os = out.storage();
        Tape<S>::active()->record([xs, bs, os, N, C, inner] {
            if (!xs->grad.empty())
                for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
            if (!bs->grad.empty())
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c) {
                        const S* g = os->grad.data() + (n * C + c) * inner;
                        S acc = 0;
                        for (std::size_t i = 0; i < inner; ++i) acc += g[i];
                        bs->grad[c] += acc;
                    }
        });
    }
    return out;
}

// LayerNorm across the channel axis of [N, C, D, H, W].
template <typename S>
Tensor<S> layer_norm_channels(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                              S eps = S(1e-5)) {
    Tensor<S> moved = permute(x, {0, 2, 3, 4, 1});
    Tensor<S> normed = layer_norm(moved, x.extent(1), gamma, beta, eps);
    return permute(normed, {0, 4, 1, 2, 3});
}

template <typename S>
Tensor<S> pointwise_conv(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return channel_bias(conv3d(x, w, Triple{1, 1, 1}, Triple{0, 0, 0}), b);
}

}  // namespace detail

// Parameters for one SSDW block, fetched by name from the store.
template <typename S>
struct SsdwParams {
    Tensor<S> f2_w, f2_b;      // 1x1x1 conv in
    Tensor<S> dw_spatial;      // [C,1,1,ks,ks]
    Tensor<S> dw_spectral;     // [C,1,kt,1,1]
    Tensor<S> pw_w, pw_b;      // 1x1x1 integration conv
    Tensor<S> f1_w, f1_b;      // 1x1x1 conv out
    Tensor<S> mlp1_w, mlp1_b;  // 1x1x1 expansion
    Tensor<S> mlp2_w, mlp2_b;  // 1x1x1 contraction
};

// x_mid = f1(pw(dw_spectral(dw_spatial(f2(x))))) + x; out = mlp(x_mid) + x_mid
template <typename S>
Tensor<S> ssdw(const Tensor<S>& x, const SsdwParams<S>& p) {
    using detail::pointwise_conv;
    Tensor<S> h = pointwise_conv(x, p.f2_w, p.f2_b);
    h = depthwise_conv3d(h, p.dw_spatial);
    h = depthwise_conv3d(h, p.dw_spectral);
    h = pointwise_conv(h, p.pw_w, p.pw_b);
    h = pointwise_conv(h, p.f1_w, p.f1_b);
    Tensor<S> mid = add(h, x);
    Tensor<S> m = pointwise_conv(mid, p.mlp1_w, p.mlp1_b);
    m = gelu(m);
    m = pointwise_conv(m, p.mlp2_w, p.mlp2_b);
    return add(m, mid);
}

template <typename S>
class Encoder {
public:
    Encoder(EncoderConfig cfg, ParameterStore<S>& store, std::mt19937* init_rng = nullptr)
        : cfg_(cfg), store_(&store) {
        cfg_.validate();
        if (init_rng) register_params(*init_rng);
    }

    const EncoderConfig& config() const { return cfg_; }

    // Stage stride plan: stage 1 keeps all extents, stage 2 halves everything,
    // stages 3-4 halve only the spatial extents (spectral extent stays at D/2).
    static Triple stage_stride(std::size_t stage) {
        if (stage == 1) return {1, 1, 1};
        if (stage == 2) return {2, 2, 2};
        return {1, 2, 2};
    }

    // Strided 3x3x3 convolution + channel LayerNorm.
    Tensor<S> patch_embed(const Tensor<S>& x, std::size_t stage) const {
        if (stage < 1 || stage > EncoderConfig::stages)
            throw config_error("patch_embed: stage must be in 1..4");
        const std::string pfx = "enc.stage" + std::to_string(stage) + ".embed.";
        Tensor<S> y = conv3d(x, store_->get(pfx + "w"), stage_stride(stage), Triple{1, 1, 1});
        y = detail::channel_bias(y, store_->get(pfx + "b"));
        return detail::layer_norm_channels(y, store_->get(pfx + "ln_g"), store_->get(pfx + "ln_b"));
    }

    Tensor<S> ssdw_block(const Tensor<S>& x, std::size_t stage, std::size_t block) const {
        return mgir::ssdw(x, ssdw_params(stage, block));
    }

    SsdwParams<S> ssdw_params(std::size_t stage, std::size_t block) const {
        const std::string pfx =
            "enc.stage" + std::to_string(stage) + ".block" + std::to_string(block) + ".";
        SsdwParams<S> p;
        p.f2_w = store_->get(pfx + "f2.w");
        p.f2_b = store_->get(pfx + "f2.b");
        p.dw_spatial = store_->get(pfx + "dws.w");
        p.dw_spectral = store_->get(pfx + "dwt.w");
        p.pw_w = store_->get(pfx + "pw.w");
        p.pw_b = store_->get(pfx + "pw.b");
        p.f1_w = store_->get(pfx + "f1.w");
        p.f1_b = store_->get(pfx + "f1.b");
        p.mlp1_w = store_->get(pfx + "mlp1.w");
        p.mlp1_b = store_->get(pfx + "mlp1.b");
        p.mlp2_w = store_->get(pfx + "mlp2.w");
        p.mlp2_b = store_->get(pfx + "mlp2.b");
        return p;
    }

    LatentPyramid<S> encode(const Tensor<S>& m0) const {
        if (m0.rank() != 4 || m0.extent(0) != 1)
            throw shape_error("encode: expected [1, D, H, W] initial latent, got " +
                              shape_str(m0.shape()));
        Tensor<S> x = reshape(m0, {1, 1, m0.extent(1), m0.extent(2), m0.extent(3)});

        std::vector<Tensor<S>> stage_out;  // S_i, [1, C_i, D_i, H_i, W_i]
        for (std::size_t stage = 1; stage <= EncoderConfig::stages; ++stage) {
            const Triple st = stage_stride(stage);
            if ((st.h > 1 && (x.extent(3) < 2 || x.extent(4) < 2)) ||
                (st.d > 1 && x.extent(2) < 2))
                throw config_error("encoder: input too small for stage " + std::to_string(stage) +
                                   " stride plan (extents " + shape_str(x.shape()) + ")");
            x = patch_embed(x, stage);
            for (std::size_t b = 1; b <= cfg_.stage_depths[stage - 1]; ++b)
                x = ssdw_block(x, stage, b);
            stage_out.push_back(x);
        }

        // Top-down fusion: each level combines its stage output with the
        // channel-reduced, upsampled next-deeper level.
        std::vector<Tensor<S>> levels(EncoderConfig::stages);
        for (std::size_t stage = EncoderConfig::stages; stage >= 1; --stage) {
            const std::string pfx = "enc.fuse" + std::to_string(stage) + ".";
            Tensor<S> own = detail::pointwise_conv(stage_out[stage - 1], store_->get(pfx + "pre.w"),
                                                   store_->get(pfx + "pre.b"));
            if (stage == EncoderConfig::stages) {
                levels[stage - 1] = own;
            } else {
                const Tensor<S>& deeper = levels[stage];
                Tensor<S> up = reshape(
                    upsample(reshape(deeper, Shape(deeper.shape().begin() + 1, deeper.shape().end())),
                             own.extent(2), own.extent(3), own.extent(4), true),
                    {1, deeper.extent(1), own.extent(2), own.extent(3), own.extent(4)});
                up = detail::pointwise_conv(up, store_->get(pfx + "up.w"), store_->get(pfx + "up.b"));
                if (cfg_.fusion == Fusion::Addition) {
                    levels[stage - 1] = add(own, up);
                } else {
                    Tensor<S> cat = concat<S>({own, up}, 1);
                    levels[stage - 1] = detail::pointwise_conv(cat, store_->get(pfx + "mix.w"),
                                                               store_->get(pfx + "mix.b"));
                }
            }
            if (stage == 1) break;
        }

        LatentPyramid<S> pyr;
        for (auto& lv : levels)
            pyr.levels.push_back(reshape(lv, Shape(lv.shape().begin() + 1, lv.shape().end())));
        return pyr;
    }

private:
    void register_params(std::mt19937& rng) {
        auto conv_w = [&](std::size_t co, std::size_t ci, std::size_t kd, std::size_t kh,
                          std::size_t kw) {
            return uniform_init<S>({co, ci, kd, kh, kw}, ci * kd * kh * kw, rng);
        };
        for (std::size_t stage = 1; stage <= EncoderConfig::stages; ++stage) {
            const std::size_t ci = stage == 1 ? 1 : cfg_.stage_channels(stage - 1);
            const std::size_t co = cfg_.stage_channels(stage);
            const std::string epfx = "enc.stage" + std::to_string(stage) + ".embed.";
            store_->add(epfx + "w", conv_w(co, ci, 3, 3, 3));
            store_->add(epfx + "b", Tensor<S>({co}));
            store_->add(epfx + "ln_g", Tensor<S>({co}, S(1)));
            store_->add(epfx + "ln_b", Tensor<S>({co}));
            for (std::size_t b = 1; b <= cfg_.stage_depths[stage - 1]; ++b) {
                const std::string bpfx =
                    "enc.stage" + std::to_string(stage) + ".block" + std::to_string(b) + ".";
                const std::size_t hidden = co * cfg_.mlp_ratio;
                store_->add(bpfx + "f2.w", conv_w(co, co, 1, 1, 1));
                store_->add(bpfx + "f2.b", Tensor<S>({co}));
                store_->add(bpfx + "dws.w",
                            uniform_init<S>({co, 1, 1, cfg_.spatial_kernel, cfg_.spatial_kernel},
                                            cfg_.spatial_kernel * cfg_.spatial_kernel, rng));
                store_->add(bpfx + "dwt.w",
                            uniform_init<S>({co, 1, cfg_.spectral_kernel, 1, 1},
                                            cfg_.spectral_kernel, rng));
                store_->add(bpfx + "pw.w", conv_w(co, co, 1, 1, 1));
                store_->add(bpfx + "pw.b", Tensor<S>({co}));
                store_->add(bpfx + "f1.w", conv_w(co, co, 1, 1, 1));
                store_->add(bpfx + "f1.b", Tensor<S>({co}));
                store_->add(bpfx + "mlp1.w", conv_w(hidden, co, 1, 1, 1));
                store_->add(bpfx + "mlp1.b", Tensor<S>({hidden}));
                store_->add(bpfx + "mlp2.w", conv_w(co, hidden, 1, 1, 1));
                store_->add(bpfx + "mlp2.b", Tensor<S>({co}));
            }
            const std::string fpfx = "enc.fuse" + std::to_string(stage) + ".";
            store_->add(fpfx + "pre.w", conv_w(co, co, 1, 1, 1));
            store_->add(fpfx + "pre.b", Tensor<S>({co}));
            if (stage < EncoderConfig::stages) {
                store_->add(fpfx + "up.w", conv_w(co, 2 * co, 1, 1, 1));
                store_->add(fpfx + "up.b", Tensor<S>({co}));
                if (cfg_.fusion == Fusion::Concatenation) {
                    store_->add(fpfx + "mix.w", conv_w(co, 2 * co, 1, 1, 1));
                    store_->add(fpfx + "mix.b", Tensor<S>({co}));
                }
            }
        }
    }

    EncoderConfig cfg_;
    ParameterStore<S>* store_;
};

// Closed-form multiply-accumulate cost accountant.
enum class FlopKind { WMSA, GMSA, SSDW };

inline unsigned long long flops(FlopKind kind, unsigned long long H, unsigned long long W,
                                unsigned long long D, unsigned long long C,
                                unsigned long long M) {
    if (H < 1 || W < 1 || D < 1 || C < 1 || M < 1)
        throw value_error("flops: all dimensions must be >= 1");
    const unsigned long long hwd = H * W * D;
    switch (kind) {
        case FlopKind::WMSA:
            return 4 * hwd * C * C + 2 * M * M * M * hwd * C;
        case FlopKind::GMSA:
            return 4 * hwd * C * C + 2 * hwd * hwd * C;
        case FlopKind::SSDW:
            return (M * M + M) * hwd * C + 2 * hwd * C * C;
    }
    throw value_error("flops: unknown kind");
}

}  // namespace mgir
