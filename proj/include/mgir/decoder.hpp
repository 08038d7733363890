#pragma once

#include "mgir/ops.hpp"
#include "mgir/params.hpp"

namespace mgir {

struct DecoderConfig {
    std::vector<std::size_t> hidden_dims{64, 64, 64};
    std::string activation = "gelu";
    bool clamp_output = false;  // clamp emitted intensities to [0, 1]

    void validate() const {
        if (hidden_dims.empty()) throw config_error("decoder: at least one hidden layer required");
        for (std::size_t h : hidden_dims)
            if (h == 0) throw config_error("decoder: hidden dims must be >= 1");
        if (activation != "gelu")
            throw config_error("decoder: unsupported activation '" + activation + "'");
    }
};

struct ReconstructionRequest {
    std::size_t out_bands = 0;
    std::size_t out_height = 0;
    std::size_t out_width = 0;
    std::pair<double, double> wavelength_range_nm{400.0, 700.0};

    void validate() const {
        if (out_bands < 1 || out_height < 1 || out_width < 1)
            throw value_error("reconstruction request: all extents must be >= 1");
    }
};

// Cell-center coordinates -1 + (2i+1)/N per axis, flattened in (lambda, y, x)
// row-major order.
template <typename S>
Tensor<S> normalize_grid(std::size_t bands, std::size_t height, std::size_t width) {
    Tensor<S> pts({bands * height * width, 3});
    std::size_t r = 0;
    for (std::size_t b = 0; b < bands; ++b) {
        const S cb = S(-1) + S(2 * b + 1) / S(bands);
        for (std::size_t y = 0; y < height; ++y) {
            const S cy = S(-1) + S(2 * y + 1) / S(height);
            for (std::size_t x = 0; x < width; ++x, ++r) {
                pts.data()[r * 3 + 0] = cb;
                pts.data()[r * 3 + 1] = cy;
                pts.data()[r * 3 + 2] = S(-1) + S(2 * x + 1) / S(width);
            }
        }
    }
    return pts;
}

template <typename S>
Tensor<S> normalize_grid(const ReconstructionRequest& req) {
    req.validate();
    return normalize_grid<S>(req.out_bands, req.out_height, req.out_width);
}

template <typename S>
class Decoder {
public:
    Decoder(DecoderConfig cfg, ParameterStore<S>& store, std::size_t code_dim,
            std::mt19937* init_rng = nullptr)
        : cfg_(cfg), store_(&store), code_dim_(code_dim) {
        cfg_.validate();
        if (init_rng) register_params(*init_rng);
    }

    const DecoderConfig& config() const { return cfg_; }

    // MLP over concat(code, coord) per row -> scalar intensity.
    Tensor<S> decode(const Tensor<S>& codes, const Tensor<S>& coords) const {
        if (codes.rank() != 2 || coords.rank() != 2 || coords.extent(1) != 3)
            throw shape_error("decode: expected codes [P,C] and coords [P,3]");
        if (codes.extent(0) != coords.extent(0))
            throw shape_error("decode: row counts differ, " + std::to_string(codes.extent(0)) +
                              " vs " + std::to_string(coords.extent(0)));
        Tensor<S> x = concat<S>({codes, coords}, 1);
        for (std::size_t l = 0; l < cfg_.hidden_dims.size(); ++l) {
            const std::string pfx = layer_prefix(l);
            x = gelu(linear(x, store_->get(pfx + "w"), store_->get(pfx + "b")));
        }
        const std::string pfx = layer_prefix(cfg_.hidden_dims.size());
        return linear(x, store_->get(pfx + "w"), store_->get(pfx + "b"));
    }

private:
    static std::string layer_prefix(std::size_t layer) {
        return "dec.layer" + std::to_string(layer) + ".";
    }

    void register_params(std::mt19937& rng) {
        std::size_t in = code_dim_ + 3;
        for (std::size_t l = 0; l < cfg_.hidden_dims.size(); ++l) {
            const std::size_t out = cfg_.hidden_dims[l];
            store_->add(layer_prefix(l) + "w", uniform_init<S>({in, out}, in, rng));
            store_->add(layer_prefix(l) + "b", Tensor<S>({out}));
            in = out;
        }
        store_->add(layer_prefix(cfg_.hidden_dims.size()) + "w", uniform_init<S>({in, 1}, in, rng));
        store_->add(layer_prefix(cfg_.hidden_dims.size()) + "b", Tensor<S>({1}));
    }

    DecoderConfig cfg_;
    ParameterStore<S>* store_;
    std::size_t code_dim_;
};

// LIIF-style local ensemble blend, kept as the 2D-baseline comparison path:
// a convex combination of neighboring predictions.
template <typename S>
Tensor<S> liif_baseline_blend(const Tensor<S>& values, const Tensor<S>& weights) {
    if (values.rank() != 2 || values.extent(1) != 1)
        throw shape_error("liif_baseline_blend: values must be [Pn,1]");
    if (weights.rank() != 1 || weights.size() != values.extent(0))
        throw shape_error("liif_baseline_blend: weights must be [Pn]");
    S wsum = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights.data()[i] < S(0))
            throw value_error("liif_baseline_blend: weights must be nonnegative");
        wsum += weights.data()[i];
    }
    if (std::abs(double(wsum) - 1.0) > 1e-4)
        throw value_error("liif_baseline_blend: weights sum to " + std::to_string(double(wsum)) +
                          ", expected 1 within 1e-4");
    S acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        acc += weights.data()[i] * values.data()[i];
    return Tensor<S>::scalar(acc);
}

}  // namespace mgir
