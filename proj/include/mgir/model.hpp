#pragma once

#include "mgir/aggregator.hpp"
#include "mgir/cassi.hpp"
#include "mgir/decoder.hpp"
#include "mgir/encoder.hpp"

namespace mgir {

struct ModelConfig {
    EncoderConfig encoder;
    AggregatorConfig aggregator;
    DecoderConfig decoder;
    std::size_t voxel_budget = 1u << 24;  // refuse reconstruction grids above this
    std::size_t query_chunk = 4096;       // streaming chunk; must not affect results

    std::vector<std::size_t> level_channels() const {
        std::vector<std::size_t> ch;
        for (std::size_t j = 1; j <= aggregator.groups; ++j)
            ch.push_back(encoder.stage_channels(j));
        return ch;
    }
};

template <typename S>
class Model {
public:
    // Fresh model: registers and initializes all parameters from the seed.
    Model(ModelConfig cfg, std::uint64_t init_seed)
        : cfg_(cfg), store_(std::make_unique<ParameterStore<S>>()) {
        std::mt19937 rng(static_cast<std::uint32_t>(init_seed));
        encoder_ = std::make_unique<Encoder<S>>(cfg_.encoder, *store_, &rng);
        aggregator_ = std::make_unique<Aggregator<S>>(cfg_.aggregator, *store_,
                                                      cfg_.level_channels(), &rng);
        decoder_ = std::make_unique<Decoder<S>>(cfg_.decoder, *store_,
                                                cfg_.aggregator.model_dim, &rng);
    }

    // Model over an existing parameter store (e.g. loaded from a checkpoint).
    Model(ModelConfig cfg, std::unique_ptr<ParameterStore<S>> store)
        : cfg_(cfg), store_(std::move(store)) {
        encoder_ = std::make_unique<Encoder<S>>(cfg_.encoder, *store_);
        aggregator_ = std::make_unique<Aggregator<S>>(cfg_.aggregator, *store_,
                                                      cfg_.level_channels());
        decoder_ = std::make_unique<Decoder<S>>(cfg_.decoder, *store_,
                                                cfg_.aggregator.model_dim);
    }

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<S>& params() { return *store_; }
    const ParameterStore<S>& params() const { return *store_; }
    const Encoder<S>& encoder() const { return *encoder_; }
    const Aggregator<S>& aggregator() const { return *aggregator_; }
    const Decoder<S>& decoder() const { return *decoder_; }

    LatentPyramid<S> encode(const Tensor<S>& m0) const { return encoder_->encode(m0); }

    // lift -> encode -> gather/aggregate -> decode at the given coordinates.
    Tensor<S> predict(const Measurement<S>& meas, const Tensor<S>& coords) const {
        LatentPyramid<S> pyr = encoder_->encode(lift_measurement(meas));
        return predict_with_pyramid(pyr, coords);
    }

    Tensor<S> predict_with_pyramid(const LatentPyramid<S>& pyr, const Tensor<S>& coords) const {
        Tensor<S> codes = aggregator_->forward(pyr, coords);
        return decoder_->decode(codes, coords);
    }

    HyperCube<S> reconstruct(const Measurement<S>& meas, const ReconstructionRequest& req) const {
        req.validate();
        const std::size_t total = req.out_bands * req.out_height * req.out_width;
        if (total > cfg_.voxel_budget)
            throw value_error("reconstruct: requested grid has " + std::to_string(total) +
                              " voxels, exceeding the budget of " +
                              std::to_string(cfg_.voxel_budget));
        LatentPyramid<S> pyr = encoder_->encode(lift_measurement(meas));
        Tensor<S> coords = normalize_grid<S>(req);

        Tensor<S> out({req.out_bands, req.out_height, req.out_width});
        const std::size_t chunk = std::max<std::size_t>(1, cfg_.query_chunk);
        for (std::size_t start = 0; start < total; start += chunk) {
            const std::size_t n = std::min(chunk, total - start);
            Tensor<S> sub({n, 3});
            std::memcpy(sub.data(), coords.data() + start * 3, n * 3 * sizeof(S));
            Tensor<S> vals = predict_with_pyramid(pyr, sub);  // [n, 1]
            for (std::size_t i = 0; i < n; ++i) {
                S v = vals.data()[i];
                if (cfg_.decoder.clamp_output) v = std::clamp(v, S(0), S(1));
                out.data()[start + i] = v;
            }
        }
        HyperCube<S> cube;
        cube.data = std::move(out);
        cube.wavelengths_nm = linspace_nm(req.wavelength_range_nm.first,
                                          req.wavelength_range_nm.second, req.out_bands);
        cube.validate();
        return cube;
    }

private:
    ModelConfig cfg_;
    std::unique_ptr<ParameterStore<S>> store_;
    std::unique_ptr<Encoder<S>> encoder_;
    std::unique_ptr<Aggregator<S>> aggregator_;
    std::unique_ptr<Decoder<S>> decoder_;
};

}  // namespace mgir
