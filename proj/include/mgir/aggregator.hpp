#pragma once

#include "mgir/encoder.hpp"
#include "mgir/ops.hpp"
#include "mgir/params.hpp"

namespace mgir {

struct AggregatorConfig {
    std::size_t groups = 4;        // one pyramid level per group
    std::size_t heads = 4;
    std::size_t window = 2;        // J; each level contributes J^3 codes per query
    std::size_t model_dim = 64;    // C, the shared latent dimension
    std::size_t rpe_frequencies = 20;  // R; pre-projection feature dim is 6R
    bool use_rpe = true;
    Fusion query_fusion = Fusion::Addition;

    void validate() const {
        if (groups < 1) throw config_error("aggregator: groups must be >= 1");
        if (heads % groups != 0)
            throw config_error("aggregator: heads (" + std::to_string(heads) +
                               ") must be divisible by groups (" + std::to_string(groups) + ")");
        if (model_dim % heads != 0)
            throw config_error("aggregator: model_dim must be divisible by heads");
        if ((model_dim / heads) * (heads / groups) != model_dim / groups)
            throw config_error("aggregator: model_dim must be divisible by groups");
        if (model_dim % groups != 0)
            throw config_error("aggregator: model_dim must be divisible by groups");
        if (window < 1) throw config_error("aggregator: window must be >= 1");
        if (rpe_frequencies < 1) throw config_error("aggregator: rpe_frequencies must be >= 1");
    }
};

// Per-query gathered context: projected window codes, their relative offsets,
// and the trilinearly interpolated center code, per pyramid level.
template <typename S>
struct QueryBatch {
    Tensor<S> coords;                  // [P, 3], order (lambda, y, x)
    std::vector<Tensor<S>> windows;    // per level: [P, J^3, C]
    std::vector<Tensor<S>> offsets;    // per level: [P, J^3, 3], key minus query
    std::vector<Tensor<S>> centers;    // per level: [P, C]
};

namespace detail {

inline long window_start(double t, std::size_t J) {
    if (J % 2 == 1) return std::lround(std::floor(t + 0.5)) - long((J - 1) / 2);
    return long(std::floor(t)) - long(J / 2 - 1);
}

// Sinusoidal expansion of 3D offsets at learnable frequencies:
// per component x and frequency w_i, emit [cos(w_i x), sin(w_i x)].
// Output is [P, K, 6R]; differentiable w.r.t. the frequencies.
template <typename S>
Tensor<S> rpe_features(const Tensor<S>& offsets, const Tensor<S>& omegas) {
    if (offsets.rank() != 3 || offsets.extent(2) != 3)
        throw shape_error("rpe_features: offsets must be [P,K,3]");
    const std::size_t rows = offsets.extent(0) * offsets.extent(1);
    const std::size_t R = omegas.size();
    Tensor<S> out({offsets.extent(0), offsets.extent(1), 6 * R});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ax = 0; ax < 3; ++ax) {
            const S x = offsets.data()[r * 3 + ax];
            S* dst = out.data() + r * 6 * R + ax * 2 * R;
            for (std::size_t i = 0; i < R; ++i) {
                const S wx = omegas.data()[i] * x;
                dst[2 * i] = std::cos(wx);
                dst[2 * i + 1] = std::sin(wx);
            }
        }
    if (tracking<S>({&omegas})) {
        mark_tracked(out);
        auto ofs = offsets.storage();
        auto ws = omegas.storage();
        auto os = out.storage();
        Tape<S>::active()->record([ofs, ws, os, rows, R] {
            if (ws->grad.empty()) return;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t ax = 0; ax < 3; ++ax) {
                    const S x = ofs->data[r * 3 + ax];
                    const S* y = os->data.data() + r * 6 * R + ax * 2 * R;
                    const S* g = os->grad.data() + r * 6 * R + ax * 2 * R;
                    for (std::size_t i = 0; i < R; ++i)
                        ws->grad[i] += x * (g[2 * i + 1] * y[2 * i] - g[2 * i] * y[2 * i + 1]);
                }
        });
    }
    return out;
}

}  // namespace detail

template <typename S>
class Aggregator {
public:
    // level_channels: channel count of each pyramid level the aggregator reads.
    Aggregator(AggregatorConfig cfg, ParameterStore<S>& store,
               std::vector<std::size_t> level_channels, std::mt19937* init_rng = nullptr)
        : cfg_(cfg), store_(&store), level_channels_(std::move(level_channels)) {
        cfg_.validate();
        if (level_channels_.size() != cfg_.groups)
            throw config_error("aggregator: expected " + std::to_string(cfg_.groups) +
                               " level channel counts, got " +
                               std::to_string(level_channels_.size()));
        if (init_rng) register_params(*init_rng);
    }

    const AggregatorConfig& config() const { return cfg_; }

    // Trilinear code lookup at one coordinate, projected to the shared dim.
    Tensor<S> query_code(const Tensor<S>& level, const Tensor<S>& coords,
                         std::size_t level_index) const {
        Tensor<S> sampled = trilinear_sample(level, coords);  // [P, Cj]
        const std::string pfx = level_prefix(level_index);
        return linear(sampled, store_->get(pfx + "proj.w"), store_->get(pfx + "proj.b"));
    }

    QueryBatch<S> gather_windows(const LatentPyramid<S>& pyramid, const Tensor<S>& coords) const {
        if (pyramid.levels.size() < cfg_.groups)
            throw config_error("gather_windows: pyramid has " +
                               std::to_string(pyramid.levels.size()) + " levels but config needs " +
                               std::to_string(cfg_.groups));
        if (coords.rank() != 2 || coords.extent(1) != 3)
            throw shape_error("gather_windows: coords must be [P,3]");
        const std::size_t P = coords.extent(0);
        const std::size_t J = cfg_.window;
        const std::size_t K = J * J * J;

        QueryBatch<S> batch;
        batch.coords = coords;
        for (std::size_t j = 0; j < cfg_.groups; ++j) {
            const Tensor<S>& level = pyramid.levels[j];
            if (level.extent(0) != level_channels_[j])
                throw config_error("gather_windows: level " + std::to_string(j + 1) + " has " +
                                   std::to_string(level.extent(0)) + " channels, expected " +
                                   std::to_string(level_channels_[j]));
            const std::size_t N[3] = {level.extent(1), level.extent(2), level.extent(3)};
            std::vector<std::size_t> cells(P * K * 3);
            Tensor<S> offs({P, K, 3});
            for (std::size_t p = 0; p < P; ++p) {
                long start[3];
                for (std::size_t ax = 0; ax < 3; ++ax) {
                    const double t =
                        double(detail::to_continuous_index(coords.data()[p * 3 + ax], N[ax]));
                    start[ax] = detail::window_start(t, J);
                }
                std::size_t k = 0;
                for (std::size_t a = 0; a < J; ++a)
                    for (std::size_t b = 0; b < J; ++b)
                        for (std::size_t c = 0; c < J; ++c, ++k) {
                            const long raw[3] = {start[0] + long(a), start[1] + long(b),
                                                 start[2] + long(c)};
                            for (std::size_t ax = 0; ax < 3; ++ax) {
                                const std::size_t idx = std::size_t(
                                    std::clamp<long>(raw[ax], 0, long(N[ax]) - 1));
                                cells[(p * K + k) * 3 + ax] = idx;
                                const S center = S(-1) + S(2 * idx + 1) / S(N[ax]);
                                offs.data()[(p * K + k) * 3 + ax] =
                                    center - coords.data()[p * 3 + ax];
                            }
                        }
            }
            Tensor<S> codes = gather_cells(level, cells, P, K);  // [P, K, Cj]
            const std::string pfx = level_prefix(j + 1);
            batch.windows.push_back(
                linear(codes, store_->get(pfx + "proj.w"), store_->get(pfx + "proj.b")));
            batch.offsets.push_back(std::move(offs));
            batch.centers.push_back(query_code(level, coords, j + 1));
        }
        return batch;
    }

    Tensor<S> rpe(const Tensor<S>& offsets) const {
        Tensor<S> feats = detail::rpe_features(offsets, store_->get("agg.rpe.omegas"));
        return linear(feats, store_->get("agg.rpe.proj.w"), store_->get("agg.rpe.proj.b"));
    }

    // Grouped local attention: group j attends to level-j keys/values within
    // its contiguous channel slice; outputs concatenate back to C, plus Q.
    Tensor<S> aggregate(const QueryBatch<S>& batch) const {
        const std::size_t G = cfg_.groups;
        if (batch.windows.size() != G || batch.centers.size() != G || batch.offsets.size() != G)
            throw config_error("aggregate: batch level count does not match config");
        const std::size_t C = cfg_.model_dim;
        const std::size_t P = batch.coords.extent(0);
        const std::size_t K = cfg_.window * cfg_.window * cfg_.window;
        const std::size_t Cg = C / G;
        const std::size_t hpg = cfg_.heads / G;
        const std::size_t hd = C / cfg_.heads;

        // Q: per-level projections of the center codes, fused across levels.
        std::vector<Tensor<S>> qs;
        for (std::size_t j = 0; j < G; ++j) {
            const std::string pfx = level_prefix(j + 1);
            qs.push_back(
                linear(batch.centers[j], store_->get(pfx + "q.w"), store_->get(pfx + "q.b")));
        }
        Tensor<S> Q;
        if (cfg_.query_fusion == Fusion::Addition) {
            Q = qs[0];
            for (std::size_t j = 1; j < G; ++j) Q = add(Q, qs[j]);
        } else {
            Q = linear(concat(qs, 1), store_->get("agg.qcat.w"), store_->get("agg.qcat.b"));
        }

        std::vector<Tensor<S>> group_out;
        const S inv_sqrt_hd = S(1) / S(std::sqrt(double(hd)));
        for (std::size_t j = 0; j < G; ++j) {
            const std::string pfx = level_prefix(j + 1);
            Tensor<S> Kj =
                linear(batch.windows[j], store_->get(pfx + "k.w"), store_->get(pfx + "k.b"));
            Tensor<S> Vj =
                linear(batch.windows[j], store_->get(pfx + "v.w"), store_->get(pfx + "v.b"));
            if (cfg_.use_rpe) {
                Tensor<S> xp = rpe(batch.offsets[j]);  // [P, K, C]
                Kj = add(Kj, xp);
                Vj = add(Vj, xp);
            }
            Tensor<S> qg = narrow(Q, 1, j * Cg, Cg);       // [P, Cg]
            Tensor<S> kg = narrow(Kj, 2, j * Cg, Cg);      // [P, K, Cg]
            Tensor<S> vg = narrow(Vj, 2, j * Cg, Cg);      // [P, K, Cg]

            Tensor<S> q3 = reshape(qg, {P * hpg, 1, hd});
            Tensor<S> kt = reshape(permute(reshape(kg, {P, K, hpg, hd}), {0, 2, 3, 1}),
                                   {P * hpg, hd, K});
            Tensor<S> v3 = reshape(permute(reshape(vg, {P, K, hpg, hd}), {0, 2, 1, 3}),
                                   {P * hpg, K, hd});
            Tensor<S> logits = scale(bmm(q3, kt), inv_sqrt_hd);  // [P*hpg, 1, K]
            Tensor<S> attn = softmax(logits, 2);
            Tensor<S> out = bmm(attn, v3);  // [P*hpg, 1, hd]
            group_out.push_back(reshape(out, {P, Cg}));
        }
        return add(concat(group_out, 1), Q);
    }

    Tensor<S> forward(const LatentPyramid<S>& pyramid, const Tensor<S>& coords) const {
        return aggregate(gather_windows(pyramid, coords));
    }

private:
    static std::string level_prefix(std::size_t level_1based) {
        return "agg.level" + std::to_string(level_1based) + ".";
    }

    void register_params(std::mt19937& rng) {
        const std::size_t C = cfg_.model_dim;
        for (std::size_t j = 0; j < cfg_.groups; ++j) {
            const std::string pfx = level_prefix(j + 1);
            store_->add(pfx + "proj.w", uniform_init<S>({level_channels_[j], C},
                                                        level_channels_[j], rng));
            store_->add(pfx + "proj.b", Tensor<S>({C}));
            for (const char* name : {"q", "k", "v"}) {
                store_->add(pfx + name + std::string(".w"), uniform_init<S>({C, C}, C, rng));
                store_->add(pfx + name + std::string(".b"), Tensor<S>({C}));
            }
        }
        const std::size_t R = cfg_.rpe_frequencies;
        Tensor<S> omegas({R});
        for (std::size_t i = 0; i < R; ++i)
            omegas.data()[i] = S(2.0 * std::exp(double(i + 1)));
        store_->add("agg.rpe.omegas", std::move(omegas));
        store_->add("agg.rpe.proj.w", uniform_init<S>({6 * R, C}, 6 * R, rng));
        store_->add("agg.rpe.proj.b", Tensor<S>({C}));
        if (cfg_.query_fusion == Fusion::Concatenation) {
            store_->add("agg.qcat.w", uniform_init<S>({cfg_.groups * C, C}, cfg_.groups * C, rng));
            store_->add("agg.qcat.b", Tensor<S>({C}));
        }
    }

    AggregatorConfig cfg_;
    ParameterStore<S>* store_;
    std::vector<std::size_t> level_channels_;
};

}  // namespace mgir
