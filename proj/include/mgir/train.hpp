#pragma once

#include <limits>
#include <sstream>

#include "mgir/model.hpp"

namespace mgir {

struct TrainConfig {
    double lr = 4e-4;
    std::size_t steps = 0;
    std::size_t batch_scenes = 4;
    std::size_t queries_per_step = 4096;
    std::uint64_t seed = 0;
    bool augment_flips = true;

    void validate() const {
        if (!(lr >= 0)) throw config_error("train: lr must be nonnegative");
        if (queries_per_step < 1) throw config_error("train: queries_per_step must be >= 1");
        if (batch_scenes < 1) throw config_error("train: batch_scenes must be >= 1");
    }
};

struct MetricReport {
    double rmse = 0;
    double psnr_db = 0;
    double ssim = 0;
    double sam_rad = 0;
};

// ---- loss ----

template <typename S>
Tensor<S> rmse_loss(const Tensor<S>& pred, const Tensor<S>& truth) {
    if (pred.size() == 0) throw shape_error("rmse_loss: empty batch");
    if (pred.size() != truth.size())
        throw shape_error("rmse_loss: length mismatch, " + std::to_string(pred.size()) + " vs " +
                          std::to_string(truth.size()));
    Tensor<S> diff = sub(reshape(pred, {pred.size()}), reshape(truth, {truth.size()}));
    return sqrt_scalar(mean_all(mul(diff, diff)));
}

// ---- metrics (evaluation only, no autograd) ----

template <typename S>
double psnr(const HyperCube<S>& pred, const HyperCube<S>& truth, double peak = 1.0) {
    if (pred.data.shape() != truth.data.shape())
        throw shape_error("psnr: shape mismatch " + shape_str(pred.data.shape()) + " vs " +
                          shape_str(truth.data.shape()));
    if (!(peak > 0)) throw value_error("psnr: peak must be positive");
    double mse = 0;
    const std::size_t n = pred.data.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(pred.data.data()[i]) - double(truth.data.data()[i]);
        mse += d * d;
    }
    mse /= double(n);
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Gaussian-windowed SSIM computed per band over all fully-interior windows,
// then averaged across bands.
template <typename S>
double ssim(const HyperCube<S>& pred, const HyperCube<S>& truth, std::size_t window = 11,
            double sigma = 1.5, double k1 = 0.01, double k2 = 0.03, double peak = 1.0) {
    if (pred.data.shape() != truth.data.shape())
        throw shape_error("ssim: shape mismatch");
    if (window % 2 == 0) throw value_error("ssim: window must be odd");
    const std::size_t D = pred.bands(), H = pred.height(), W = pred.width();
    if (window > H || window > W)
        throw value_error("ssim: window " + std::to_string(window) + " larger than image " +
                          std::to_string(H) + "x" + std::to_string(W));
    const std::size_t r = window / 2;
    std::vector<double> g(window * window);
    double gsum = 0;
    for (std::size_t y = 0; y < window; ++y)
        for (std::size_t x = 0; x < window; ++x) {
            const double dy = double(y) - double(r), dx = double(x) - double(r);
            g[y * window + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            gsum += g[y * window + x];
        }
    for (double& v : g) v /= gsum;
    const double c1 = (k1 * peak) * (k1 * peak);
    const double c2 = (k2 * peak) * (k2 * peak);

    double band_mean = 0;
    for (std::size_t b = 0; b < D; ++b) {
        const S* p = pred.data.data() + b * H * W;
        const S* t = truth.data.data() + b * H * W;
        double acc = 0;
        std::size_t count = 0;
        for (std::size_t cy = r; cy + r < H; ++cy)
            for (std::size_t cx = r; cx + r < W; ++cx) {
                double mp = 0, mt = 0;
                for (std::size_t y = 0; y < window; ++y)
                    for (std::size_t x = 0; x < window; ++x) {
                        const std::size_t idx = (cy + y - r) * W + (cx + x - r);
                        mp += g[y * window + x] * double(p[idx]);
                        mt += g[y * window + x] * double(t[idx]);
                    }
                double vp = 0, vt = 0, cov = 0;
                for (std::size_t y = 0; y < window; ++y)
                    for (std::size_t x = 0; x < window; ++x) {
                        const std::size_t idx = (cy + y - r) * W + (cx + x - r);
                        const double dp = double(p[idx]) - mp;
                        const double dt = double(t[idx]) - mt;
                        const double w = g[y * window + x];
                        vp += w * dp * dp;
                        vt += w * dt * dt;
                        cov += w * dp * dt;
                    }
                acc += ((2 * mp * mt + c1) * (2 * cov + c2)) /
                       ((mp * mp + mt * mt + c1) * (vp + vt + c2));
                ++count;
            }
        band_mean += acc / double(count);
    }
    return band_mean / double(D);
}

// Mean per-pixel angle between spectral vectors; zero spectra are excluded.
template <typename S>
double sam(const HyperCube<S>& pred, const HyperCube<S>& truth) {
    if (pred.data.shape() != truth.data.shape())
        throw shape_error("sam: shape mismatch");
    const std::size_t D = pred.bands(), HW = pred.height() * pred.width();
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t px = 0; px < HW; ++px) {
        double dot = 0, np = 0, nt = 0;
        for (std::size_t b = 0; b < D; ++b) {
            const double pv = double(pred.data.data()[b * HW + px]);
            const double tv = double(truth.data.data()[b * HW + px]);
            dot += pv * tv;
            np += pv * pv;
            nt += tv * tv;
        }
        if (np == 0 || nt == 0) continue;
        acc += std::acos(std::clamp(dot / std::sqrt(np * nt), -1.0, 1.0));
        ++count;
    }
    if (count == 0) throw value_error("sam: undefined, all spectra are zero");
    return acc / double(count);
}

template <typename S>
MetricReport evaluate(const HyperCube<S>& pred, const HyperCube<S>& truth, double peak = 1.0) {
    MetricReport r;
    double mse = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = double(pred.data.data()[i]) - double(truth.data.data()[i]);
        mse += d * d;
    }
    r.rmse = std::sqrt(mse / double(pred.data.size()));
    r.psnr_db = psnr(pred, truth, peak);
    std::size_t win = std::min<std::size_t>(11, std::min(pred.height(), pred.width()));
    if (win % 2 == 0) --win;
    r.ssim = ssim(pred, truth, win);
    r.sam_rad = sam(pred, truth);
    return r;
}

// ---- augmentation ----

template <typename S>
HyperCube<S> flip_cube(const HyperCube<S>& cube, bool horizontal, bool vertical) {
    const std::size_t D = cube.bands(), H = cube.height(), W = cube.width();
    HyperCube<S> out;
    out.wavelengths_nm = cube.wavelengths_nm;
    out.data = Tensor<S>({D, H, W});
    for (std::size_t b = 0; b < D; ++b)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const std::size_t sy = vertical ? H - 1 - y : y;
                const std::size_t sx = horizontal ? W - 1 - x : x;
                out.data.data()[(b * H + y) * W + x] = cube.data.data()[(b * H + sy) * W + sx];
            }
    return out;
}

template <typename S, typename Rng>
HyperCube<S> augment_flip(const HyperCube<S>& cube, Rng& rng) {
    std::uniform_int_distribution<int> coin(0, 1);
    const bool h = coin(rng) == 1;
    const bool v = coin(rng) == 1;
    return flip_cube(cube, h, v);
}

// ---- training loop ----

// Owns the optimizer and sampling stream; one trainer owns its model's
// parameter store exclusively while stepping.
template <typename S>
class Trainer {
public:
    Trainer(Model<S>& model, std::vector<HyperCube<S>> scenes, CodedMask<S> mask,
            std::size_t shift_d, TrainConfig cfg)
        : model_(&model), mask_(std::move(mask)), shift_d_(shift_d), cfg_(cfg) {
        cfg_.validate();
        if (scenes.empty()) throw config_error("trainer: at least one scene required");
        rng_.seed(cfg_.seed);
        adam_.config().lr = S(cfg_.lr);
        const std::size_t variants = cfg_.augment_flips ? 4 : 1;
        for (auto& scene : scenes) {
            scene.validate();
            SceneData sd;
            for (std::size_t v = 0; v < variants; ++v) {
                HyperCube<S> cube = flip_cube(scene, v & 1, (v >> 1) & 1);
                sd.measurements.push_back(simulate(cube, mask_, shift_d_));
                sd.cubes.push_back(std::move(cube));
            }
            scenes_.push_back(std::move(sd));
        }
    }

    // One optimization step: sample cell-center coordinates from the ground
    // truth, run the full pipeline, apply the RMSE loss, one Adam update.
    double step() {
        Tape<S> tape;
        typename Tape<S>::Scope scope(tape);

        const std::size_t batch = std::min(cfg_.batch_scenes, scenes_.size());
        Tensor<S> loss;
        for (std::size_t k = 0; k < batch; ++k) {
            const SceneData& sd = scenes_[(step_count_ * batch + k) % scenes_.size()];
            std::size_t variant = 0;
            if (cfg_.augment_flips) {
                std::uniform_int_distribution<std::size_t> pick(0, sd.cubes.size() - 1);
                variant = pick(rng_);
            }
            const HyperCube<S>& cube = sd.cubes[variant];
            const std::size_t D = cube.bands(), H = cube.height(), W = cube.width();
            const std::size_t P = cfg_.queries_per_step;
            Tensor<S> coords({P, 3});
            Tensor<S> truth({P});
            std::uniform_int_distribution<std::size_t> ub(0, D - 1), uy(0, H - 1), ux(0, W - 1);
            for (std::size_t p = 0; p < P; ++p) {
                const std::size_t b = ub(rng_), y = uy(rng_), x = ux(rng_);
                coords.data()[p * 3 + 0] = S(-1) + S(2 * b + 1) / S(D);
                coords.data()[p * 3 + 1] = S(-1) + S(2 * y + 1) / S(H);
                coords.data()[p * 3 + 2] = S(-1) + S(2 * x + 1) / S(W);
                truth.data()[p] = cube.data.data()[(b * H + y) * W + x];
            }
            Tensor<S> pred = model_->predict(sd.measurements[variant], coords);
            Tensor<S> l = rmse_loss(pred, truth);
            loss = loss.defined() ? add(loss, l) : l;
        }
        if (batch > 1) loss = scale(loss, S(1) / S(batch));

        const double loss_value = double(loss.item());
        if (!std::isfinite(loss_value))
            throw value_error("training aborted: non-finite loss at step " +
                              std::to_string(step_count_ + 1));
        model_->params().zero_grads();
        tape.backward(loss);
        adam_.step(model_->params());
        ++step_count_;
        return loss_value;
    }

    std::uint64_t step_count() const { return step_count_; }
    void set_step_count(std::uint64_t n) { step_count_ = n; }
    const TrainConfig& config() const { return cfg_; }
    Adam<S>& optimizer() { return adam_; }

    std::string rng_state() const {
        std::ostringstream os;
        os << rng_;
        return os.str();
    }
    void set_rng_state(const std::string& state) {
        std::istringstream is(state);
        is >> rng_;
        if (is.fail()) throw format_error("trainer: malformed RNG state");
    }

private:
    struct SceneData {
        std::vector<HyperCube<S>> cubes;          // flip variants
        std::vector<Measurement<S>> measurements;  // matching measurements
    };

    Model<S>* model_;
    CodedMask<S> mask_;
    std::size_t shift_d_;
    TrainConfig cfg_;
    std::vector<SceneData> scenes_;
    std::mt19937_64 rng_;
    Adam<S> adam_;
    std::uint64_t step_count_ = 0;
};

}  // namespace mgir
