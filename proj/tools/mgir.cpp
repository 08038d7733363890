#include <iostream>

#include <CLI11.hpp>

#include "mgir/io.hpp"
#include "mgir/synthetic.hpp"

namespace {

using namespace mgir;

HyperCube<float> cube_from_file(const std::filesystem::path& path, double lo = 400.0,
                                double hi = 700.0) {
    Tensor<float> t = hsc_read(path);
    if (t.rank() != 3)
        throw format_error("expected a rank-3 cube in " + path.string() + ", got rank " +
                           std::to_string(t.rank()));
    HyperCube<float> cube;
    cube.wavelengths_nm = linspace_nm(lo, hi, t.extent(0));
    cube.data = std::move(t);
    cube.validate();
    return cube;
}

Checkpoint snapshot(const RunConfig& rc, Model<float>& model, Trainer<float>* trainer,
                    std::size_t D, std::size_t H, std::size_t W) {
    Checkpoint ck;
    ck.config = rc;
    ck.scene_bands = D;
    ck.scene_height = H;
    ck.scene_width = W;
    for (const auto& [name, tensor] : model.params()) ck.params->add(name, tensor);
    if (trainer) {
        ck.step_count = trainer->step_count();
        ck.adam_steps = trainer->optimizer().step_count();
        ck.rng_state = trainer->rng_state();
        ck.adam_m = trainer->optimizer().first_moments();
        ck.adam_v = trainer->optimizer().second_moments();
    }
    return ck;
}

int cmd_synth(const std::string& out, std::size_t bands, std::size_t height, std::size_t width,
              std::uint64_t seed) {
    HyperCube<float> cube = synthetic_scene<float>(bands, height, width, seed);
    hsc_write(out, cube.data);
    std::cout << "wrote scene " << shape_str(cube.data.shape()) << " to " << out << "\n";
    return 0;
}

int cmd_simulate(const std::string& scene_path, std::uint64_t mask_seed, double density,
                 std::size_t shift, const std::string& out) {
    HyperCube<float> cube = cube_from_file(scene_path);
    CodedMask<float> mask =
        make_mask<float>(cube.height(), cube.width(), density, mask_seed);
    Measurement<float> meas = simulate(cube, mask, shift);
    hsc_write(out, meas.data);
    std::filesystem::path mask_path(out);
    mask_path.replace_extension(".mask" + mask_path.extension().string());
    hsc_write(mask_path, mask.data);
    std::cout << "measurement " << shape_str(meas.data.shape()) << " -> " << out << "\n"
              << "mask " << shape_str(mask.data.shape()) << " -> " << mask_path.string() << "\n";
    return 0;
}

int cmd_train(const std::vector<std::string>& scene_paths, const std::string& config_path,
              const std::string& resume_path, long steps_override, const std::string& out) {
    RunConfig rc;
    Checkpoint resumed;
    const bool resuming = !resume_path.empty();
    if (resuming) {
        resumed = checkpoint_read(resume_path);
        rc = resumed.config;
    } else {
        rc = load_run_config(config_path);
    }
    if (steps_override >= 0) rc.train.steps = std::size_t(steps_override);

    std::vector<HyperCube<float>> scenes;
    for (const auto& p : scene_paths) scenes.push_back(cube_from_file(p));
    const std::size_t D = scenes[0].bands(), H = scenes[0].height(), W = scenes[0].width();
    for (const auto& s : scenes)
        if (s.bands() != D || s.height() != H || s.width() != W)
            throw value_error("all training scenes must share one shape");
    if (resuming &&
        (resumed.scene_bands != D || resumed.scene_height != H || resumed.scene_width != W))
        throw value_error("checkpoint was trained on " +
                          shape_str({resumed.scene_bands, resumed.scene_height,
                                     resumed.scene_width}) +
                          " scenes, got " + shape_str({D, H, W}));

    std::unique_ptr<Model<float>> model;
    if (resuming)
        model = std::make_unique<Model<float>>(rc.model, std::move(resumed.params));
    else
        model = std::make_unique<Model<float>>(rc.model, rc.train.seed);

    CodedMask<float> mask = make_mask<float>(H, W, rc.mask_density, rc.mask_seed);
    Trainer<float> trainer(*model, std::move(scenes), std::move(mask), rc.shift_d, rc.train);
    if (resuming) {
        trainer.set_step_count(resumed.step_count);
        trainer.set_rng_state(resumed.rng_state);
        trainer.optimizer().set_step_count(resumed.adam_steps);
        trainer.optimizer().first_moments() = std::move(resumed.adam_m);
        trainer.optimizer().second_moments() = std::move(resumed.adam_v);
    }

    for (std::size_t s = 0; s < rc.train.steps; ++s) {
        const double loss = trainer.step();
        std::cout << "step " << trainer.step_count() << " loss " << loss << " lr " << rc.train.lr
                  << "\n";
    }
    // stored as total completed steps so split runs serialize identically
    rc.train.steps = trainer.step_count();
    checkpoint_write(out, snapshot(rc, *model, &trainer, D, H, W));
    std::cout << "checkpoint (" << model->params().count_params() << " params, step "
              << trainer.step_count() << ") -> " << out << "\n";
    return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& meas_path, std::size_t B,
                    std::size_t H, std::size_t W, const std::string& out) {
    Checkpoint ck = checkpoint_read(ckpt_path);
    Tensor<float> m = hsc_read(meas_path);
    if (m.rank() != 2)
        throw format_error("expected a rank-2 measurement in " + meas_path + ", got rank " +
                           std::to_string(m.rank()));
    const std::size_t expect_w = ck.scene_width + ck.config.shift_d * (ck.scene_bands - 1);
    if (m.extent(0) != ck.scene_height || m.extent(1) != expect_w)
        throw value_error("measurement " + shape_str(m.shape()) +
                          " incompatible with checkpoint (expects " +
                          shape_str({ck.scene_height, expect_w}) + " from " +
                          std::to_string(ck.scene_bands) + " bands, shift " +
                          std::to_string(ck.config.shift_d) + ")");
    Measurement<float> meas{std::move(m), ck.config.shift_d, ck.scene_bands};
    Model<float> model(ck.config.model, std::move(ck.params));
    ReconstructionRequest req;
    req.out_bands = B;
    req.out_height = H;
    req.out_width = W;
    HyperCube<float> cube = model.reconstruct(meas, req);
    hsc_write(out, cube.data);
    std::cout << "reconstruction " << shape_str(cube.data.shape()) << " -> " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& truth_path) {
    HyperCube<float> pred = cube_from_file(pred_path);
    HyperCube<float> truth = cube_from_file(truth_path);
    if (pred.data.shape() != truth.data.shape())
        throw shape_error("eval: prediction " + shape_str(pred.data.shape()) +
                          " vs truth " + shape_str(truth.data.shape()));
    MetricReport r = evaluate(pred, truth);
    char psnr_str[32];
    if (std::isinf(r.psnr_db))
        std::snprintf(psnr_str, sizeof(psnr_str), "inf");
    else
        std::snprintf(psnr_str, sizeof(psnr_str), "%.6f", r.psnr_db);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "metric       value\n"
                  "RMSE     %9.6f\n"
                  "PSNR(dB) %9s\n"
                  "SSIM     %9.6f\n"
                  "SAM(rad) %9.6f\n",
                  r.rmse, psnr_str, r.ssim, r.sam_rad);
    std::cout << buf;
    json j{{"rmse", r.rmse}, {"ssim", r.ssim}, {"sam_rad", r.sam_rad}};
    j["psnr_db"] = std::isinf(r.psnr_db) ? json("inf") : json(r.psnr_db);
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_flops(const std::string& config_path, std::size_t D, std::size_t H, std::size_t W) {
    RunConfig rc = load_run_config(config_path);
    const auto C = (unsigned long long)rc.model.aggregator.model_dim;
    const auto M = (unsigned long long)rc.model.encoder.spatial_kernel;
    std::cout << "W-MSA " << flops(FlopKind::WMSA, H, W, D, C, M) << "\n"
              << "G-MSA " << flops(FlopKind::GMSA, H, W, D, C, M) << "\n"
              << "SSDW  " << flops(FlopKind::SSDW, H, W, D, C, M) << "\n";
    Model<float> model(rc.model, rc.train.seed);
    std::cout << "params " << model.params().count_params() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continuous hyperspectral reconstruction pipeline"};
    app.require_subcommand(1);

    std::string scene, config, resume, out, ckpt, meas, pred, truth;
    std::vector<std::string> scenes;
    std::uint64_t seed = 0, mask_seed = 0;
    double density = 0.5;
    std::size_t bands = 8, height = 32, width = 32, shift = 2;
    long steps_override = -1;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene");
    synth->add_option("--bands", bands);
    synth->add_option("--height", height);
    synth->add_option("--width", width);
    synth->add_option("--seed", seed);
    synth->add_option("--out", out)->required();

    auto* sim = app.add_subcommand("simulate", "Simulate a CASSI measurement");
    sim->add_option("--scene", scene)->required();
    sim->add_option("--mask-seed", mask_seed);
    sim->add_option("--mask-density", density);
    sim->add_option("--shift", shift);
    sim->add_option("--out", out)->required();

    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--scene", scenes)->required();
    train->add_option("--config", config);
    train->add_option("--resume", resume);
    train->add_option("--steps", steps_override);
    train->add_option("--out", out)->required();

    auto* rec = app.add_subcommand("reconstruct", "Reconstruct a cube at any resolution");
    rec->add_option("--checkpoint", ckpt)->required();
    rec->add_option("--measurement", meas)->required();
    rec->add_option("--bands", bands)->required();
    rec->add_option("--height", height)->required();
    rec->add_option("--width", width)->required();
    rec->add_option("--out", out)->required();

    auto* ev = app.add_subcommand("eval", "Compare two cubes");
    ev->add_option("--pred", pred)->required();
    ev->add_option("--truth", truth)->required();

    auto* fl = app.add_subcommand("flops", "Report closed-form costs and parameter count");
    std::vector<std::size_t> dims{8, 32, 32};
    fl->add_option("--config", config)->required();
    fl->add_option("--dims", dims)->expected(3);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(out, bands, height, width, seed);
        if (sim->parsed()) return cmd_simulate(scene, mask_seed, density, shift, out);
        if (train->parsed()) {
            if (resume.empty() && config.empty())
                throw config_error("train: either --config or --resume is required");
            return cmd_train(scenes, config, resume, steps_override, out);
        }
        if (rec->parsed()) return cmd_reconstruct(ckpt, meas, bands, height, width, out);
        if (ev->parsed()) return cmd_eval(pred, truth);
        if (fl->parsed()) return cmd_flops(config, dims[0], dims[1], dims[2]);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
