#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>

#include "mgir/io.hpp"

using namespace mgir;

namespace {

std::filesystem::path work_dir() {
    auto d = std::filesystem::temp_directory_path() / "mgir_cli_test";
    std::filesystem::create_directories(d);
    return d;
}

std::string cli_path() {
    const char* p = std::getenv("MGIR_CLI");
    REQUIRE_MESSAGE(p != nullptr, "MGIR_CLI must point at the built binary");
    return p;
}

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run(const std::string& args) {
    const auto out_file = work_dir() / "cmd_output.txt";
    const std::string cmd = cli_path() + " " + args + " > " + out_file.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::string output = std::filesystem::exists(out_file) ? read_file(out_file) : "";
    return {WEXITSTATUS(status), output};
}

std::string write_toy_config(const std::filesystem::path& path, std::size_t steps) {
    RunConfig rc;
    rc.model.encoder.base_channels = 2;
    rc.model.encoder.stage_depths = {1, 1, 1, 1};
    rc.model.encoder.spatial_kernel = 3;
    rc.model.encoder.spectral_kernel = 3;
    rc.model.aggregator.model_dim = 16;
    rc.model.decoder.hidden_dims = {16};
    rc.train.steps = steps;
    rc.train.queries_per_step = 16;
    rc.train.batch_scenes = 1;
    rc.train.augment_flips = false;
    rc.train.seed = 3;
    atomic_write(path, run_config_to_json(rc).dump(2));
    return path.string();
}

}  // namespace

TEST_CASE("synth + simulate produce the documented measurement size") {
    const auto d = work_dir();
    auto r = run("synth --bands 28 --height 64 --width 64 --seed 1 --out " +
                 (d / "scene28.hsc").string());
    CHECK(r.exit_code == 0);
    r = run("simulate --scene " + (d / "scene28.hsc").string() +
            " --mask-seed 2 --shift 2 --out " + (d / "meas28.hsc").string());
    CHECK(r.exit_code == 0);
    auto meas = hsc_read(d / "meas28.hsc");
    CHECK(meas.shape() == Shape{64, 64 + 2 * 27});
    // the mask lands in a sibling file
    CHECK(hsc_read(d / "meas28.mask.hsc").shape() == Shape{64, 64});
}

TEST_CASE("single band, shift 0: measurement equals the masked band") {
    const auto d = work_dir();
    run("synth --bands 1 --height 8 --width 8 --seed 4 --out " + (d / "mono.hsc").string());
    auto r = run("simulate --scene " + (d / "mono.hsc").string() +
                 " --mask-seed 5 --shift 0 --out " + (d / "mono_meas.hsc").string());
    CHECK(r.exit_code == 0);
    auto scene = hsc_read(d / "mono.hsc");
    auto mask = hsc_read(d / "mono_meas.mask.hsc");
    auto meas = hsc_read(d / "mono_meas.hsc");
    for (std::size_t i = 0; i < 64; ++i)
        CHECK(meas.data()[i] == doctest::Approx(scene.data()[i] * mask.data()[i]));
}

TEST_CASE("identical simulate invocations are byte-identical") {
    const auto d = work_dir();
    run("synth --bands 3 --height 10 --width 10 --seed 6 --out " + (d / "s.hsc").string());
    run("simulate --scene " + (d / "s.hsc").string() + " --mask-seed 7 --shift 2 --out " +
        (d / "m1.hsc").string());
    run("simulate --scene " + (d / "s.hsc").string() + " --mask-seed 7 --shift 2 --out " +
        (d / "m2.hsc").string());
    CHECK(read_file(d / "m1.hsc") == read_file(d / "m2.hsc"));
}

TEST_CASE("train, resume equivalence, and reconstruct") {
    const auto d = work_dir();
    run("synth --bands 4 --height 12 --width 12 --seed 8 --out " + (d / "t.hsc").string());
    const std::string cfg = write_toy_config(d / "toy.json", 5);
    const std::string scene = (d / "t.hsc").string();

    // 0 steps: checkpoint is the untouched initialization, reproducibly
    auto r = run("train --scene " + scene + " --config " + cfg + " --steps 0 --out " +
                 (d / "ck0a.bin").string());
    CHECK(r.exit_code == 0);
    run("train --scene " + scene + " --config " + cfg + " --steps 0 --out " +
        (d / "ck0b.bin").string());
    CHECK(read_file(d / "ck0a.bin") == read_file(d / "ck0b.bin"));

    // straight 5 steps vs 2 + resume 3
    r = run("train --scene " + scene + " --config " + cfg + " --out " + (d / "ck5.bin").string());
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("step 5") != std::string::npos);  // plain-text loss log
    run("train --scene " + scene + " --config " + cfg + " --steps 2 --out " +
        (d / "ck2.bin").string());
    r = run("train --scene " + scene + " --resume " + (d / "ck2.bin").string() +
            " --steps 3 --out " + (d / "ck2p3.bin").string());
    CHECK(r.exit_code == 0);
    CHECK(read_file(d / "ck5.bin") == read_file(d / "ck2p3.bin"));

    // reconstruct from the checkpoint at the training resolution and beyond
    run("simulate --scene " + scene + " --mask-seed 0 --shift 2 --out " +
        (d / "tm.hsc").string());
    r = run("reconstruct --checkpoint " + (d / "ck5.bin").string() + " --measurement " +
            (d / "tm.hsc").string() + " --bands 4 --height 12 --width 12 --out " +
            (d / "rec.hsc").string());
    CHECK(r.exit_code == 0);
    CHECK(hsc_read(d / "rec.hsc").shape() == Shape{4, 12, 12});
    r = run("reconstruct --checkpoint " + (d / "ck5.bin").string() + " --measurement " +
            (d / "tm.hsc").string() + " --bands 8 --height 24 --width 24 --out " +
            (d / "rec2x.hsc").string());
    CHECK(r.exit_code == 0);
    CHECK(hsc_read(d / "rec2x.hsc").shape() == Shape{8, 24, 24});

    // incompatible measurement is refused
    run("simulate --scene " + scene + " --mask-seed 0 --shift 1 --out " +
        (d / "tm_bad.hsc").string());
    r = run("reconstruct --checkpoint " + (d / "ck5.bin").string() + " --measurement " +
            (d / "tm_bad.hsc").string() + " --bands 4 --height 12 --width 12 --out " +
            (d / "rec_bad.hsc").string());
    CHECK(r.exit_code != 0);
    CHECK_FALSE(std::filesystem::exists(d / "rec_bad.hsc"));
}

TEST_CASE("missing scene file exits nonzero and names the path") {
    const auto d = work_dir();
    const std::string cfg = write_toy_config(d / "toy2.json", 1);
    auto r = run("train --scene " + (d / "no_such_scene.hsc").string() + " --config " + cfg +
                 " --out " + (d / "nope.bin").string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("no_such_scene.hsc") != std::string::npos);
    CHECK_FALSE(std::filesystem::exists(d / "nope.bin"));
}

TEST_CASE("invalid config enumerates every problem") {
    const auto d = work_dir();
    json j = run_config_to_json(RunConfig{});
    j["encoder"]["base_channels"] = 0;
    j["aggregator"]["heads"] = 3;
    j["unknown_top"] = true;
    atomic_write(d / "bad.json", j.dump());
    run("synth --bands 4 --height 12 --width 12 --seed 1 --out " + (d / "sc.hsc").string());
    auto r = run("train --scene " + (d / "sc.hsc").string() + " --config " +
                 (d / "bad.json").string() + " --out " + (d / "x.bin").string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("base_channels") != std::string::npos);
    CHECK(r.output.find("heads") != std::string::npos);
    CHECK(r.output.find("unknown_top") != std::string::npos);
}

TEST_CASE("eval prints a table and matching JSON") {
    const auto d = work_dir();
    run("synth --bands 4 --height 12 --width 12 --seed 9 --out " + (d / "e.hsc").string());
    auto r = run("eval --pred " + (d / "e.hsc").string() + " --truth " + (d / "e.hsc").string());
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("RMSE") != std::string::npos);
    CHECK(r.output.find("inf") != std::string::npos);  // PSNR sentinel
    const auto brace = r.output.find('{');
    REQUIRE(brace != std::string::npos);
    json j = json::parse(r.output.substr(brace));
    CHECK(j["rmse"].get<double>() == 0.0);
    CHECK(j["ssim"].get<double>() == doctest::Approx(1.0));
    CHECK(j["sam_rad"].get<double>() == 0.0);
    CHECK(j["psnr_db"].get<std::string>() == "inf");

    run("synth --bands 4 --height 12 --width 14 --seed 9 --out " + (d / "e2.hsc").string());
    r = run("eval --pred " + (d / "e.hsc").string() + " --truth " + (d / "e2.hsc").string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("[4,12,12]") != std::string::npos);
    CHECK(r.output.find("[4,12,14]") != std::string::npos);
}

TEST_CASE("flops reports the closed forms and parameter count") {
    const auto d = work_dir();
    RunConfig rc;
    rc.model.encoder.base_channels = 2;
    rc.model.encoder.stage_depths = {1, 1, 1, 1};
    rc.model.aggregator.model_dim = 8;
    rc.model.decoder.hidden_dims = {8};
    atomic_write(d / "flops.json", run_config_to_json(rc).dump());
    auto r = run("flops --config " + (d / "flops.json").string() + " --dims 4 4 4");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("SSDW  23552") != std::string::npos);
    CHECK(r.output.find("params ") != std::string::npos);
}
