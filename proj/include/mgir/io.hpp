#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mgir/train.hpp"

namespace mgir {

using nlohmann::json;

// ---- HSC1 binary tensor container ----
// magic "HSC1" | u32 rank | rank x u32 extents | f32 payload, all little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
    if (off + 4 > buf.size())
        throw format_error("truncated file at byte offset " + std::to_string(off));
    return std::uint32_t(std::uint8_t(buf[off])) | std::uint32_t(std::uint8_t(buf[off + 1])) << 8 |
           std::uint32_t(std::uint8_t(buf[off + 2])) << 16 |
           std::uint32_t(std::uint8_t(buf[off + 3])) << 24;
}

}  // namespace detail

inline std::string hsc_serialize(const Tensor<float>& t) {
    std::string out;
    out += "HSC1";
    detail::put_u32(out, std::uint32_t(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u32(out, std::uint32_t(e));
    const std::size_t base = out.size();
    out.resize(base + t.size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(out.data() + base, t.data(), t.size() * 4);
    return out;
}

// Parses one HSC1 blob starting at *offset; advances *offset past it.
inline Tensor<float> hsc_parse(const std::string& buf, std::size_t* offset) {
    std::size_t off = *offset;
    if (buf.compare(off, 4, "HSC1") != 0)
        throw format_error("bad HSC1 magic at byte offset " + std::to_string(off));
    off += 4;
    const std::uint32_t rank = detail::get_u32(buf, off);
    off += 4;
    if (rank > 32) throw format_error("implausible rank at byte offset " + std::to_string(off - 4));
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = detail::get_u32(buf, off);
        off += 4;
    }
    const std::size_t n = numel(shape);
    if (off + n * 4 > buf.size())
        throw format_error("payload truncated at byte offset " + std::to_string(off) +
                           " (need " + std::to_string(n * 4) + " bytes)");
    std::vector<float> data(n);
    std::memcpy(data.data(), buf.data() + off, n * 4);
    off += n * 4;
    *offset = off;
    return Tensor<float>::from_data(std::move(shape), std::move(data));
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// All writes go to a temp sibling and rename into place; no partial outputs.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw format_error("cannot open file for writing: " + tmp.string());
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) throw format_error("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw format_error("cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

inline void hsc_write(const std::filesystem::path& path, const Tensor<float>& t) {
    atomic_write(path, hsc_serialize(t));
}

inline Tensor<float> hsc_read(const std::filesystem::path& path) {
    const std::string buf = read_file(path);
    std::size_t off = 0;
    Tensor<float> t = hsc_parse(buf, &off);
    if (off != buf.size())
        throw format_error("trailing bytes at byte offset " + std::to_string(off) + " in " +
                           path.string());
    return t;
}

// ---- run configuration ----

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t mask_seed = 0;
    double mask_density = 0.5;
    std::size_t shift_d = 2;
};

namespace detail {

inline void check_keys(const json& obj, const std::vector<std::string>& allowed,
                       const std::string& scope, std::vector<std::string>& errors) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) ok = true;
        if (!ok) errors.push_back("unknown key '" + scope + it.key() + "'");
    }
}

inline Fusion parse_fusion(const std::string& s, const std::string& scope,
                           std::vector<std::string>& errors) {
    if (s == "addition") return Fusion::Addition;
    if (s == "concatenation") return Fusion::Concatenation;
    errors.push_back(scope + ": expected 'addition' or 'concatenation', got '" + s + "'");
    return Fusion::Addition;
}

inline std::string fusion_name(Fusion f) {
    return f == Fusion::Addition ? "addition" : "concatenation";
}

}  // namespace detail

inline json run_config_to_json(const RunConfig& rc) {
    json j;
    j["encoder"] = {{"base_channels", rc.model.encoder.base_channels},
                    {"stage_depths", rc.model.encoder.stage_depths},
                    {"spatial_kernel", rc.model.encoder.spatial_kernel},
                    {"spectral_kernel", rc.model.encoder.spectral_kernel},
                    {"mlp_ratio", rc.model.encoder.mlp_ratio},
                    {"fusion", detail::fusion_name(rc.model.encoder.fusion)}};
    j["aggregator"] = {{"groups", rc.model.aggregator.groups},
                       {"heads", rc.model.aggregator.heads},
                       {"window", rc.model.aggregator.window},
                       {"model_dim", rc.model.aggregator.model_dim},
                       {"rpe_frequencies", rc.model.aggregator.rpe_frequencies},
                       {"use_rpe", rc.model.aggregator.use_rpe},
                       {"query_fusion", detail::fusion_name(rc.model.aggregator.query_fusion)}};
    j["decoder"] = {{"hidden_dims", rc.model.decoder.hidden_dims},
                    {"activation", rc.model.decoder.activation},
                    {"clamp_output", rc.model.decoder.clamp_output}};
    j["train"] = {{"lr", rc.train.lr},
                  {"steps", rc.train.steps},
                  {"batch_scenes", rc.train.batch_scenes},
                  {"queries_per_step", rc.train.queries_per_step},
                  {"seed", rc.train.seed},
                  {"augment_flips", rc.train.augment_flips}};
    j["mask"] = {{"seed", rc.mask_seed}, {"density", rc.mask_density}};
    j["shift_d"] = rc.shift_d;
    j["voxel_budget"] = rc.model.voxel_budget;
    j["query_chunk"] = rc.model.query_chunk;
    return j;
}

// Strict parse: unknown keys are rejected and every validation failure is
// reported, not just the first.
inline RunConfig run_config_from_json(const json& j) {
    std::vector<std::string> errors;
    RunConfig rc;
    detail::check_keys(j,
                       {"encoder", "aggregator", "decoder", "train", "mask", "shift_d",
                        "voxel_budget", "query_chunk"},
                       "", errors);

    auto get = [&](const json& obj, const char* key, auto& dst, const std::string& scope) {
        if (!obj.contains(key)) return;
        try {
            obj.at(key).get_to(dst);
        } catch (const json::exception& e) {
            errors.push_back(scope + key + ": " + e.what());
        }
    };

    if (j.contains("encoder")) {
        const json& e = j["encoder"];
        detail::check_keys(e,
                           {"base_channels", "stage_depths", "spatial_kernel", "spectral_kernel",
                            "mlp_ratio", "fusion"},
                           "encoder.", errors);
        get(e, "base_channels", rc.model.encoder.base_channels, "encoder.");
        get(e, "stage_depths", rc.model.encoder.stage_depths, "encoder.");
        get(e, "spatial_kernel", rc.model.encoder.spatial_kernel, "encoder.");
        get(e, "spectral_kernel", rc.model.encoder.spectral_kernel, "encoder.");
        get(e, "mlp_ratio", rc.model.encoder.mlp_ratio, "encoder.");
        if (e.contains("fusion"))
            rc.model.encoder.fusion =
                detail::parse_fusion(e["fusion"].get<std::string>(), "encoder.fusion", errors);
    }
    if (j.contains("aggregator")) {
        const json& a = j["aggregator"];
        detail::check_keys(a,
                           {"groups", "heads", "window", "model_dim", "rpe_frequencies",
                            "use_rpe", "query_fusion"},
                           "aggregator.", errors);
        get(a, "groups", rc.model.aggregator.groups, "aggregator.");
        get(a, "heads", rc.model.aggregator.heads, "aggregator.");
        get(a, "window", rc.model.aggregator.window, "aggregator.");
        get(a, "model_dim", rc.model.aggregator.model_dim, "aggregator.");
        get(a, "rpe_frequencies", rc.model.aggregator.rpe_frequencies, "aggregator.");
        get(a, "use_rpe", rc.model.aggregator.use_rpe, "aggregator.");
        if (a.contains("query_fusion"))
            rc.model.aggregator.query_fusion = detail::parse_fusion(
                a["query_fusion"].get<std::string>(), "aggregator.query_fusion", errors);
    }
    if (j.contains("decoder")) {
        const json& d = j["decoder"];
        detail::check_keys(d, {"hidden_dims", "activation", "clamp_output"}, "decoder.", errors);
        get(d, "hidden_dims", rc.model.decoder.hidden_dims, "decoder.");
        get(d, "activation", rc.model.decoder.activation, "decoder.");
        get(d, "clamp_output", rc.model.decoder.clamp_output, "decoder.");
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        detail::check_keys(
            t, {"lr", "steps", "batch_scenes", "queries_per_step", "seed", "augment_flips"},
            "train.", errors);
        get(t, "lr", rc.train.lr, "train.");
        get(t, "steps", rc.train.steps, "train.");
        get(t, "batch_scenes", rc.train.batch_scenes, "train.");
        get(t, "queries_per_step", rc.train.queries_per_step, "train.");
        get(t, "seed", rc.train.seed, "train.");
        get(t, "augment_flips", rc.train.augment_flips, "train.");
    }
    if (j.contains("mask")) {
        const json& m = j["mask"];
        detail::check_keys(m, {"seed", "density"}, "mask.", errors);
        get(m, "seed", rc.mask_seed, "mask.");
        get(m, "density", rc.mask_density, "mask.");
    }
    get(j, "shift_d", rc.shift_d, "");
    get(j, "voxel_budget", rc.model.voxel_budget, "");
    get(j, "query_chunk", rc.model.query_chunk, "");

    // structural validation, collected rather than thrown one at a time
    auto collect = [&](auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            errors.push_back(e.what());
        }
    };
    collect([&] { rc.model.encoder.validate(); });
    collect([&] { rc.model.aggregator.validate(); });
    collect([&] { rc.model.decoder.validate(); });
    collect([&] { rc.train.validate(); });
    collect([&] {
        if (!(rc.mask_density > 0.0 && rc.mask_density < 1.0))
            throw config_error("mask.density must lie in (0,1)");
    });

    if (!errors.empty()) {
        std::string msg = "config validation failed:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw config_error(msg);
    }
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw format_error("cannot parse config " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

// ---- checkpoints ----
// magic "MGCK" | u32 header length | JSON header | u32 tensor count |
// per tensor: u32 name length, name, HSC1 value, HSC1 adam_m, HSC1 adam_v.

struct Checkpoint {
    RunConfig config;
    std::uint64_t step_count = 0;
    std::uint64_t adam_steps = 0;
    std::string rng_state;
    std::size_t scene_bands = 0, scene_height = 0, scene_width = 0;
    std::unique_ptr<ParameterStore<float>> params = std::make_unique<ParameterStore<float>>();
    std::map<std::string, std::vector<float>> adam_m, adam_v;
};

inline std::string checkpoint_serialize(const Checkpoint& ck) {
    json header;
    header["config"] = run_config_to_json(ck.config);
    header["step_count"] = ck.step_count;
    header["adam_steps"] = ck.adam_steps;
    header["rng_state"] = ck.rng_state;
    header["scene"] = {{"bands", ck.scene_bands},
                       {"height", ck.scene_height},
                       {"width", ck.scene_width}};
    const std::string hdr = header.dump();

    std::string out;
    out += "MGCK";
    detail::put_u32(out, std::uint32_t(hdr.size()));
    out += hdr;
    detail::put_u32(out, std::uint32_t(ck.params->tensor_count()));
    for (const auto& [name, tensor] : *ck.params) {
        detail::put_u32(out, std::uint32_t(name.size()));
        out += name;
        out += hsc_serialize(tensor);
        auto moment_blob = [&](const std::map<std::string, std::vector<float>>& m) {
            auto it = m.find(name);
            std::vector<float> v = it != m.end() ? it->second
                                                 : std::vector<float>(tensor.size(), 0.f);
            const std::size_t n = v.size();
            return hsc_serialize(Tensor<float>::from_data({n}, std::move(v)));
        };
        out += moment_blob(ck.adam_m);
        out += moment_blob(ck.adam_v);
    }
    return out;
}

inline Checkpoint checkpoint_parse(const std::string& buf) {
    if (buf.compare(0, 4, "MGCK") != 0) throw format_error("bad checkpoint magic");
    std::size_t off = 4;
    const std::uint32_t hlen = detail::get_u32(buf, off);
    off += 4;
    if (off + hlen > buf.size()) throw format_error("checkpoint header truncated");
    json header;
    try {
        header = json::parse(buf.substr(off, hlen));
    } catch (const json::exception& e) {
        throw format_error(std::string("checkpoint header unparsable: ") + e.what());
    }
    off += hlen;

    Checkpoint ck;
    ck.config = run_config_from_json(header.at("config"));
    ck.step_count = header.at("step_count").get<std::uint64_t>();
    ck.adam_steps = header.at("adam_steps").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.scene_bands = header.at("scene").at("bands").get<std::size_t>();
    ck.scene_height = header.at("scene").at("height").get<std::size_t>();
    ck.scene_width = header.at("scene").at("width").get<std::size_t>();

    const std::uint32_t count = detail::get_u32(buf, off);
    off += 4;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t nlen = detail::get_u32(buf, off);
        off += 4;
        if (off + nlen > buf.size()) throw format_error("checkpoint name truncated");
        const std::string name = buf.substr(off, nlen);
        off += nlen;
        Tensor<float> value = hsc_parse(buf, &off);
        Tensor<float> m = hsc_parse(buf, &off);
        Tensor<float> v = hsc_parse(buf, &off);
        ck.params->add(name, std::move(value));
        ck.adam_m[name].assign(m.data(), m.data() + m.size());
        ck.adam_v[name].assign(v.data(), v.data() + v.size());
    }
    if (off != buf.size())
        throw format_error("trailing bytes at byte offset " + std::to_string(off) +
                           " in checkpoint");
    return ck;
}

inline void checkpoint_write(const std::filesystem::path& path, const Checkpoint& ck) {
    atomic_write(path, checkpoint_serialize(ck));
}

inline Checkpoint checkpoint_read(const std::filesystem::path& path) {
    return checkpoint_parse(read_file(path));
}

}  // namespace mgir
