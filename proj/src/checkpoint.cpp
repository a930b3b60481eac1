#include "risclip/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iostream>

namespace risclip {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string crc_hex(const std::vector<char>& bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    if (!bytes.empty())
        crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
                    static_cast<uInt>(bytes.size()));
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
    return buf;
}

void append_le64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct RawTensor {
    std::vector<int> shape;
    std::string dtype;
    std::vector<char> bytes;
};

struct Archive {
    json manifest;
    std::map<std::string, RawTensor> tensors;
};

Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw ValidationError("checkpoint " + path.string() + ": bad magic");
    char lenbuf[8];
    if (!in.read(lenbuf, 8)) throw ValidationError("checkpoint: truncated header");
    std::uint64_t mlen = 0;
    for (int i = 7; i >= 0; --i) mlen = (mlen << 8) | static_cast<unsigned char>(lenbuf[i]);
    std::string mtext(mlen, '\0');
    if (!in.read(mtext.data(), static_cast<std::streamsize>(mlen)))
        throw ValidationError("checkpoint: truncated manifest");

    Archive a;
    try {
        a.manifest = json::parse(mtext);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("checkpoint manifest: ") + e.what());
    }
    if (!a.manifest.contains("format_version") ||
        a.manifest.at("format_version").get<int>() != kCheckpointVersion)
        throw ValidationError("checkpoint: unknown format_version");

    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string expect = a.manifest.at("checksum").get<std::string>();
    if (crc_hex(blob) != expect)
        throw ValidationError("checkpoint " + path.string() + ": blob checksum mismatch");

    std::vector<std::pair<std::uint64_t, std::uint64_t>> extents;
    for (const auto& [name, meta] : a.manifest.at("tensors").items()) {
        RawTensor t;
        t.shape = meta.at("shape").get<std::vector<int>>();
        t.dtype = meta.at("dtype").get<std::string>();
        const std::uint64_t offset = meta.at("offset").get<std::uint64_t>();
        const std::uint64_t nbytes = meta.at("nbytes").get<std::uint64_t>();
        if (offset + nbytes > blob.size())
            throw ValidationError("checkpoint: tensor '" + name + "' extends past blob end");
        const std::uint64_t elem = t.dtype == "f32" ? 4 : t.dtype == "f64" ? 8 : 0;
        if (elem == 0) throw ValidationError("checkpoint: tensor '" + name + "' has unknown dtype '" +
                                             t.dtype + "'");
        if (nbytes != static_cast<std::uint64_t>(numel_of(t.shape)) * elem)
            throw ValidationError("checkpoint: tensor '" + name + "' byte length disagrees with shape");
        t.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                       blob.begin() + static_cast<std::ptrdiff_t>(offset + nbytes));
        extents.emplace_back(offset, offset + nbytes);
        a.tensors.emplace(name, std::move(t));
    }
    std::sort(extents.begin(), extents.end());
    for (size_t i = 1; i < extents.size(); ++i)
        if (extents[i].first < extents[i - 1].second)
            throw ValidationError("checkpoint: overlapping tensor extents");
    return a;
}

Tensor<float> to_float_tensor(const std::string& name, const RawTensor& raw, bool allow_downcast) {
    Tensor<float> t;
    t.shape = raw.shape;
    t.data.resize(static_cast<size_t>(numel_of(raw.shape)));
    if (raw.dtype == "f32") {
        std::memcpy(t.data.data(), raw.bytes.data(), raw.bytes.size());
    } else if (raw.dtype == "f64" && allow_downcast) {
        std::cerr << "warning: converting tensor '" << name << "' from f64 to f32\n";
        std::vector<double> wide(t.data.size());
        std::memcpy(wide.data(), raw.bytes.data(), raw.bytes.size());
        for (size_t i = 0; i < wide.size(); ++i) t.data[i] = static_cast<float>(wide[i]);
    } else {
        throw ValidationError("tensor '" + name + "': unsupported dtype '" + raw.dtype + "'");
    }
    return t;
}

// expected (name, shape, buffer?) registry derived from a config
ParamStore expected_registry(const RunConfig& cfg) { return init_run_params(cfg); }

}  // namespace

std::uint32_t config_hash(const RunConfig& cfg) {
    const std::string text = run_config_to_json(cfg).dump();
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
    return static_cast<std::uint32_t>(crc);
}

void save_checkpoint(const ParamStore& params, const RunConfig& cfg, const TrainState* state,
                     const std::filesystem::path& path) {
    std::vector<char> blob;
    ordered_json tensors = ordered_json::object();
    auto append_tensor = [&](const std::string& name, const Tensor<float>& t) {
        const std::uint64_t offset = blob.size();
        const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
        blob.resize(blob.size() + nbytes);
        std::memcpy(blob.data() + offset, t.data.data(), nbytes);
        tensors[name] = {{"shape", t.shape}, {"dtype", "f32"}, {"offset", offset},
                         {"nbytes", nbytes}};
    };
    for (const auto& [name, t] : params.tensors) append_tensor(name, t);
    if (state) {
        for (const auto& [name, t] : state->opt.m) append_tensor("opt.m." + name, t);
        for (const auto& [name, t] : state->opt.v) append_tensor("opt.v." + name, t);
    }

    ordered_json manifest;
    manifest["format_version"] = kCheckpointVersion;
    manifest["config"] = run_config_to_json(cfg);
    char hash[16];
    std::snprintf(hash, sizeof hash, "%08lx", static_cast<unsigned long>(config_hash(cfg)));
    manifest["config_hash"] = hash;
    manifest["tensors"] = tensors;
    manifest["buffers"] = std::vector<std::string>(params.buffers.begin(), params.buffers.end());
    if (state) {
        manifest["training_state"] = {{"stage", state->stage},
                                      {"step", state->step},
                                      {"total_steps", state->total_steps},
                                      {"best_loss", state->best_loss},
                                      {"best_step", state->best_step},
                                      {"has_best", state->has_best},
                                      {"adam_t", state->opt.t}};
    } else {
        manifest["training_state"] = nullptr;
    }
    manifest["checksum"] = crc_hex(blob);

    std::string out;
    out.append(kCheckpointMagic, 8);
    const std::string mtext = manifest.dump();
    append_le64(out, mtext.size());
    out += mtext;
    out.append(blob.data(), blob.size());

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ValidationError("cannot write checkpoint: " + path.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw ValidationError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    Archive a = read_archive(path);
    LoadedCheckpoint out;
    out.config = parse_run_config(a.manifest.at("config"));

    // collect stored params / moments
    std::map<std::string, Tensor<float>> moments_m, moments_v;
    ParamStore loaded;
    for (const auto& [name, raw] : a.tensors) {
        Tensor<float> t = to_float_tensor(name, raw, /*allow_downcast=*/false);
        if (name.rfind("opt.m.", 0) == 0) moments_m.emplace(name.substr(6), std::move(t));
        else if (name.rfind("opt.v.", 0) == 0) moments_v.emplace(name.substr(6), std::move(t));
        else loaded.add(name, std::move(t));
    }
    for (const auto& b : a.manifest.at("buffers").get<std::vector<std::string>>())
        loaded.buffers.insert(b);

    // shapes and the name set must agree with the embedded config
    const ParamStore expected = expected_registry(out.config);
    for (const auto& [name, t] : expected.tensors) {
        auto it = loaded.tensors.find(name);
        if (it == loaded.tensors.end())
            throw ValidationError("checkpoint: manifest is missing tensor '" + name + "'");
        if (it->second.shape != t.shape)
            throw ValidationError("checkpoint: tensor '" + name + "' has shape " +
                                  shape_str(it->second.shape) + ", config expects " +
                                  shape_str(t.shape));
    }
    for (const auto& [name, _] : loaded.tensors)
        if (!expected.tensors.count(name))
            throw ValidationError("checkpoint: unexpected tensor '" + name + "'");
    loaded.buffers = expected.buffers;

    out.params = std::move(loaded);
    const auto& ts = a.manifest.at("training_state");
    if (!ts.is_null()) {
        out.has_state = true;
        out.state.stage = ts.at("stage").get<int>();
        out.state.step = ts.at("step").get<std::int64_t>();
        out.state.total_steps = ts.at("total_steps").get<std::int64_t>();
        out.state.best_loss = ts.at("best_loss").get<double>();
        out.state.best_step = ts.at("best_step").get<std::int64_t>();
        out.state.has_best = ts.at("has_best").get<bool>();
        out.state.opt.t = ts.at("adam_t").get<std::int64_t>();
        out.state.opt.m = std::move(moments_m);
        out.state.opt.v = std::move(moments_v);
    }
    return out;
}

std::string checkpoint_manifest_text(const std::filesystem::path& path) {
    Archive a = read_archive(path);
    return a.manifest.dump(2) + "\n";
}

ParamStore import_named_tensors(const std::filesystem::path& archive_path,
                                const std::map<std::string, std::string>& mapping,
                                const ModelConfig& cfg) {
    Archive a = read_archive(archive_path);

    ParamStore expected;
    add_backbone_params(expected, cfg.backbone, /*seed=*/0);

    std::map<std::string, std::string> internal_to_external;
    for (const auto& [external, internal] : mapping) {
        if (internal.rfind("backbone.", 0) != 0)
            throw ValidationError("import: mapping target '" + internal +
                                  "' is not a backbone tensor");
        if (!internal_to_external.emplace(internal, external).second)
            throw ValidationError("import: duplicate mapping target '" + internal + "'");
    }

    std::string missing;
    for (const auto& [name, _] : expected.tensors)
        if (!internal_to_external.count(name)) missing += (missing.empty() ? "" : ", ") + name;
    if (!missing.empty())
        throw ValidationError("import: unmapped backbone tensors: " + missing);

    ParamStore out;
    for (const auto& [internal, external] : internal_to_external) {
        auto it = a.tensors.find(external);
        if (it == a.tensors.end())
            throw ValidationError("import: archive has no tensor '" + external + "'");
        Tensor<float> t = to_float_tensor(external, it->second, /*allow_downcast=*/true);
        const Tensor<float>& want = expected.at(internal);
        if (t.shape != want.shape)
            throw ValidationError("import: tensor '" + external + "' -> '" + internal +
                                  "' has shape " + shape_str(t.shape) + ", expected " +
                                  shape_str(want.shape));
        out.add(internal, std::move(t));
    }
    return out;
}

}  // namespace risclip
