#pragma once

#include <filesystem>
#include <map>
#include <optional>

#include "risclip/config.hpp"
#include "risclip/training.hpp"

namespace risclip {

// Single-file archive: 8-byte magic "RISCKPT0", 8-byte little-endian manifest
// length, UTF-8 JSON manifest, then the raw float32 blob (row-major,
// little-endian). Writes are atomic via temp-file rename.

inline constexpr char kCheckpointMagic[8] = {'R', 'I', 'S', 'C', 'K', 'P', 'T', '0'};
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const ParamStore& params, const RunConfig& cfg, const TrainState* state,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
    ParamStore params;
    RunConfig config;
    TrainState state;
    bool has_state = false;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Manifest JSON without the blob, for `inspect`.
std::string checkpoint_manifest_text(const std::filesystem::path& path);

// Imports backbone tensors from an archive through an external->internal name
// mapping. Every backbone tensor of `cfg` must be covered; shapes must match.
ParamStore import_named_tensors(const std::filesystem::path& archive_path,
                                const std::map<std::string, std::string>& mapping,
                                const ModelConfig& cfg);

std::uint32_t config_hash(const RunConfig& cfg);

}  // namespace risclip
