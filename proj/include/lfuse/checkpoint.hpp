#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

inline constexpr int kCheckpointSchemaVersion = 1;

// Serialises through a temp file renamed over path, so a failed write never clobbers
// an existing checkpoint. "meta" carries the JSON header (schema, kind, config).
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::function<void(torch::serialize::OutputArchive&)>& body);

struct CheckpointReader {
    torch::serialize::InputArchive archive;
    nlohmann::json meta;
};

// Throws CheckpointError on unreadable/truncated files and IncompatibleCheckpoint when
// the schema version or kind differ.
CheckpointReader open_checkpoint(const std::filesystem::path& path, const std::string& expected_kind);

void write_module(torch::serialize::OutputArchive& archive, const std::string& key, const torch::nn::Module& module);
void read_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& module);

}  // namespace lfuse
