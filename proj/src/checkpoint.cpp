#include "lfuse/checkpoint.hpp"

#include "lfuse/errors.hpp"

namespace lfuse {

void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::function<void(torch::serialize::OutputArchive&)>& body) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    torch::serialize::OutputArchive archive;
    nlohmann::json header = meta;
    header["schema_version"] = kCheckpointSchemaVersion;
    archive.write("meta", c10::IValue(header.dump()));
    body(archive);
    auto tmp = path;
    tmp += ".tmp";
    try {
        archive.save_to(tmp.string());
    } catch (const c10::Error& e) {
        std::filesystem::remove(tmp);
        throw CheckpointError("cannot write checkpoint " + path.string() + ": " + e.what_without_backtrace());
    }
    std::filesystem::rename(tmp, path);
}

CheckpointReader open_checkpoint(const std::filesystem::path& path, const std::string& expected_kind) {
    if (!std::filesystem::is_regular_file(path)) throw CheckpointError("checkpoint not found: " + path.string());
    CheckpointReader reader;
    try {
        reader.archive.load_from(path.string());
        c10::IValue meta;
        if (!reader.archive.try_read("meta", meta)) throw CheckpointError("checkpoint has no header: " + path.string());
        reader.meta = nlohmann::json::parse(meta.toStringRef());
    } catch (const c10::Error& e) {
        throw CheckpointError("unreadable checkpoint " + path.string() + ": " + e.what_without_backtrace());
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    const int version = reader.meta.value("schema_version", -1);
    if (version != kCheckpointSchemaVersion)
        throw IncompatibleCheckpoint("checkpoint schema version " + std::to_string(version) + " is incompatible with " +
                                     std::to_string(kCheckpointSchemaVersion));
    const auto kind = reader.meta.value("kind", std::string{});
    if (kind != expected_kind)
        throw IncompatibleCheckpoint("checkpoint kind '" + kind + "' where '" + expected_kind + "' was expected");
    return reader;
}

void write_module(torch::serialize::OutputArchive& archive, const std::string& key, const torch::nn::Module& module) {
    torch::serialize::OutputArchive nested;
    module.save(nested);
    archive.write(key, nested);
}

void read_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& module) {
    torch::serialize::InputArchive nested;
    try {
        if (!archive.try_read(key, nested)) throw CheckpointError("checkpoint lacks section '" + key + "'");
        module.load(nested);
    } catch (const c10::Error& e) {
        throw CheckpointError("section '" + key + "' does not match the model: " + e.what_without_backtrace());
    }
}

}  // namespace lfuse
