#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "lfuse/datahub.hpp"
#include "lfuse/lesion_locator.hpp"
#include "lfuse/segmenter_model.hpp"
#include "lfuse/trainer.hpp"

namespace lfuse {

// Merged configuration tree with one section per module. Every leaf carries its
// provenance ("default", "file" or "flag"); keys outside the default tree are rejected.
class RunConfig {
public:
    // "desk" (single-core scale) or "full" (full-size encoder and batch).
    static RunConfig defaults(std::string_view profile = "desk");

    void merge_file(const std::filesystem::path& path);
    void merge_json(const nlohmann::json& overrides, std::string_view source);
    // Dotted path such as "trainer.epochs"; the value is parsed as JSON, falling back to a string.
    void set(std::string_view dotted_path, std::string_view value, std::string_view source = "flag");
    void set_value(std::string_view dotted_path, const nlohmann::json& value, std::string_view source = "flag");

    const nlohmann::json& tree() const { return tree_; }
    const nlohmann::json& provenance() const { return provenance_; }
    nlohmann::json get(std::string_view dotted_path) const;
    std::string digest() const;
    // Writes the tree (loadable with merge_file) and a sibling provenance file.
    void dump(const std::filesystem::path& path) const;

    int n_per_class() const;
    int synth_size() const;
    std::uint64_t data_seed() const;
    SplitFractions fractions() const;
    EncoderSpec encoder_spec() const;
    int lora_rank() const;
    double mask_threshold() const;
    Stage1Config stage1() const;
    TrainConfig train() const;
    std::string eval_split() const;
    int gradcam_count() const;

private:
    nlohmann::json tree_;
    nlohmann::json provenance_;
};

}  // namespace lfuse
