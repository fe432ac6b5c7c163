#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

inline constexpr int kNumClasses = 3;

enum class Label : int { normal = 0, benign = 1, malignant = 2 };
enum class Modality { NBI, WLI };
enum class Split { train, val, test, external };

std::string_view to_string(Label label);
std::string_view to_string(Modality modality);
std::string_view to_string(Split split);
Label parse_label(std::string_view text);
Modality parse_modality(std::string_view text);
Split parse_split(std::string_view text);

inline bool is_tumor(Label label) { return label != Label::normal; }

struct ImageSample {
    torch::Tensor image;                // float32 [3,S,S], values in [0,1]
    std::optional<torch::Tensor> mask;  // float32 [S,S], values in {0,1}
    Label label = Label::normal;
    Modality modality = Modality::WLI;
    std::string patient_id;
    Split split = Split::train;

    // Throws ValidationError-style lfuse::Error describing the first broken invariant.
    void validate() const;
};

struct SampleRecord {
    std::string image_file;  // relative to the dataset root
    std::string mask_file;   // empty when no mask
    Label label = Label::normal;
    Modality modality = Modality::WLI;
    std::string patient_id;
    Split split = Split::train;
};

using ClassCounts = std::map<Split, std::array<int, kNumClasses>>;

struct DatasetManifest {
    std::vector<SampleRecord> records;
    ClassCounts class_counts;
    std::uint64_t seed = 0;

    void recount();
    // Patient-disjointness across train/val/test and count consistency.
    void validate() const;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

// Manifest plus the decoded rasters, index-aligned with manifest.records.
struct Dataset {
    DatasetManifest manifest;
    std::vector<ImageSample> samples;

    std::vector<std::size_t> indices_of(Split split) const;
    // Copies split tags from the manifest onto the samples.
    void sync_splits();
};

struct IngestLayout {
    std::string metadata_file = "metadata.csv";
    std::string mask_suffix = "_mask";
};

struct ValidationIssue {
    std::string file;
    std::string message;
};

struct IngestResult {
    Dataset dataset;
    std::vector<ValidationIssue> report;
};

IngestResult ingest_directory(const std::filesystem::path& root, const IngestLayout& layout = {});

Dataset generate_synthetic(int n_per_class, int size, std::uint64_t seed);

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

DatasetManifest split_by_patient(const DatasetManifest& manifest, const SplitFractions& fractions,
                                 std::uint64_t seed);

// Persists rasters, metadata.csv and manifest.json under root.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
// Loads a dataset previously written by write_dataset (manifest.json is authoritative for splits).
Dataset load_dataset(const std::filesystem::path& root);

// Digest over the manifest text and every raster, used to compare datasets.
std::string dataset_digest(const Dataset& dataset);

struct AugmentPolicy {
    bool affine = false;
    bool hflip = false;
    bool color_jitter = false;
    double flip_probability = 0.5;
    double max_rotation_deg = 10.0;
    double max_translate = 0.06;  // fraction of the image side
    double min_scale = 0.9;
    double max_scale = 1.1;
    double brightness = 0.15;
    double contrast = 0.15;
    double saturation = 0.15;

    bool any() const { return affine || hflip || color_jitter; }

    nlohmann::json to_json() const;
    static AugmentPolicy from_json(const nlohmann::json& j);
};

ImageSample augment(const ImageSample& sample, const AugmentPolicy& policy, std::uint64_t seed);

// Deterministic visiting order for one epoch; depends only on (seed, epoch, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace lfuse
