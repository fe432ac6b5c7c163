#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "lfuse/datahub.hpp"
#include "lfuse/evalkit.hpp"
#include "lfuse/extractors.hpp"
#include "lfuse/fusion_gfo.hpp"
#include "lfuse/lesion_locator.hpp"

namespace lfuse {

// Branch and loss switches; the four canonical combinations are V1..V4.
struct AblationFlags {
    bool use_gfe = true;
    bool use_lfe = true;
    bool use_gfo = true;

    // Throws ConfigError when no branch is enabled or GFO lacks a branch.
    void validate() const;
    // "V1".."V4" for the four canonical variants, otherwise "custom".
    std::string variant() const;
    bool operator==(const AblationFlags&) const = default;

    nlohmann::json to_json() const;
    static AblationFlags from_json(const nlohmann::json& j);
};

struct TrainConfig {
    double lr = 0.003;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 16;
    int epochs = 30;
    double lr_decay = 0.965;  // per-epoch exponential factor
    LossWeights loss_weights;
    AugmentPolicy augment{.affine = true, .hflip = true, .color_jitter = true};
    AblationFlags ablation;
    std::uint64_t seed = 0;
    int image_size = 128;  // network input side, both branches
    ExtractorConfig extractor;
    CropOptions crop{.margin = 8, .fallback_size = 64};
    MaskSource mask_source = MaskSource::predicted;
    AdversarialMode adversarial_mode = AdversarialMode::joint;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);

    // batch 16, 30 epochs, tiny preset, 128 px
    static TrainConfig desk();
    // batch 256, 60 epochs, resnet50 preset with W=256, 224 px, 256 px fallback crop
    static TrainConfig full();
};

double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct DualBranchOutput {
    PredictionTriple preds;
    torch::Tensor f_g, f_l;  // undefined for a disabled branch
};

class DualBranchNetImpl : public torch::nn::Module {
public:
    DualBranchNetImpl(const ExtractorConfig& extractor, const AblationFlags& flags);

    DualBranchOutput forward(const torch::Tensor& global_batch, const torch::Tensor& local_batch);

    const AblationFlags& flags() const { return flags_; }
    const ExtractorConfig& extractor_config() const { return extractor_; }

    FeatureExtractor gfe{nullptr};
    FeatureExtractor lfe{nullptr};
    ClassifierHeads heads{nullptr};
    Discriminator discriminator{nullptr};

private:
    ExtractorConfig extractor_;
    AblationFlags flags_;
};
TORCH_MODULE(DualBranchNet);

// ImageNet statistics applied to [0,1] rasters before the extractors.
torch::Tensor normalize_input(const torch::Tensor& image);

struct BranchInputs {
    torch::Tensor global;  // [3,S,S], normalised
    torch::Tensor local;   // [3,S,S], normalised lesion crop
};

BranchInputs prepare_inputs(const torch::Tensor& image, const torch::Tensor& lesion_mask, const TrainConfig& cfg);

// Lesion masks feeding the local branch, index-aligned with dataset.samples.
// Predicted masks need a segmenter; ground-truth mode uses the annotations (all-zero when absent).
std::vector<torch::Tensor> lesion_masks_for(const Dataset& dataset, Segmenter* segmenter, MaskSource source);

struct SplitPredictions {
    torch::Tensor ensemble;  // [N,3]
    PredictionTriple heads;
    std::vector<int> labels;
    std::vector<std::size_t> indices;
};

SplitPredictions predict_split(DualBranchNet& model, const Dataset& dataset, const std::vector<std::size_t>& indices,
                               const std::vector<torch::Tensor>& masks, const TrainConfig& cfg);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0;
    double loss = 0, l_f = 0, l_g = 0, l_l = 0, l_s = 0, l_d = 0;
    double train_accuracy = 0;
    double val_accuracy = 0;
    double val_macro_f1 = 0;

    nlohmann::json to_json() const;
    static EpochMetrics from_json(const nlohmann::json& j);
};

struct TrainResult {
    DualBranchNet model{nullptr};  // weights of the best validation epoch
    std::vector<EpochMetrics> history;
    int best_epoch = -1;
    double best_val_f1 = -1;
    std::filesystem::path best_checkpoint;
    std::string segmenter_digest_before, segmenter_digest_after;
};

// Runs stage 2 with the segmenter frozen. Writes config.json, metrics.jsonl,
// best.ckpt and last.ckpt under run_dir when it is non-empty.
TrainResult train_stage2(const Dataset& dataset, Segmenter* segmenter, const TrainConfig& cfg,
                         const std::filesystem::path& run_dir,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Applies one momentum-SGD step with the configured decay groups (biases and 1-D
// parameters are not decayed). Exposed for the optimiser property tests.
std::unique_ptr<torch::optim::SGD> make_optimizer(torch::nn::Module& model, const TrainConfig& cfg);

struct LoadedModel {
    DualBranchNet model{nullptr};
    TrainConfig config;
    int epoch = 0;
    std::vector<EpochMetrics> history;
};

void save_stage2(const std::filesystem::path& path, const DualBranchNet& model, const TrainConfig& cfg, int epoch,
                 const std::vector<EpochMetrics>& history);
// Throws TopologyMismatch when expected flags are given and differ from the stored ones.
LoadedModel load_stage2(const std::filesystem::path& path, const std::optional<AblationFlags>& expected = std::nullopt);

}  // namespace lfuse
