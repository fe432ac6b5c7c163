#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "lfuse/datahub.hpp"
#include "lfuse/segmenter_model.hpp"

namespace lfuse {

enum class MaskSource { predicted, ground_truth };

struct LesionMask {
    torch::Tensor mask;  // float32 [H,W] in {0,1}
    MaskSource source = MaskSource::predicted;
    double threshold_used = 0.5;
};

// Builds the stand-in frozen encoder described by spec and injects rank-r adapters
// into every block's query and value projections.
Segmenter inject_adapters(const EncoderSpec& spec, int rank = 4);

struct Stage1Config {
    int steps = 300;
    int batch_size = 8;
    double lr = 2e-3;
    double weight_decay = 1e-4;
    double dice_weight = 0.9;
    double ce_weight = 0.1;
    AugmentPolicy augment{.affine = false, .hflip = true, .color_jitter = true};
    std::uint64_t seed = 0;
};

struct Stage1Report {
    std::vector<double> loss_history;  // one entry per step
};

// Soft Dice averaged over foreground and background plus binary cross-entropy,
// weighted dice_weight : ce_weight.
torch::Tensor segmentation_loss(const torch::Tensor& logits, const torch::Tensor& target, double dice_weight,
                                double ce_weight);

// Trains adapters, prompt and decoder on the train split; the frozen encoder is untouched.
Stage1Report finetune_segmenter(Segmenter& segmenter, const Dataset& dataset, const Stage1Config& cfg,
                                const std::function<void(int, double)>& on_step = {});

LesionMask predict_mask(Segmenter& segmenter, const torch::Tensor& image, double threshold = 0.5);
std::vector<LesionMask> predict_masks(Segmenter& segmenter, const std::vector<torch::Tensor>& images,
                                      double threshold = 0.5, int batch_size = 16);

struct CropOptions {
    int margin = 8;
    int fallback_size = 256;
};

struct CropBox {
    int64_t top = 0;
    int64_t left = 0;
    int64_t height = 0;
    int64_t width = 0;
    bool fallback = false;
};

// Bounding box of the largest 8-connected foreground component (ties broken by the
// component whose first pixel comes first in raster order), grown by the margin and
// clipped; the centred fallback_size square when the mask is empty.
CropBox lesion_box(const torch::Tensor& mask, const CropOptions& options = {});

// image (x) mask, cropped to lesion_box; the raw-image centre crop when the mask is empty.
torch::Tensor crop_lesion(const torch::Tensor& image, const LesionMask& mask, const CropOptions& options = {});
torch::Tensor crop_lesion(const torch::Tensor& image, const torch::Tensor& mask, const CropOptions& options = {});

double dice_coefficient(const torch::Tensor& pred, const torch::Tensor& gt);
double dice_coefficient(const LesionMask& pred, const LesionMask& gt);

struct DiceSummary {
    std::array<double, 3> per_class{};  // NaN for a class without annotated samples
    double tumor_mean = 0.0;            // over benign and malignant samples with masks
    std::vector<double> per_sample;     // aligned with the annotated subset of indices
};

// Dice of predicted against annotated masks over the given samples.
DiceSummary dice_summary(Segmenter& segmenter, const Dataset& dataset, const std::vector<std::size_t>& indices,
                         double threshold = 0.5);

// Trainable parameters and adapter metadata only; the frozen encoder is referenced by its digest.
void save_segmenter(const Segmenter& segmenter, const std::filesystem::path& path);
Segmenter load_segmenter(const std::filesystem::path& path);

}  // namespace lfuse
