#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace lfuse {

enum class Branch { global, local };

std::string_view to_string(Branch branch);

// Four feature maps at strides 4, 8, 16 and 32 (finest first).
using PyramidMaps = std::vector<torch::Tensor>;

struct EncoderPreset {
    std::string name;
    bool bottleneck = false;
    int stem_channels = 16;
    std::array<int, 4> blocks{1, 1, 1, 1};
    std::array<int, 4> channels{16, 32, 64, 128};
};

// "tiny": one basic block per stage, widths 16/32/64/128.
// "resnet50": bottleneck stages 3/4/6/3 with outputs 256/512/1024/2048.
EncoderPreset encoder_preset(const std::string& name);

struct ExtractorConfig {
    std::string preset = "tiny";
    int width = 64;  // pyramid width W; pooled feature dimension D == W
    bool bias = true;
    int cbam_reduction = 16;

    int feature_dim() const { return width; }
    nlohmann::json to_json() const;
    static ExtractorConfig from_json(const nlohmann::json& j);
};

class ResidualEncoderImpl : public torch::nn::Module {
public:
    ResidualEncoderImpl(const EncoderPreset& preset, bool bias);
    PyramidMaps forward(const torch::Tensor& x);

    const EncoderPreset& preset() const { return preset_; }

private:
    EncoderPreset preset_;
    torch::nn::Sequential stem{nullptr};
    std::array<torch::nn::Sequential, 4> stages;
};
TORCH_MODULE(ResidualEncoder);

// Top-down pyramid pathway; only the finest merged map is smoothed and returned.
class FpnBottomHeadImpl : public torch::nn::Module {
public:
    FpnBottomHeadImpl(const std::array<int, 4>& in_channels, int width, bool bias);
    torch::Tensor forward(const PyramidMaps& maps);

private:
    std::array<int, 4> in_channels_;
    std::array<torch::nn::Conv2d, 4> lateral{nullptr, nullptr, nullptr, nullptr};
    torch::nn::Conv2d smooth{nullptr};
};
TORCH_MODULE(FpnBottomHead);

struct CbamOutput {
    torch::Tensor output;
    torch::Tensor channel_gate;  // [B,C,1,1]
    torch::Tensor spatial_gate;  // [B,1,H,W]
};

// Channel attention (shared MLP over avg/max descriptors) followed by spatial
// attention (7x7 convolution over channel-wise max/mean maps).
class CbamImpl : public torch::nn::Module {
public:
    CbamImpl(int channels, int reduction, bool bias);
    torch::Tensor forward(const torch::Tensor& x);
    CbamOutput forward_with_gates(const torch::Tensor& x);

    // Test hook: replace both gates by a constant.
    void set_gate_override(std::optional<double> value) { gate_override_ = value; }

    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
    torch::nn::Conv2d spatial{nullptr};

private:
    std::optional<double> gate_override_;
};
TORCH_MODULE(Cbam);

torch::Tensor global_average_pool(const torch::Tensor& map);

struct BranchFeatures {
    torch::Tensor vectors;  // [B,D]
    Branch branch = Branch::global;
};

class FeatureExtractorImpl : public torch::nn::Module {
public:
    FeatureExtractorImpl(const ExtractorConfig& config, Branch branch);

    // [B,3,S,S] -> [B,D]
    torch::Tensor forward(const torch::Tensor& x);
    PyramidMaps encode_multiscale(const torch::Tensor& x);
    // CBAM output before pooling; the Grad-CAM tap point.
    torch::Tensor attended(const torch::Tensor& x);

    Branch branch() const { return branch_; }
    const ExtractorConfig& config() const { return config_; }

    ResidualEncoder encoder{nullptr};
    FpnBottomHead fpn{nullptr};
    Cbam cbam{nullptr};

private:
    ExtractorConfig config_;
    Branch branch_;
};
TORCH_MODULE(FeatureExtractor);

BranchFeatures extract_features(FeatureExtractor& extractor, const torch::Tensor& images);

// Smallest accepted input side; the stride-32 map would vanish below it.
inline constexpr int64_t kMinExtractorInput = 32;

}  // namespace lfuse
