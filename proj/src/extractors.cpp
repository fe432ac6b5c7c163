#include "lfuse/extractors.hpp"

#include <algorithm>

#include "lfuse/errors.hpp"

namespace lfuse {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string_view to_string(Branch branch) { return branch == Branch::global ? "global" : "local"; }

EncoderPreset encoder_preset(const std::string& name) {
    if (name == "tiny") return {"tiny", false, 16, {1, 1, 1, 1}, {16, 32, 64, 128}};
    if (name == "resnet50") return {"resnet50", true, 64, {3, 4, 6, 3}, {256, 512, 1024, 2048}};
    if (name == "micro") return {"micro", false, 4, {1, 1, 1, 1}, {4, 4, 4, 4}};
    throw InvalidArgument("unknown encoder preset '" + name + "'");
}

nlohmann::json ExtractorConfig::to_json() const {
    return {{"preset", preset}, {"width", width}, {"bias", bias}, {"cbam_reduction", cbam_reduction}};
}

ExtractorConfig ExtractorConfig::from_json(const nlohmann::json& j) {
    ExtractorConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.width = j.at("width").get<int>();
    c.bias = j.at("bias").get<bool>();
    c.cbam_reduction = j.at("cbam_reduction").get<int>();
    return c;
}

namespace {

nn::BatchNorm2d batch_norm(int channels, bool bias) {
    return nn::BatchNorm2d(nn::BatchNorm2dOptions(channels).affine(bias));
}

nn::Conv2d conv(int in, int out, int kernel, int stride) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(kernel / 2).bias(false));
}

class BasicBlockImpl : public nn::Module {
public:
    BasicBlockImpl(int in, int out, int stride, bool bias) {
        conv1 = register_module("conv1", conv(in, out, 3, stride));
        bn1 = register_module("bn1", batch_norm(out, bias));
        conv2 = register_module("conv2", conv(out, out, 3, 1));
        bn2 = register_module("bn2", batch_norm(out, bias));
        if (stride != 1 || in != out)
            shortcut = register_module("shortcut", nn::Sequential(conv(in, out, 1, stride), batch_norm(out, bias)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto y = torch::relu(bn1(conv1(x)));
        y = bn2(conv2(y));
        return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
    }

private:
    nn::Conv2d conv1{nullptr}, conv2{nullptr};
    nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(BasicBlock);

class BottleneckImpl : public nn::Module {
public:
    BottleneckImpl(int in, int out, int stride, bool bias) {
        const int mid = out / 4;
        conv1 = register_module("conv1", conv(in, mid, 1, 1));
        bn1 = register_module("bn1", batch_norm(mid, bias));
        conv2 = register_module("conv2", conv(mid, mid, 3, stride));
        bn2 = register_module("bn2", batch_norm(mid, bias));
        conv3 = register_module("conv3", conv(mid, out, 1, 1));
        bn3 = register_module("bn3", batch_norm(out, bias));
        if (stride != 1 || in != out)
            shortcut = register_module("shortcut", nn::Sequential(conv(in, out, 1, stride), batch_norm(out, bias)));
    }
    torch::Tensor forward(const torch::Tensor& x) {
        auto y = torch::relu(bn1(conv1(x)));
        y = torch::relu(bn2(conv2(y)));
        y = bn3(conv3(y));
        return torch::relu(y + (shortcut ? shortcut->forward(x) : x));
    }

private:
    nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
    nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, bn3{nullptr};
    nn::Sequential shortcut{nullptr};
};
TORCH_MODULE(Bottleneck);

}  // namespace

// ---------------------------------------------------------------- encoder

ResidualEncoderImpl::ResidualEncoderImpl(const EncoderPreset& preset, bool bias) : preset_(preset) {
    stem = register_module("stem", nn::Sequential(conv(3, preset.stem_channels, 7, 2), batch_norm(preset.stem_channels, bias),
                                                  nn::ReLU(),
                                                  nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))));
    int in = preset.stem_channels;
    for (int s = 0; s < 4; ++s) {
        nn::Sequential stage;
        for (int b = 0; b < preset.blocks[s]; ++b) {
            const int stride = (b == 0 && s > 0) ? 2 : 1;
            if (preset.bottleneck)
                stage->push_back(Bottleneck(in, preset.channels[s], stride, bias));
            else
                stage->push_back(BasicBlock(in, preset.channels[s], stride, bias));
            in = preset.channels[s];
        }
        stages[s] = register_module("stage" + std::to_string(s + 1), stage);
    }
}

PyramidMaps ResidualEncoderImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != 3) throw InvalidArgument("extractor expects a [B,3,H,W] batch");
    if (x.size(2) < kMinExtractorInput || x.size(3) < kMinExtractorInput)
        throw InvalidArgument("extractor input must be at least 32x32, got " + std::to_string(x.size(2)) + "x" +
                              std::to_string(x.size(3)));
    PyramidMaps maps;
    auto h = stem->forward(x);
    for (auto& stage : stages) {
        h = stage->forward(h);
        maps.push_back(h);
    }
    return maps;
}

// ---------------------------------------------------------------- pyramid

FpnBottomHeadImpl::FpnBottomHeadImpl(const std::array<int, 4>& in_channels, int width, bool bias)
    : in_channels_(in_channels) {
    for (int i = 0; i < 4; ++i)
        lateral[i] = register_module("lateral" + std::to_string(i + 1),
                                     nn::Conv2d(nn::Conv2dOptions(in_channels[i], width, 1).bias(bias)));
    smooth = register_module("smooth", nn::Conv2d(nn::Conv2dOptions(width, width, 3).padding(1).bias(bias)));
}

torch::Tensor FpnBottomHeadImpl::forward(const PyramidMaps& maps) {
    if (maps.size() != 4) throw StructuralError("pyramid head needs exactly 4 scales");
    for (int i = 0; i < 4; ++i)
        if (maps[i].size(1) != in_channels_[i])
            throw StructuralError("pyramid scale " + std::to_string(i) + " has " + std::to_string(maps[i].size(1)) +
                                  " channels, lateral projection expects " + std::to_string(in_channels_[i]));
    auto merged = lateral[3](maps[3]);
    for (int i = 2; i >= 0; --i) {
        auto up = F::interpolate(merged, F::InterpolateFuncOptions()
                                             .size(std::vector<int64_t>{maps[i].size(2), maps[i].size(3)})
                                             .mode(torch::kNearest));
        merged = lateral[i](maps[i]) + up;
    }
    return smooth(merged);
}

// ---------------------------------------------------------------- attention

CbamImpl::CbamImpl(int channels, int reduction, bool bias) {
    const int hidden = std::max(1, channels / std::max(1, reduction));
    fc1 = register_module("fc1", nn::Linear(nn::LinearOptions(channels, hidden).bias(bias)));
    fc2 = register_module("fc2", nn::Linear(nn::LinearOptions(hidden, channels).bias(bias)));
    spatial = register_module("spatial", nn::Conv2d(nn::Conv2dOptions(2, 1, 7).padding(3).bias(bias)));
}

CbamOutput CbamImpl::forward_with_gates(const torch::Tensor& x) {
    const auto b = x.size(0), c = x.size(1);
    CbamOutput out;
    auto mlp = [&](const torch::Tensor& v) { return fc2(torch::relu(fc1(v))); };
    if (gate_override_) {
        out.channel_gate = torch::full({b, c, 1, 1}, *gate_override_, x.options());
    } else {
        auto avg = x.mean({2, 3});
        auto mx = x.amax({2, 3});
        out.channel_gate = torch::sigmoid(mlp(avg) + mlp(mx)).view({b, c, 1, 1});
    }
    auto refined = x * out.channel_gate;
    if (gate_override_) {
        out.spatial_gate = torch::full({b, 1, x.size(2), x.size(3)}, *gate_override_, x.options());
    } else {
        auto desc = torch::cat({std::get<0>(refined.max(1, true)), refined.mean(1, true)}, 1);
        out.spatial_gate = torch::sigmoid(spatial(desc));
    }
    out.output = refined * out.spatial_gate;
    return out;
}

torch::Tensor CbamImpl::forward(const torch::Tensor& x) { return forward_with_gates(x).output; }

torch::Tensor global_average_pool(const torch::Tensor& map) { return map.mean({2, 3}); }

// ---------------------------------------------------------------- extractor

FeatureExtractorImpl::FeatureExtractorImpl(const ExtractorConfig& config, Branch branch)
    : config_(config), branch_(branch) {
    const auto preset = encoder_preset(config.preset);
    encoder = register_module("encoder", ResidualEncoder(preset, config.bias));
    fpn = register_module("fpn", FpnBottomHead(preset.channels, config.width, config.bias));
    cbam = register_module("cbam", Cbam(config.width, config.cbam_reduction, config.bias));
}

PyramidMaps FeatureExtractorImpl::encode_multiscale(const torch::Tensor& x) { return encoder(x); }

torch::Tensor FeatureExtractorImpl::attended(const torch::Tensor& x) { return cbam(fpn(encoder(x))); }

torch::Tensor FeatureExtractorImpl::forward(const torch::Tensor& x) { return global_average_pool(attended(x)); }

BranchFeatures extract_features(FeatureExtractor& extractor, const torch::Tensor& images) {
    auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
    return {extractor(batch), extractor->branch()};
}

}  // namespace lfuse
