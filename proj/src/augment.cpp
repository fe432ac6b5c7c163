#include <cmath>
#include <numbers>

#include "lfuse/datahub.hpp"
#include "lfuse/util.hpp"

namespace lfuse {

namespace {

double draw(torch::Generator& gen, double lo, double hi) {
    return lo + (hi - lo) * torch::rand({1}, gen).item<double>();
}

torch::Tensor grayscale(const torch::Tensor& image) {
    return (image[0] * 0.299f + image[1] * 0.587f + image[2] * 0.114f).unsqueeze(0);
}

}  // namespace

nlohmann::json AugmentPolicy::to_json() const {
    return {{"affine", affine},
            {"hflip", hflip},
            {"color_jitter", color_jitter},
            {"flip_probability", flip_probability},
            {"max_rotation_deg", max_rotation_deg},
            {"max_translate", max_translate},
            {"min_scale", min_scale},
            {"max_scale", max_scale},
            {"brightness", brightness},
            {"contrast", contrast},
            {"saturation", saturation}};
}

AugmentPolicy AugmentPolicy::from_json(const nlohmann::json& j) {
    AugmentPolicy p;
    p.affine = j.at("affine").get<bool>();
    p.hflip = j.at("hflip").get<bool>();
    p.color_jitter = j.at("color_jitter").get<bool>();
    p.flip_probability = j.at("flip_probability").get<double>();
    p.max_rotation_deg = j.at("max_rotation_deg").get<double>();
    p.max_translate = j.at("max_translate").get<double>();
    p.min_scale = j.at("min_scale").get<double>();
    p.max_scale = j.at("max_scale").get<double>();
    p.brightness = j.at("brightness").get<double>();
    p.contrast = j.at("contrast").get<double>();
    p.saturation = j.at("saturation").get<double>();
    return p;
}

ImageSample augment(const ImageSample& sample, const AugmentPolicy& policy, std::uint64_t seed) {
    if (!policy.any()) return sample;
    namespace F = torch::nn::functional;
    auto gen = make_generator(seed);

    ImageSample out = sample;
    auto image = sample.image;
    std::optional<torch::Tensor> mask = sample.mask;

    if (policy.affine) {
        const double angle = draw(gen, -policy.max_rotation_deg, policy.max_rotation_deg) * std::numbers::pi / 180.0;
        const double scale = draw(gen, policy.min_scale, policy.max_scale);
        const double tx = draw(gen, -policy.max_translate, policy.max_translate) * 2.0;
        const double ty = draw(gen, -policy.max_translate, policy.max_translate) * 2.0;
        const double c = std::cos(angle) / scale, s = std::sin(angle) / scale;
        auto theta = torch::tensor({c, -s, tx, s, c, ty}, torch::kFloat32).view({1, 2, 3});
        const auto h = image.size(1), w = image.size(2);
        auto grid = F::affine_grid(theta, {1, 3, h, w}, false);
        image = F::grid_sample(image.unsqueeze(0), grid,
                               F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false))
                    .squeeze(0);
        if (mask) {
            auto warped = F::grid_sample(mask->unsqueeze(0).unsqueeze(0), grid,
                                         F::GridSampleFuncOptions().mode(torch::kNearest).padding_mode(torch::kZeros).align_corners(false));
            mask = (warped.squeeze(0).squeeze(0) > 0.5f).to(torch::kFloat32);
        }
    }
    if (policy.hflip && draw(gen, 0.0, 1.0) < policy.flip_probability) {
        image = image.flip({2});
        if (mask) mask = mask->flip({1});
    }
    if (policy.color_jitter) {
        const float b = static_cast<float>(draw(gen, 1.0 - policy.brightness, 1.0 + policy.brightness));
        const float c = static_cast<float>(draw(gen, 1.0 - policy.contrast, 1.0 + policy.contrast));
        const float s = static_cast<float>(draw(gen, 1.0 - policy.saturation, 1.0 + policy.saturation));
        image = (image * b).clamp(0.0f, 1.0f);
        auto mean = grayscale(image).mean();
        image = ((image - mean) * c + mean).clamp(0.0f, 1.0f);
        auto gray = grayscale(image);
        image = ((image - gray) * s + gray).clamp(0.0f, 1.0f);
    }
    out.image = image.clamp(0.0f, 1.0f).contiguous();
    out.mask = mask;
    return out;
}

}  // namespace lfuse
