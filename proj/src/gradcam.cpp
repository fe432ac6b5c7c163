#include "lfuse/gradcam.hpp"

#include "lfuse/errors.hpp"

namespace lfuse {

namespace F = torch::nn::functional;

torch::Tensor cam_from_gradients(const torch::Tensor& activations, const torch::Tensor& gradients, int64_t height,
                                 int64_t width) {
    auto weights = gradients.mean({1, 2}, /*keepdim=*/true);
    auto cam = torch::relu((weights * activations).sum(0));
    cam = F::interpolate(cam.unsqueeze(0).unsqueeze(0),
                         F::InterpolateFuncOptions()
                             .size(std::vector<int64_t>{height, width})
                             .mode(torch::kBilinear)
                             .align_corners(false))
              .squeeze(0)
              .squeeze(0)
              .clamp_min(0.0);
    const double peak = cam.max().item<double>();
    if (peak <= 0.0) return torch::zeros({height, width}, cam.options());
    return (cam / peak).clamp(0.0, 1.0);
}

torch::Tensor grad_cam(DualBranchNet& model, const BranchInputs& inputs, int target_class, int64_t height, int64_t width,
                       Branch tap) {
    if (target_class < 0 || target_class > 2) throw InvalidArgument("grad_cam: class index outside {0,1,2}");
    auto& tapped = tap == Branch::global ? model->gfe : model->lfe;
    if (!tapped) throw InvalidArgument("grad_cam: the tapped branch is disabled in this model");

    model->eval();
    torch::AutoGradMode enable(true);
    const auto& tap_input = tap == Branch::global ? inputs.global : inputs.local;
    auto activations = tapped->attended(tap_input.unsqueeze(0));
    auto tapped_features = global_average_pool(activations);

    torch::Tensor f_g, f_l;
    if (tap == Branch::global) {
        f_g = tapped_features;
        if (model->lfe) f_l = model->lfe(inputs.local.unsqueeze(0)).detach();
    } else {
        f_l = tapped_features;
        if (model->gfe) f_g = model->gfe(inputs.global.unsqueeze(0)).detach();
    }
    auto z = model->heads->logits(f_g, f_l);
    torch::Tensor score;
    int count = 0;
    for (const auto* head : {&z.g, &z.l, &z.f}) {
        if (!head->defined()) continue;
        auto s = (*head)[0][target_class];
        score = score.defined() ? score + s : s;
        ++count;
    }
    score = score / static_cast<double>(count);
    auto grads = torch::autograd::grad({score}, {activations}, {}, /*retain_graph=*/false, /*create_graph=*/false,
                                       /*allow_unused=*/true)[0];
    if (!grads.defined()) grads = torch::zeros_like(activations);
    return cam_from_gradients(activations.detach()[0], grads.detach()[0], height, width);
}

}  // namespace lfuse
