#pragma once

#include <torch/torch.h>

#include "lfuse/extractors.hpp"
#include "lfuse/trainer.hpp"

namespace lfuse {

// Channel weights = spatial mean of the gradients; map = ReLU(sum_c w_c * A_c),
// bilinearly resized to height x width and divided by its maximum (all-zero when the
// weighted activations are nowhere positive). activations/gradients: [C,h,w].
torch::Tensor cam_from_gradients(const torch::Tensor& activations, const torch::Tensor& gradients, int64_t height,
                                 int64_t width);

// Grad-CAM at the CBAM output of the chosen branch. The class score is the mean of the
// target-class logits of every head in the topology. Returns [height,width] in [0,1].
torch::Tensor grad_cam(DualBranchNet& model, const BranchInputs& inputs, int target_class, int64_t height, int64_t width,
                       Branch tap = Branch::global);

}  // namespace lfuse
