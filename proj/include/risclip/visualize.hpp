#pragma once

#include <filesystem>

#include "risclip/model.hpp"
#include "risclip/tensor.hpp"

namespace risclip {

// Overlay for qualitative inspection: predicted mask as a tint, ground-truth
// contour, and the patch-level grounding map as a heat inset in the corner.
Tensor<float> render_overlay(const Tensor<float>& image, const Tensor<std::uint8_t>& pred_mask,
                             const Tensor<std::uint8_t>& gt_mask, const GroundingMap& grounding);

}  // namespace risclip
