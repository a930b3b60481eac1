#include "risclip/visualize.hpp"

#include <algorithm>

#include "risclip/errors.hpp"

namespace risclip {

static bool is_boundary(const Tensor<std::uint8_t>& mask, int y, int x) {
    if (!mask.at(y, x)) return false;
    const int h = mask.dim(0), w = mask.dim(1);
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) return true;
            if (!mask.at(ny, nx)) return true;
        }
    return false;
}

Tensor<float> render_overlay(const Tensor<float>& image, const Tensor<std::uint8_t>& pred_mask,
                             const Tensor<std::uint8_t>& gt_mask, const GroundingMap& grounding) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ValidationError("render_overlay: want (H,W,3) image");
    const int h = image.dim(0), w = image.dim(1);
    if (pred_mask.dim(0) != h || pred_mask.dim(1) != w || gt_mask.dim(0) != h ||
        gt_mask.dim(1) != w)
        throw ValidationError("render_overlay: mask size mismatch");
    Tensor<float> out = image;

    // predicted mask: pink tint
    const float tint[3] = {1.0f, 0.35f, 0.65f};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (pred_mask.at(y, x))
                for (int c = 0; c < 3; ++c)
                    out.at(y, x, c) = 0.55f * out.at(y, x, c) + 0.45f * tint[c];

    // ground-truth contour: blue
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (is_boundary(gt_mask, y, x)) {
                out.at(y, x, 0) = 0.1f;
                out.at(y, x, 1) = 0.4f;
                out.at(y, x, 2) = 1.0f;
            }

    // patch heat inset, top-right quarter-size, black-to-red ramp
    const int g = grounding.patch_probs.dim(0);
    const int inset = std::max(g, h / 4);
    const int x0 = w - inset;
    for (int y = 0; y < inset; ++y)
        for (int x = 0; x < inset; ++x) {
            const int gy = std::min(g - 1, y * g / inset);
            const int gx = std::min(g - 1, x * g / inset);
            const float p = grounding.patch_probs.at(gy, gx);
            out.at(y, x0 + x, 0) = p;
            out.at(y, x0 + x, 1) = 0.08f * (1.0f - p);
            out.at(y, x0 + x, 2) = 0.08f * (1.0f - p);
        }
    return out;
}

}  // namespace risclip
