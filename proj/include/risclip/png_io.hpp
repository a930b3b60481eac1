#pragma once

#include <filesystem>

#include "risclip/tensor.hpp"

namespace risclip {

// 8-bit RGB PNGs; palette/gray/alpha inputs are expanded on read.
Tensor<float> read_png_rgb(const std::filesystem::path& path);       // (H,W,3) in [0,1]
void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& image);

Tensor<std::uint8_t> read_png_mask(const std::filesystem::path& path);  // (H,W) 0/1
void write_png_mask(const std::filesystem::path& path, const Tensor<std::uint8_t>& mask);

}  // namespace risclip
