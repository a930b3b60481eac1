#include "risclip/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "risclip/errors.hpp"

namespace risclip {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::filesystem::path& path, const char* what) {
    throw ValidationError("png: " + std::string(what) + ": " + path.string());
}

}  // namespace

static std::vector<std::uint8_t> read_rgb8(const std::filesystem::path& path, int& h, int& w) {
    FilePtr f(std::fopen(path.string().c_str(), "rb"));
    if (!f) fail(path, "cannot open");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "decode error");
    }
    png_init_io(png, f.get());
    png_read_info(png, info);

    png_set_expand(png);          // palette/gray/low-depth -> 8-bit
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    h = static_cast<int>(png_get_image_height(png, info));
    w = static_cast<int>(png_get_image_width(png, info));
    if (png_get_channels(png, info) != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "unsupported channel layout");
    }
    std::vector<std::uint8_t> pixels(static_cast<size_t>(h) * w * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

static void write_rgb8(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                       int h, int w) {
    FilePtr f(std::fopen(path.string().c_str(), "wb"));
    if (!f) fail(path, "cannot open for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        fail(path, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "encode error");
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * w * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor<float> read_png_rgb(const std::filesystem::path& path) {
    int h = 0, w = 0;
    const std::vector<std::uint8_t> pixels = read_rgb8(path, h, w);
    Tensor<float> img({h, w, 3});
    for (std::int64_t i = 0; i < img.numel(); ++i)
        img[i] = static_cast<float>(pixels[static_cast<size_t>(i)]) / 255.0f;
    return img;
}

void write_png_rgb(const std::filesystem::path& path, const Tensor<float>& image) {
    if (image.rank() != 3 || image.dim(2) != 3)
        throw ValidationError("write_png_rgb: want (H,W,3) image");
    std::vector<std::uint8_t> pixels(static_cast<size_t>(image.numel()));
    for (std::int64_t i = 0; i < image.numel(); ++i) {
        const float v = std::min(1.0f, std::max(0.0f, image[i]));
        pixels[static_cast<size_t>(i)] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
    }
    write_rgb8(path, pixels, image.dim(0), image.dim(1));
}

Tensor<std::uint8_t> read_png_mask(const std::filesystem::path& path) {
    int h = 0, w = 0;
    const std::vector<std::uint8_t> pixels = read_rgb8(path, h, w);
    Tensor<std::uint8_t> mask({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            mask.at(y, x) = pixels[(static_cast<size_t>(y) * w + x) * 3] > 127 ? 1 : 0;
    return mask;
}

void write_png_mask(const std::filesystem::path& path, const Tensor<std::uint8_t>& mask) {
    if (mask.rank() != 2) throw ValidationError("write_png_mask: want (H,W) mask");
    std::vector<std::uint8_t> pixels(static_cast<size_t>(mask.numel()) * 3);
    for (std::int64_t i = 0; i < mask.numel(); ++i) {
        const std::uint8_t v = mask[i] ? 255 : 0;
        pixels[static_cast<size_t>(i) * 3] = v;
        pixels[static_cast<size_t>(i) * 3 + 1] = v;
        pixels[static_cast<size_t>(i) * 3 + 2] = v;
    }
    write_rgb8(path, pixels, mask.dim(0), mask.dim(1));
}

}  // namespace risclip
