#include "morphldm/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace morphldm {

void write_png(const std::filesystem::path& file, const torch::Tensor& image) {
    if (image.dim() != 2) throw std::invalid_argument("write_png expects [H, W]");
    auto px = (image.detach().to(torch::kDouble).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
    const auto h = static_cast<png_uint_32>(px.size(0));
    const auto w = static_cast<png_uint_32>(px.size(1));

    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(file.c_str(), "wb"), &std::fclose);
    if (!fp) throw std::runtime_error("cannot write " + file.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng failed writing " + file.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const uint8_t* data = px.data_ptr<uint8_t>();
    for (png_uint_32 r = 0; r < h; ++r) png_write_row(png, const_cast<png_bytep>(data + static_cast<size_t>(r) * w));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

torch::Tensor montage(const std::vector<torch::Tensor>& tiles, int64_t rows, int64_t cols, int64_t pad) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("montage needs at least one row and column");
    torch::Tensor first;
    for (const auto& t : tiles) {
        if (t.defined()) {
            first = t;
            break;
        }
    }
    if (!first.defined()) throw std::invalid_argument("montage has no tiles");
    auto slice2d = [](const torch::Tensor& t) {
        auto x = t.detach().to(torch::kDouble)[0];
        while (x.dim() > 2) x = x.select(0, x.size(0) / 2);
        return x;
    };
    const auto ref = slice2d(first);
    const int64_t h = ref.size(0), w = ref.size(1);
    auto canvas = torch::zeros({rows * (h + pad) + pad, cols * (w + pad) + pad}, torch::kDouble);
    for (int64_t i = 0; i < static_cast<int64_t>(tiles.size()) && i < rows * cols; ++i) {
        if (!tiles[static_cast<size_t>(i)].defined()) continue;
        const int64_t r = i / cols, c = i % cols;
        canvas.slice(0, pad + r * (h + pad), pad + r * (h + pad) + h)
            .slice(1, pad + c * (w + pad), pad + c * (w + pad) + w)
            .copy_(slice2d(tiles[static_cast<size_t>(i)]));
    }
    return canvas;
}

}  // namespace morphldm
