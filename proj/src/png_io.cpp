#include "avatarkit/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <vector>

#include "avatarkit/errors.hpp"

namespace avk {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor<float> read_png(const std::filesystem::path& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw FormatError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw IoError("libpng alloc failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("corrupt PNG: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("unsupported channel count in " + path.string());
    }

    std::vector<png_byte> rowbuf(static_cast<size_t>(w) * channels);
    Tensor<float> out(Shape{channels, static_cast<int>(h), static_cast<int>(w)});
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                out.at(c, static_cast<int>(y), static_cast<int>(x)) =
                    static_cast<float>(rowbuf[x * channels + c]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& raster) {
    if (raster.rank() != 3 || (raster.dim(0) != 1 && raster.dim(0) != 3))
        throw ShapeError("write_png expects {1|3,H,W}, got " + shape_str(raster.shape()));
    int C = raster.dim(0), H = raster.dim(1), W = raster.dim(2);

    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw IoError("libpng alloc failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed: " + path.string());
    }
    png_init_io(png, f.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> rowbuf(static_cast<size_t>(W) * C);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                float v = raster.at(c, y, x);
                v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
                rowbuf[static_cast<size_t>(x) * C + c] =
                    static_cast<png_byte>(v * 255.0f + 0.5f);
            }
        png_write_row(png, rowbuf.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace avk
