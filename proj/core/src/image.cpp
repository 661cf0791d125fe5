#include "mdtk/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace mdtk {

namespace {

void write_png_rgb8(const std::string& path, const std::vector<unsigned char>& pixels,
                    int H, int W, int channels) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                              nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(H));
    for (int y = 0; y < H; ++y)
        rows[static_cast<std::size_t>(y)] =
            const_cast<png_bytep>(&pixels[static_cast<std::size_t>(y) * W * channels]);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

void write_png(const std::string& path, const Tensor& clip, int frame) {
    const Tensor* t = &clip;
    Tensor tmp;
    if (clip.ndim() == 4) {
        if (frame < 0 || frame >= clip.dim(0))
            throw std::invalid_argument("write_png: frame index out of range");
        int C = clip.dim(1), H = clip.dim(2), W = clip.dim(3);
        tmp = Tensor({C, H, W});
        std::copy_n(clip.data() + static_cast<std::size_t>(frame) * C * H * W,
                    static_cast<std::size_t>(C) * H * W, tmp.data());
        t = &tmp;
    }
    if (t->ndim() != 3 || (t->dim(0) != 1 && t->dim(0) != 3))
        throw std::invalid_argument("write_png: expected [C,H,W] with C=1 or 3");
    int C = t->dim(0), H = t->dim(1), W = t->dim(2);
    std::vector<unsigned char> px(static_cast<std::size_t>(H) * W * C);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double v = std::clamp(t->at(c, y, x), 0.0, 1.0);
                px[(static_cast<std::size_t>(y) * W + x) * C + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    write_png_rgb8(path, px, H, W, C);
}

void write_clip_frames(const std::string& dir, const Tensor& clip) {
    if (clip.ndim() != 4) throw std::invalid_argument("write_clip_frames: need [S,C,H,W]");
    std::filesystem::create_directories(dir);
    char name[32];
    for (int s = 0; s < clip.dim(0); ++s) {
        std::snprintf(name, sizeof(name), "frame_%04d.png", s);
        write_png(dir + "/" + name, clip, s);
    }
}

}  // namespace mdtk
