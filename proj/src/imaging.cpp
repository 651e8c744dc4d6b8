#include "miadapt/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

namespace miadapt::imaging {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + radius];
    }
    for (auto& v : k) v /= sum;
    return k;
}

}  // namespace

Image read_png(const std::filesystem::path& path, const std::string& id) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("image '" + id + "': cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("image '" + id + "': libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("image '" + id + "': corrupt PNG " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
        if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
        png_set_gray_to_rgb(png);
    }
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    Image img(id, static_cast<int>(png_get_image_width(png, info)),
              static_cast<int>(png_get_image_height(png, info)));
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y)
        rows[y] = img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const Image& img, const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("image '" + img.id + "': cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw DataError("image '" + img.id + "': libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("image '" + img.id + "': PNG encoding failed");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        auto* row = const_cast<png_bytep>(img.pixels.data() +
                                          static_cast<std::size_t>(y) * img.width * 3);
        png_write_row(png, row);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image crop(const Image& img, int x0, int y0, int w, int h) {
    Image out(img.id, w, h);
    for (int y = 0; y < h; ++y)
        std::copy_n(img.pixels.begin() + (static_cast<std::size_t>(y0 + y) * img.width + x0) * 3,
                    static_cast<std::size_t>(w) * 3,
                    out.pixels.begin() + static_cast<std::size_t>(y) * w * 3);
    return out;
}

void paste(Image& dst, const Image& src, int x0, int y0) {
    for (int y = 0; y < src.height; ++y)
        std::copy_n(src.pixels.begin() + static_cast<std::size_t>(y) * src.width * 3,
                    static_cast<std::size_t>(src.width) * 3,
                    dst.pixels.begin() + (static_cast<std::size_t>(y0 + y) * dst.width + x0) * 3);
}

Image resize_bilinear(const Image& img, int new_width, int new_height) {
    if (new_width == img.width && new_height == img.height) return img;
    Image out(img.id, new_width, new_height);
    const double sx = static_cast<double>(img.width) / new_width;
    const double sy = static_cast<double>(img.height) / new_height;
    for (int y = 0; y < new_height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double ty = fy - y0;
        for (int x = 0; x < new_width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double tx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - ty) * ((1 - tx) * img.at(x0, y0, c) + tx * img.at(x1, y0, c)) +
                                 ty * ((1 - tx) * img.at(x0, y1, c) + tx * img.at(x1, y1, c));
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

void gaussian_blur_inplace(std::vector<double>& rgb, int width, int height, double sigma) {
    if (sigma <= 0.0) return;
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(rgb.size());
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = std::clamp(x + i, 0, width - 1);
                    acc += k[i + radius] * rgb[(static_cast<std::size_t>(y) * width + xx) * 3 + c];
                }
                tmp[(static_cast<std::size_t>(y) * width + x) * 3 + c] = acc;
            }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = std::clamp(y + i, 0, height - 1);
                    acc += k[i + radius] * tmp[(static_cast<std::size_t>(yy) * width + x) * 3 + c];
                }
                rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] = acc;
            }
}

Image from_doubles(const std::vector<double>& rgb, std::string id, int width, int height) {
    Image out(std::move(id), width, height);
    for (std::size_t i = 0; i < rgb.size(); ++i)
        out.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(rgb[i]), 0L, 255L));
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    std::vector<double> buf(img.pixels.begin(), img.pixels.end());
    gaussian_blur_inplace(buf, img.width, img.height, sigma);
    return from_doubles(buf, img.id, img.width, img.height);
}

Image to_grayscale(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double l = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
            const auto v = static_cast<std::uint8_t>(std::clamp(std::lround(l), 0L, 255L));
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = v;
        }
    return out;
}

}  // namespace miadapt::imaging
