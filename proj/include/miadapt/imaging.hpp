#pragma once

#include <filesystem>

#include "miadapt/datamodel.hpp"

// Pixel-level helpers shared by augmentation and data generation.
namespace miadapt::imaging {

Image read_png(const std::filesystem::path& path, const std::string& id);
void write_png(const Image& img, const std::filesystem::path& path);

/// Copies the integer rectangle [x0, x0+w) x [y0, y0+h); must lie inside img.
Image crop(const Image& img, int x0, int y0, int w, int h);

/// Writes src into dst with its top-left corner at (x0, y0).
void paste(Image& dst, const Image& src, int x0, int y0);

Image resize_bilinear(const Image& img, int new_width, int new_height);

/// Blurs an interleaved RGB buffer of doubles in place.
void gaussian_blur_inplace(std::vector<double>& rgb, int width, int height, double sigma);

/// Rounds and clips an interleaved RGB buffer of doubles into an Image.
Image from_doubles(const std::vector<double>& rgb, std::string id, int width, int height);

/// Separable Gaussian blur with clamp-to-edge borders. sigma <= 0 is a copy.
Image gaussian_blur(const Image& img, double sigma);

/// Luma grayscale replicated over the three channels.
Image to_grayscale(const Image& img);

}  // namespace miadapt::imaging
