#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace icrdn {

/// A radiograph: float32 tensor of shape (C, H, W) with values in [0, 1].
/// Batches stack to (N, C, H, W).
using Image = torch::Tensor;

/// Throws ValidationError unless `image` is (channels, size, size).
void check_image(const Image& image, int channels, int size, const char* what);

/// 8-bit quantisation used for every on-disk image.
auto quantize_u8(const Image& image) -> std::vector<std::uint8_t>;

/// Writes a (1|3, H, W) image as 8-bit grayscale/RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image);

/// Reads a PNG as (channels, H, W) float in [0, 1]; colour files are reduced
/// to luminance when `channels` is 1.
auto read_png(const std::filesystem::path& path, int channels) -> Image;

/// Concatenates images horizontally with a 2-pixel separator.
auto hstack(const std::vector<Image>& images) -> Image;

/// Stacks rows (each produced by hstack) vertically with a separator.
auto vstack(const std::vector<Image>& rows) -> Image;

}  // namespace icrdn
