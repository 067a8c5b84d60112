#include "icrdn/image.hpp"

#include <png.h>

#include "icrdn/errors.hpp"

namespace icrdn {

void check_image(const Image& image, int channels, int size, const char* what) {
    require(image.defined(), std::string(what) + ": undefined image");
    require(image.dim() == 3 && image.size(0) == channels && image.size(1) == size && image.size(2) == size,
            std::string(what) + ": expected image of shape (" + std::to_string(channels) + ", " +
                std::to_string(size) + ", " + std::to_string(size) + "), got " + c10::str(image.sizes()));
}

auto quantize_u8(const Image& image) -> std::vector<std::uint8_t> {
    auto bytes = (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
    const auto* data = bytes.data_ptr<std::uint8_t>();
    return {data, data + bytes.numel()};
}

void write_png(const std::filesystem::path& path, const Image& image) {
    require(image.dim() == 3 && (image.size(0) == 1 || image.size(0) == 3), "write_png: expected (1|3, H, W) image");
    const auto channels = image.size(0);
    // PNG is interleaved: (H, W, C).
    const auto hwc = quantize_u8(image.permute({1, 2, 0}).contiguous());
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.size(2));
    png.height = static_cast<png_uint_32>(image.size(1));
    png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    if (png_image_write_to_file(&png, path.c_str(), 0, hwc.data(), 0, nullptr) == 0) {
        const std::string message = png.message;
        png_image_free(&png);
        throw IoError("cannot write PNG '" + path.string() + "': " + message);
    }
}

auto read_png(const std::filesystem::path& path, int channels) -> Image {
    require(channels == 1 || channels == 3, "read_png: channels must be 1 or 3");
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
        throw IoError("cannot read PNG '" + path.string() + "': " + png.message);
    }
    png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
    if (png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr) == 0) {
        const std::string message = png.message;
        png_image_free(&png);
        throw IoError("cannot decode PNG '" + path.string() + "': " + message);
    }
    const auto height = static_cast<std::int64_t>(png.height);
    const auto width = static_cast<std::int64_t>(png.width);
    auto hwc = torch::from_blob(buffer.data(), {height, width, channels}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).contiguous().to(torch::kFloat32) / 255.0;
}

auto hstack(const std::vector<Image>& images) -> Image {
    require(!images.empty(), "hstack: no images");
    std::vector<Image> parts;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (i > 0) {
            parts.push_back(torch::ones({images[i].size(0), images[i].size(1), 2}));
        }
        parts.push_back(images[i].detach().clamp(0.0, 1.0));
    }
    return torch::cat(parts, 2);
}

auto vstack(const std::vector<Image>& rows) -> Image {
    require(!rows.empty(), "vstack: no rows");
    std::vector<Image> parts;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (i > 0) {
            parts.push_back(torch::ones({rows[i].size(0), 2, rows[i].size(2)}));
        }
        parts.push_back(rows[i]);
    }
    return torch::cat(parts, 1);
}

}  // namespace icrdn
