#pragma once

#include "htrner/render.hpp"

#include <png.h>

#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace htrner {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes an 8-bit single-channel PNG. Line boxes are not stored.
inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.pixels.data(), img.width, nullptr))
    throw ImageIoError("cannot write PNG '" + path.string() + "': " + pi.message);
}

// Reads any PNG and converts it to 8-bit grayscale.
inline GrayImage read_png(const std::filesystem::path& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
    throw ImageIoError("cannot read PNG '" + path.string() + "': " + pi.message);
  pi.format = PNG_FORMAT_GRAY;
  GrayImage img;
  img.width = static_cast<int>(pi.width);
  img.height = static_cast<int>(pi.height);
  img.pixels.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = pi.message;
    png_image_free(&pi);
    throw ImageIoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  if (img.width <= 0 || img.height <= 0) throw ImageIoError("empty image '" + path.string() + "'");
  return img;
}

}  // namespace htrner
