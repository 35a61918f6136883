#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tirgan {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit raster, interleaved channels, row-major.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
};

struct PngInfo {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  bool eight_bit = true;
};

// Reads only the PNG header.
PngInfo read_png_info(const fs::path& path);
Image8 read_png(const fs::path& path);
void write_png(const fs::path& path, const Image8& image);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const fs::path& path);

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, std::string_view text);

// Deterministic 64-bit mixing used to fan one seed out to named consumers.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

}  // namespace tirgan
