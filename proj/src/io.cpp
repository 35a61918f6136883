#include "tirgan/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

namespace tirgan {

namespace {

std::size_t channels_of(png_uint_32 format) {
  std::size_t c = (format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  if (format & PNG_FORMAT_FLAG_ALPHA) ++c;
  return c;
}

struct PngImage {
  png_image image{};
  PngImage() { image.version = PNG_IMAGE_VERSION; }
  ~PngImage() { png_image_free(&image); }
};

std::string hex(const unsigned char* data, unsigned int len) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xF]);
  }
  return out;
}

}  // namespace

PngInfo read_png_info(const fs::path& path) {
  PngImage png;
  if (!png_image_begin_read_from_file(&png.image, path.string().c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.image.message);
  }
  PngInfo info;
  info.width = png.image.width;
  info.height = png.image.height;
  info.channels = channels_of(png.image.format);
  info.eight_bit = !(png.image.format & PNG_FORMAT_FLAG_LINEAR);
  return info;
}

Image8 read_png(const fs::path& path) {
  PngImage png;
  if (!png_image_begin_read_from_file(&png.image, path.string().c_str())) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.image.message);
  }
  if (png.image.format & PNG_FORMAT_FLAG_LINEAR) {
    throw IoError("PNG " + path.string() + " is not 8-bit");
  }
  Image8 out;
  out.width = png.image.width;
  out.height = png.image.height;
  out.channels = channels_of(png.image.format);
  png.image.format = out.channels == 1   ? PNG_FORMAT_GRAY
                     : out.channels == 2 ? PNG_FORMAT_GA
                     : out.channels == 3 ? PNG_FORMAT_RGB
                                         : PNG_FORMAT_RGBA;
  out.pixels.resize(PNG_IMAGE_SIZE(png.image));
  if (!png_image_finish_read(&png.image, nullptr, out.pixels.data(), 0, nullptr)) {
    throw IoError("cannot decode PNG " + path.string() + ": " + png.image.message);
  }
  return out;
}

void write_png(const fs::path& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw IoError("write_png supports 1 or 3 channels, got " +
                  std::to_string(image.channels));
  }
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw IoError("write_png: pixel buffer size mismatch");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  PngImage png;
  png.image.width = static_cast<png_uint_32>(image.width);
  png.image.height = static_cast<png_uint_32>(image.height);
  png.image.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png.image, path.string().c_str(), 0,
                               image.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + png.image.message);
  }
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr)) {
    throw IoError("sha256 failed");
  }
  return hex(digest, len);
}

std::string sha256_hex(std::string_view text) {
  return sha256_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                              &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  return hex(digest, len);
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  // FNV-1a over the name, then mixed with the seed.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

}  // namespace tirgan
