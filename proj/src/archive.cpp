#include "tirgan/archive.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "tirgan/io.hpp"

namespace tirgan {

namespace {

constexpr char kMagic[8] = {'T', 'I', 'R', 'G', 'A', 'N', 'A', 'R'};

std::string content_hash(const nlohmann::json& header_without_hash,
                         const std::vector<std::uint8_t>& payload) {
  const std::string text = header_without_hash.dump();
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  return sha256_hex(bytes);
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw ArchiveError(path.string() + ": truncated file");
  }
  return v;
}

}  // namespace

std::string write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header = archive.header;
  if (!header.is_object()) header = nlohmann::json::object();
  header.erase("content_hash");
  nlohmann::json index = nlohmann::json::array();
  std::vector<std::uint8_t> payload;
  for (const auto& t : archive.tensors) {
    index.push_back({{"name", t.name},
                     {"shape", t.tensor.shape()},
                     {"offset", payload.size()},
                     {"count", t.tensor.numel()}});
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.tensor.vec().data());
    payload.insert(payload.end(), raw, raw + t.tensor.numel() * sizeof(double));
  }
  header["tensors"] = index;
  const std::string hash = content_hash(header, payload);
  header["content_hash"] = hash;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kArchiveVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw ArchiveError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
  return hash;
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw ArchiveError(path.string() + ": not a tensor archive (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kArchiveVersion) {
    throw ArchiveError(path.string() + ": version mismatch (file " + std::to_string(version) +
                       ", supported " + std::to_string(kArchiveVersion) + ")");
  }
  const auto header_len = get<std::uint64_t>(in, path);
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size) throw ArchiveError(path.string() + ": hash mismatch (corrupt header length)");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw ArchiveError(path.string() + ": truncated header");
  }
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw ArchiveError(path.string() + ": hash mismatch (header is corrupt)");
  }
  if (!header.is_object() || !header.contains("content_hash") || !header.contains("tensors")) {
    throw ArchiveError(path.string() + ": hash mismatch (header is corrupt)");
  }
  const std::string stored = header["content_hash"].get<std::string>();
  header.erase("content_hash");
  if (content_hash(header, payload) != stored) {
    throw ArchiveError(path.string() + ": hash mismatch, file is corrupt");
  }

  TensorArchive archive;
  for (const auto& entry : header["tensors"]) {
    Shape shape = entry["shape"].get<Shape>();
    const auto offset = entry["offset"].get<std::size_t>();
    const auto count = entry["count"].get<std::size_t>();
    if (count != shape_numel(shape) || offset + count * sizeof(double) > payload.size()) {
      throw ArchiveError(path.string() + ": tensor index out of range");
    }
    std::vector<double> data(count);
    std::memcpy(data.data(), payload.data() + offset, count * sizeof(double));
    archive.tensors.push_back({entry["name"].get<std::string>(), Tensor(shape, std::move(data))});
  }
  header.erase("tensors");
  header["content_hash"] = stored;
  archive.header = std::move(header);
  return archive;
}

}  // namespace tirgan
