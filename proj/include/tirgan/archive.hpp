#pragma once

// Single-file tensor container: magic, format version, a JSON header and a
// little-endian float64 payload. The header carries a SHA-256 content hash
// over the header (minus the hash field) and the payload.

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "tirgan/networks.hpp"

namespace tirgan {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

struct TensorArchive {
  nlohmann::json header;  // user metadata; "tensors" and "content_hash" are reserved
  std::vector<nn::NamedTensor> tensors;
};

// Returns the content hash written into the header.
std::string write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

}  // namespace tirgan
