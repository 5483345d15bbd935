#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace timbre {

/// Raised when an artifact file is missing, corrupt, of the wrong version, or
/// was produced from a different upstream artifact.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull);
/// 16 lowercase hex digits.
std::string hex64(std::uint64_t v);
std::string content_hash(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
std::string file_hash(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace timbre
