#pragma once

// Single-file container for named float arrays plus a JSON manifest.
//
// Layout: 8-byte magic "PETDUET\x01", u32 format version, u64 manifest
// byte length, the manifest (UTF-8 JSON), then every array's values as
// little-endian float32 in manifest order. The manifest is an object
// {"meta": <caller JSON>, "arrays": [{"name", "rows", "cols"}...]}.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace petduet::archive {

inline constexpr std::uint32_t kFormatVersion = 1;

struct NamedArray {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<float> values;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Archive {
  /// Caller metadata, serialized JSON text.
  std::string meta_json = "{}";
  std::vector<NamedArray> arrays;

  /// Throws ArtifactError when absent.
  const NamedArray& find(const std::string& name) const;
  bool contains(const std::string& name) const;
};

/// Throws ValidationError for a malformed array (size mismatch, duplicate
/// name) or meta that is not JSON; ArtifactError on I/O failure.
void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws ArtifactError on a bad magic, unknown version, or truncation.
Archive read_archive(const std::filesystem::path& path);

std::vector<std::uint8_t> encode(const Archive& archive);
Archive decode(const std::vector<std::uint8_t>& bytes);

}  // namespace petduet::archive
