#include "petduet/archive.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"
#include "petduet/error.hpp"

namespace petduet::archive {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'P', 'E', 'T', 'D', 'U', 'E', 'T', '\x01'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::vector<std::uint8_t>& in, std::size_t& pos, int bytes) {
  if (pos + bytes > in.size()) throw ArtifactError("archive truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  pos += bytes;
  return v;
}

}  // namespace

const NamedArray& Archive::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw ArtifactError("archive has no array '" + name + "'");
}

bool Archive::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

std::vector<std::uint8_t> encode(const Archive& archive) {
  json index = json::array();
  std::set<std::string> names;
  for (const auto& a : archive.arrays) {
    if (a.rows < 0 || a.cols < 0 ||
        a.values.size() != static_cast<std::size_t>(a.rows) * static_cast<std::size_t>(a.cols)) {
      throw ValidationError("archive array '" + a.name + "' has inconsistent shape");
    }
    if (!names.insert(a.name).second) {
      throw ValidationError("duplicate archive array '" + a.name + "'");
    }
    index.push_back({{"name", a.name}, {"rows", a.rows}, {"cols", a.cols}});
  }
  json meta;
  try {
    meta = json::parse(archive.meta_json);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("archive metadata is not JSON: ") + e.what());
  }
  const std::string manifest = json{{"meta", meta}, {"arrays", index}}.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kFormatVersion);
  put_u64(out, manifest.size());
  out.insert(out.end(), manifest.begin(), manifest.end());
  for (const auto& a : archive.arrays) {
    for (float f : a.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  }
  return out;
}

Archive decode(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ArtifactError("not a petduet archive");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = static_cast<std::uint32_t>(get_le(bytes, pos, 4));
  if (version != kFormatVersion) {
    throw ArtifactError("unsupported archive version " + std::to_string(version));
  }
  const auto length = get_le(bytes, pos, 8);
  if (pos + length > bytes.size()) throw ArtifactError("archive truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(pos + length));
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("archive manifest unreadable: ") + e.what());
  }
  pos += length;
  Archive out;
  out.meta_json = manifest.at("meta").dump();
  for (const auto& entry : manifest.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.rows = entry.at("rows").get<int>();
    a.cols = entry.at("cols").get<int>();
    a.values.resize(static_cast<std::size_t>(a.rows) * a.cols);
    for (float& f : a.values) {
      const auto bits = static_cast<std::uint32_t>(get_le(bytes, pos, 4));
      std::memcpy(&f, &bits, sizeof f);
    }
    out.arrays.push_back(std::move(a));
  }
  if (pos != bytes.size()) throw ArtifactError("archive has trailing bytes");
  return out;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  const auto bytes = encode(archive);
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArtifactError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), {}};
  return decode(bytes);
}

}  // namespace petduet::archive
