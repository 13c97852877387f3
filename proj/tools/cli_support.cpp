#include "cli_support.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iterator>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "petduet/error.hpp"

namespace petduet::tools {

namespace fs = std::filesystem;
using nlohmann::json;

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".petduet.lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) {
      throw std::runtime_error("another petduet command holds " + path_.string() +
                               " (remove it if no command is running)");
    }
    throw std::runtime_error("cannot create " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void guard_output(const fs::path& path, bool force) {
  if (force || !fs::exists(path)) return;
  if (fs::is_directory(path)) {
    const bool empty = std::all_of(fs::directory_iterator(path), fs::directory_iterator{},
                                   [](const fs::directory_entry& e) { return e.path().filename() == ".petduet.lock"; });
    if (empty) return;
  }
  throw UsageError(path.string() + " already exists; pass --force to overwrite");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + tmp);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw ArtifactError("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

std::vector<data::Dataset> load_datasets(const std::vector<fs::path>& paths, bool verify) {
  std::vector<fs::path> dirs;
  for (const auto& p : paths) {
    if (!fs::is_directory(p)) throw UsageError("dataset path " + p.string() + " is not a directory");
    if (fs::exists(p / "manifest.json")) {
      dirs.push_back(p);
      continue;
    }
    std::vector<fs::path> children;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) children.push_back(e.path());
    }
    if (children.empty()) throw UsageError("no dataset found under " + p.string());
    std::sort(children.begin(), children.end());
    dirs.insert(dirs.end(), children.begin(), children.end());
  }
  std::vector<data::Dataset> out;
  for (const auto& d : dirs) {
    spdlog::debug("loading dataset {}", d.string());
    out.push_back(data::load_dataset(d, verify));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.dataset_id() < b.dataset_id(); });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].dataset_id() == out[i - 1].dataset_id()) {
      throw UsageError("dataset id " + std::to_string(out[i].dataset_id()) + " given twice");
    }
  }
  return out;
}

std::vector<data::Dataset> select_split(const std::vector<data::Dataset>& datasets, std::string_view split) {
  if (split == "all") return datasets;
  if (split != "train" && split != "val") throw UsageError("split must be train, val or all");
  std::vector<data::Dataset> out;
  for (const auto& d : datasets) out.push_back(d.subset(split == "train" ? data::Split::kTrain : data::Split::kVal));
  return out;
}

std::vector<data::SceneSpec> read_scene_specs(const fs::path& path) {
  const auto text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + " is not valid JSON: " + e.what());
  }
  std::vector<data::SceneSpec> specs;
  if (j.is_array()) {
    for (const auto& s : j) specs.push_back(data::parse_scene_spec(s.dump()));
  } else {
    specs.push_back(data::parse_scene_spec(text));
  }
  if (specs.empty()) throw ValidationError(path.string() + " holds no scene spec");
  return specs;
}

fs::path cache_root() {
  const char* env = std::getenv("PETDUET_CACHE");
  return env && *env ? fs::path(env) : fs::path();
}

namespace {

bool matches(const fs::path& dir, const data::SceneSpec& spec, int images, std::uint64_t seed) {
  if (!fs::exists(dir / "manifest.json")) return false;
  try {
    const auto m = json::parse(read_text(dir / "manifest.json"));
    if (m.at("seed").get<std::uint64_t>() != seed || m.at("n_images").get<int>() != images) return false;
    if (data::parse_scene_spec(m.at("spec").dump()) != spec) return false;
    for (const auto& [rel, sum] : m.at("files").items()) {
      if (!fs::exists(dir / rel) || data::sha256_file(dir / rel) != sum.get<std::string>()) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

std::vector<fs::path> materialize_datasets(const std::vector<data::SceneSpec>& specs, int images, std::uint64_t seed,
                                           const fs::path& root, bool force) {
  std::vector<fs::path> dirs;
  for (const auto& spec : specs) {
    spec.validate();
    const auto dir = root / spec.name;
    if (matches(dir, spec, images, seed)) {
      spdlog::info("reusing dataset {} ({} images, seed {})", dir.string(), images, seed);
    } else {
      guard_output(dir, force);
      if (fs::exists(dir)) fs::remove_all(dir);
      spdlog::info("generating dataset {} ({} images, seed {})", dir.string(), images, seed);
      data::generate_dataset(spec, images, seed, dir);
    }
    dirs.push_back(dir);
  }
  return dirs;
}

void write_run_manifest(const fs::path& dir, std::string_view command, std::string_view config_hash,
                        const std::vector<fs::path>& artifacts) {
  json files = json::object();
  for (const auto& a : artifacts) {
    const auto full = a.is_absolute() ? a : dir / a;
    if (!fs::exists(full)) throw ArtifactError("run artifact " + full.string() + " is missing");
    files[fs::relative(full, dir).generic_string()] = data::sha256_file(full);
  }
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &utc);
  const std::string id_source = std::string(command) + "|" + std::string(config_hash) + "|" + files.dump();
  const json manifest{{"run_id", data::sha256_hex(id_source).substr(0, 12)},
                      {"command", command},
                      {"config_hash", config_hash},
                      {"artifacts", files},
                      {"created_at", stamp}};
  write_text(dir / "run_manifest.json", manifest.dump(2) + "\n");
}

}  // namespace petduet::tools
