#pragma once

// Plumbing shared by the subcommands: exit codes, output guarding, the
// advisory lock, dataset discovery and the run manifest.

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "petduet/data.hpp"

namespace petduet::tools {

enum ExitCode { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// A command-line mistake the user can fix; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

/// Holds <dir>/.petduet.lock for its lifetime. Throws when another command
/// already holds it.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Throws UsageError when path exists (a non-empty directory for dirs)
/// and force is off.
void guard_output(const std::filesystem::path& path, bool force);

std::string read_text(const std::filesystem::path& path);
/// Writes through a temporary file and a rename.
void write_text(const std::filesystem::path& path, std::string_view text);

/// Each path is a dataset directory or a directory of dataset directories.
std::vector<data::Dataset> load_datasets(const std::vector<std::filesystem::path>& paths, bool verify);

/// Restricts every dataset to a split ("train", "val" or "all").
std::vector<data::Dataset> select_split(const std::vector<data::Dataset>& datasets, std::string_view split);

/// Scene specs from a JSON file holding one spec or an array of specs.
std::vector<data::SceneSpec> read_scene_specs(const std::filesystem::path& path);

/// Directory for cached datasets: $PETDUET_CACHE when set, else empty.
std::filesystem::path cache_root();

/// Generates each spec into root/<name>, or reuses an existing copy whose
/// manifest matches (spec, seed, images) and whose checksums verify.
std::vector<std::filesystem::path> materialize_datasets(const std::vector<data::SceneSpec>& specs, int images,
                                                        std::uint64_t seed, const std::filesystem::path& root,
                                                        bool force);

/// run_manifest.json: run id, command, config hash, SHA-256 of every
/// artifact (paths relative to dir) and a UTC timestamp.
void write_run_manifest(const std::filesystem::path& dir, std::string_view command, std::string_view config_hash,
                        const std::vector<std::filesystem::path>& artifacts);

}  // namespace petduet::tools
