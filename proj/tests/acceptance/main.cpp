// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// The training criteria cache their runs, so only the first invocation pays
// for the training.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "criteria.hpp"

namespace acc = petduet::acceptance;

int main(int argc, char** argv) {
  acc::Settings settings;
  const char* env_cache = std::getenv("PETDUET_ACCEPTANCE_CACHE");
  std::string cache = env_cache && *env_cache ? env_cache : PETDUET_ACCEPTANCE_DEFAULT_CACHE;
  std::string work = PETDUET_ACCEPTANCE_DEFAULT_WORK;
  std::string cli = PETDUET_CLI_PATH;
  std::vector<int> only;

  CLI::App app{"petduet acceptance suite"};
  app.add_option("--cache", cache, "Directory holding cached training runs (env PETDUET_ACCEPTANCE_CACHE)");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--cli", cli, "Path to the petduet tool");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);
  settings.cache_dir = cache;
  settings.work_dir = work;
  settings.cli = cli;
  spdlog::set_level(spdlog::level::warn);

  struct Criterion {
    int id;
    const char* name;
    std::function<acc::Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "intra-batch aggregation oracle", acc::intra_batch_oracle},
      {2, "cues bank invariants", acc::bank_invariants},
      {3, "deformable attention bilinear oracle", acc::deformable_bilinear_oracle},
      {4, "gradient checks", acc::gradient_checks},
      {5, "Hungarian exactness", acc::hungarian_exactness},
      {6, "AP engine fixtures", acc::ap_engine_fixtures},
      {7, "permutation and ordering invariants", acc::permutation_invariants},
      {8, "end-to-end trainability", [&] { return acc::end_to_end_trainability(settings); }},
      {9, "prompt-strategy ablation ordering", [&] { return acc::ablation_ordering(settings); }},
      {10, "pretraining benefit", [&] { return acc::pretraining_benefit(settings); }},
      {11, "pipeline determinism", [&] { return acc::pipeline_determinism(settings); }},
      {12, "schedule conformance", acc::schedule_conformance},
  };

  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    acc::Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !v.pass;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
