#pragma once

// Acceptance criteria. Each check returns a verdict with a one-line detail.

#include <filesystem>
#include <string>

namespace petduet::acceptance {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Settings {
  /// Holds pretrained checkpoints and per-run metrics of the training criteria.
  std::filesystem::path cache_dir;
  /// The petduet command-line tool, for the end-to-end determinism check.
  std::filesystem::path cli;
  /// Scratch space for the determinism check.
  std::filesystem::path work_dir;
};

Verdict intra_batch_oracle();
Verdict bank_invariants();
Verdict deformable_bilinear_oracle();
Verdict gradient_checks();
Verdict hungarian_exactness();
Verdict ap_engine_fixtures();
Verdict permutation_invariants();

Verdict end_to_end_trainability(const Settings& s);
Verdict ablation_ordering(const Settings& s);
Verdict pretraining_benefit(const Settings& s);
Verdict pipeline_determinism(const Settings& s);
Verdict schedule_conformance();

}  // namespace petduet::acceptance
