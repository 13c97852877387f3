#pragma once

// Static SVG charts: the training loss curve and the ablation bar chart.

#include <string>
#include <string_view>
#include <vector>

#include "petduet/training.hpp"

namespace petduet::tools {

/// Per-step total loss with a moving average; text steps are marked.
std::string loss_curve_svg(const training::RunLedger& ledger);

struct AblationBarRow {
  std::string variant;
  double visual_i = 0.0;
  double visual_g = 0.0;
  double text = 0.0;
};

/// Parses the CSV written by training::ablation_csv.
std::vector<AblationBarRow> parse_ablation_csv(std::string_view csv);

/// Grouped bars, one group per variant, one bar per protocol.
std::string ablation_svg(const std::vector<AblationBarRow>& rows);

}  // namespace petduet::tools
