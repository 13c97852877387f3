#pragma once

// Optimizer, the visual and text training steps, the cyclical schedule
// with checkpoints, and the prompt-strategy ablation harness.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "petduet/data.hpp"
#include "petduet/detector.hpp"
#include "petduet/eval.hpp"
#include "petduet/prompts.hpp"

namespace petduet::training {

enum class Phase { kVisual, kText };

char phase_letter(Phase phase);

/// Prompt-strategy variants of the ablation.
enum class Variant { kAfvpg, kDmd, kIbp, kFull };

std::string_view variant_name(Variant variant);
/// Accepts "afvpg", "+dmd", "+ibp" and "full".
Variant parse_variant(std::string_view name);
prompts::StrategyFlags variant_flags(Variant variant);
inline constexpr Variant kAllVariants[] = {Variant::kAfvpg, Variant::kDmd, Variant::kIbp,
                                           Variant::kFull};

/// Parameter groups held fixed in each phase.
struct FreezeSpec {
  std::string name;
  std::set<nn::ParamGroup> visual_frozen;
  std::set<nn::ParamGroup> text_frozen;

  /// "paper": backbone and text modules fixed during visual steps, backbone
  /// and visual modules fixed during text steps. "none": everything trains.
  static FreezeSpec named(std::string_view name);
  bool frozen(Phase phase, nn::ParamGroup group) const;
};

struct TrainConfig {
  /// Visual steps then text steps, repeated.
  int visual_steps = 8;
  int text_steps = 1;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.1;
  int batch_size = 8;
  int epochs = 12;
  /// Zero-based epochs at whose start the rate is multiplied by lr_drop_factor.
  std::vector<int> lr_drop_epochs{8, 11};
  double lr_drop_factor = 0.1;
  std::string freeze_spec = "paper";
  std::uint64_t seed = 0;
  int bank_capacity = 16;
  int bank_sample = 40;
  Variant variant = Variant::kFull;
  bool flip = true;
  /// Training resolutions picked uniformly per image; empty keeps the native size.
  std::vector<int> scales;
  ModelConfig model;
  detector::LossConfig loss;

  /// Throws ValidationError for a non-positive rate, a zero cycle, bad scales.
  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(std::string_view text);
  /// SHA-256 of the canonical JSON.
  std::string hash() const;

  /// Small model on the synthetic corpus.
  static TrainConfig desk_preset();
  /// Full-size architecture and hyper-parameters.
  static TrainConfig paper_preset();
  static TrainConfig preset(std::string_view name);
};

/// Bank sample size for a dictionary: min(bank_sample, categories - 1).
int bank_sample_size(const TrainConfig& config, int dictionary_size);

Phase phase_at(int step, const TrainConfig& config);
double learning_rate(int epoch, const TrainConfig& config);

std::string model_config_json(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view text);

/// Decoupled weight decay Adam with per-tensor step counts.
class AdamW {
 public:
  AdamW(nn::ParamStore<float>& store, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Clips the global gradient norm of the updated tensors to max_norm
  /// (skipped when max_norm <= 0), then updates every tensor whose group is
  /// not frozen. Returns the norm before clipping.
  double step(double lr, double weight_decay, double max_norm, const std::set<nn::ParamGroup>& frozen);
  /// Drops every stored gradient so the next backward starts from nothing.
  void clear_grad();

  struct Slot {
    std::vector<float> m, v;
    std::int64_t t = 0;
  };
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<Slot>& slots() { return slots_; }

 private:
  nn::ParamStore<float>& store_;
  double beta1_, beta2_, eps_;
  std::vector<Slot> slots_;
};

struct LossReport {
  double total = 0.0;
  double alignment = 0.0;
  double l1 = 0.0;
  double giou = 0.0;

  std::map<std::string, double> breakdown() const;
};

/// One visual step: enhance every image, generate self prompts, build the
/// batch table, assemble per-image columns, average the route losses over
/// the batch, update the unfrozen groups, then push the prompts used into
/// the bank. Throws ValidationError for an empty batch.
LossReport visual_step(detector::Detector<float>& model, AdamW& optimizer,
                       prompts::VisualCuesBank& bank, std::span<const data::AnnotatedImage> batch,
                       const std::vector<int>& dictionary, const TrainConfig& config, double lr,
                       std::mt19937_64& rng);

/// One text step with the dataset's full dictionary as columns.
LossReport text_step(detector::Detector<float>& model, AdamW& optimizer,
                     std::span<const data::AnnotatedImage> batch, const std::vector<int>& dictionary,
                     const TrainConfig& config, double lr);

struct StepRecord {
  int step = 0;
  int epoch = 0;
  Phase phase = Phase::kVisual;
  double lr = 0.0;
  int dataset = 0;
  LossReport loss;
  int bank_entries = 0;
  int bank_max_queue = 0;
};

/// Append-only log of a run.
class RunLedger {
 public:
  /// Throws std::logic_error unless step indices strictly increase.
  void append(const StepRecord& record);
  void add_checkpoint(const std::string& name) { checkpoints_.push_back(name); }

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<std::string>& checkpoints() const { return checkpoints_; }
  std::string phase_pattern() const;

  std::string to_csv() const;
  std::string to_jsonl() const;
  static RunLedger from_jsonl(std::string_view text);

 private:
  std::vector<StepRecord> steps_;
  std::vector<std::string> checkpoints_;
};

/// Median of the first and last tenth of the total losses.
std::pair<double, double> loss_trend(const RunLedger& ledger);

/// Model, optimizer, bank, sampler and random state of one training run.
class TrainingRun {
 public:
  /// Datasets hold training images only.
  TrainingRun(const TrainConfig& config, std::vector<data::Dataset> datasets);

  const TrainConfig& config() const { return config_; }
  detector::Detector<float>& model() { return *model_; }
  const detector::Detector<float>& model() const { return *model_; }
  const prompts::VisualCuesBank& bank() const { return bank_; }
  const RunLedger& ledger() const { return ledger_; }
  const std::vector<data::Dataset>& datasets() const { return datasets_; }
  int step() const { return step_; }
  int steps_per_epoch() const { return sampler_.batches_per_epoch(); }
  int total_steps() const { return config_.epochs * steps_per_epoch(); }

  /// Runs one step of whichever phase the schedule prescribes.
  StepRecord advance();
  /// Runs until total_steps or max_steps more steps. With a directory, a
  /// checkpoint and bank snapshot are written at every epoch boundary.
  const RunLedger& run(const std::filesystem::path& checkpoint_dir = {}, int max_steps = -1);

  /// Writes the checkpoint archive and a sibling bank snapshot.
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores everything saved by save_checkpoint. Throws ArtifactError
  /// when the checkpoint was written under a different configuration.
  void resume(const std::filesystem::path& path);
  /// Copies parameters only; the architecture must match.
  void load_parameters(const std::filesystem::path& path);

 private:
  std::vector<data::AnnotatedImage> augment(const data::Batch& batch);

  TrainConfig config_;
  std::vector<data::Dataset> datasets_;
  std::unique_ptr<detector::Detector<float>> model_;
  AdamW optimizer_;
  prompts::VisualCuesBank bank_;
  data::BatchSampler sampler_;
  std::mt19937_64 rng_;
  int step_ = 0;
  RunLedger ledger_;
};

/// Parameters of a checkpoint loaded into a fresh network.
std::unique_ptr<detector::Detector<float>> load_model(const std::filesystem::path& checkpoint);

void save_bank(const prompts::VisualCuesBank& bank, const std::filesystem::path& path);
prompts::VisualCuesBank load_bank(const std::filesystem::path& path);

/// Text-only training (ratio 0:1, nothing frozen) from a fresh network.
/// Returns the run so the caller can checkpoint or evaluate it.
std::unique_ptr<TrainingRun> pretrain_text_route(const TrainConfig& config,
                                                 std::vector<data::Dataset> datasets,
                                                 const std::filesystem::path& checkpoint_dir = {});

struct AblationRow {
  Variant variant = Variant::kFull;
  double visual_i_ap = 0.0;
  double visual_g_ap = 0.0;
  double text_ap = 0.0;
};

struct EvalBundle {
  eval::EvalReport visual_i;
  eval::EvalReport visual_g;
  eval::EvalReport text;
};

/// All three protocols on val, with global prompts extracted from train.
EvalBundle evaluate_all(const detector::Detector<float>& model, std::span<const data::Dataset> train,
                        std::span<const data::Dataset> val, std::uint64_t seed);

/// Trains every variant from the same starting parameters (the pretrained
/// checkpoint when given) and evaluates each.
std::vector<AblationRow> run_ablation_grid(const TrainConfig& config,
                                           const std::vector<data::Dataset>& train,
                                           const std::vector<data::Dataset>& val,
                                           const std::optional<std::filesystem::path>& pretrained);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace petduet::training
