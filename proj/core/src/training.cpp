#include "petduet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "petduet/archive.hpp"
#include "petduet/error.hpp"

namespace petduet::training {

using nlohmann::json;
using geometry::NormalizedBox;

char phase_letter(Phase phase) { return phase == Phase::kVisual ? 'V' : 'T'; }

std::string_view variant_name(Variant variant) {
  switch (variant) {
    case Variant::kAfvpg: return "afvpg";
    case Variant::kDmd: return "+dmd";
    case Variant::kIbp: return "+ibp";
    case Variant::kFull: return "full";
  }
  throw std::logic_error("unknown variant");
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  throw ValidationError("unknown variant '" + std::string(name) + "' (expected afvpg, +dmd, +ibp or full)");
}

prompts::StrategyFlags variant_flags(Variant variant) {
  switch (variant) {
    case Variant::kAfvpg: return {false, false};
    case Variant::kDmd: return {false, true};
    case Variant::kIbp: return {true, false};
    case Variant::kFull: return {true, true};
  }
  throw std::logic_error("unknown variant");
}

FreezeSpec FreezeSpec::named(std::string_view name) {
  using nn::ParamGroup;
  if (name == "paper") {
    return {"paper", {ParamGroup::kBackbone, ParamGroup::kText}, {ParamGroup::kBackbone, ParamGroup::kVisual}};
  }
  if (name == "none") return {"none", {}, {}};
  throw ValidationError("unknown freeze spec '" + std::string(name) + "' (expected paper or none)");
}

bool FreezeSpec::frozen(Phase phase, nn::ParamGroup group) const {
  const auto& set = phase == Phase::kVisual ? visual_frozen : text_frozen;
  return set.count(group) > 0;
}

// ---- configuration ----------------------------------------------------------

namespace {

json model_json(const ModelConfig& m) {
  return {{"dim", m.dim},
          {"heads", m.heads},
          {"points", m.points},
          {"levels", m.levels},
          {"enhancer_layers", m.enhancer_layers},
          {"decoder_layers", m.decoder_layers},
          {"ffn_dim", m.ffn_dim},
          {"num_queries", m.num_queries},
          {"max_prompt_boxes", m.max_prompt_boxes},
          {"text_vocab", m.text_vocab},
          {"backbone_width", m.backbone_width},
          {"residual_scale", m.residual_scale},
          {"offset_init", to_string(m.offset_init)},
          {"anchor_scale", m.anchor_scale},
          {"prior_prob", m.prior_prob}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.dim = j.value("dim", m.dim);
  m.heads = j.value("heads", m.heads);
  m.points = j.value("points", m.points);
  m.levels = j.value("levels", m.levels);
  m.enhancer_layers = j.value("enhancer_layers", m.enhancer_layers);
  m.decoder_layers = j.value("decoder_layers", m.decoder_layers);
  m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
  m.num_queries = j.value("num_queries", m.num_queries);
  m.max_prompt_boxes = j.value("max_prompt_boxes", m.max_prompt_boxes);
  m.text_vocab = j.value("text_vocab", m.text_vocab);
  m.backbone_width = j.value("backbone_width", m.backbone_width);
  m.residual_scale = j.value("residual_scale", m.residual_scale);
  m.offset_init = parse_offset_init(j.value("offset_init", to_string(m.offset_init)));
  m.anchor_scale = j.value("anchor_scale", m.anchor_scale);
  m.prior_prob = j.value("prior_prob", m.prior_prob);
  m.validate();
  return m;
}

json loss_json(const detector::LossConfig& l) {
  return {{"alignment_weight", l.alignment_weight},
          {"l1_weight", l.l1_weight},
          {"giou_weight", l.giou_weight},
          {"match_class", l.match_class},
          {"match_l1", l.match_l1},
          {"match_giou", l.match_giou},
          {"focal_alpha", l.focal_alpha},
          {"focal_gamma", l.focal_gamma},
          {"proposal_loss", l.proposal_loss},
          {"denoising", l.denoising}};
}

detector::LossConfig loss_from_json(const json& j) {
  detector::LossConfig l;
  l.alignment_weight = j.value("alignment_weight", l.alignment_weight);
  l.l1_weight = j.value("l1_weight", l.l1_weight);
  l.giou_weight = j.value("giou_weight", l.giou_weight);
  l.match_class = j.value("match_class", l.match_class);
  l.match_l1 = j.value("match_l1", l.match_l1);
  l.match_giou = j.value("match_giou", l.match_giou);
  l.focal_alpha = j.value("focal_alpha", l.focal_alpha);
  l.focal_gamma = j.value("focal_gamma", l.focal_gamma);
  l.proposal_loss = j.value("proposal_loss", l.proposal_loss);
  l.denoising = j.value("denoising", l.denoising);
  l.validate();
  return l;
}

json config_json(const TrainConfig& c) {
  return {{"visual_to_text_ratio", {c.visual_steps, c.text_steps}},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"lr_drop_epochs", c.lr_drop_epochs},
          {"lr_drop_factor", c.lr_drop_factor},
          {"freeze_spec", c.freeze_spec},
          {"seed", c.seed},
          {"bank_capacity", c.bank_capacity},
          {"bank_sample", c.bank_sample},
          {"variant", variant_name(c.variant)},
          {"flip", c.flip},
          {"scales", c.scales},
          {"model", model_json(c.model)},
          {"loss", loss_json(c.loss)}};
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("train config: " + what);
  };
  require(visual_steps >= 0 && text_steps >= 0 && visual_steps + text_steps > 0,
          "visual_to_text_ratio needs non-negative parts with a positive sum");
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0,1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(grad_clip >= 0.0, "grad_clip must be non-negative");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(epochs >= 1, "epochs must be at least 1");
  for (int e : lr_drop_epochs) require(e >= 0, "lr_drop_epochs must be non-negative");
  require(lr_drop_factor > 0.0 && lr_drop_factor <= 1.0, "lr_drop_factor must be in (0,1]");
  FreezeSpec::named(freeze_spec);
  require(bank_capacity >= 1, "bank_capacity must be at least 1");
  require(bank_sample >= 0, "bank_sample must be non-negative");
  for (int s : scales) require(s >= 32, "training scales must be at least 32 pixels");
  model.validate();
  loss.validate();
}

std::string TrainConfig::to_json() const { return config_json(*this).dump(); }

TrainConfig TrainConfig::from_json(std::string_view text) {
  TrainConfig c;
  try {
    const auto j = json::parse(text);
    if (j.contains("visual_to_text_ratio")) {
      const auto& r = j.at("visual_to_text_ratio");
      if (!r.is_array() || r.size() != 2) throw ValidationError("visual_to_text_ratio must be [V, T]");
      c.visual_steps = r[0].get<int>();
      c.text_steps = r[1].get<int>();
    }
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr_drop_epochs = j.value("lr_drop_epochs", c.lr_drop_epochs);
    c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
    c.freeze_spec = j.value("freeze_spec", c.freeze_spec);
    c.seed = j.value("seed", c.seed);
    c.bank_capacity = j.value("bank_capacity", c.bank_capacity);
    c.bank_sample = j.value("bank_sample", c.bank_sample);
    c.variant = parse_variant(j.value("variant", std::string(variant_name(c.variant))));
    c.flip = j.value("flip", c.flip);
    c.scales = j.value("scales", c.scales);
    if (j.contains("model")) c.model = model_from_json(j.at("model"));
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config is not valid JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::hash() const { return data::sha256_hex(to_json()); }

TrainConfig TrainConfig::desk_preset() {
  TrainConfig c;
  c.lr = 2e-4;
  return c;
}

TrainConfig TrainConfig::paper_preset() {
  TrainConfig c;
  c.batch_size = 32;
  c.model.dim = 256;
  c.model.heads = 8;
  c.model.points = 4;
  c.model.enhancer_layers = 6;
  c.model.decoder_layers = 6;
  c.model.ffn_dim = 2048;
  c.model.num_queries = 900;
  c.model.backbone_width = 64;
  c.model.text_vocab = 1024;
  return c;
}

TrainConfig TrainConfig::preset(std::string_view name) {
  if (name == "desk" || name == "desk-scale") return desk_preset();
  if (name == "paper" || name == "paper-scale") return paper_preset();
  throw ValidationError("unknown preset '" + std::string(name) + "' (expected desk-scale or paper-scale)");
}

int bank_sample_size(const TrainConfig& config, int dictionary_size) {
  return std::max(0, std::min(config.bank_sample, dictionary_size - 1));
}

Phase phase_at(int step, const TrainConfig& config) {
  const int cycle = config.visual_steps + config.text_steps;
  return step % cycle < config.visual_steps ? Phase::kVisual : Phase::kText;
}

double learning_rate(int epoch, const TrainConfig& config) {
  double lr = config.lr;
  for (int e : config.lr_drop_epochs) {
    if (epoch >= e) lr *= config.lr_drop_factor;
  }
  return lr;
}

std::string model_config_json(const ModelConfig& config) { return model_json(config).dump(); }

ModelConfig parse_model_config(std::string_view text) {
  try {
    return model_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config is not valid JSON: ") + e.what());
  }
}

// ---- optimizer --------------------------------------------------------------

AdamW::AdamW(nn::ParamStore<float>& store, double beta1, double beta2, double eps)
    : store_(store), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& e : store_.entries()) {
    Slot s;
    s.m.assign(e.tensor.size(), 0.0f);
    s.v.assign(e.tensor.size(), 0.0f);
    slots_.push_back(std::move(s));
  }
}

void AdamW::clear_grad() {
  for (const auto& e : store_.entries()) e.tensor.node()->grad.clear();
}

double AdamW::step(double lr, double weight_decay, double max_norm,
                   const std::set<nn::ParamGroup>& frozen) {
  const auto& entries = store_.entries();
  std::vector<std::size_t> active;
  double sq = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (frozen.count(entries[i].group) || entries[i].tensor.grad().empty()) continue;
    active.push_back(i);
    for (float g : entries[i].tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  const double coef = max_norm > 0.0 && norm > max_norm ? max_norm / (norm + 1e-6) : 1.0;
  for (std::size_t i : active) {
    auto tensor = entries[i].tensor;
    auto values = tensor.mutable_values();
    const auto grad = tensor.grad();
    Slot& s = slots_[i];
    ++s.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = grad[k] * coef;
      const double m = beta1_ * s.m[k] + (1.0 - beta1_) * g;
      const double v = beta2_ * s.v[k] + (1.0 - beta2_) * g * g;
      s.m[k] = static_cast<float>(m);
      s.v[k] = static_cast<float>(v);
      double p = values[k];
      p -= lr * weight_decay * p;
      p -= lr * (m / c1) / (std::sqrt(v / c2) + eps_);
      values[k] = static_cast<float>(p);
    }
  }
  clear_grad();
  return norm;
}

std::map<std::string, double> LossReport::breakdown() const {
  return {{"alignment", alignment}, {"l1", l1}, {"giou", giou}};
}

// ---- steps ------------------------------------------------------------------

namespace {

int check_single_dataset(std::span<const data::AnnotatedImage> batch) {
  if (batch.empty()) throw ValidationError("training step needs a non-empty batch");
  const int ds = batch.front().dataset_id;
  for (const auto& s : batch) {
    if (s.dataset_id != ds) throw ValidationError("training batch mixes datasets");
  }
  return ds;
}

nn::MultiScaleFeatures<float> run_backbone(const detector::Detector<float>& model, const Image& image,
                                           bool frozen) {
  if (!frozen) return model.backbone(image);
  ag::NoGradGuard guard;
  return model.backbone(image);
}

std::set<nn::ParamGroup> frozen_groups(const FreezeSpec& spec, Phase phase) {
  return phase == Phase::kVisual ? spec.visual_frozen : spec.text_frozen;
}

void accumulate(LossReport& report, const detector::LossBreakdown<float>& l) {
  report.total += l.total.item();
  report.alignment += l.alignment;
  report.l1 += l.l1;
  report.giou += l.giou;
}

void finish(LossReport& report, ag::Tensor<float>& total, int count) {
  const double inv = 1.0 / count;
  report.total *= inv;
  report.alignment *= inv;
  report.l1 *= inv;
  report.giou *= inv;
  total = ag::scale(total, static_cast<float>(inv));
}

}  // namespace

LossReport visual_step(detector::Detector<float>& model, AdamW& optimizer,
                       prompts::VisualCuesBank& bank, std::span<const data::AnnotatedImage> batch,
                       const std::vector<int>& dictionary, const TrainConfig& config, double lr,
                       std::mt19937_64& rng) {
  const int ds = check_single_dataset(batch);
  const auto freeze = FreezeSpec::named(config.freeze_spec);
  const bool backbone_frozen = freeze.frozen(Phase::kVisual, nn::ParamGroup::kBackbone);
  const int n = static_cast<int>(batch.size());
  optimizer.clear_grad();

  std::vector<nn::MultiScaleFeatures<float>> enhanced;
  enhanced.reserve(batch.size());
  for (const auto& s : batch) enhanced.push_back(model.enhance_visual(run_backbone(model, s.image, backbone_frozen)));

  const int max_boxes = model.generator().max_boxes();
  std::vector<std::vector<afvpg::VisualPromptEmbedding<float>>> self(batch.size());
  prompts::BatchPromptTable<float> table(n, ds);
  for (int i = 0; i < n; ++i) {
    std::map<int, std::vector<NormalizedBox>> boxes;
    const auto nb = batch[i].normalized_boxes();
    const auto labels = batch[i].labels();
    for (std::size_t k = 0; k < nb.size(); ++k) boxes[labels[k]].push_back(nb[k]);
    for (auto& [cat, list] : boxes) list = afvpg::cap_prompt_boxes(list, max_boxes, rng);
    self[i] = model.generator().generate_prompts_for_image(boxes, enhanced[i], ds);
    for (const auto& p : self[i]) table.insert(i, p);
  }

  const int d = bank_sample_size(config, static_cast<int>(dictionary.size()));
  const auto flags = variant_flags(config.variant);
  LossReport report;
  ag::Tensor<float> total;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    const auto columns = prompts::assemble_prompt_columns(self[i], table, bank, i, d, rng, flags);
    if (columns.size() == 0) continue;
    const auto out = model.visual_route_forward(enhanced[i], columns);
    const auto gt = detector::make_targets(batch[i].normalized_boxes(), batch[i].labels(),
                                           out.final_layer().column_categories);
    const auto loss = detector::route_loss(out, gt, config.loss);
    accumulate(report, loss);
    total = total.defined() ? ag::add(total, loss.total) : loss.total;
    ++used;
  }
  if (used > 0) {
    finish(report, total, used);
    total.backward();
    optimizer.step(lr, config.weight_decay, config.grad_clip, frozen_groups(freeze, Phase::kVisual));
  }

  for (const auto& prompts_of_image : self) {
    for (const auto& p : prompts_of_image) bank.push(p);
  }
  if (flags.intra_batch) {
    for (int cat : table.categories()) {
      const auto holders = table.samples_with(cat);
      if (holders.size() < 2) continue;
      std::vector<float> mean(static_cast<std::size_t>(model.config().dim), 0.0f);
      for (int h : holders) {
        const auto v = table.find(cat, h)->vector().values();
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += v[k];
      }
      for (float& x : mean) x /= static_cast<float>(holders.size());
      bank.push(ds, cat, mean);
    }
  }
  return report;
}

LossReport text_step(detector::Detector<float>& model, AdamW& optimizer,
                     std::span<const data::AnnotatedImage> batch, const std::vector<int>& dictionary,
                     const TrainConfig& config, double lr) {
  check_single_dataset(batch);
  const auto freeze = FreezeSpec::named(config.freeze_spec);
  const bool backbone_frozen = freeze.frozen(Phase::kText, nn::ParamGroup::kBackbone);
  optimizer.clear_grad();

  LossReport report;
  ag::Tensor<float> total;
  for (const auto& s : batch) {
    const auto out = model.text_route_forward(run_backbone(model, s.image, backbone_frozen), dictionary);
    const auto gt = detector::make_targets(s.normalized_boxes(), s.labels(),
                                           out.final_layer().column_categories);
    const auto loss = detector::route_loss(out, gt, config.loss);
    accumulate(report, loss);
    total = total.defined() ? ag::add(total, loss.total) : loss.total;
  }
  finish(report, total, static_cast<int>(batch.size()));
  total.backward();
  optimizer.step(lr, config.weight_decay, config.grad_clip, frozen_groups(freeze, Phase::kText));
  return report;
}

// ---- ledger -----------------------------------------------------------------

void RunLedger::append(const StepRecord& record) {
  if (!steps_.empty() && record.step <= steps_.back().step) {
    throw std::logic_error("run ledger steps must strictly increase");
  }
  steps_.push_back(record);
}

std::string RunLedger::phase_pattern() const {
  std::string out;
  out.reserve(steps_.size());
  for (const auto& s : steps_) out.push_back(phase_letter(s.phase));
  return out;
}

std::string RunLedger::to_csv() const {
  std::string out = "step,epoch,phase,lr,dataset,total,alignment,l1,giou,bank_entries,bank_max_queue\n";
  char line[512];
  for (const auto& s : steps_) {
    std::snprintf(line, sizeof line, "%d,%d,%c,%.9g,%d,%.9g,%.9g,%.9g,%.9g,%d,%d\n", s.step, s.epoch,
                  phase_letter(s.phase), s.lr, s.dataset, s.loss.total, s.loss.alignment, s.loss.l1,
                  s.loss.giou, s.bank_entries, s.bank_max_queue);
    out += line;
  }
  return out;
}

std::string RunLedger::to_jsonl() const {
  std::string out;
  for (const auto& s : steps_) {
    const json j{{"step", s.step},
                 {"epoch", s.epoch},
                 {"phase", std::string(1, phase_letter(s.phase))},
                 {"lr", s.lr},
                 {"dataset", s.dataset},
                 {"total", s.loss.total},
                 {"alignment", s.loss.alignment},
                 {"l1", s.loss.l1},
                 {"giou", s.loss.giou},
                 {"bank_entries", s.bank_entries},
                 {"bank_max_queue", s.bank_max_queue}};
    out += j.dump() + "\n";
  }
  for (const auto& c : checkpoints_) out += json{{"checkpoint", c}}.dump() + "\n";
  return out;
}

RunLedger RunLedger::from_jsonl(std::string_view text) {
  RunLedger ledger;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      if (j.contains("checkpoint")) {
        ledger.add_checkpoint(j.at("checkpoint").get<std::string>());
        continue;
      }
      StepRecord r;
      r.step = j.at("step").get<int>();
      r.epoch = j.at("epoch").get<int>();
      const auto phase = j.at("phase").get<std::string>();
      if (phase != "V" && phase != "T") throw ValidationError("unknown phase '" + phase + "'");
      r.phase = phase == "V" ? Phase::kVisual : Phase::kText;
      r.lr = j.at("lr").get<double>();
      r.dataset = j.at("dataset").get<int>();
      r.loss.total = j.at("total").get<double>();
      r.loss.alignment = j.at("alignment").get<double>();
      r.loss.l1 = j.at("l1").get<double>();
      r.loss.giou = j.at("giou").get<double>();
      r.bank_entries = j.at("bank_entries").get<int>();
      r.bank_max_queue = j.at("bank_max_queue").get<int>();
      ledger.append(r);
    } catch (const json::exception& e) {
      throw ValidationError("ledger line " + std::to_string(number) + ": " + e.what());
    } catch (const std::logic_error& e) {
      throw ValidationError("ledger line " + std::to_string(number) + ": " + e.what());
    }
  }
  return ledger;
}

std::pair<double, double> loss_trend(const RunLedger& ledger) {
  const auto& steps = ledger.steps();
  if (steps.empty()) throw ValidationError("loss trend of an empty ledger");
  const std::size_t n = std::max<std::size_t>(1, steps.size() / 10);
  auto median = [&](std::size_t begin) {
    std::vector<double> v;
    for (std::size_t i = begin; i < begin + n; ++i) v.push_back(steps[i].loss.total);
    std::sort(v.begin(), v.end());
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  return {median(0), median(steps.size() - n)};
}

// ---- checkpoints and bank snapshots -----------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "petduet-checkpoint";
constexpr const char* kBankFormat = "petduet-bank";

void copy_parameters(nn::ParamStore<float>& store, const archive::Archive& ar) {
  for (const auto& e : store.entries()) {
    const auto& a = ar.find("param/" + e.name);
    if (a.rows != e.tensor.rows() || a.cols != e.tensor.cols()) {
      throw ArtifactError("parameter '" + e.name + "' has shape " + std::to_string(a.rows) + "x" +
                          std::to_string(a.cols) + " in the checkpoint");
    }
    auto t = e.tensor;
    std::copy(a.values.begin(), a.values.end(), t.mutable_values().begin());
  }
}

json checkpoint_meta(const archive::Archive& ar) {
  const auto meta = json::parse(ar.meta_json);
  if (meta.value("format", std::string()) != kCheckpointFormat) {
    throw ArtifactError("not a training checkpoint");
  }
  return meta;
}

std::filesystem::path bank_path_for(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".bank");
  return p;
}

int max_queue(const prompts::VisualCuesBank& bank) {
  std::size_t m = 0;
  for (const auto& [ds, cats] : bank.queues()) {
    for (const auto& [cat, q] : cats) m = std::max(m, q.size());
  }
  return static_cast<int>(m);
}

}  // namespace

void save_bank(const prompts::VisualCuesBank& bank, const std::filesystem::path& path) {
  archive::Archive ar;
  json queues = json::array();
  for (const auto& [ds, cats] : bank.queues()) {
    for (const auto& [cat, q] : cats) {
      archive::NamedArray a;
      a.name = "bank/" + std::to_string(ds) + "/" + std::to_string(cat);
      a.rows = static_cast<int>(q.size());
      a.cols = q.empty() ? 0 : static_cast<int>(q.front().size());
      for (const auto& v : q) a.values.insert(a.values.end(), v.begin(), v.end());
      ar.arrays.push_back(std::move(a));
      queues.push_back({{"dataset", ds}, {"category", cat}});
    }
  }
  ar.meta_json = json{{"format", kBankFormat}, {"capacity", bank.capacity()}, {"queues", queues}}.dump();
  archive::write_archive(path, ar);
}

prompts::VisualCuesBank load_bank(const std::filesystem::path& path) {
  const auto ar = archive::read_archive(path);
  const auto meta = json::parse(ar.meta_json);
  if (meta.value("format", std::string()) != kBankFormat) throw ArtifactError("not a bank snapshot");
  prompts::VisualCuesBank bank(meta.at("capacity").get<int>());
  for (const auto& q : meta.at("queues")) {
    const int ds = q.at("dataset").get<int>();
    const int cat = q.at("category").get<int>();
    const auto& a = ar.find("bank/" + std::to_string(ds) + "/" + std::to_string(cat));
    for (int r = 0; r < a.rows; ++r) {
      bank.push(ds, cat, std::span<const float>(a.values.data() + static_cast<std::size_t>(r) * a.cols, a.cols));
    }
  }
  return bank;
}

// ---- training run -----------------------------------------------------------

namespace {

std::vector<int> dataset_sizes(const std::vector<data::Dataset>& datasets) {
  if (datasets.empty()) throw ValidationError("training needs at least one dataset");
  std::vector<int> sizes;
  for (const auto& d : datasets) {
    if (d.images.empty()) throw ValidationError("training dataset '" + d.spec.name + "' is empty");
    sizes.push_back(static_cast<int>(d.images.size()));
  }
  return sizes;
}

}  // namespace

TrainingRun::TrainingRun(const TrainConfig& config, std::vector<data::Dataset> datasets)
    : config_((config.validate(), config)),
      datasets_(std::move(datasets)),
      model_(std::make_unique<detector::Detector<float>>(config_.model, config_.seed)),
      optimizer_(model_->params(), config_.beta1, config_.beta2, config_.adam_eps),
      bank_(config_.bank_capacity),
      sampler_(dataset_sizes(datasets_), config_.batch_size, config_.seed * 0x9E3779B97F4A7C15ULL + 1),
      rng_(config_.seed ^ 0xD1B54A32D192ED03ULL) {
  for (const auto& d : datasets_) {
    for (int id : d.spec.category_ids()) {
      if (id >= config_.model.text_vocab) {
        throw ValidationError("category id " + std::to_string(id) + " exceeds the text vocabulary");
      }
    }
  }
}

std::vector<data::AnnotatedImage> TrainingRun::augment(const data::Batch& batch) {
  const auto& images = datasets_[batch.dataset].images;
  std::vector<data::AnnotatedImage> out;
  out.reserve(batch.indices.size());
  for (int idx : batch.indices) {
    auto sample = images[idx];
    if (config_.flip && std::bernoulli_distribution(0.5)(rng_)) sample = data::flip_horizontal(sample);
    if (!config_.scales.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, config_.scales.size() - 1);
      const int size = config_.scales[pick(rng_)];
      if (size != sample.image.height || size != sample.image.width) sample = data::resize(sample, size);
    }
    out.push_back(std::move(sample));
  }
  return out;
}

StepRecord TrainingRun::advance() {
  StepRecord r;
  r.step = step_;
  r.epoch = step_ / steps_per_epoch();
  r.phase = phase_at(step_, config_);
  r.lr = learning_rate(r.epoch, config_);
  const auto batch = sampler_.next();
  r.dataset = datasets_[batch.dataset].dataset_id();
  const auto images = augment(batch);
  const auto dictionary = datasets_[batch.dataset].spec.category_ids();
  r.loss = r.phase == Phase::kVisual
               ? visual_step(*model_, optimizer_, bank_, images, dictionary, config_, r.lr, rng_)
               : text_step(*model_, optimizer_, images, dictionary, config_, r.lr);
  r.bank_entries = static_cast<int>(bank_.size());
  r.bank_max_queue = max_queue(bank_);
  ledger_.append(r);
  ++step_;
  return r;
}

const RunLedger& TrainingRun::run(const std::filesystem::path& checkpoint_dir, int max_steps) {
  if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
  const int spe = steps_per_epoch();
  double epoch_loss = 0.0;
  int epoch_count = 0;
  for (int done = 0; step_ < total_steps() && (max_steps < 0 || done < max_steps); ++done) {
    const auto r = advance();
    epoch_loss += r.loss.total;
    ++epoch_count;
    if (step_ % spe == 0) {
      spdlog::info("epoch {}/{} finished at step {}: mean loss {:.4f}, bank {} entries", step_ / spe,
                   config_.epochs, step_, epoch_loss / epoch_count, bank_.size());
      epoch_loss = 0.0;
      epoch_count = 0;
      if (!checkpoint_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch-%03d.ckpt", step_ / spe);
        ledger_.add_checkpoint(name);
        save_checkpoint(checkpoint_dir / name);
      }
    }
  }
  return ledger_;
}

void TrainingRun::save_checkpoint(const std::filesystem::path& path) const {
  const auto bank_file = bank_path_for(path);
  save_bank(bank_, bank_file);

  archive::Archive ar;
  json adam_t = json::array();
  const auto& entries = model_->params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const auto v = e.tensor.values();
    ar.arrays.push_back({"param/" + e.name, e.tensor.rows(), e.tensor.cols(), {v.begin(), v.end()}});
    const auto& slot = optimizer_.slots()[i];
    ar.arrays.push_back({"adam.m/" + e.name, e.tensor.rows(), e.tensor.cols(), slot.m});
    ar.arrays.push_back({"adam.v/" + e.name, e.tensor.rows(), e.tensor.cols(), slot.v});
    adam_t.push_back(slot.t);
  }
  std::ostringstream rng;
  rng << rng_;
  const json meta{{"format", kCheckpointFormat},
                  {"config_hash", config_.hash()},
                  {"config", json::parse(config_.to_json())},
                  {"step", step_},
                  {"rng", rng.str()},
                  {"sampler", sampler_.save_state()},
                  {"ledger", ledger_.to_jsonl()},
                  {"adam_t", adam_t},
                  {"bank_snapshot",
                   {{"file", bank_file.filename().string()}, {"sha256", data::sha256_file(bank_file)}}}};
  ar.meta_json = meta.dump();
  archive::write_archive(path, ar);
}

void TrainingRun::resume(const std::filesystem::path& path) {
  const auto ar = archive::read_archive(path);
  const auto meta = checkpoint_meta(ar);
  if (meta.at("config_hash").get<std::string>() != config_.hash()) {
    throw ArtifactError("refusing to resume " + path.string() +
                        ": it was written under a different training configuration");
  }
  const auto bank_file = path.parent_path() / meta.at("bank_snapshot").at("file").get<std::string>();
  if (data::sha256_file(bank_file) != meta.at("bank_snapshot").at("sha256").get<std::string>()) {
    throw ArtifactError("bank snapshot " + bank_file.string() + " does not match its checkpoint");
  }
  copy_parameters(model_->params(), ar);
  const auto& entries = model_->params().entries();
  const auto& adam_t = meta.at("adam_t");
  if (adam_t.size() != entries.size()) throw ArtifactError("checkpoint optimizer state is incomplete");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& slot = optimizer_.slots()[i];
    slot.m = ar.find("adam.m/" + entries[i].name).values;
    slot.v = ar.find("adam.v/" + entries[i].name).values;
    slot.t = adam_t[i].get<std::int64_t>();
  }
  std::istringstream rng(meta.at("rng").get<std::string>());
  rng >> rng_;
  if (!rng) throw ArtifactError("checkpoint random state is unreadable");
  sampler_.load_state(meta.at("sampler").get<std::string>());
  step_ = meta.at("step").get<int>();
  ledger_ = RunLedger::from_jsonl(meta.at("ledger").get<std::string>());
  bank_ = load_bank(bank_file);
  optimizer_.clear_grad();
}

void TrainingRun::load_parameters(const std::filesystem::path& path) {
  const auto ar = archive::read_archive(path);
  const auto meta = checkpoint_meta(ar);
  const auto model = model_from_json(meta.at("config").at("model"));
  if (!(model == config_.model)) {
    throw ArtifactError("checkpoint " + path.string() + " holds a different architecture");
  }
  copy_parameters(model_->params(), ar);
}

std::unique_ptr<detector::Detector<float>> load_model(const std::filesystem::path& checkpoint) {
  const auto ar = archive::read_archive(checkpoint);
  const auto meta = checkpoint_meta(ar);
  auto model = std::make_unique<detector::Detector<float>>(model_from_json(meta.at("config").at("model")), 0);
  copy_parameters(model->params(), ar);
  return model;
}

std::unique_ptr<TrainingRun> pretrain_text_route(const TrainConfig& config,
                                                 std::vector<data::Dataset> datasets,
                                                 const std::filesystem::path& checkpoint_dir) {
  TrainConfig c = config;
  c.visual_steps = 0;
  c.text_steps = 1;
  c.freeze_spec = "none";
  auto run = std::make_unique<TrainingRun>(c, std::move(datasets));
  run->run(checkpoint_dir);
  return run;
}

// ---- evaluation and ablation ------------------------------------------------

EvalBundle evaluate_all(const detector::Detector<float>& model, std::span<const data::Dataset> train,
                        std::span<const data::Dataset> val, std::uint64_t seed) {
  const eval::DetectorModel m(model);
  eval::ProtocolConfig pc;
  pc.seed = seed;
  pc.max_prompt_boxes = model.config().max_prompt_boxes;
  EvalBundle out;
  pc.protocol = eval::Protocol::kVisualI;
  out.visual_i = eval::eval_visual_i(m, val, pc);
  pc.protocol = eval::Protocol::kVisualG;
  const auto prompts = eval::extract_global_prompts(m, train, pc);
  out.visual_g = eval::eval_visual_g(m, val, prompts, pc);
  pc.protocol = eval::Protocol::kText;
  out.text = eval::eval_text(m, val, pc);
  return out;
}

std::vector<AblationRow> run_ablation_grid(const TrainConfig& config,
                                           const std::vector<data::Dataset>& train,
                                           const std::vector<data::Dataset>& val,
                                           const std::optional<std::filesystem::path>& pretrained) {
  std::vector<AblationRow> rows;
  for (Variant v : kAllVariants) {
    TrainConfig c = config;
    c.variant = v;
    TrainingRun run(c, train);
    if (pretrained) run.load_parameters(*pretrained);
    spdlog::info("ablation variant {}: {} steps", variant_name(v), run.total_steps());
    run.run();
    const auto bundle = evaluate_all(run.model(), train, val, c.seed);
    rows.push_back({v, bundle.visual_i.ap, bundle.visual_g.ap, bundle.text.ap});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,visual_i_ap,visual_g_ap,text_ap\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%s,%.6f,%.6f,%.6f\n", std::string(variant_name(r.variant)).c_str(),
                  r.visual_i_ap, r.visual_g_ap, r.text_ap);
    out += line;
  }
  return out;
}

}  // namespace petduet::training
