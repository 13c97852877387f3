// petduet command-line tool: data generation, training, prompt extraction,
// evaluation, plotting, the ablation grid and the end-to-end pipeline.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "cli_support.hpp"
#include "petduet/error.hpp"
#include "petduet/eval.hpp"
#include "petduet/training.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using namespace petduet;
using namespace petduet::tools;

namespace {

// ---- shared steps -------------------------------------------------------------

training::TrainConfig load_config(const std::string& file, const std::string& preset) {
  if (!file.empty()) return training::TrainConfig::from_json(read_text(file));
  return training::TrainConfig::preset(preset);
}

struct TrainOutcome {
  fs::path final_checkpoint;
  training::RunLedger ledger;
};

// Trains into dir: config.json, checkpoints/, final.ckpt (+ .bank), ledger.csv,
// ledger.jsonl and run_manifest.json.
TrainOutcome train_into(const training::TrainConfig& cfg, const std::vector<data::Dataset>& train,
                        const fs::path& dir, const std::optional<fs::path>& pretrained,
                        const std::optional<fs::path>& resume, int max_steps, std::string_view command) {
  training::TrainingRun run(cfg, train);
  if (pretrained) {
    spdlog::info("initialising from {}", pretrained->string());
    run.load_parameters(*pretrained);
  }
  if (resume) {
    run.resume(*resume);
    spdlog::info("resumed at step {} of {}", run.step(), run.total_steps());
  }
  write_text(dir / "config.json", cfg.to_json() + "\n");
  spdlog::info("training: {} steps of {} images, ratio {}:{}, variant {}, freeze {}", run.total_steps(),
               cfg.batch_size, cfg.visual_steps, cfg.text_steps, training::variant_name(cfg.variant),
               cfg.freeze_spec);
  run.run(dir / "checkpoints", max_steps);
  const auto final_ckpt = dir / "final.ckpt";
  run.save_checkpoint(final_ckpt);
  write_text(dir / "ledger.csv", run.ledger().to_csv());
  write_text(dir / "ledger.jsonl", run.ledger().to_jsonl());
  if (!run.ledger().steps().empty()) {
    const auto [first, last] = training::loss_trend(run.ledger());
    spdlog::info("loss trend: median {:.4f} over the first tenth, {:.4f} over the last", first, last);
  }
  write_run_manifest(dir, command, cfg.hash(),
                     {"config.json", "final.ckpt", "final.bank", "ledger.csv", "ledger.jsonl"});
  return {final_ckpt, run.ledger()};
}

eval::ProtocolConfig protocol_config(const detector::Detector<float>& model, eval::Protocol protocol,
                                     std::uint64_t seed, int per_category) {
  eval::ProtocolConfig pc;
  pc.protocol = protocol;
  pc.seed = seed;
  pc.visual_g_images_per_category = per_category;
  pc.max_prompt_boxes = model.config().max_prompt_boxes;
  pc.validate();
  return pc;
}

eval::GlobalPrompts extract_into(const detector::Detector<float>& model, const std::vector<data::Dataset>& train,
                                 const fs::path& out, int per_category, std::uint64_t seed) {
  const eval::DetectorModel m(model);
  const auto prompts =
      eval::extract_global_prompts(m, train, protocol_config(model, eval::Protocol::kVisualG, seed, per_category));
  for (const auto& miss : prompts.missing) {
    spdlog::warn("category {} of dataset {} has no training image; no prompt extracted", miss.category_id,
                 miss.dataset_id);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  prompts.save(out);
  spdlog::info("wrote {} prompts ({} missing) to {}", prompts.entries.size(), prompts.missing.size(), out.string());
  return prompts;
}

eval::EvalReport evaluate(const detector::Detector<float>& model, const std::vector<data::Dataset>& datasets,
                          eval::Protocol protocol, const eval::GlobalPrompts* prompts, std::uint64_t seed) {
  const eval::DetectorModel m(model);
  const auto pc = protocol_config(model, protocol, seed, 16);
  switch (protocol) {
    case eval::Protocol::kVisualI: return eval::eval_visual_i(m, datasets, pc);
    case eval::Protocol::kVisualG: return eval::eval_visual_g(m, datasets, *prompts, pc);
    case eval::Protocol::kText: return eval::eval_text(m, datasets, pc);
  }
  throw std::logic_error("unknown protocol");
}

void append_csv_row(const fs::path& csv, const std::string& row) {
  std::string text = fs::exists(csv) ? read_text(csv) : eval::EvalReport::csv_header() + "\n";
  text += row + "\n";
  write_text(csv, text);
}

void plot_ledger(const training::RunLedger& ledger, const fs::path& out) {
  if (ledger.steps().empty()) {
    spdlog::warn("ledger is empty; nothing to plot");
    return;
  }
  write_text(out, loss_curve_svg(ledger));
  spdlog::info("wrote {}", out.string());
}

// ---- commands -----------------------------------------------------------------

struct GenDataOptions {
  std::string spec, out;
  std::uint64_t seed = 0;
  int images = 1000;
  int image_size = 96;
  bool near_duplicates = false;
  bool force = false;
};

void cmd_gen_data(const GenDataOptions& o) {
  const auto specs = o.spec.empty() ? data::default_scene_specs(o.image_size, o.near_duplicates)
                                    : read_scene_specs(o.spec);
  if (o.images < 1) throw UsageError("--images must be at least 1");
  guard_output(o.out, o.force);
  DirectoryLock lock(o.out);
  for (const auto& spec : specs) {
    spec.validate();
    const auto dir = fs::path(o.out) / spec.name;
    if (fs::exists(dir)) fs::remove_all(dir);
    data::generate_dataset(spec, o.images, o.seed, dir);
    std::cout << spec.name << " dataset_id=" << spec.dataset_id << " images=" << o.images
              << " manifest_sha256=" << data::sha256_file(dir / "manifest.json") << "\n";
  }
}

struct TrainOptions {
  std::string config, preset = "desk-scale", out, pretrained, variant, resume;
  std::vector<std::string> data;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  int max_steps = -1;
  bool pretrain_text = false;
  bool force = false;
};

void cmd_train(const TrainOptions& o) {
  auto cfg = load_config(o.config, o.preset);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.variant.empty()) cfg.variant = training::parse_variant(o.variant);
  if (o.pretrain_text) {
    if (!o.pretrained.empty() || !o.variant.empty()) {
      throw UsageError("--pretrain-text cannot be combined with --pretrained or --variant");
    }
    cfg.visual_steps = 0;
    cfg.text_steps = 1;
    cfg.freeze_spec = "none";
  }
  cfg.validate();
  if (o.resume.empty()) guard_output(o.out, o.force);
  DirectoryLock lock(o.out);
  const auto train = select_split(load_datasets({o.data.begin(), o.data.end()}, false), "train");
  std::optional<fs::path> pretrained, resume;
  if (!o.pretrained.empty()) pretrained = o.pretrained;
  if (!o.resume.empty()) resume = o.resume;
  train_into(cfg, train, o.out, pretrained, resume, o.max_steps, o.pretrain_text ? "pretrain-text" : "train");
}

struct ExtractOptions {
  std::string ckpt, out, split = "train";
  std::vector<std::string> datasets;
  int per_category = 16;
  std::uint64_t seed = 0;
  bool force = false;
};

void cmd_extract_prompts(const ExtractOptions& o) {
  if (o.per_category < 1) throw UsageError("--per-category must be at least 1");
  guard_output(o.out, o.force);
  const auto parent = fs::path(o.out).parent_path().empty() ? fs::path(".") : fs::path(o.out).parent_path();
  DirectoryLock lock(parent);
  const auto model = training::load_model(o.ckpt);
  const auto train = select_split(load_datasets({o.datasets.begin(), o.datasets.end()}, false), o.split);
  extract_into(*model, train, o.out, o.per_category, o.seed);
}

struct EvalOptions {
  std::string ckpt, protocol, prompts, split = "val", report, csv, run_id;
  std::vector<std::string> datasets;
  std::uint64_t seed = 0;
  bool deterministic = false;
  bool force = false;
};

void cmd_eval(const EvalOptions& o) {
  const auto protocol = eval::parse_protocol(o.protocol);
  if (protocol == eval::Protocol::kVisualG && o.prompts.empty()) {
    throw UsageError("--protocol visual-g needs --prompts (see extract-prompts)");
  }
  if (!o.report.empty()) guard_output(o.report, o.force);
  const auto model = training::load_model(o.ckpt);
  const auto datasets = select_split(load_datasets({o.datasets.begin(), o.datasets.end()}, false), o.split);
  std::optional<eval::GlobalPrompts> prompts;
  if (!o.prompts.empty()) prompts = eval::GlobalPrompts::load(o.prompts);
  const auto start = std::chrono::steady_clock::now();
  const auto report = evaluate(*model, datasets, protocol, prompts ? &*prompts : nullptr, o.seed);
  const double wall =
      o.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << report.to_json() << "\n";
  if (!o.report.empty()) write_text(o.report, report.to_json() + "\n");
  if (!o.csv.empty()) {
    append_csv_row(o.csv, report.csv_row(o.run_id.empty() ? std::string(eval::protocol_name(protocol)) : o.run_id,
                                         wall));
  }
}

struct PlotOptions {
  std::string ledger, ablation, out;
  bool force = false;
};

void cmd_plot(const PlotOptions& o) {
  if (o.ledger.empty() && o.ablation.empty()) throw UsageError("plot needs --ledger and/or --ablation");
  fs::create_directories(o.out);
  if (!o.ledger.empty()) {
    const auto target = fs::path(o.out) / "loss_curve.svg";
    guard_output(target, o.force);
    plot_ledger(training::RunLedger::from_jsonl(read_text(o.ledger)), target);
  }
  if (!o.ablation.empty()) {
    const auto target = fs::path(o.out) / "ablation.svg";
    guard_output(target, o.force);
    const auto rows = parse_ablation_csv(read_text(o.ablation));
    if (rows.empty()) {
      spdlog::warn("ablation table is empty; nothing to plot");
    } else {
      write_text(target, ablation_svg(rows));
      spdlog::info("wrote {}", target.string());
    }
  }
}

struct AblateOptions {
  std::string config, preset = "desk-scale", out, pretrained;
  std::vector<std::string> data;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void cmd_ablate(const AblateOptions& o) {
  auto cfg = load_config(o.config, o.preset);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  guard_output(o.out, o.force);
  DirectoryLock lock(o.out);
  const auto all = load_datasets({o.data.begin(), o.data.end()}, false);
  const auto train = select_split(all, "train");
  const auto val = select_split(all, "val");
  std::optional<fs::path> pretrained;
  if (!o.pretrained.empty()) pretrained = o.pretrained;
  const auto rows = training::run_ablation_grid(cfg, train, val, pretrained);
  const auto csv = training::ablation_csv(rows);
  std::cout << csv;
  write_text(fs::path(o.out) / "ablation.csv", csv);
  write_text(fs::path(o.out) / "ablation.svg", ablation_svg(parse_ablation_csv(csv)));
  write_run_manifest(o.out, "ablate", cfg.hash(), {"ablation.csv", "ablation.svg"});
}

struct ReproduceOptions {
  std::string config, preset = "desk-scale", out, spec;
  std::uint64_t seed = 0;
  int images = 1000;
  std::optional<int> epochs;
  bool deterministic = false;
  bool force = false;
};

void cmd_reproduce(const ReproduceOptions& o) {
  auto cfg = load_config(o.config, o.preset);
  cfg.seed = o.seed;
  if (o.epochs) cfg.epochs = *o.epochs;
  cfg.validate();
  const auto specs = o.spec.empty() ? data::default_scene_specs() : read_scene_specs(o.spec);
  const fs::path out = o.out;
  guard_output(out, o.force);
  DirectoryLock lock(out);

  const auto cache = cache_root();
  const auto data_root = cache.empty() ? out / "data"
                                       : cache / "datasets" / ("seed" + std::to_string(o.seed) + "-n" +
                                                               std::to_string(o.images));
  const auto dirs = materialize_datasets(specs, o.images, o.seed, data_root, o.force);
  const auto all = load_datasets(dirs, true);
  const auto train = select_split(all, "train");
  const auto val = select_split(all, "val");

  auto pre_cfg = cfg;
  pre_cfg.visual_steps = 0;
  pre_cfg.text_steps = 1;
  pre_cfg.freeze_spec = "none";
  spdlog::info("stage 1/5: text-route pretraining");
  const auto pre = train_into(pre_cfg, train, out / "pretrain", std::nullopt, std::nullopt, -1, "pretrain-text");

  spdlog::info("stage 2/5: cyclical visual training from the pretrained checkpoint");
  const auto trained = train_into(cfg, train, out / "train", pre.final_checkpoint, std::nullopt, -1, "train");

  spdlog::info("stage 3/5: global prompt extraction");
  const auto model = training::load_model(trained.final_checkpoint);
  const auto prompts = extract_into(*model, train, out / "prompts.bin", 16, o.seed);

  spdlog::info("stage 4/5: evaluation");
  const auto csv = out / "metrics.csv";
  if (fs::exists(csv)) fs::remove(csv);
  for (auto protocol : {eval::Protocol::kVisualI, eval::Protocol::kVisualG, eval::Protocol::kText}) {
    const auto start = std::chrono::steady_clock::now();
    const auto report = evaluate(*model, val, protocol, &prompts, o.seed);
    const double wall =
        o.deterministic ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string name(eval::protocol_name(protocol));
    write_text(out / "eval" / (name + ".json"), report.to_json() + "\n");
    append_csv_row(csv, report.csv_row(name, wall));
    spdlog::info("{}: AP {:.4f}, AP50 {:.4f}", name, report.ap, report.ap50);
  }

  spdlog::info("stage 5/5: plots");
  plot_ledger(pre.ledger, out / "plots" / "pretrain_loss.svg");
  plot_ledger(trained.ledger, out / "plots" / "train_loss.svg");
  write_run_manifest(out, "reproduce", cfg.hash(),
                     {"pretrain/final.ckpt", "train/final.ckpt", "prompts.bin", "metrics.csv",
                      "eval/visual_i.json", "eval/visual_g.json", "eval/text.json"});
  std::cout << read_text(csv);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"petduet: dual-route (text and visual prompt) detection on a synthetic shapes corpus"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  std::function<void()> action;

  GenDataOptions gen;
  auto* g = app.add_subcommand("gen-data", "Render the synthetic corpus to disk");
  g->add_option("--spec", gen.spec, "Scene spec JSON (one spec or an array); default: the two built-in datasets")
      ->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory (one subdirectory per dataset)")->required();
  g->add_option("--seed", gen.seed, "Rendering seed");
  g->add_option("--images", gen.images, "Images per dataset");
  g->add_option("--image-size", gen.image_size, "Image side in pixels for the built-in specs");
  g->add_flag("--near-duplicates", gen.near_duplicates, "Add a near-duplicate category to the second dataset");
  g->add_flag("--force", gen.force, "Overwrite existing output");
  g->callback([&] { action = [&] { cmd_gen_data(gen); }; });

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train with the cyclical visual/text schedule");
  t->add_option("--config", tr.config, "Training config JSON")->check(CLI::ExistingFile);
  t->add_option("--preset", tr.preset, "Preset used without --config")
      ->check(CLI::IsMember({"desk-scale", "paper-scale", "desk", "paper"}));
  t->add_option("--data", tr.data, "Dataset directories")->required();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--pretrained", tr.pretrained, "Initialise from this checkpoint")->check(CLI::ExistingFile);
  t->add_option("--variant", tr.variant, "Prompt strategy variant")
      ->check(CLI::IsMember({"afvpg", "+dmd", "+ibp", "full"}));
  t->add_option("--resume", tr.resume, "Continue a run from its checkpoint")->check(CLI::ExistingFile);
  t->add_option("--epochs", tr.epochs, "Override the epoch count");
  t->add_option("--seed", tr.seed, "Override the seed");
  t->add_option("--max-steps", tr.max_steps, "Stop after this many steps");
  t->add_flag("--pretrain-text", tr.pretrain_text, "Text-route pretraining (ratio 0:1, nothing frozen)");
  t->add_flag("--force", tr.force, "Overwrite an existing run directory");
  t->callback([&] { action = [&] { cmd_train(tr); }; });

  ExtractOptions ex;
  auto* x = app.add_subcommand("extract-prompts", "Average per-category visual prompts over training images");
  x->add_option("--ckpt", ex.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  x->add_option("--dataset", ex.datasets, "Dataset directories")->required();
  x->add_option("--out", ex.out, "Prompt file")->required();
  x->add_option("--per-category", ex.per_category, "Images sampled per category");
  x->add_option("--seed", ex.seed, "Sampling seed");
  x->add_option("--split", ex.split, "Split to sample from")->check(CLI::IsMember({"train", "val", "all"}));
  x->add_flag("--force", ex.force, "Overwrite an existing prompt file");
  x->callback([&] { action = [&] { cmd_extract_prompts(ex); }; });

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint under one protocol");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--dataset", ev.datasets, "Dataset directories")->required();
  e->add_option("--protocol", ev.protocol, "visual-i, visual-g or text")
      ->required()
      ->check(CLI::IsMember({"visual-i", "visual_i", "visual-g", "visual_g", "text"}));
  e->add_option("--prompts", ev.prompts, "Global prompt file (visual-g)")->check(CLI::ExistingFile);
  e->add_option("--seed", ev.seed, "Prompt sampling seed");
  e->add_option("--split", ev.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "all"}));
  e->add_option("--report", ev.report, "Write the JSON report here");
  e->add_option("--csv", ev.csv, "Append a metrics row to this CSV");
  e->add_option("--run-id", ev.run_id, "Run id for the CSV row (default: protocol)");
  e->add_flag("--deterministic", ev.deterministic, "Record wall time as 0 so outputs are byte-stable");
  e->add_flag("--force", ev.force, "Overwrite an existing report");
  e->callback([&] { action = [&] { cmd_eval(ev); }; });

  PlotOptions pl;
  auto* p = app.add_subcommand("plot", "Write SVG charts of a training ledger and an ablation table");
  p->add_option("--ledger", pl.ledger, "ledger.jsonl of a run")->check(CLI::ExistingFile);
  p->add_option("--ablation", pl.ablation, "ablation.csv from the ablate command")->check(CLI::ExistingFile);
  p->add_option("--out", pl.out, "Output directory")->required();
  p->add_flag("--force", pl.force, "Overwrite existing charts");
  p->callback([&] { action = [&] { cmd_plot(pl); }; });

  AblateOptions ab;
  auto* a = app.add_subcommand("ablate", "Train and evaluate the four prompt-strategy variants");
  a->add_option("--config", ab.config, "Training config JSON")->check(CLI::ExistingFile);
  a->add_option("--preset", ab.preset, "Preset used without --config")
      ->check(CLI::IsMember({"desk-scale", "paper-scale", "desk", "paper"}));
  a->add_option("--data", ab.data, "Dataset directories")->required();
  a->add_option("--out", ab.out, "Output directory")->required();
  a->add_option("--pretrained", ab.pretrained, "Start every variant from this checkpoint")->check(CLI::ExistingFile);
  a->add_option("--epochs", ab.epochs, "Override the epoch count");
  a->add_option("--seed", ab.seed, "Override the seed");
  a->add_flag("--force", ab.force, "Overwrite existing output");
  a->callback([&] { action = [&] { cmd_ablate(ab); }; });

  ReproduceOptions rp;
  auto* r = app.add_subcommand("reproduce",
                               "gen-data, text pretraining, visual training, prompt extraction, all evaluations, plots");
  r->add_option("--config", rp.config, "Training config JSON")->check(CLI::ExistingFile);
  r->add_option("--preset", rp.preset, "Preset used without --config")
      ->check(CLI::IsMember({"desk-scale", "paper-scale", "desk", "paper"}));
  r->add_option("--spec", rp.spec, "Scene spec JSON")->check(CLI::ExistingFile);
  r->add_option("--out", rp.out, "Output directory")->required();
  r->add_option("--seed", rp.seed, "Seed for data, training and evaluation");
  r->add_option("--images", rp.images, "Images per dataset");
  r->add_option("--epochs", rp.epochs, "Override the epoch count of both training stages");
  r->add_flag("--deterministic", rp.deterministic, "Record wall times as 0 so outputs are byte-stable");
  r->add_flag("--force", rp.force, "Overwrite existing output");
  r->callback([&] { action = [&] { cmd_reproduce(rp); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  auto logger = spdlog::stderr_color_mt("petduet");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    action();
    return kExitOk;
  } catch (const UsageError& err) {
    spdlog::error("{}", err.what());
    return kExitUsage;
  } catch (const ValidationError& err) {
    spdlog::error("invalid input: {}", err.what());
    return kExitUsage;
  } catch (const ArtifactError& err) {
    spdlog::error("artifact error: {}", err.what());
    return kExitFailure;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return kExitFailure;
  }
}
