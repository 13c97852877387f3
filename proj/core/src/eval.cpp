#include "petduet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

#include "json.hpp"
#include "petduet/archive.hpp"
#include "petduet/error.hpp"

namespace petduet::eval {

using nlohmann::json;

std::string_view protocol_name(Protocol protocol) {
  switch (protocol) {
    case Protocol::kVisualI: return "visual_i";
    case Protocol::kVisualG: return "visual_g";
    case Protocol::kText: return "text";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "visual_i" || name == "visual-i") return Protocol::kVisualI;
  if (name == "visual_g" || name == "visual-g") return Protocol::kVisualG;
  if (name == "text") return Protocol::kText;
  throw ValidationError("unknown protocol '" + std::string(name) + "'");
}

void ProtocolConfig::validate() const {
  if (iou_thresholds.empty()) throw ValidationError("at least one IoU threshold is required");
  for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
    const double t = iou_thresholds[i];
    if (!(t > 0.0 && t <= 1.0)) throw ValidationError("IoU thresholds must lie in (0,1]");
    if (i > 0 && !(t > iou_thresholds[i - 1])) {
      throw ValidationError("IoU thresholds must be strictly increasing");
    }
  }
  if (visual_g_images_per_category < 1) {
    throw ValidationError("visual_g_images_per_category must be positive");
  }
  if (max_detections < 1) throw ValidationError("max_detections must be positive");
  if (max_prompt_boxes < 1) throw ValidationError("max_prompt_boxes must be positive");
}

int image_key(int dataset_id, int image_id) { return dataset_id * 1'000'000 + image_id; }

std::string EvalReport::to_json() const {
  json per = json::object();
  for (const auto& [cat, ap_c] : per_category_ap) per[std::to_string(cat)] = ap_c;
  return json{{"protocol", protocol_name(protocol)},
              {"seed", seed},
              {"ap", ap},
              {"ap50", ap50},
              {"per_category_ap", per},
              {"n_images", n_images},
              {"skipped_images", skipped_images},
              {"missing_categories", missing_categories}}
      .dump(2);
}

EvalReport EvalReport::from_json(std::string_view text) {
  try {
    const auto j = json::parse(text);
    EvalReport r;
    r.protocol = parse_protocol(j.at("protocol").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.ap = j.at("ap").get<double>();
    r.ap50 = j.at("ap50").get<double>();
    for (const auto& [k, v] : j.at("per_category_ap").items()) r.per_category_ap[std::stoi(k)] = v;
    r.n_images = j.at("n_images").get<int>();
    r.skipped_images = j.at("skipped_images").get<int>();
    r.missing_categories = j.at("missing_categories").get<std::vector<int>>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string EvalReport::csv_header() { return "run_id,protocol,seed,ap,ap50,wall_time"; }

std::string EvalReport::csv_row(std::string_view run_id, double wall_time) const {
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%s,%llu,%.6f,%.6f,%.3f", std::string(protocol_name(protocol)).c_str(),
                static_cast<unsigned long long>(seed), ap, ap50, wall_time);
  return std::string(run_id) + buf;
}

namespace {

// Interpolated precision at recall points 0, 0.01, ..., 1.
double interpolated_ap(std::vector<double> recall, std::vector<double> precision) {
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double total = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i * 0.01;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[it - recall.begin()];
  }
  return total / 101.0;
}

struct CategoryData {
  std::map<int, std::vector<AbsoluteBox>> gt;  // by image
  std::vector<Detection> dets;                 // score-descending
  int positives = 0;
};

double category_ap(const CategoryData& c, double threshold) {
  if (c.dets.empty()) return 0.0;
  std::map<int, std::vector<bool>> used;
  for (const auto& [img, boxes] : c.gt) used[img].assign(boxes.size(), false);
  std::vector<double> recall, precision;
  int tp = 0, fp = 0;
  for (const auto& d : c.dets) {
    int best = -1;
    double best_iou = threshold;
    const auto it = c.gt.find(d.image_key);
    if (it != c.gt.end()) {
      auto& taken = used[d.image_key];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (taken[g]) continue;
        const double v = geometry::iou(d.box, it->second[g]);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best = static_cast<int>(g);
          best_iou = v;
        }
      }
      if (best >= 0) taken[best] = true;
    }
    best >= 0 ? ++tp : ++fp;
    recall.push_back(static_cast<double>(tp) / c.positives);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  return interpolated_ap(recall, precision);
}

}  // namespace

EvalReport compute_ap(std::span<const Detection> detections,
                      std::span<const GroundTruthBox> ground_truth, const ProtocolConfig& config) {
  config.validate();
  std::map<int, CategoryData> cats;
  for (const auto& g : ground_truth) {
    auto& c = cats[g.category_id];
    c.gt[g.image_key].push_back(g.box);
    ++c.positives;
  }
  // Per (image, category): best max_detections by score.
  std::map<std::pair<int, int>, std::vector<Detection>> grouped;
  for (const auto& d : detections) {
    if (d.score < config.score_threshold || !cats.count(d.category_id)) continue;
    grouped[{d.category_id, d.image_key}].push_back(d);
  }
  for (auto& [key, dets] : grouped) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (static_cast<int>(dets.size()) > config.max_detections) dets.resize(config.max_detections);
    auto& target = cats[key.first].dets;
    target.insert(target.end(), dets.begin(), dets.end());
  }

  EvalReport report;
  report.protocol = config.protocol;
  report.seed = config.seed;
  std::set<int> images;
  for (const auto& g : ground_truth) images.insert(g.image_key);
  for (const auto& d : detections) images.insert(d.image_key);
  report.n_images = static_cast<int>(images.size());
  if (cats.empty()) return report;

  double ap_sum = 0.0, ap50_sum = 0.0;
  for (auto& [cat, c] : cats) {
    std::stable_sort(c.dets.begin(), c.dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    double sum = 0.0;
    for (double t : config.iou_thresholds) sum += category_ap(c, t);
    const double ap_c = sum / config.iou_thresholds.size();
    report.per_category_ap[cat] = ap_c;
    ap_sum += ap_c;
    ap50_sum += category_ap(c, 0.5);
  }
  report.ap = ap_sum / cats.size();
  report.ap50 = ap50_sum / cats.size();
  return report;
}

std::vector<ScoredBox> EvalModel::detect_with_own_prompts(
    const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
    int dataset_id) const {
  std::vector<CategoryPrompt> prompts;
  for (auto& [cat, v] : visual_prompts(image, boxes, dataset_id)) prompts.push_back({cat, v});
  return detect_visual(image, prompts);
}

std::vector<ScoredBox> top_detections(const detector::DetectionSet<float>& output, int k) {
  const auto& logits = output.logits;
  std::vector<int> cats = output.column_categories;
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
  struct Candidate {
    double score;
    int query, category;
  };
  std::vector<Candidate> all;
  for (int q = 0; q < logits.rows(); ++q) {
    for (int c : cats) {
      double best = -std::numeric_limits<double>::infinity();
      for (int col = 0; col < logits.cols(); ++col) {
        if (output.column_categories[col] == c) best = std::max(best, static_cast<double>(logits.at(q, col)));
      }
      all.push_back({1.0 / (1.0 + std::exp(-best)), q, c});
    }
  }
  const std::size_t keep = std::min<std::size_t>(all.size(), static_cast<std::size_t>(k));
  std::partial_sort(all.begin(), all.begin() + keep, all.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.query != b.query) return a.query < b.query;
    return a.category < b.category;
  });
  const auto boxes = output.box_list();
  std::vector<ScoredBox> out;
  for (std::size_t i = 0; i < keep; ++i) out.push_back({boxes[all[i].query], all[i].category, all[i].score});
  return out;
}

DetectorModel::DetectorModel(const detector::Detector<float>& model, int max_detections)
    : model_(model), max_detections_(max_detections) {}

int DetectorModel::prompt_dim() const { return model_.config().dim; }

std::map<int, std::vector<float>> DetectorModel::visual_prompts(
    const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
    int dataset_id) const {
  ag::NoGradGuard no_grad;
  const auto enhanced = model_.enhance_visual(model_.backbone(image));
  std::map<int, std::vector<float>> out;
  for (const auto& p : model_.generator().generate_prompts_for_image(boxes, enhanced, dataset_id)) {
    const auto v = p.vector().values();
    out[p.category_id()] = std::vector<float>(v.begin(), v.end());
  }
  return out;
}

namespace {

prompts::PromptColumnSet<float> to_columns(const std::vector<CategoryPrompt>& prompts, int dim) {
  prompts::PromptColumnSet<float> cols;
  for (const auto& p : prompts) {
    if (static_cast<int>(p.embedding.size()) != dim) {
      throw ValidationError("prompt width does not match the model");
    }
    cols.columns.push_back(
        {p.category_id, afvpg::PromptSource::kSelf, ag::Tensor<float>(1, dim, p.embedding)});
  }
  return cols;
}

}  // namespace

std::vector<ScoredBox> DetectorModel::detect_visual(const Image& image,
                                                    const std::vector<CategoryPrompt>& prompts) const {
  if (prompts.empty()) return {};
  ag::NoGradGuard no_grad;
  const auto out = model_.visual_route_forward(image, to_columns(prompts, prompt_dim()));
  return top_detections(out.final_layer(), max_detections_);
}

std::vector<ScoredBox> DetectorModel::detect_text(const Image& image,
                                                  const std::vector<int>& category_ids) const {
  ag::NoGradGuard no_grad;
  const auto out = model_.text_route_forward(image, category_ids);
  return top_detections(out.final_layer(), max_detections_);
}

std::vector<ScoredBox> DetectorModel::detect_with_own_prompts(
    const Image& image, const std::map<int, std::vector<NormalizedBox>>& boxes,
    int dataset_id) const {
  if (boxes.empty()) return {};
  ag::NoGradGuard no_grad;
  const auto enhanced = model_.enhance_visual(model_.backbone(image));
  prompts::PromptColumnSet<float> cols;
  for (const auto& p : model_.generator().generate_prompts_for_image(boxes, enhanced, dataset_id)) {
    cols.columns.push_back({p.category_id(), afvpg::PromptSource::kSelf, p.vector()});
  }
  const auto out = model_.visual_route_forward(enhanced, cols);
  return top_detections(out.final_layer(), max_detections_);
}

void GlobalPrompts::save(const std::filesystem::path& path) const {
  json entry_meta = json::array(), missing_meta = json::array();
  archive::NamedArray matrix{"prompts", static_cast<int>(entries.size()), dim, {}};
  for (const auto& e : entries) {
    if (static_cast<int>(e.embedding.size()) != dim) {
      throw ValidationError("global prompt width does not match dim");
    }
    entry_meta.push_back({{"dataset_id", e.dataset_id}, {"category_id", e.category_id}, {"samples", e.samples}});
    matrix.values.insert(matrix.values.end(), e.embedding.begin(), e.embedding.end());
  }
  for (const auto& m : missing) {
    missing_meta.push_back({{"dataset_id", m.dataset_id}, {"category_id", m.category_id}});
  }
  const json meta{{"format", "petduet-prompts"},
                  {"dim", dim},
                  {"images_per_category", images_per_category},
                  {"seed", seed},
                  {"entries", entry_meta},
                  {"missing", missing_meta}};
  archive::write_archive(path, {meta.dump(), {matrix}});
}

GlobalPrompts GlobalPrompts::load(const std::filesystem::path& path) {
  const auto a = archive::read_archive(path);
  GlobalPrompts out;
  try {
    const auto meta = json::parse(a.meta_json);
    if (meta.at("format") != "petduet-prompts") throw ArtifactError(path.string() + " is not a prompt file");
    out.dim = meta.at("dim").get<int>();
    out.images_per_category = meta.at("images_per_category").get<int>();
    out.seed = meta.at("seed").get<std::uint64_t>();
    const auto& matrix = a.find("prompts");
    const auto& entries = meta.at("entries");
    if (matrix.rows != static_cast<int>(entries.size()) || (matrix.rows > 0 && matrix.cols != out.dim)) {
      throw ArtifactError("prompt matrix does not match its manifest");
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto begin = matrix.values.begin() + static_cast<std::ptrdiff_t>(i * out.dim);
      out.entries.push_back({entries[i].at("dataset_id").get<int>(), entries[i].at("category_id").get<int>(),
                             entries[i].at("samples").get<int>(), std::vector<float>(begin, begin + out.dim)});
    }
    for (const auto& m : meta.at("missing")) {
      out.missing.push_back({m.at("dataset_id").get<int>(), m.at("category_id").get<int>()});
    }
  } catch (const json::exception& e) {
    throw ArtifactError("malformed prompt file " + path.string() + ": " + e.what());
  }
  return out;
}

namespace {

std::mt19937_64 seeded_rng(std::uint64_t seed, int a, int b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

std::vector<GroundTruthBox> ground_truth_of(const data::AnnotatedImage& img) {
  std::vector<GroundTruthBox> out;
  for (const auto& a : img.annotations) out.push_back({image_key(img.dataset_id, img.image_id), a.category_id, a.box});
  return out;
}

void append_detections(std::vector<Detection>& out, const data::AnnotatedImage& img,
                       const std::vector<ScoredBox>& found) {
  for (const auto& s : found) {
    out.push_back({image_key(img.dataset_id, img.image_id), s.category_id,
                   geometry::denormalize_box(s.box, img.image.width, img.image.height), s.score});
  }
}

int evaluated_images(std::span<const data::Dataset> datasets) {
  int n = 0;
  for (const auto& d : datasets) n += static_cast<int>(d.size());
  return n;
}

std::map<int, std::vector<NormalizedBox>> boxes_by_category(const data::AnnotatedImage& img) {
  std::map<int, std::vector<NormalizedBox>> out;
  const auto boxes = img.normalized_boxes();
  for (std::size_t i = 0; i < boxes.size(); ++i) out[img.annotations[i].category_id].push_back(boxes[i]);
  return out;
}

}  // namespace

EvalReport eval_visual_i(const EvalModel& model, std::span<const data::Dataset> datasets,
                         const ProtocolConfig& config) {
  config.validate();
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
  int skipped = 0;
  for (const auto& d : datasets) {
    for (const auto& img : d.images) {
      if (img.annotations.empty()) {
        ++skipped;
        continue;
      }
      auto rng = seeded_rng(config.seed, img.dataset_id, img.image_id);
      std::map<int, std::vector<NormalizedBox>> prompt_boxes;
      for (const auto& [cat, boxes] : boxes_by_category(img)) {
        std::uniform_int_distribution<std::size_t> pick(0, boxes.size() - 1);
        prompt_boxes[cat] = {boxes[pick(rng)]};
      }
      append_detections(dets, img, model.detect_with_own_prompts(img.image, prompt_boxes, img.dataset_id));
      const auto g = ground_truth_of(img);
      gts.insert(gts.end(), g.begin(), g.end());
    }
  }
  auto report = compute_ap(dets, gts, config);
  report.protocol = Protocol::kVisualI;
  report.n_images = evaluated_images(datasets) - skipped;
  report.skipped_images = skipped;
  return report;
}

GlobalPrompts extract_global_prompts(const EvalModel& model,
                                     std::span<const data::Dataset> train_datasets,
                                     const ProtocolConfig& config) {
  config.validate();
  GlobalPrompts out;
  out.dim = model.prompt_dim();
  out.images_per_category = config.visual_g_images_per_category;
  out.seed = config.seed;
  const int n = config.visual_g_images_per_category;
  for (const auto& d : train_datasets) {
    for (int cat : d.spec.category_ids()) {
      std::vector<int> holders;
      for (std::size_t i = 0; i < d.images.size(); ++i) {
        const auto& anns = d.images[i].annotations;
        if (std::any_of(anns.begin(), anns.end(), [cat](const data::Annotation& a) { return a.category_id == cat; })) {
          holders.push_back(static_cast<int>(i));
        }
      }
      if (holders.empty()) {
        out.missing.push_back({d.dataset_id(), cat});
        continue;
      }
      auto rng = seeded_rng(config.seed, d.dataset_id(), cat);
      std::vector<int> chosen;
      if (static_cast<int>(holders.size()) >= n) {
        for (int i = 0; i < n; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, holders.size() - 1);
          std::swap(holders[i], holders[pick(rng)]);
          chosen.push_back(holders[i]);
        }
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, holders.size() - 1);
        for (int i = 0; i < n; ++i) chosen.push_back(holders[pick(rng)]);
      }
      // Running mean in double precision.
      std::vector<double> mean(out.dim, 0.0);
      int count = 0;
      for (int idx : chosen) {
        const auto& img = d.images[idx];
        auto boxes = boxes_by_category(img).at(cat);
        boxes = afvpg::cap_prompt_boxes(boxes, config.max_prompt_boxes, rng);
        const auto prompt = model.visual_prompts(img.image, {{cat, boxes}}, d.dataset_id()).at(cat);
        ++count;
        for (int k = 0; k < out.dim; ++k) mean[k] += (prompt[k] - mean[k]) / count;
      }
      out.entries.push_back({d.dataset_id(), cat, count, std::vector<float>(mean.begin(), mean.end())});
    }
  }
  return out;
}

EvalReport eval_visual_g(const EvalModel& model, std::span<const data::Dataset> datasets,
                         const GlobalPrompts& prompts, const ProtocolConfig& config) {
  config.validate();
  if (prompts.dim != model.prompt_dim()) {
    throw ValidationError("prompt file width " + std::to_string(prompts.dim) + " does not match the model");
  }
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
  std::vector<int> missing;
  for (const auto& d : datasets) {
    // Canonical column order: ascending category.
    std::map<int, const GlobalPrompts::Entry*> by_cat;
    for (const auto& e : prompts.entries) {
      if (e.dataset_id != d.dataset_id()) continue;
      if (!d.spec.has_category(e.category_id)) {
        throw ValidationError("prompt category " + std::to_string(e.category_id) + " is not in dataset " + d.spec.name);
      }
      by_cat[e.category_id] = &e;
    }
    for (int cat : d.spec.category_ids()) {
      if (by_cat.count(cat)) continue;
      const GlobalPrompts::Missing m{d.dataset_id(), cat};
      if (std::find(prompts.missing.begin(), prompts.missing.end(), m) == prompts.missing.end()) {
        throw ValidationError("prompt file does not cover category " + std::to_string(cat) + " of dataset " + d.spec.name);
      }
      missing.push_back(cat);
    }
    std::vector<CategoryPrompt> columns;
    for (const auto& [cat, e] : by_cat) columns.push_back({cat, e->embedding});
    for (const auto& img : d.images) {
      append_detections(dets, img, model.detect_visual(img.image, columns));
      const auto g = ground_truth_of(img);
      gts.insert(gts.end(), g.begin(), g.end());
    }
  }
  auto report = compute_ap(dets, gts, config);
  report.protocol = Protocol::kVisualG;
  report.n_images = evaluated_images(datasets);
  report.missing_categories = missing;
  return report;
}

EvalReport eval_text(const EvalModel& model, std::span<const data::Dataset> datasets,
                     const ProtocolConfig& config) {
  config.validate();
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
  for (const auto& d : datasets) {
    const auto ids = d.spec.category_ids();
    for (const auto& img : d.images) {
      append_detections(dets, img, model.detect_text(img.image, ids));
      const auto g = ground_truth_of(img);
      gts.insert(gts.end(), g.begin(), g.end());
    }
  }
  auto report = compute_ap(dets, gts, config);
  report.protocol = Protocol::kText;
  report.n_images = evaluated_images(datasets);
  return report;
}

}  // namespace petduet::eval
