#pragma once

// Training-time prompt strategies: intra-batch aggregation, the per-dataset
// visual cues bank, and assembly of the per-image prompt column set.

#include <deque>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <vector>

#include "petduet/afvpg.hpp"

namespace petduet::prompts {

using afvpg::PromptSource;
using afvpg::VisualPromptEmbedding;
using ag::Tensor;

/// Self prompts of every image in one single-dataset batch, keyed by
/// (category, sample index).
template <typename T>
class BatchPromptTable {
 public:
  BatchPromptTable(int batch_size, int dataset_id);

  /// Throws ValidationError for an out-of-range index, a non-self source, a
  /// foreign dataset or a category mismatch.
  void insert(int sample_index, const VisualPromptEmbedding<T>& embedding);

  const VisualPromptEmbedding<T>* find(int category_id, int sample_index) const;
  /// Sample indices holding a prompt for the category, ascending.
  std::vector<int> samples_with(int category_id) const;
  std::vector<int> categories() const;
  int batch_size() const { return batch_size_; }
  int dataset_id() const { return dataset_id_; }

 private:
  std::map<std::pair<int, int>, VisualPromptEmbedding<T>> entries_;
  int batch_size_;
  int dataset_id_;
};

/// Mean of the category's prompts from the other images of the batch (or of
/// all of them when image i lacks the category). Absent when that set is empty.
template <typename T>
std::optional<VisualPromptEmbedding<T>> ibp_aggregate(const BatchPromptTable<T>& table,
                                                      int category_id, int sample_index);

/// FIFO queues of detached prompt vectors, one per (dataset, category).
class VisualCuesBank {
 public:
  using Queue = std::deque<std::vector<float>>;

  explicit VisualCuesBank(int capacity = 16);

  void push(int dataset_id, int category_id, std::span<const float> embedding);
  template <typename T>
  void push(const VisualPromptEmbedding<T>& embedding);

  /// Null when nothing was ever pushed for the pair.
  const Queue* queue(int dataset_id, int category_id) const;
  /// Categories with non-empty queues, ascending.
  std::vector<int> populated_categories(int dataset_id) const;
  std::vector<int> datasets() const;
  /// Mean over the stored vectors; absent for an empty queue.
  std::optional<std::vector<float>> mean(int dataset_id, int category_id) const;

  int capacity() const { return capacity_; }
  std::size_t size() const;
  const std::map<int, std::map<int, Queue>>& queues() const { return queues_; }
  friend bool operator==(const VisualCuesBank&, const VisualCuesBank&) = default;

 private:
  std::map<int, std::map<int, Queue>> queues_;
  int capacity_;
  int dim_ = 0;
};

/// Bank mean as a memory-sourced prompt with no gradient history.
template <typename T>
std::optional<VisualPromptEmbedding<T>> dmd_aggregate(const VisualCuesBank& bank, int dataset_id,
                                                      int category_id);

/// Uniform sample without replacement of min(d, available) populated
/// categories, returned ascending.
std::set<int> sample_bank_categories(const VisualCuesBank& bank, int dataset_id, int d,
                                     const std::set<int>& positives, std::mt19937_64& rng);

template <typename T>
struct PromptColumn {
  int category_id;
  PromptSource source;
  Tensor<T> embedding;
};

template <typename T>
struct PromptColumnSet {
  std::vector<PromptColumn<T>> columns;
  std::set<int> positive_categories;

  int size() const { return static_cast<int>(columns.size()); }
  /// Embeddings stacked as a P x D matrix.
  Tensor<T> matrix() const;
  /// Column indices carrying the category.
  std::vector<int> columns_for(int category_id) const;
  /// Throws ValidationError when a (category, source) pair repeats or a
  /// negative column names a positive category.
  void validate() const;
};

/// One column per category per source, used by text prompting and by the
/// global-prompt evaluation.
template <typename T>
PromptColumnSet<T> single_source_columns(const std::vector<VisualPromptEmbedding<T>>& prompts);

struct StrategyFlags {
  bool intra_batch = true;
  bool memory = true;
};

/// Columns for image i: every positive category contributes its self prompt,
/// its batch aggregate and its memory mean when present. Negatives are the
/// batch aggregates of categories other images carry (intra-batch on) and
/// the memory means of sampled bank categories (memory on). Positives come
/// first by category then source; negatives follow in the same order.
template <typename T>
PromptColumnSet<T> assemble_prompt_columns(const std::vector<VisualPromptEmbedding<T>>& self_prompts,
                                           const BatchPromptTable<T>& table,
                                           const VisualCuesBank& bank, int sample_index, int d,
                                           std::mt19937_64& rng, StrategyFlags flags = {});

}  // namespace petduet::prompts
