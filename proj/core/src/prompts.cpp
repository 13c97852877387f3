#include "petduet/prompts.hpp"

#include <algorithm>
#include <string>

#include "petduet/error.hpp"

namespace petduet::prompts {

template <typename T>
BatchPromptTable<T>::BatchPromptTable(int batch_size, int dataset_id)
    : batch_size_(batch_size), dataset_id_(dataset_id) {
  if (batch_size < 1) throw ValidationError("batch prompt table needs a positive batch size");
}

template <typename T>
void BatchPromptTable<T>::insert(int sample_index, const VisualPromptEmbedding<T>& embedding) {
  if (sample_index < 0 || sample_index >= batch_size_) {
    throw ValidationError("batch prompt table: sample index " + std::to_string(sample_index) +
                          " outside batch of " + std::to_string(batch_size_));
  }
  if (embedding.source() != PromptSource::kSelf) {
    throw ValidationError("batch prompt table accepts only self prompts");
  }
  if (embedding.dataset_id() != dataset_id_) {
    throw ValidationError("batch prompt table: prompt from dataset " +
                          std::to_string(embedding.dataset_id()) + " in a batch of dataset " +
                          std::to_string(dataset_id_));
  }
  entries_.insert_or_assign({embedding.category_id(), sample_index}, embedding);
}

template <typename T>
const VisualPromptEmbedding<T>* BatchPromptTable<T>::find(int category_id, int sample_index) const {
  auto it = entries_.find({category_id, sample_index});
  return it == entries_.end() ? nullptr : &it->second;
}

template <typename T>
std::vector<int> BatchPromptTable<T>::samples_with(int category_id) const {
  std::vector<int> out;
  for (auto it = entries_.lower_bound({category_id, 0});
       it != entries_.end() && it->first.first == category_id; ++it) {
    out.push_back(it->first.second);
  }
  return out;
}

template <typename T>
std::vector<int> BatchPromptTable<T>::categories() const {
  std::vector<int> out;
  for (const auto& [key, value] : entries_) {
    if (out.empty() || out.back() != key.first) out.push_back(key.first);
  }
  return out;
}

template <typename T>
std::optional<VisualPromptEmbedding<T>> ibp_aggregate(const BatchPromptTable<T>& table,
                                                      int category_id, int sample_index) {
  std::vector<Tensor<T>> included;
  for (int j : table.samples_with(category_id)) {
    if (j != sample_index) included.push_back(table.find(category_id, j)->vector());
  }
  if (included.empty()) return std::nullopt;
  Tensor<T> mean = included.size() == 1 ? included.front()
                                        : ag::mean_rows(ag::concat_rows<T>(included));
  return VisualPromptEmbedding<T>(mean, category_id, PromptSource::kBatch, table.dataset_id());
}

// ---- bank ---------------------------------------------------------------------

VisualCuesBank::VisualCuesBank(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ValidationError("visual cues bank capacity must be positive");
}

void VisualCuesBank::push(int dataset_id, int category_id, std::span<const float> embedding) {
  if (embedding.empty()) throw ValidationError("cannot store an empty prompt embedding");
  if (dim_ == 0) dim_ = static_cast<int>(embedding.size());
  if (static_cast<int>(embedding.size()) != dim_) {
    throw ValidationError("bank embedding width " + std::to_string(embedding.size()) +
                          " differs from stored width " + std::to_string(dim_));
  }
  Queue& q = queues_[dataset_id][category_id];
  q.emplace_back(embedding.begin(), embedding.end());
  while (static_cast<int>(q.size()) > capacity_) q.pop_front();
}

template <typename T>
void VisualCuesBank::push(const VisualPromptEmbedding<T>& embedding) {
  const auto v = embedding.vector().values();
  std::vector<float> copy(v.begin(), v.end());
  push(embedding.dataset_id(), embedding.category_id(), copy);
}

const VisualCuesBank::Queue* VisualCuesBank::queue(int dataset_id, int category_id) const {
  auto d = queues_.find(dataset_id);
  if (d == queues_.end()) return nullptr;
  auto c = d->second.find(category_id);
  return c == d->second.end() ? nullptr : &c->second;
}

std::vector<int> VisualCuesBank::populated_categories(int dataset_id) const {
  std::vector<int> out;
  auto d = queues_.find(dataset_id);
  if (d == queues_.end()) return out;
  for (const auto& [category, q] : d->second) {
    if (!q.empty()) out.push_back(category);
  }
  return out;
}

std::vector<int> VisualCuesBank::datasets() const {
  std::vector<int> out;
  for (const auto& entry : queues_) out.push_back(entry.first);
  return out;
}

std::optional<std::vector<float>> VisualCuesBank::mean(int dataset_id, int category_id) const {
  const Queue* q = queue(dataset_id, category_id);
  if (!q || q->empty()) return std::nullopt;
  std::vector<double> acc(q->front().size(), 0.0);
  for (const auto& v : *q) {
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / q->size());
  return out;
}

std::size_t VisualCuesBank::size() const {
  std::size_t n = 0;
  for (const auto& [d, cats] : queues_) {
    for (const auto& [c, q] : cats) n += q.size();
  }
  return n;
}

template <typename T>
std::optional<VisualPromptEmbedding<T>> dmd_aggregate(const VisualCuesBank& bank, int dataset_id,
                                                      int category_id) {
  auto m = bank.mean(dataset_id, category_id);
  if (!m) return std::nullopt;
  std::vector<T> v(m->begin(), m->end());
  const int dim = static_cast<int>(v.size());
  return VisualPromptEmbedding<T>(Tensor<T>(1, dim, std::move(v)), category_id,
                                  PromptSource::kMemory, dataset_id);
}

std::set<int> sample_bank_categories(const VisualCuesBank& bank, int dataset_id, int d,
                                     const std::set<int>& /*positives*/, std::mt19937_64& rng) {
  if (d < 0) throw ValidationError("sample_bank_categories: d must be non-negative");
  std::vector<int> pool = bank.populated_categories(dataset_id);
  const int take = std::min<int>(d, static_cast<int>(pool.size()));
  for (int i = 0; i < take; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  return std::set<int>(pool.begin(), pool.begin() + take);
}

// ---- column sets --------------------------------------------------------------

template <typename T>
Tensor<T> PromptColumnSet<T>::matrix() const {
  std::vector<Tensor<T>> rows;
  rows.reserve(columns.size());
  for (const auto& c : columns) rows.push_back(c.embedding);
  return ag::concat_rows<T>(rows);
}

template <typename T>
std::vector<int> PromptColumnSet<T>::columns_for(int category_id) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (columns[i].category_id == category_id) out.push_back(i);
  }
  return out;
}

template <typename T>
void PromptColumnSet<T>::validate() const {
  std::set<std::pair<int, PromptSource>> seen;
  for (const auto& c : columns) {
    if (!seen.insert({c.category_id, c.source}).second) {
      throw ValidationError("duplicate prompt column for category " + std::to_string(c.category_id));
    }
  }
}

template <typename T>
PromptColumnSet<T> single_source_columns(const std::vector<VisualPromptEmbedding<T>>& prompts) {
  PromptColumnSet<T> out;
  for (const auto& p : prompts) out.columns.push_back({p.category_id(), p.source(), p.vector()});
  out.validate();
  return out;
}

template <typename T>
PromptColumnSet<T> assemble_prompt_columns(const std::vector<VisualPromptEmbedding<T>>& self_prompts,
                                           const BatchPromptTable<T>& table,
                                           const VisualCuesBank& bank, int sample_index, int d,
                                           std::mt19937_64& rng, StrategyFlags flags) {
  PromptColumnSet<T> out;
  std::vector<const VisualPromptEmbedding<T>*> sorted;
  for (const auto& p : self_prompts) {
    sorted.push_back(&p);
    out.positive_categories.insert(p.category_id());
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->category_id() < b->category_id(); });
  const int dataset = table.dataset_id();
  auto add = [&out](const VisualPromptEmbedding<T>& e) {
    out.columns.push_back({e.category_id(), e.source(), e.vector()});
  };
  for (const auto* p : sorted) {
    add(*p);
    if (flags.intra_batch) {
      if (auto b = ibp_aggregate(table, p->category_id(), sample_index)) add(*b);
    }
    if (flags.memory) {
      if (auto m = dmd_aggregate<T>(bank, dataset, p->category_id())) add(*m);
    }
  }

  std::set<int> negatives;
  if (flags.intra_batch) {
    for (int c : table.categories()) {
      if (!out.positive_categories.contains(c)) negatives.insert(c);
    }
  }
  std::set<int> sampled;
  if (flags.memory) {
    sampled = sample_bank_categories(bank, dataset, d, out.positive_categories, rng);
    for (int c : sampled) {
      if (!out.positive_categories.contains(c)) negatives.insert(c);
    }
  }
  for (int c : negatives) {
    if (flags.intra_batch) {
      if (auto b = ibp_aggregate(table, c, sample_index)) add(*b);
    }
    if (sampled.contains(c)) {
      if (auto m = dmd_aggregate<T>(bank, dataset, c)) add(*m);
    }
  }
  out.validate();
  return out;
}

#define PETDUET_PROMPTS_INSTANTIATE(T)                                                          \
  template class BatchPromptTable<T>;                                                           \
  template std::optional<VisualPromptEmbedding<T>> ibp_aggregate(const BatchPromptTable<T>&,    \
                                                                 int, int);                     \
  template void VisualCuesBank::push<T>(const VisualPromptEmbedding<T>&);                       \
  template std::optional<VisualPromptEmbedding<T>> dmd_aggregate<T>(const VisualCuesBank&, int, \
                                                                    int);                       \
  template struct PromptColumnSet<T>;                                                           \
  template PromptColumnSet<T> single_source_columns(const std::vector<VisualPromptEmbedding<T>>&); \
  template PromptColumnSet<T> assemble_prompt_columns(                                          \
      const std::vector<VisualPromptEmbedding<T>>&, const BatchPromptTable<T>&,                 \
      const VisualCuesBank&, int, int, std::mt19937_64&, StrategyFlags);

PETDUET_PROMPTS_INSTANTIATE(float)
PETDUET_PROMPTS_INSTANTIATE(double)

#undef PETDUET_PROMPTS_INSTANTIATE

}  // namespace petduet::prompts
