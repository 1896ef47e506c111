#pragma once

// Gradient-magnitude importance scores over the labeled QA set and the
// per-neuron top-K update mask built from them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/checkpoint.hpp"
#include "leaml/losses.hpp"

namespace leaml {

/// How per-example gradients are reduced into a score.
enum class ScoreRule {
  kMagnitudeOfMean,  // |(1/N) sum_i g_i|
  kMeanOfMagnitude,  // (1/N) sum_i |g_i|; not the published rule, kept for comparison
};

struct ScoreEntry {
  std::string name;
  Shape shape;
  std::size_t neuron_axis = 1;
  std::vector<double> values;

  std::size_t neuron_count() const { return shape[neuron_axis]; }
  std::size_t row_width() const { return shape[1 - neuron_axis]; }
  /// Flat offset of weight `w` in neuron `n`.
  std::size_t offset(std::size_t n, std::size_t w) const {
    return neuron_axis == 1 ? w * shape[1] + n : n * shape[1] + w;
  }
};

struct ScoreTable {
  std::vector<ScoreEntry> entries;
  std::size_t example_count = 0;

  const ScoreEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

/// Scores every selectable tensor from the QA-loss gradient of each labeled
/// example, reduced in example order.
template <typename T>
ScoreTable accumulate_scores(const ModelConfig& config, const ParameterStore<T>& params,
                             std::span<const LabeledExample> labeled, const Vocabulary& vocab,
                             ScoreRule rule = ScoreRule::kMagnitudeOfMean) {
  if (labeled.empty()) throw InvalidInput("accumulate_scores: empty labeled set");
  ScoreTable table;
  table.example_count = labeled.size();
  std::vector<const Parameter<T>*> selected;
  for (const auto& p : params.parameters()) {
    if (!p.selectable()) continue;
    selected.push_back(&p);
    table.entries.push_back({p.name, p.tensor->shape, p.neuron_axis,
                             std::vector<double>(p.tensor->size(), 0.0)});
  }
  for (const auto& example : labeled) {
    params.zero_grad();
    Tape<T> tape;
    auto loss = qa_loss(tape, config, params, std::span<const LabeledExample>(&example, 1), vocab);
    tape.backward(loss);
    for (std::size_t k = 0; k < selected.size(); ++k) {
      const auto& g = selected[k]->tensor->grad;
      auto& acc = table.entries[k].values;
      if (rule == ScoreRule::kMagnitudeOfMean) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<double>(g[i]);
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += std::abs(static_cast<double>(g[i]));
      }
    }
  }
  params.zero_grad();
  const double n = static_cast<double>(labeled.size());
  for (auto& e : table.entries)
    for (auto& v : e.values) v = std::abs(v / n);
  return table;
}

/// What happens to tensors that are not eligible for selection.
enum class NonSelectablePolicy { kFrozen, kTrainable };

/// Immutable per-coordinate trainability for every selectable tensor.
class UpdateMask {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t neuron_axis;
    std::vector<std::uint8_t> trainable;
  };

  UpdateMask(std::vector<Entry> entries, std::size_t k, NonSelectablePolicy policy)
      : entries_(std::move(entries)), k_(k), policy_(policy) {}

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t k() const { return k_; }
  NonSelectablePolicy non_selectable_policy() const { return policy_; }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      for (auto b : e.trainable) n += b;
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::size_t k_;
  NonSelectablePolicy policy_;
};

/// Indices of the K best scores in a row: higher score first, lower index on ties.
inline std::vector<std::size_t> top_k_indices(std::span<const double> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t keep = std::min(k, row.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (row[a] != row[b]) return row[a] > row[b];
                      return a < b;
                    });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline UpdateMask build_mask(const ScoreTable& scores, std::size_t k,
                             NonSelectablePolicy policy = NonSelectablePolicy::kFrozen) {
  if (k < 1) throw InvalidInput("build_mask: K must be at least 1");
  std::vector<UpdateMask::Entry> entries;
  std::vector<double> row;
  for (const auto& s : scores.entries) {
    UpdateMask::Entry e{s.name, s.shape, s.neuron_axis, std::vector<std::uint8_t>(s.values.size(), 0)};
    const std::size_t width = s.row_width();
    row.resize(width);
    for (std::size_t n = 0; n < s.neuron_count(); ++n) {
      for (std::size_t w = 0; w < width; ++w) row[w] = s.values[s.offset(n, w)];
      for (auto w : top_k_indices(row, k)) e.trainable[s.offset(n, w)] = 1;
    }
    entries.push_back(std::move(e));
  }
  return UpdateMask(std::move(entries), k, policy);
}

/// Summary of a mask for analysis output.
struct SelectionReport {
  struct TensorSummary {
    std::string name;
    int layer = -1;  // -1 for tensors outside the transformer stack
    std::size_t neurons = 0;
    std::size_t row_width = 0;
    std::size_t selected = 0;
    std::size_t total = 0;
    double selected_fraction = 0.0;
    std::vector<std::size_t> score_histogram;  // log10 bins, see kHistogramEdges
    bool operator==(const TensorSummary&) const = default;
  };
  std::size_t k = 0;
  std::size_t example_count = 0;
  std::vector<TensorSummary> tensors;
  std::vector<double> layer_density;  // selected / total per transformer layer
  std::size_t total_selected = 0;
  std::size_t total_selectable = 0;
  bool operator==(const SelectionReport&) const = default;

  /// Bin b counts scores in [10^(b-13), 10^(b-12)); bin 0 also holds exact zeros and
  /// the last bin everything >= 1.
  static constexpr int kHistogramBins = 14;
};

inline int layer_of(const std::string& name) {
  if (!name.starts_with("layers.")) return -1;
  return std::stoi(name.substr(7, name.find('.', 7) - 7));
}

inline SelectionReport selection_report(const ScoreTable& scores, const UpdateMask& mask) {
  SelectionReport r;
  r.k = mask.k();
  r.example_count = scores.example_count;
  int max_layer = -1;
  for (const auto& e : mask.entries()) {
    const auto* s = scores.find(e.name);
    if (!s || s->values.size() != e.trainable.size()) {
      throw InvalidInput("selection_report: mask tensor '" + e.name + "' has no matching scores");
    }
    SelectionReport::TensorSummary t;
    t.name = e.name;
    t.layer = layer_of(e.name);
    t.neurons = e.shape[e.neuron_axis];
    t.row_width = e.shape[1 - e.neuron_axis];
    t.total = e.trainable.size();
    for (auto b : e.trainable) t.selected += b;
    t.selected_fraction = static_cast<double>(t.selected) / static_cast<double>(t.total);
    t.score_histogram.assign(SelectionReport::kHistogramBins, 0);
    for (double v : s->values) {
      int bin = 0;
      if (v > 0) bin = std::clamp(static_cast<int>(std::floor(std::log10(v))) + 13, 0,
                                  SelectionReport::kHistogramBins - 1);
      ++t.score_histogram[static_cast<std::size_t>(bin)];
    }
    r.total_selected += t.selected;
    r.total_selectable += t.total;
    max_layer = std::max(max_layer, t.layer);
    r.tensors.push_back(std::move(t));
  }
  std::vector<std::size_t> sel(static_cast<std::size_t>(max_layer + 1), 0), tot(sel.size(), 0);
  for (const auto& t : r.tensors) {
    if (t.layer < 0) continue;
    sel[static_cast<std::size_t>(t.layer)] += t.selected;
    tot[static_cast<std::size_t>(t.layer)] += t.total;
  }
  for (std::size_t l = 0; l < sel.size(); ++l)
    r.layer_density.push_back(tot[l] ? static_cast<double>(sel[l]) / static_cast<double>(tot[l]) : 0.0);
  return r;
}

inline void to_json(nlohmann::json& j, const SelectionReport::TensorSummary& t) {
  j = {{"name", t.name},         {"layer", t.layer},       {"neurons", t.neurons},
       {"row_width", t.row_width}, {"selected", t.selected}, {"total", t.total},
       {"selected_fraction", t.selected_fraction}, {"score_histogram", t.score_histogram}};
}

inline void from_json(const nlohmann::json& j, SelectionReport::TensorSummary& t) {
  j.at("name").get_to(t.name);
  j.at("layer").get_to(t.layer);
  j.at("neurons").get_to(t.neurons);
  j.at("row_width").get_to(t.row_width);
  j.at("selected").get_to(t.selected);
  j.at("total").get_to(t.total);
  j.at("selected_fraction").get_to(t.selected_fraction);
  j.at("score_histogram").get_to(t.score_histogram);
}

inline void to_json(nlohmann::json& j, const SelectionReport& r) {
  j = {{"k", r.k},
       {"example_count", r.example_count},
       {"tensors", r.tensors},
       {"layer_density", r.layer_density},
       {"total_selected", r.total_selected},
       {"total_selectable", r.total_selectable}};
}

inline void from_json(const nlohmann::json& j, SelectionReport& r) {
  j.at("k").get_to(r.k);
  j.at("example_count").get_to(r.example_count);
  j.at("tensors").get_to(r.tensors);
  j.at("layer_density").get_to(r.layer_density);
  j.at("total_selected").get_to(r.total_selected);
  j.at("total_selectable").get_to(r.total_selectable);
}

// Scores and masks persist in the checkpoint container, one record per
// selectable tensor, named after the parameter it describes. Scores are stored
// as f32; masks as 0/1 values.

inline void save_scores(const std::filesystem::path& path, const ModelConfig& config,
                        const ScoreTable& scores, std::uint64_t config_hash = 0) {
  Container c{ArtifactKind::kScores, config_hash, config, {}};
  for (const auto& e : scores.entries)
    c.records.push_back({e.name, e.shape, std::vector<float>(e.values.begin(), e.values.end())});
  c.records.push_back({"__example_count", {1}, {static_cast<float>(scores.example_count)}});
  write_container(path, c);
}

inline ScoreTable load_scores(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.kind != ArtifactKind::kScores) {
    throw CheckpointError(CheckpointErrorCode::kMalformed, path.string() + " is not a score artifact");
  }
  ScoreTable t;
  for (auto& r : c.records) {
    if (r.name == "__example_count") {
      t.example_count = static_cast<std::size_t>(r.data.at(0));
      continue;
    }
    if (r.shape.size() != 2) throw CheckpointError(CheckpointErrorCode::kMalformed, "score tensor must be 2-D");
    t.entries.push_back({r.name, r.shape, 1, std::vector<double>(r.data.begin(), r.data.end())});
  }
  return t;
}

inline void save_mask(const std::filesystem::path& path, const ModelConfig& config, const UpdateMask& mask,
                      std::uint64_t config_hash = 0) {
  Container c{ArtifactKind::kMask, config_hash, config, {}};
  for (const auto& e : mask.entries())
    c.records.push_back({e.name, e.shape, std::vector<float>(e.trainable.begin(), e.trainable.end())});
  c.records.push_back({"__k", {1}, {static_cast<float>(mask.k())}});
  c.records.push_back({"__policy", {1}, {mask.non_selectable_policy() == NonSelectablePolicy::kFrozen ? 0.f : 1.f}});
  write_container(path, c);
}

inline UpdateMask load_mask(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.kind != ArtifactKind::kMask) {
    throw CheckpointError(CheckpointErrorCode::kMalformed, path.string() + " is not a mask artifact");
  }
  std::vector<UpdateMask::Entry> entries;
  std::size_t k = 0;
  auto policy = NonSelectablePolicy::kFrozen;
  for (auto& r : c.records) {
    if (r.name == "__k") {
      k = static_cast<std::size_t>(r.data.at(0));
    } else if (r.name == "__policy") {
      policy = r.data.at(0) == 0.f ? NonSelectablePolicy::kFrozen : NonSelectablePolicy::kTrainable;
    } else {
      if (r.shape.size() != 2) throw CheckpointError(CheckpointErrorCode::kMalformed, "mask tensor must be 2-D");
      UpdateMask::Entry e{r.name, r.shape, 1, {}};
      for (float v : r.data) {
        if (v != 0.f && v != 1.f) throw CheckpointError(CheckpointErrorCode::kMalformed, "mask values must be 0 or 1");
        e.trainable.push_back(v == 1.f ? 1 : 0);
      }
      entries.push_back(std::move(e));
    }
  }
  return UpdateMask(std::move(entries), k, policy);
}

}  // namespace leaml
