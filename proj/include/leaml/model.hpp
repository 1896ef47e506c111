#pragma once

// Decoder-only transformer with a projected visual prefix.
//
// Linear weights are stored [in x out] so that y = x * W. The output-neuron
// axis is therefore axis 1: neuron j owns column j.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/dataset.hpp"
#include "leaml/ops.hpp"
#include "leaml/rng.hpp"
#include "leaml/vocab.hpp"

namespace leaml {

struct ModelConfig {
  std::uint32_t vocab_size = 0;
  std::uint32_t d_model = 128;
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ff = 512;
  std::uint32_t max_seq_len = 64;
  std::uint32_t visual_dim = 32;
  std::uint32_t visual_prefix_len = 4;

  bool operator==(const ModelConfig&) const = default;

  /// Token budget left for text once the visual prefix is placed.
  std::size_t max_text_len() const { return max_seq_len - visual_prefix_len; }

  void validate() const {
    if (vocab_size <= static_cast<std::uint32_t>(tok::kNumSpecial)) {
      throw InvalidInput("model vocab_size must exceed the special-token count");
    }
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || visual_dim == 0 ||
        visual_prefix_len == 0) {
      throw InvalidInput("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) throw InvalidInput("d_model must be divisible by n_heads");
    if (max_seq_len <= visual_prefix_len) {
      throw InvalidInput("max_seq_len must leave room for text after the visual prefix");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len},
       {"visual_dim", c.visual_dim}, {"visual_prefix_len", c.visual_prefix_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.visual_dim = j.value("visual_dim", d.visual_dim);
  c.visual_prefix_len = j.value("visual_prefix_len", d.visual_prefix_len);
}

enum class ParamKind : std::uint8_t { kLinear, kEmbedding, kBias, kNorm };

template <typename T>
struct Parameter {
  std::string name;
  ParamKind kind;
  Var<T> tensor;
  std::size_t neuron_axis = 1;  // meaningful for kLinear only

  /// Linear weights are the only tensors eligible for per-neuron selection.
  bool selectable() const { return kind == ParamKind::kLinear; }
};

/// Named parameter tensors with gradient buffers, in a fixed registration order.
template <typename T>
class ParameterStore {
 public:
  Var<T> add(const std::string& name, ParamKind kind, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw InvalidInput("duplicate parameter name '" + name + "'");
    auto t = make_var<T>(std::move(shape), std::move(values), true);
    index_.emplace(name, params_.size());
    params_.push_back({name, kind, t, 1});
    return t;
  }

  const Var<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("no parameter named '" + name + "'");
    return params_[it->second].tensor;
  }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor->size();
    return n;
  }

  void zero_grad() const {
    for (const auto& p : params_) p.tensor->zero_grad();
  }

  /// Deep copy (tensors are not shared with the source).
  ParameterStore clone() const { return cast<T>(); }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      std::vector<U> v(p.tensor->data.begin(), p.tensor->data.end());
      out.add(p.name, p.kind, p.tensor->shape, std::move(v));
    }
    return out;
  }

  bool bit_equal(const ParameterStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = params_[i];
      const auto& b = other.params_[i];
      if (a.name != b.name || a.tensor->shape != b.tensor->shape) return false;
      if (std::memcmp(a.tensor->data.data(), b.tensor->data.data(), a.tensor->size() * sizeof(T)) != 0)
        return false;
    }
    return true;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

namespace names {
inline std::string layer(std::size_t l, const char* leaf) {
  return "layers." + std::to_string(l) + "." + leaf;
}
}  // namespace names

/// One entry of the fixed parameter layout implied by a config.
struct ParamSpec {
  std::string name;
  ParamKind kind;
  Shape shape;
};

inline std::vector<ParamSpec> parameter_layout(const ModelConfig& c) {
  const std::size_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
  std::vector<ParamSpec> out = {
      {"tok_emb", ParamKind::kEmbedding, {v, d}},
      {"pos_emb", ParamKind::kEmbedding, {c.max_seq_len, d}},
      {"vis_proj.w", ParamKind::kLinear, {c.visual_dim, d}},
      {"vis_proj.b", ParamKind::kBias, {d}},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.push_back({names::layer(l, "ln1.g"), ParamKind::kNorm, {d}});
    out.push_back({names::layer(l, "ln1.b"), ParamKind::kNorm, {d}});
    out.push_back({names::layer(l, "attn.wq"), ParamKind::kLinear, {d, d}});
    out.push_back({names::layer(l, "attn.wk"), ParamKind::kLinear, {d, d}});
    out.push_back({names::layer(l, "attn.wv"), ParamKind::kLinear, {d, d}});
    out.push_back({names::layer(l, "attn.wo"), ParamKind::kLinear, {d, d}});
    out.push_back({names::layer(l, "ln2.g"), ParamKind::kNorm, {d}});
    out.push_back({names::layer(l, "ln2.b"), ParamKind::kNorm, {d}});
    out.push_back({names::layer(l, "ffn.w1"), ParamKind::kLinear, {d, ff}});
    out.push_back({names::layer(l, "ffn.b1"), ParamKind::kBias, {ff}});
    out.push_back({names::layer(l, "ffn.w2"), ParamKind::kLinear, {ff, d}});
    out.push_back({names::layer(l, "ffn.b2"), ParamKind::kBias, {d}});
  }
  out.push_back({"ln_f.g", ParamKind::kNorm, {d}});
  out.push_back({"ln_f.b", ParamKind::kNorm, {d}});
  out.push_back({"head.w", ParamKind::kLinear, {d, v}});
  return out;
}

/// Deterministic scaled-uniform initialization; each tensor draws from its own
/// stream derived from (seed, tensor index).
template <typename T>
ParameterStore<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterStore<T> store;
  const auto layout = parameter_layout(config);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    const std::size_t n = shape_size(spec.shape);
    std::vector<T> values(n, T(0));
    Rng rng(derive_seed({seed, 0x1417, i}));
    double bound = 0.0;
    switch (spec.kind) {
      case ParamKind::kLinear: {
        bound = 1.0 / std::sqrt(static_cast<double>(spec.shape[0]));
        const bool residual_out = spec.name.ends_with("attn.wo") || spec.name.ends_with("ffn.w2");
        if (residual_out) bound *= residual_scale;
        if (spec.name == "head.w") bound *= 0.5;
        break;
      }
      case ParamKind::kEmbedding:
        bound = spec.name == "pos_emb" ? 0.02 : 0.1;
        break;
      case ParamKind::kNorm:
        if (spec.name.ends_with(".g")) std::fill(values.begin(), values.end(), T(1));
        break;
      case ParamKind::kBias:
        break;
    }
    if (bound > 0.0)
      for (auto& x : values) x = static_cast<T>(rng.uniform(-bound, bound));
    store.add(spec.name, spec.kind, spec.shape, std::move(values));
  }
  return store;
}

/// Stacks visual features into a [n_visuals * rows x dim] tensor.
template <typename T>
Var<T> stack_visuals(const ModelConfig& config, std::span<const VisualInput* const> visuals) {
  std::vector<T> data;
  data.reserve(visuals.size() * config.visual_prefix_len * config.visual_dim);
  for (const auto* v : visuals) {
    if (v->rows != config.visual_prefix_len || v->dim != config.visual_dim) {
      throw DimensionError("visual input [" + std::to_string(v->rows) + "x" + std::to_string(v->dim) +
                           "] does not match model prefix [" +
                           std::to_string(config.visual_prefix_len) + "x" +
                           std::to_string(config.visual_dim) + "]");
    }
    for (double x : v->features) data.push_back(static_cast<T>(x));
  }
  return make_var<T>({visuals.size() * config.visual_prefix_len, config.visual_dim}, std::move(data));
}

/// Batched forward pass. ids holds batch sequences of equal length seq_len,
/// row-major. Returns logits [batch*seq_len x vocab] for the text positions.
template <typename T>
Var<T> forward_batch(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                     std::span<const VisualInput* const> visuals, std::span<const TokenId> ids,
                     std::size_t seq_len) {
  const std::size_t batch = visuals.size();
  const std::size_t prefix = config.visual_prefix_len;
  const std::size_t total = prefix + seq_len;
  if (batch == 0 || seq_len == 0 || ids.size() != batch * seq_len) {
    throw DimensionError("forward: " + std::to_string(ids.size()) + " ids for batch " +
                         std::to_string(batch) + " x length " + std::to_string(seq_len));
  }
  if (total > config.max_seq_len) {
    throw DimensionError("forward: prefix " + std::to_string(prefix) + " + text " +
                         std::to_string(seq_len) + " exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
  }
  auto vis = stack_visuals<T>(config, visuals);
  auto vis_emb = add_bias(tape, matmul(tape, vis, params.at("vis_proj.w")), params.at("vis_proj.b"));
  auto tok_emb = embedding_gather(tape, params.at("tok_emb"), ids);

  // Interleave: [prefix_b, text_b] per sequence.
  std::vector<std::size_t> order;
  order.reserve(batch * total);
  std::vector<std::size_t> positions;
  positions.reserve(batch * total);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t r = 0; r < prefix; ++r) order.push_back(b * prefix + r);
    for (std::size_t t = 0; t < seq_len; ++t) order.push_back(batch * prefix + b * seq_len + t);
    for (std::size_t p = 0; p < total; ++p) positions.push_back(p);
  }
  auto x = gather_rows(tape, concat_rows(tape, std::vector<Var<T>>{vis_emb, tok_emb}),
                       std::span<const std::size_t>(order));
  x = add(tape, x, gather_rows(tape, params.at("pos_emb"), std::span<const std::size_t>(positions)));

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    auto h = layernorm(tape, x, params.at(names::layer(l, "ln1.g")), params.at(names::layer(l, "ln1.b")));
    auto q = matmul(tape, h, params.at(names::layer(l, "attn.wq")));
    auto k = matmul(tape, h, params.at(names::layer(l, "attn.wk")));
    auto v = matmul(tape, h, params.at(names::layer(l, "attn.wv")));
    auto a = causal_attention(tape, q, k, v, batch, total, config.n_heads);
    x = add(tape, x, matmul(tape, a, params.at(names::layer(l, "attn.wo"))));
    auto h2 = layernorm(tape, x, params.at(names::layer(l, "ln2.g")), params.at(names::layer(l, "ln2.b")));
    auto f = add_bias(tape, matmul(tape, h2, params.at(names::layer(l, "ffn.w1"))),
                      params.at(names::layer(l, "ffn.b1")));
    f = add_bias(tape, matmul(tape, gelu(tape, f), params.at(names::layer(l, "ffn.w2"))),
                 params.at(names::layer(l, "ffn.b2")));
    x = add(tape, x, f);
  }
  x = layernorm(tape, x, params.at("ln_f.g"), params.at("ln_f.b"));
  std::vector<std::size_t> text_rows;
  text_rows.reserve(batch * seq_len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq_len; ++t) text_rows.push_back(b * total + prefix + t);
  auto text = gather_rows(tape, x, std::span<const std::size_t>(text_rows));
  return matmul(tape, text, params.at("head.w"));
}

/// Single-sequence forward: logits [len(ids) x vocab].
template <typename T>
Var<T> forward(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
               const VisualInput& visual, std::span<const TokenId> ids) {
  const VisualInput* v = &visual;
  return forward_batch(tape, config, params, std::span<const VisualInput* const>(&v, 1), ids,
                       ids.size());
}

}  // namespace leaml
