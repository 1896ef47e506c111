#pragma once

// Incremental decoding with a per-stream key/value cache, greedy and nucleus
// token selection, and pseudo QA synthesis over unlabeled visuals.
//
// The cached decoder runs the same row kernels as the taped forward pass, so
// its logits are bit-identical to forward() on the same prefix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/model.hpp"
#include "leaml/rng.hpp"
#include "leaml/sequence.hpp"

namespace leaml {

template <typename T>
class CachedDecoder {
 public:
  CachedDecoder(const ModelConfig& config, const ParameterStore<T>& params, std::size_t streams)
      : config_(config), streams_(streams), pos_(streams, 0) {
    config.validate();
    const std::size_t d = config.d_model;
    tok_emb_ = params.at("tok_emb").get();
    pos_emb_ = params.at("pos_emb").get();
    vis_w_ = params.at("vis_proj.w").get();
    vis_b_ = params.at("vis_proj.b").get();
    ln_f_g_ = params.at("ln_f.g").get();
    ln_f_b_ = params.at("ln_f.b").get();
    head_ = params.at("head.w").get();
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      Layer L;
      L.ln1_g = params.at(names::layer(l, "ln1.g")).get();
      L.ln1_b = params.at(names::layer(l, "ln1.b")).get();
      L.wq = params.at(names::layer(l, "attn.wq")).get();
      L.wk = params.at(names::layer(l, "attn.wk")).get();
      L.wv = params.at(names::layer(l, "attn.wv")).get();
      L.wo = params.at(names::layer(l, "attn.wo")).get();
      L.ln2_g = params.at(names::layer(l, "ln2.g")).get();
      L.ln2_b = params.at(names::layer(l, "ln2.b")).get();
      L.w1 = params.at(names::layer(l, "ffn.w1")).get();
      L.b1 = params.at(names::layer(l, "ffn.b1")).get();
      L.w2 = params.at(names::layer(l, "ffn.w2")).get();
      L.b2 = params.at(names::layer(l, "ffn.b2")).get();
      L.k_cache.assign(streams * config.max_seq_len * d, T(0));
      L.v_cache.assign(streams * config.max_seq_len * d, T(0));
      layers_.push_back(std::move(L));
    }
  }

  std::size_t streams() const { return streams_; }
  std::size_t position(std::size_t stream) const { return pos_[stream]; }
  std::size_t vocab_size() const { return config_.vocab_size; }

  /// Resets the listed streams and feeds their visual prefixes.
  void prime(std::span<const std::size_t> streams, std::span<const VisualInput* const> visuals) {
    if (streams.size() != visuals.size()) throw DimensionError("prime: streams and visuals differ in count");
    for (auto s : streams) pos_.at(s) = 0;
    const std::size_t d = config_.d_model, vd = config_.visual_dim;
    auto vis = stack_visuals<T>(config_, visuals);
    const std::size_t n = streams.size();
    std::vector<T> row_in(n * vd), x(n * d);
    for (std::size_t r = 0; r < config_.visual_prefix_len; ++r) {
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(vis->data.data() + (i * config_.visual_prefix_len + r) * vd, vd, row_in.data() + i * vd);
      std::fill(x.begin(), x.end(), T(0));
      kernels::gemm_acc(row_in.data(), vis_w_->data.data(), x.data(), n, vd, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) x[i * d + c] = x[i * d + c] + vis_b_->data[c];
      advance(streams, x);
    }
  }

  /// Feeds one token per listed stream; returns next-token logits [n x vocab].
  std::vector<T> feed(std::span<const std::size_t> streams, std::span<const TokenId> tokens) {
    if (streams.size() != tokens.size()) throw DimensionError("feed: streams and tokens differ in count");
    const std::size_t d = config_.d_model, n = streams.size();
    std::vector<T> x(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = tokens[i];
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw InvalidInput("feed: token id " + std::to_string(id) + " outside vocabulary");
      }
      std::copy_n(tok_emb_->data.data() + static_cast<std::size_t>(id) * d, d, x.data() + i * d);
    }
    auto h = advance(streams, x);
    std::vector<T> logits(n * config_.vocab_size, T(0));
    kernels::gemm_acc(h.data(), head_->data.data(), logits.data(), n, d, config_.vocab_size);
    return logits;
  }

 private:
  struct Layer {
    const Tensor<T>*ln1_g, *ln1_b, *wq, *wk, *wv, *wo, *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
    std::vector<T> k_cache, v_cache;  // [stream][position][d]
  };

  /// Adds position embeddings to x (already holding the input embedding), runs
  /// every layer, caches keys/values, and returns the final normalized rows.
  std::vector<T> advance(std::span<const std::size_t> streams, std::vector<T>& x) {
    const std::size_t d = config_.d_model, n = streams.size(), ff = config_.d_ff;
    const std::size_t heads = config_.n_heads, dh = d / heads, max_len = config_.max_seq_len;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t p = pos_.at(streams[i]);
      if (p >= max_len) throw DimensionError("decoder stream exceeded max_seq_len");
      for (std::size_t c = 0; c < d; ++c) x[i * d + c] = x[i * d + c] + pos_emb_->data[p * d + c];
    }
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> h(n * d), q(n * d), k(n * d), v(n * d), a(n * d), proj(n * d), f1(n * ff), probs(max_len);
    for (auto& L : layers_) {
      for (std::size_t i = 0; i < n; ++i)
        kernels::layernorm_row(x.data() + i * d, L.ln1_g->data.data(), L.ln1_b->data.data(), d,
                               h.data() + i * d, static_cast<T*>(nullptr), static_cast<T*>(nullptr));
      std::fill(q.begin(), q.end(), T(0));
      std::fill(k.begin(), k.end(), T(0));
      std::fill(v.begin(), v.end(), T(0));
      kernels::gemm_acc(h.data(), L.wq->data.data(), q.data(), n, d, d);
      kernels::gemm_acc(h.data(), L.wk->data.data(), k.data(), n, d, d);
      kernels::gemm_acc(h.data(), L.wv->data.data(), v.data(), n, d, d);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = streams[i], p = pos_[s];
        T* kc = L.k_cache.data() + s * max_len * d;
        T* vc = L.v_cache.data() + s * max_len * d;
        std::copy_n(k.data() + i * d, d, kc + p * d);
        std::copy_n(v.data() + i * d, d, vc + p * d);
        for (std::size_t hh = 0; hh < heads; ++hh)
          kernels::attend_row(q.data() + i * d + hh * dh, kc + hh * dh, vc + hh * dh, d, p + 1, dh, sc,
                              a.data() + i * d + hh * dh, probs.data());
      }
      std::fill(proj.begin(), proj.end(), T(0));
      kernels::gemm_acc(a.data(), L.wo->data.data(), proj.data(), n, d, d);
      for (std::size_t j = 0; j < n * d; ++j) x[j] = x[j] + proj[j];
      for (std::size_t i = 0; i < n; ++i)
        kernels::layernorm_row(x.data() + i * d, L.ln2_g->data.data(), L.ln2_b->data.data(), d,
                               h.data() + i * d, static_cast<T*>(nullptr), static_cast<T*>(nullptr));
      std::fill(f1.begin(), f1.end(), T(0));
      kernels::gemm_acc(h.data(), L.w1->data.data(), f1.data(), n, d, ff);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ff; ++c) f1[i * ff + c] = kernels::gelu(f1[i * ff + c] + L.b1->data[c]);
      std::fill(proj.begin(), proj.end(), T(0));
      kernels::gemm_acc(f1.data(), L.w2->data.data(), proj.data(), n, ff, d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) x[i * d + c] = x[i * d + c] + (proj[i * d + c] + L.b2->data[c]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      kernels::layernorm_row(x.data() + i * d, ln_f_g_->data.data(), ln_f_b_->data.data(), d, h.data() + i * d,
                             static_cast<T*>(nullptr), static_cast<T*>(nullptr));
      ++pos_[streams[i]];
    }
    return h;
  }

  ModelConfig config_;
  std::size_t streams_;
  std::vector<std::size_t> pos_;
  const Tensor<T>*tok_emb_, *pos_emb_, *vis_w_, *vis_b_, *ln_f_g_, *ln_f_b_, *head_;
  std::vector<Layer> layers_;
};

/// Index of the largest value; ties go to the lowest index.
template <typename T>
TokenId argmax_token(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<TokenId>(best);
}

enum class DecodeMode { kGreedy, kNucleus };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kNucleus;
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_new_tokens = 48;
  std::size_t samples_per_visual = 3;
  std::uint64_t rng_seed = 0;
  /// EOS/PAD are barred from the nucleus until this many tokens are generated.
  std::size_t min_new_tokens = 3;
  /// Synthesis prompt is [BOS, <q>] instead of [BOS]; the delimiter tells the
  /// generator to write a QA pair rather than a caption.
  bool open_question = true;

  void validate() const {
    if (mode == DecodeMode::kNucleus) {
      if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidInput("top_p must lie in (0, 1]");
      if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
    }
    if (max_new_tokens == 0) throw InvalidInput("max_new_tokens must be positive");
    if (samples_per_visual == 0) throw InvalidInput("samples_per_visual must be at least 1");
  }
};

struct DecodeOutput {
  std::vector<TokenId> tokens;  // generated tokens, including the final EOS when reached
  bool hit_limit = false;       // stopped by max_new_tokens rather than EOS
};

/// Greedy decoding for many (visual, prompt) pairs in lockstep.
template <typename T>
std::vector<DecodeOutput> greedy_decode_batch(const ModelConfig& config, const ParameterStore<T>& params,
                                              std::span<const VisualInput* const> visuals,
                                              std::span<const std::vector<TokenId>> prompts,
                                              std::size_t max_new_tokens) {
  const std::size_t n = visuals.size();
  if (prompts.size() != n) throw DimensionError("greedy_decode: visuals and prompts differ in count");
  std::vector<DecodeOutput> out(n);
  if (n == 0) return out;
  for (const auto& p : prompts) {
    if (p.empty()) throw InvalidInput("greedy_decode: empty prompt");
    if (config.visual_prefix_len + p.size() > config.max_seq_len) {
      throw DimensionError("greedy_decode: prompt does not fit in max_seq_len");
    }
  }
  CachedDecoder<T> dec(config, params, n);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  dec.prime(all, visuals);
  std::vector<std::size_t> fed(n, 0);
  std::vector<bool> done(n, false);
  const std::size_t vocab = config.vocab_size;
  std::vector<std::size_t> active;
  std::vector<TokenId> next;
  while (true) {
    active.clear();
    next.clear();
    for (std::size_t s = 0; s < n; ++s) {
      if (done[s]) continue;
      if (config.visual_prefix_len + fed[s] >= config.max_seq_len) {
        out[s].hit_limit = true;
        done[s] = true;
        continue;
      }
      active.push_back(s);
      next.push_back(fed[s] < prompts[s].size() ? prompts[s][fed[s]]
                                                : out[s].tokens[fed[s] - prompts[s].size()]);
    }
    if (active.empty()) break;
    auto logits = dec.feed(active, next);
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t s = active[i];
      ++fed[s];
      if (fed[s] < prompts[s].size()) continue;
      const TokenId t = argmax_token(std::span<const T>(logits.data() + i * vocab, vocab));
      out[s].tokens.push_back(t);
      if (t == tok::kEos) {
        done[s] = true;
      } else if (out[s].tokens.size() >= max_new_tokens) {
        out[s].hit_limit = true;
        done[s] = true;
      }
    }
  }
  return out;
}

template <typename T>
DecodeOutput greedy_decode(const ModelConfig& config, const ParameterStore<T>& params, const VisualInput& visual,
                           std::span<const TokenId> prompt, std::size_t max_new_tokens = 48) {
  const VisualInput* v = &visual;
  std::vector<std::vector<TokenId>> prompts{std::vector<TokenId>(prompt.begin(), prompt.end())};
  return greedy_decode_batch(config, params, std::span<const VisualInput* const>(&v, 1),
                             std::span<const std::vector<TokenId>>(prompts), max_new_tokens)[0];
}

/// Sorted-prefix (top-p) sampling. Tokens are ordered by descending
/// probability, lower id first on ties; the nucleus is the shortest prefix whose
/// mass reaches top_p. When `nucleus` is non-null it receives the nucleus ids.
inline TokenId nucleus_sample(std::span<const double> probs, double top_p, Rng& rng,
                              std::vector<TokenId>* nucleus = nullptr) {
  if (probs.empty()) throw InvalidInput("nucleus_sample: empty distribution");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InvalidInput("nucleus_sample: top_p must lie in (0, 1]");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidInput("nucleus_sample: invalid probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidInput("nucleus_sample: probabilities do not sum to 1");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  std::size_t keep = 0;
  double mass = 0.0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= top_p) break;
  }
  // Drop zero-probability tail entries that can only appear when top_p == 1.
  while (keep > 1 && probs[order[keep - 1]] == 0.0) {
    --keep;
  }
  if (nucleus) nucleus->assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  double nucleus_mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) nucleus_mass += probs[order[i]];
  const double u = rng.uniform() * nucleus_mass;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += probs[order[i]];
    if (u < acc) return static_cast<TokenId>(order[i]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

/// Softmax at a temperature, computed in double. Ids in `excluded` get zero mass.
template <typename T>
std::vector<double> softmax_probs(std::span<const T> logits, double temperature,
                                  std::span<const TokenId> excluded = {}) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  std::vector<bool> skip(logits.size(), false);
  for (auto id : excluded) skip[static_cast<std::size_t>(id)] = true;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (!skip[i]) mx = std::max(mx, static_cast<double>(logits[i]) / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = skip[i] ? 0.0 : std::exp(static_cast<double>(logits[i]) / temperature - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

inline std::vector<TokenId> synthesis_prompt(const DecodeConfig& decode) {
  if (decode.open_question) return {tok::kBos, tok::kQOpen};
  return {tok::kBos};
}

/// One sampled sequence per (visual, rng seed) pair, decoded in lockstep from
/// the shared `prompt`. When `nucleus_log` is non-null, entry i receives the
/// nucleus of every sampling step of stream i.
template <typename T>
std::vector<DecodeOutput> sample_batch(const ModelConfig& config, const ParameterStore<T>& params,
                                       std::span<const VisualInput* const> visuals,
                                       std::span<const std::uint64_t> seeds, const DecodeConfig& decode,
                                       std::vector<std::vector<std::vector<TokenId>>>* nucleus_log = nullptr,
                                       std::span<const TokenId> prompt = {}) {
  decode.validate();
  const std::size_t n = visuals.size();
  if (seeds.size() != n) throw DimensionError("sample_batch: one seed per visual is required");
  std::vector<DecodeOutput> out(n);
  if (n == 0) return out;
  const TokenId bos_only[] = {tok::kBos};
  if (prompt.empty()) prompt = bos_only;
  if (prompt.size() >= config.max_text_len()) throw DimensionError("sample_batch: prompt does not fit");
  CachedDecoder<T> dec(config, params, n);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  dec.prime(all, visuals);
  for (std::size_t t = 0; t + 1 < prompt.size(); ++t) {
    std::vector<TokenId> step(n, prompt[t]);
    dec.feed(all, step);
  }
  std::vector<Rng> rngs;
  for (auto s : seeds) rngs.emplace_back(s);
  if (nucleus_log) nucleus_log->assign(n, {});
  std::vector<std::size_t> active = all;
  std::vector<TokenId> next(n, prompt.back());
  const std::size_t vocab = config.vocab_size;
  const std::size_t budget = std::min(decode.max_new_tokens, config.max_text_len() - prompt.size());
  const TokenId early_block[] = {tok::kEos, tok::kPad};
  std::vector<TokenId> nucleus;
  while (!active.empty()) {
    auto logits = dec.feed(active, next);
    std::vector<std::size_t> still;
    std::vector<TokenId> upcoming;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t s = active[i];
      std::span<const T> row(logits.data() + i * vocab, vocab);
      TokenId t;
      if (decode.mode == DecodeMode::kGreedy) {
        t = argmax_token(row);
      } else {
        const bool early = out[s].tokens.size() < decode.min_new_tokens;
        auto probs = softmax_probs(row, decode.temperature,
                                   early ? std::span<const TokenId>(early_block) : std::span<const TokenId>());
        t = nucleus_sample(probs, decode.top_p, rngs[s], nucleus_log ? &nucleus : nullptr);
        if (nucleus_log) (*nucleus_log)[s].push_back(nucleus);
      }
      out[s].tokens.push_back(t);
      if (t == tok::kEos) continue;
      if (out[s].tokens.size() >= budget) {
        out[s].hit_limit = true;
        continue;
      }
      still.push_back(s);
      upcoming.push_back(t);
    }
    active = std::move(still);
    next = std::move(upcoming);
  }
  return out;
}

struct SynthesisReport {
  std::string run;
  std::size_t visuals = 0;
  std::size_t samples = 0;
  std::size_t parse_failures = 0;
  std::size_t duplicates = 0;
  std::size_t truncated = 0;
  std::size_t emitted = 0;
  std::size_t zero_yield_visuals = 0;
  std::map<std::string, std::size_t> failure_reasons;
  std::vector<std::size_t> yield_histogram;  // index = pairs kept for a visual

  double parse_failure_rate() const { return samples ? double(parse_failures) / double(samples) : 0.0; }
  double dedup_rate() const {
    const std::size_t parsed = samples - parse_failures;
    return parsed ? double(duplicates) / double(parsed) : 0.0;
  }
  double mean_yield() const { return visuals ? double(emitted) / double(visuals) : 0.0; }
};

inline void to_json(nlohmann::json& j, const SynthesisReport& r) {
  j = {{"run", r.run},
       {"visuals", r.visuals},
       {"samples", r.samples},
       {"parse_failures", r.parse_failures},
       {"parse_failure_rate", r.parse_failure_rate()},
       {"duplicates", r.duplicates},
       {"dedup_rate", r.dedup_rate()},
       {"truncated", r.truncated},
       {"emitted", r.emitted},
       {"mean_yield", r.mean_yield()},
       {"zero_yield_visuals", r.zero_yield_visuals},
       {"failure_reasons", r.failure_reasons},
       {"yield_histogram", r.yield_histogram}};
}

struct SynthesisResult {
  std::vector<PseudoExample> examples;
  SynthesisReport report;
};

/// Seed for sample `s` of visual `i`; fixed regardless of batching or threads.
inline std::uint64_t sample_seed(std::uint64_t rng_seed, std::size_t visual, std::size_t sample) {
  return derive_seed({rng_seed, 0x5a3b, visual, sample});
}

/// Samples candidate QA sequences for every unlabeled visual, keeps the ones
/// that parse, and drops exact duplicates per visual.
template <typename T>
SynthesisResult synthesize_pseudo_dataset(const ModelConfig& config, const ParameterStore<T>& params,
                                          std::span<const UnlabeledExample> unlabeled, const Vocabulary& vocab,
                                          const DecodeConfig& decode, const std::string& run_id,
                                          std::size_t threads = 1, std::size_t chunk_visuals = 64) {
  decode.validate();
  if (decode.mode != DecodeMode::kNucleus) throw InvalidInput("pseudo QA synthesis requires nucleus decoding");
  const std::size_t spv = decode.samples_per_visual;
  const std::size_t nv = unlabeled.size();
  std::vector<DecodeOutput> outputs(nv * spv);
  const auto prompt = synthesis_prompt(decode);

  auto run_chunk = [&](std::size_t begin, std::size_t end) {
    std::vector<const VisualInput*> vis;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = begin; i < end; ++i)
      for (std::size_t s = 0; s < spv; ++s) {
        vis.push_back(&unlabeled[i].visual);
        seeds.push_back(sample_seed(decode.rng_seed, i, s));
      }
    auto res = sample_batch(config, params, std::span<const VisualInput* const>(vis),
                            std::span<const std::uint64_t>(seeds), decode, nullptr,
                            std::span<const TokenId>(prompt));
    for (std::size_t k = 0; k < res.size(); ++k) outputs[begin * spv + k] = std::move(res[k]);
  };
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t b = 0; b < nv; b += chunk_visuals) chunks.emplace_back(b, std::min(nv, b + chunk_visuals));
  threads = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  if (threads == 1) {
    for (auto [b, e] : chunks) run_chunk(b, e);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < chunks.size(); c += threads) run_chunk(chunks[c].first, chunks[c].second);
      });
    }
    for (auto& t : pool) t.join();
  }

  SynthesisResult result;
  auto& rep = result.report;
  rep.run = run_id;
  rep.visuals = nv;
  rep.samples = nv * spv;
  rep.yield_histogram.assign(spv + 1, 0);
  for (std::size_t i = 0; i < nv; ++i) {
    std::set<std::pair<std::string, std::string>> seen;
    std::size_t kept = 0;
    for (std::size_t s = 0; s < spv; ++s) {
      const auto& o = outputs[i * spv + s];
      if (o.hit_limit) ++rep.truncated;
      std::vector<TokenId> text(prompt.begin() + 1, prompt.end());
      text.insert(text.end(), o.tokens.begin(), o.tokens.end());
      auto parsed = parse_qa_output(vocab.decode(text));
      if (auto* f = std::get_if<ParseFailure>(&parsed)) {
        ++rep.parse_failures;
        ++rep.failure_reasons[to_string(f->reason)];
        continue;
      }
      auto& qa = std::get<QaPair>(parsed);
      if (!seen.emplace(qa.question, qa.answer).second) {
        ++rep.duplicates;
        continue;
      }
      PseudoExample e;
      e.visual = unlabeled[i].visual;
      e.question = std::move(qa.question);
      e.answer = std::move(qa.answer);
      e.source = {run_id, static_cast<long>(i * spv + s)};
      result.examples.push_back(std::move(e));
      ++kept;
    }
    ++rep.yield_histogram[kept];
    if (kept == 0) ++rep.zero_yield_visuals;
  }
  rep.emitted = result.examples.size();
  return result;
}

}  // namespace leaml
