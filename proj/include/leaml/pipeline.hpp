#pragma once

// Pipeline stages: pretraining on base captions, QA-generator training with
// caption distillation and selective updates, pseudo QA synthesis, VQA
// fine-tuning, evaluation, and the multi-seed comparison matrix.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/checkpoint.hpp"
#include "leaml/config.hpp"
#include "leaml/decode.hpp"
#include "leaml/losses.hpp"
#include "leaml/metrics.hpp"
#include "leaml/optim.hpp"
#include "leaml/select.hpp"
#include "leaml/synthetic.hpp"

namespace leaml {

inline std::uint64_t stage_seed(const RunConfig& c, const char* stage) {
  return derive_seed({c.master_seed, hash_string(stage)});
}

/// Yields batches of indices by walking reshuffled permutations of [0, n).
class BatchCycler {
 public:
  BatchCycler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    if (n == 0) throw InvalidInput("cannot draw batches from an empty set");
  }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    while (out.size() < k) {
      if (pos_ == order_.size()) refill();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
    pos_ = 0;
  }

  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TrainResult {
  std::vector<double> losses;  // one per step

  double mean_loss(std::size_t begin, std::size_t end) const {
    end = std::min(end, losses.size());
    if (begin >= end) return std::nan("");
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += losses[i];
    return s / double(end - begin);
  }
  /// Mean over the first / last tenth of the run (at least one step).
  double initial_loss() const { return mean_loss(0, std::max<std::size_t>(1, losses.size() / 10)); }
  double final_loss() const {
    return mean_loss(losses.size() - std::max<std::size_t>(1, losses.size() / 10), losses.size());
  }
};

/// Generic loop: `loss_fn(tape, step)` builds the step's loss on a fresh tape.
template <typename LossFn>
TrainResult train_loop(const ParameterStore<float>& params, const UpdateMask* mask, const StageConfig& stage,
                       const std::string& name, LossFn&& loss_fn, MetricsLog* log) {
  TrainResult result;
  if (stage.steps == 0) return result;
  OptimizerConfig opt = stage.optimizer;
  opt.total_steps = stage.steps;
  OptimizerState<float> state(opt);
  const auto t0 = std::chrono::steady_clock::now();
  double window = 0.0;
  long window_n = 0;
  for (long step = 0; step < stage.steps; ++step) {
    Tape<float> tape;
    params.zero_grad();
    auto loss = loss_fn(tape, step);
    const double value = loss->data.at(0);
    if (!std::isfinite(value)) throw DivergenceError(name, step);
    tape.backward(loss);
    masked_step(params, mask, state);
    result.losses.push_back(value);
    window += value;
    ++window_n;
    if (log && ((step + 1) % stage.log_every == 0 || step + 1 == stage.steps)) {
      MetricsRecord r;
      r.stage = name;
      r.step = step + 1;
      r.values = {{"loss", window / double(window_n)}, {"lr", scheduled_lr(opt, step)}};
      r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log->append(std::move(r));
      window = 0.0;
      window_n = 0;
    }
  }
  params.zero_grad();
  return result;
}

// ---------------------------------------------------------------- pretrain

/// Trains a fresh model on base-domain captions with every parameter trainable.
inline ParameterStore<float> run_pretrain(const RunConfig& cfg, std::span<const CaptionExample> corpus,
                                          const Vocabulary& vocab, MetricsLog* log = nullptr,
                                          TrainResult* stats = nullptr) {
  cfg.pretrain.validate("pretrain");
  auto params = init_model<float>(cfg.model, stage_seed(cfg, "init"));
  if (cfg.pretrain.steps == 0) return params;
  BatchCycler cycler(corpus.size(), stage_seed(cfg, "pretrain"));
  std::vector<CaptionExample> batch;
  auto r = train_loop(
      params, nullptr, cfg.pretrain, "pretrain",
      [&](Tape<float>& tape, long) {
        batch.clear();
        for (auto i : cycler.next(cfg.pretrain.batch_size)) batch.push_back(corpus[i]);
        return caption_loss(tape, cfg.model, params, std::span<const CaptionExample>(batch), vocab);
      },
      log);
  if (stats) *stats = std::move(r);
  return params;
}

// ---------------------------------------------------------------- generator

/// Source of teacher captions for unlabeled visuals.
class CaptionFeed {
 public:
  virtual ~CaptionFeed() = default;
  virtual std::size_t size() const = 0;
  virtual std::vector<CaptionExample> fetch(std::span<const std::size_t> indices) = 0;
};

class InMemoryCaptionFeed : public CaptionFeed {
 public:
  InMemoryCaptionFeed(std::span<const UnlabeledExample> visuals, std::span<const std::string> captions)
      : visuals_(visuals), captions_(captions) {
    if (visuals.size() != captions.size()) throw InvalidInput("caption count does not match unlabeled count");
  }
  std::size_t size() const override { return visuals_.size(); }
  std::vector<CaptionExample> fetch(std::span<const std::size_t> indices) override {
    std::vector<CaptionExample> out;
    for (auto i : indices) out.push_back({visuals_[i].visual, captions_[i]});
    return out;
  }

 private:
  std::span<const UnlabeledExample> visuals_;
  std::span<const std::string> captions_;
};

struct GeneratorResult {
  ParameterStore<float> params;
  std::optional<ScoreTable> scores;
  std::optional<UpdateMask> mask;
  TrainResult train;
};

/// Scores and mask for the generator's initialization.
inline std::pair<ScoreTable, UpdateMask> select_neurons(const RunConfig& cfg, const ParameterStore<float>& base,
                                                        std::span<const LabeledExample> labeled,
                                                        const Vocabulary& vocab) {
  auto scores = accumulate_scores<float>(cfg.model, base, labeled, vocab, cfg.generator.score_rule);
  auto mask = build_mask(scores, cfg.generator.k, NonSelectablePolicy::kFrozen);
  return {std::move(scores), std::move(mask)};
}

/// Joint training on L_QA (+ caption_weight * L_C when use_distill). With
/// use_selection, updates are restricted to `mask`, which is computed from the
/// base parameters when not supplied.
inline GeneratorResult run_generator_training(const RunConfig& cfg, const ParameterStore<float>& base,
                                              std::span<const LabeledExample> labeled, CaptionFeed* captions,
                                              const Vocabulary& vocab, MetricsLog* log = nullptr,
                                              const UpdateMask* mask = nullptr, const std::string& name = "generator") {
  cfg.generator.validate("generator");
  if (labeled.empty()) throw InvalidInput("generator training needs labeled examples");
  if (cfg.use_distill && (!captions || captions->size() == 0)) {
    throw InvalidInput("caption distillation requested without captions");
  }
  GeneratorResult res{base.clone(), std::nullopt, std::nullopt, {}};
  const UpdateMask* active = nullptr;
  if (cfg.use_selection) {
    if (mask) {
      res.mask = *mask;
    } else {
      auto [s, m] = select_neurons(cfg, base, labeled, vocab);
      res.scores = std::move(s);
      res.mask = std::move(m);
    }
    active = &*res.mask;
  }
  BatchCycler qa_cycler(labeled.size(), stage_seed(cfg, "generator.qa"));
  std::optional<BatchCycler> cap_cycler;
  if (cfg.use_distill) cap_cycler.emplace(captions->size(), stage_seed(cfg, "generator.caption"));
  const float weight = static_cast<float>(cfg.generator.caption_weight);
  std::vector<LabeledExample> qa_batch;
  res.train = train_loop(
      res.params, active, cfg.generator, name,
      [&](Tape<float>& tape, long) {
        qa_batch.clear();
        for (auto i : qa_cycler.next(cfg.generator.batch_size)) qa_batch.push_back(labeled[i]);
        if (!cfg.use_distill) {
          return qa_loss(tape, cfg.model, res.params, std::span<const LabeledExample>(qa_batch), vocab);
        }
        const auto idx = cap_cycler->next(cfg.generator.caption_batch_size);
        auto caps = captions->fetch(idx);
        return generator_loss(tape, cfg.model, res.params, std::span<const LabeledExample>(qa_batch),
                              std::span<const CaptionExample>(caps), vocab, weight);
      },
      log);
  return res;
}

/// Mean L_QA over a labeled slice, evaluated in inference mode.
inline double mean_qa_loss(const ModelConfig& config, const ParameterStore<float>& params,
                           std::span<const LabeledExample> examples, const Vocabulary& vocab,
                           std::size_t chunk = 32) {
  double total = 0.0;
  for (std::size_t b = 0; b < examples.size(); b += chunk) {
    const auto part = examples.subspan(b, std::min(chunk, examples.size() - b));
    Tape<float> tape(false);
    total += double(qa_loss(tape, config, params, part, vocab)->data[0]) * double(part.size());
  }
  return examples.empty() ? 0.0 : total / double(examples.size());
}

// ---------------------------------------------------------------- vqa

/// Fine-tunes every parameter of a copy of `base` on labeled ∪ pseudo.
inline ParameterStore<float> run_vqa_finetune(const RunConfig& cfg, const ParameterStore<float>& base,
                                              std::span<const QaExample* const> pool, const Vocabulary& vocab,
                                              MetricsLog* log = nullptr, TrainResult* stats = nullptr,
                                              const std::string& name = "vqa") {
  cfg.vqa.validate("vqa");
  if (pool.empty()) throw InvalidInput("vqa fine-tuning needs at least one example");
  auto params = base.clone();
  BatchCycler cycler(pool.size(), stage_seed(cfg, "vqa"));
  std::vector<const QaExample*> batch;
  auto r = train_loop(
      params, nullptr, cfg.vqa, name,
      [&](Tape<float>& tape, long) {
        batch.clear();
        for (auto i : cycler.next(cfg.vqa.batch_size)) batch.push_back(pool[i]);
        return vqa_loss(tape, cfg.model, params, std::span<const QaExample* const>(batch), vocab);
      },
      log);
  if (stats) *stats = std::move(r);
  return params;
}

inline std::vector<const QaExample*> training_pool(std::span<const LabeledExample> labeled,
                                                   std::span<const PseudoExample> pseudo) {
  std::vector<const QaExample*> pool;
  for (const auto& e : labeled) pool.push_back(&e);
  for (const auto& e : pseudo) pool.push_back(&e);
  return pool;
}

// ---------------------------------------------------------------- eval

struct CategoryScore {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t option_correct = 0;

  double accuracy() const { return total ? double(correct) / double(total) : 0.0; }
  double option_accuracy() const { return total ? double(option_correct) / double(total) : 0.0; }
  bool operator==(const CategoryScore&) const = default;
};

struct EvalReport {
  CategoryScore overall;
  std::map<std::string, CategoryScore> by_category;
  std::map<std::string, CategoryScore> by_difficulty;

  double accuracy() const { return overall.accuracy(); }
  double option_accuracy() const { return overall.option_accuracy(); }
  bool operator==(const EvalReport&) const = default;
};

inline void to_json(nlohmann::json& j, const CategoryScore& s) {
  j = {{"total", s.total},
       {"correct", s.correct},
       {"option_correct", s.option_correct},
       {"accuracy", s.accuracy()},
       {"option_accuracy", s.option_accuracy()}};
}

inline void from_json(const nlohmann::json& j, CategoryScore& s) {
  s.total = j.at("total").get<std::size_t>();
  s.correct = j.at("correct").get<std::size_t>();
  s.option_correct = j.at("option_correct").get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"overall", r.overall}, {"by_category", r.by_category}, {"by_difficulty", r.by_difficulty}};
}

inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.overall = j.at("overall").get<CategoryScore>();
  r.by_category = j.at("by_category").get<std::map<std::string, CategoryScore>>();
  r.by_difficulty = j.at("by_difficulty").get<std::map<std::string, CategoryScore>>();
}

/// Scores predicted answer texts against gold answers. Exact match compares
/// whitespace-normalized text; the option-constrained score first maps the
/// prediction onto an option by exact match and counts anything else wrong.
inline EvalReport score_predictions(std::span<const LabeledExample> test, std::span<const std::string> predictions) {
  if (test.size() != predictions.size()) throw DimensionError("one prediction per test example is required");
  EvalReport rep;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto pred = normalize_whitespace(predictions[i]);
    const auto gold = normalize_whitespace(test[i].answer);
    const bool exact = pred == gold;
    std::optional<std::string> option;
    for (const auto& o : test[i].options)
      if (normalize_whitespace(o) == pred) option = normalize_whitespace(o);
    const bool opt_ok = option && *option == gold;
    const auto t = synth::template_of(test[i].question);
    const std::string cat = t ? synth::info(*t).name : "other";
    const std::string diff = t ? synth::info(*t).difficulty : "other";
    for (auto* s : {&rep.overall, &rep.by_category[cat], &rep.by_difficulty[diff]}) {
      ++s->total;
      s->correct += exact;
      s->option_correct += opt_ok;
    }
  }
  return rep;
}

/// Text of a generated answer: tokens up to (excluding) the first EOS.
inline std::string answer_text(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  auto end = std::find(tokens.begin(), tokens.end(), tok::kEos);
  return normalize_whitespace(vocab.decode(std::span<const TokenId>(tokens.data(), std::size_t(end - tokens.begin()))));
}

/// Greedy answers for [BOS, Q, <a>] prompts, batched in chunks over `threads` workers.
inline std::vector<std::string> predict_answers(const ModelConfig& config, const ParameterStore<float>& params,
                                                std::span<const LabeledExample> test, const Vocabulary& vocab,
                                                std::size_t max_new_tokens, std::size_t threads = 1,
                                                std::size_t chunk = 64) {
  std::vector<std::string> out(test.size());
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t b = 0; b < test.size(); b += chunk) chunks.emplace_back(b, std::min(test.size(), b + chunk));
  auto work = [&](std::size_t b, std::size_t e) {
    std::vector<const VisualInput*> vis;
    std::vector<std::vector<TokenId>> prompts;
    for (std::size_t i = b; i < e; ++i) {
      vis.push_back(&test[i].visual);
      prompts.push_back(vqa_prompt(test[i].question, vocab));
    }
    auto res = greedy_decode_batch(config, params, std::span<const VisualInput* const>(vis),
                                   std::span<const std::vector<TokenId>>(prompts), max_new_tokens);
    for (std::size_t i = b; i < e; ++i) out[i] = answer_text(res[i - b].tokens, vocab);
  };
  threads = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  if (threads == 1) {
    for (auto [b, e] : chunks) work(b, e);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks.size(); c += threads) work(chunks[c].first, chunks[c].second);
    });
  for (auto& t : pool) t.join();
  return out;
}

inline EvalReport run_eval(const RunConfig& cfg, const ParameterStore<float>& params,
                           std::span<const LabeledExample> test, const Vocabulary& vocab,
                           std::vector<std::string>* predictions = nullptr) {
  auto preds = predict_answers(cfg.model, params, test, vocab, cfg.eval_max_new_tokens, cfg.threads);
  auto rep = score_predictions(test, preds);
  if (predictions) *predictions = std::move(preds);
  return rep;
}

// ---------------------------------------------------------------- data prep

/// Everything the stages read, derived from the config alone.
struct PreparedData {
  synth::Benchmark bench;
  std::vector<CaptionExample> base_corpus;
  std::vector<std::string> captions;  // aligned with bench.unlabeled
  Vocabulary vocab;
};

/// Teacher captions for the unlabeled split, from the oracle captioner.
inline std::vector<std::string> oracle_captions(const RunConfig& cfg, std::span<const synth::Scene> scenes) {
  std::vector<std::string> out;
  const auto seed = stage_seed(cfg, "captions");
  for (std::size_t i = 0; i < scenes.size(); ++i)
    out.push_back(synth::oracle_caption(scenes[i], synth::caption_style_seed(seed, i), cfg.caption_corruption));
  return out;
}

inline PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData d;
  d.bench = synth::generate_benchmark(cfg.benchmark);
  d.base_corpus = synth::generate_base_corpus(cfg.benchmark);
  d.captions = oracle_captions(cfg, d.bench.unlabeled_scenes);
  d.vocab = synth::build_vocabulary();
  if (d.vocab.size() != cfg.model.vocab_size) {
    throw InvalidInput("model vocab_size " + std::to_string(cfg.model.vocab_size) + " does not match the domain vocabulary (" +
                       std::to_string(d.vocab.size()) + ")");
  }
  return d;
}

/// Seed-specific copy of a config: the master seed and the benchmark content
/// and split seeds all follow `seed`; the scene encoder stays fixed.
inline RunConfig config_for_seed(const RunConfig& cfg, std::uint64_t seed) {
  RunConfig c = cfg;
  c.master_seed = seed;
  c.benchmark.content_seed = derive_seed({seed, cfg.benchmark.content_seed, 0xc0});
  c.benchmark.split_seed = derive_seed({seed, cfg.benchmark.split_seed, 0x5b});
  c.seeds = {seed};
  return c;
}

inline DecodeConfig synthesis_decode(const RunConfig& cfg) {
  DecodeConfig d = cfg.decode;
  d.rng_seed = derive_seed({cfg.master_seed, hash_string("synth"), cfg.decode.rng_seed});
  return d;
}

/// Fraction of pseudo pairs that ask a known template question and carry the
/// scene's true answer. Sample indices map back to visuals via samples_per_visual.
inline double pseudo_label_accuracy(std::span<const PseudoExample> pseudo, std::span<const synth::Scene> scenes,
                                    std::size_t samples_per_visual) {
  if (pseudo.empty()) return std::nan("");
  std::size_t ok = 0;
  for (const auto& e : pseudo) {
    const auto v = static_cast<std::size_t>(e.source.sample) / samples_per_visual;
    const auto t = synth::template_of(e.question);
    if (t && v < scenes.size() && normalize_whitespace(e.answer) == synth::answer_for(*t, scenes[v])) ++ok;
  }
  return double(ok) / double(pseudo.size());
}

// ---------------------------------------------------------------- matrix

namespace method {
inline constexpr const char* kZeroShot = "Zero-shot";
inline constexpr const char* kFullTuning = "Full-Tuning";
inline constexpr const char* kLeaml = "LEAML";
inline constexpr const char* kFullySupervised = "Fully-Supervised";
inline constexpr const char* kBaseline = "Baseline";
inline constexpr const char* kDistill = "Baseline+Distill.";
inline constexpr const char* kDistillNeurons = "Baseline+Distill.+QA Neurons";
inline const std::vector<std::string>& all() {
  static const std::vector<std::string> v{kZeroShot, kFullTuning,  kLeaml,          kFullySupervised,
                                          kBaseline, kDistill, kDistillNeurons};
  return v;
}
}  // namespace method

struct MatrixRow {
  std::uint64_t seed = 0;
  std::string method;
  EvalReport eval;
  std::size_t labeled_pairs = 0;
  std::size_t pseudo_pairs = 0;
  std::vector<std::string> pseudo_runs;  // provenance run ids present in the training pool
  nlohmann::json synthesis;              // synthesis report, null when no generator ran
  double train_initial_loss = std::nan("");
  double train_final_loss = std::nan("");
  double pseudo_label_accuracy = std::nan("");  // pseudo answers checked against the hidden scenes
};

inline void to_json(nlohmann::json& j, const MatrixRow& r) {
  auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
  j = {{"seed", r.seed},
       {"method", r.method},
       {"eval", r.eval},
       {"accuracy", r.eval.accuracy()},
       {"option_accuracy", r.eval.option_accuracy()},
       {"labeled_pairs", r.labeled_pairs},
       {"pseudo_pairs", r.pseudo_pairs},
       {"pseudo_runs", r.pseudo_runs},
       {"synthesis", r.synthesis},
       {"train_initial_loss", num(r.train_initial_loss)},
       {"train_final_loss", num(r.train_final_loss)},
       {"pseudo_label_accuracy", num(r.pseudo_label_accuracy)}};
}

inline void from_json(const nlohmann::json& j, MatrixRow& r) {
  auto num = [](const nlohmann::json& x) { return x.is_null() ? std::nan("") : x.get<double>(); };
  r.seed = j.at("seed").get<std::uint64_t>();
  r.method = j.at("method").get<std::string>();
  r.eval = j.at("eval").get<EvalReport>();
  r.labeled_pairs = j.at("labeled_pairs").get<std::size_t>();
  r.pseudo_pairs = j.at("pseudo_pairs").get<std::size_t>();
  r.pseudo_runs = j.at("pseudo_runs").get<std::vector<std::string>>();
  r.synthesis = j.value("synthesis", nlohmann::json());
  r.train_initial_loss = num(j.value("train_initial_loss", nlohmann::json()));
  r.train_final_loss = num(j.value("train_final_loss", nlohmann::json()));
  r.pseudo_label_accuracy = num(j.value("pseudo_label_accuracy", nlohmann::json()));
}

struct MatrixReport {
  std::string config_hash;
  std::vector<MatrixRow> rows;
  double wall_seconds = 0.0;

  std::vector<const MatrixRow*> rows_for(const std::string& m) const {
    std::vector<const MatrixRow*> out;
    for (const auto& r : rows)
      if (r.method == m) out.push_back(&r);
    return out;
  }

  double mean_accuracy(const std::string& m) const {
    auto rs = rows_for(m);
    if (rs.empty()) return std::nan("");
    double s = 0.0;
    for (auto* r : rs) s += r->eval.accuracy();
    return s / double(rs.size());
  }

  double mean_category_accuracy(const std::string& m, const std::string& key, bool difficulty) const {
    double s = 0.0;
    std::size_t n = 0;
    for (auto* r : rows_for(m)) {
      const auto& tab = difficulty ? r->eval.by_difficulty : r->eval.by_category;
      auto it = tab.find(key);
      if (it == tab.end()) continue;
      s += it->second.accuracy();
      ++n;
    }
    return n ? s / double(n) : std::nan("");
  }
};

inline void to_json(nlohmann::json& j, const MatrixReport& r) {
  nlohmann::json means = nlohmann::json::object();
  for (const auto& m : method::all())
    if (!r.rows_for(m).empty()) means[m] = r.mean_accuracy(m);
  j = {{"config_hash", r.config_hash}, {"rows", r.rows}, {"mean_accuracy", means}, {"wall_seconds", r.wall_seconds}};
}

inline void from_json(const nlohmann::json& j, MatrixReport& r) {
  r.config_hash = j.at("config_hash").get<std::string>();
  r.rows = j.at("rows").get<std::vector<MatrixRow>>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
}

/// Markdown table: one row per method, mean accuracy over seeds per category.
inline std::string format_matrix(const MatrixReport& r) {
  const std::vector<std::string> cats{"anomaly", "count", "color", "zone", "object"};
  auto pct = [](double x) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * x);
    return std::string(std::isfinite(x) ? buf : "-");
  };
  std::string s = "| Method |";
  for (const auto& c : cats) s += " " + c + " |";
  s += " Easy | Medium | Hard | Avg | seeds |\n|---|";
  for (std::size_t i = 0; i < cats.size() + 5; ++i) s += "---|";
  s += "\n";
  for (const auto& m : method::all()) {
    const auto rs = r.rows_for(m);
    if (rs.empty()) continue;
    s += "| " + m + " |";
    for (const auto& c : cats) s += " " + pct(r.mean_category_accuracy(m, c, false)) + " |";
    for (const char* d : {"easy", "medium", "hard"}) s += " " + pct(r.mean_category_accuracy(m, d, true)) + " |";
    s += " " + pct(r.mean_accuracy(m)) + " | " + std::to_string(rs.size()) + " |\n";
  }
  return s;
}

/// Runs `tasks` on up to `jobs` threads; the first exception is rethrown.
inline void run_parallel(std::vector<std::function<void()>>& tasks, std::size_t jobs) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < tasks.size();) {
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

/// Stage failure annotated with the branch that raised it.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what) : Error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

template <typename F>
auto with_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

/// The full comparison over cfg.seeds. Artifacts land in out_dir/seed_<s>/.
inline MatrixReport run_matrix(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto hash = hash_hex(config_hash(cfg));
  struct SeedState {
    RunConfig cfg;
    std::filesystem::path dir;
    PreparedData data;
    ParameterStore<float> base;
    std::map<std::string, MatrixRow> rows;
    std::unique_ptr<MetricsLog> log;
    std::mutex mu;
  };
  std::vector<std::unique_ptr<SeedState>> seeds;
  for (auto s : cfg.seeds) {
    auto st = std::make_unique<SeedState>();
    st->cfg = config_for_seed(cfg, s);
    st->dir = out_dir / ("seed_" + std::to_string(s));
    std::filesystem::create_directories(st->dir);
    std::filesystem::remove(st->dir / "metrics.jsonl");
    st->log = std::make_unique<MetricsLog>(st->dir / "metrics.jsonl", hash);
    seeds.push_back(std::move(st));
  }

  std::vector<std::function<void()>> prep;
  for (auto& sp : seeds) {
    auto* st = sp.get();
    prep.push_back([st, hash] {
      const auto tag = "seed " + std::to_string(st->cfg.master_seed);
      st->data = with_stage(tag + "/gen-data", [&] { return prepare_data(st->cfg); });
      RunConfig pre = st->cfg;
      pre.threads = 1;
      st->base = with_stage(tag + "/pretrain", [&] {
        return run_pretrain(pre, std::span<const CaptionExample>(st->data.base_corpus), st->data.vocab,
                            st->log.get());
      });
      save_checkpoint(st->dir / "base.ckpt", st->cfg.model, st->base, config_hash(st->cfg));
    });
  }
  run_parallel(prep, cfg.jobs);

  auto put = [](SeedState* st, MatrixRow row) {
    std::lock_guard lock(st->mu);
    st->rows[row.method] = std::move(row);
  };
  auto eval_row = [](SeedState* st, const std::string& m, const ParameterStore<float>& p) {
    MatrixRow row;
    row.seed = st->cfg.master_seed;
    row.method = m;
    RunConfig ec = st->cfg;
    ec.threads = 1;
    row.eval = run_eval(ec, p, std::span<const LabeledExample>(st->data.bench.test), st->data.vocab);
    return row;
  };
  auto vqa_branch = [&](SeedState* st, const std::string& m, std::span<const LabeledExample> labeled,
                        std::span<const PseudoExample> pseudo, const std::string& file) {
    auto pool = training_pool(labeled, pseudo);
    TrainResult tr;
    auto p = run_vqa_finetune(st->cfg, st->base, std::span<const QaExample* const>(pool), st->data.vocab,
                              st->log.get(), &tr, "vqa/" + file);
    save_checkpoint(st->dir / ("vqa_" + file + ".ckpt"), st->cfg.model, p, config_hash(st->cfg));
    auto row = eval_row(st, m, p);
    row.labeled_pairs = labeled.size();
    row.pseudo_pairs = pseudo.size();
    std::set<std::string> runs;
    for (const auto& e : pseudo) runs.insert(e.source.run);
    row.pseudo_runs.assign(runs.begin(), runs.end());
    row.train_initial_loss = tr.initial_loss();
    row.train_final_loss = tr.final_loss();
    return row;
  };

  std::vector<std::function<void()>> branches;
  for (auto& sp : seeds) {
    auto* st = sp.get();
    const auto tag = "seed " + std::to_string(st->cfg.master_seed);
    branches.push_back([=, &put, &eval_row] {
      put(st, with_stage(tag + "/zero-shot", [&] { return eval_row(st, method::kZeroShot, st->base); }));
    });
    branches.push_back([=, &put, &vqa_branch] {
      put(st, with_stage(tag + "/full-tuning", [&] {
            return vqa_branch(st, method::kFullTuning, st->data.bench.labeled, {}, "labeled_only");
          }));
    });
    branches.push_back([=, &put, &vqa_branch] {
      put(st, with_stage(tag + "/fully-supervised", [&] {
            return vqa_branch(st, method::kFullySupervised, st->data.bench.train_full, {}, "fully_supervised");
          }));
    });
    struct Variant {
      const char* method;
      const char* file;
      bool distill, selection;
    };
    for (Variant v : {Variant{method::kBaseline, "baseline", false, false},
                      Variant{method::kDistill, "distill", true, false},
                      Variant{method::kDistillNeurons, "distill_neurons", true, true}}) {
      branches.push_back([=, &put, &vqa_branch] {
        const auto stage = tag + "/" + v.file;
        auto row = with_stage(stage, [&] {
          RunConfig gc = st->cfg;
          gc.use_distill = v.distill;
          gc.use_selection = v.selection;
          gc.threads = 1;
          InMemoryCaptionFeed feed(std::span<const UnlabeledExample>(st->data.bench.unlabeled),
                                   std::span<const std::string>(st->data.captions));
          auto gen = run_generator_training(gc, st->base, std::span<const LabeledExample>(st->data.bench.labeled),
                                            &feed, st->data.vocab, st->log.get(), nullptr,
                                            std::string("generator/") + v.file);
          save_checkpoint(st->dir / (std::string("generator_") + v.file + ".ckpt"), gc.model, gen.params,
                          config_hash(gc));
          if (gen.mask) save_mask(st->dir / (std::string("mask_") + v.file + ".bin"), gc.model, *gen.mask);
          const auto run_id = "seed" + std::to_string(gc.master_seed) + "/" + v.file;
          auto syn = synthesize_pseudo_dataset(gc.model, gen.params,
                                               std::span<const UnlabeledExample>(st->data.bench.unlabeled),
                                               st->data.vocab, synthesis_decode(gc), run_id, 1);
          save_pseudo(st->dir / (std::string("pseudo_") + v.file + ".jsonl"), syn.examples);
          auto row = vqa_branch(st, v.method, st->data.bench.labeled, syn.examples, v.file);
          row.synthesis = syn.report;
          row.pseudo_label_accuracy =
              pseudo_label_accuracy(syn.examples, st->data.bench.unlabeled_scenes, gc.decode.samples_per_visual);
          return row;
        });
        put(st, row);
        if (v.selection && v.distill) {
          row.method = method::kLeaml;
          put(st, std::move(row));
        }
      });
    }
  }
  run_parallel(branches, cfg.jobs);

  MatrixReport rep;
  rep.config_hash = hash;
  for (auto& sp : seeds)
    for (const auto& m : method::all()) {
      auto it = sp->rows.find(m);
      if (it == sp->rows.end()) throw InvalidState("matrix is missing row '" + m + "'");
      rep.rows.push_back(it->second);
    }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ofstream(out_dir / "matrix.json") << nlohmann::json(rep).dump(2) << '\n';
  std::ofstream(out_dir / "matrix.md") << format_matrix(rep);
  return rep;
}

}  // namespace leaml
