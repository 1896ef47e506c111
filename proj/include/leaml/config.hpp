#pragma once

// Run configuration: everything needed to reproduce a pipeline run. Stored as
// JSON; every field is optional on load and falls back to the defaults below.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/checkpoint.hpp"
#include "leaml/decode.hpp"
#include "leaml/optim.hpp"
#include "leaml/select.hpp"
#include "leaml/synthetic.hpp"

namespace leaml {

struct StageConfig {
  long steps = 0;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer;
  long log_every = 50;

  void validate(const char* stage) const {
    if (steps < 0) throw InvalidInput(std::string(stage) + ": steps must be non-negative");
    if (batch_size == 0) throw InvalidInput(std::string(stage) + ": batch_size must be positive");
    if (!(optimizer.lr >= 0.0)) throw InvalidInput(std::string(stage) + ": learning rate must be non-negative");
    if (optimizer.warmup_steps < 0) throw InvalidInput(std::string(stage) + ": warmup_steps must be non-negative");
    if (log_every <= 0) throw InvalidInput(std::string(stage) + ": log_every must be positive");
  }
};

struct GeneratorConfig : StageConfig {
  std::size_t caption_batch_size = 16;
  double caption_weight = 1.0;
  std::size_t k = 16;
  ScoreRule score_rule = ScoreRule::kMagnitudeOfMean;
};

struct RunConfig {
  ModelConfig model;
  synth::BenchmarkSpec benchmark;
  StageConfig pretrain;
  GeneratorConfig generator;
  StageConfig vqa;
  DecodeConfig decode;
  std::size_t eval_max_new_tokens = 8;
  bool use_distill = true;
  bool use_selection = true;
  double caption_corruption = 0.0;
  std::uint64_t master_seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  // Execution knobs; they never change results and are left out of the hash.
  std::string output_dir = "runs/default";
  std::size_t threads = 1;
  std::size_t jobs = 1;

  RunConfig();

  void validate() const {
    model.validate();
    benchmark.validate();
    pretrain.validate("pretrain");
    generator.validate("generator");
    vqa.validate("vqa");
    decode.validate();
    if (generator.caption_batch_size == 0) throw InvalidInput("generator: caption_batch_size must be positive");
    if (!(generator.caption_weight >= 0.0)) throw InvalidInput("generator: caption_weight must be non-negative");
    if (generator.k == 0) throw InvalidInput("generator: k must be at least 1");
    if (model.visual_dim != benchmark.visual_dim || model.visual_prefix_len != benchmark.visual_rows) {
      throw InvalidInput("model visual shape does not match the benchmark encoder");
    }
    if (eval_max_new_tokens == 0) throw InvalidInput("eval_max_new_tokens must be positive");
    if (!(caption_corruption >= 0.0 && caption_corruption <= 1.0)) {
      throw InvalidInput("caption_corruption must lie in [0, 1]");
    }
    if (seeds.empty()) throw InvalidInput("seeds must not be empty");
    if (threads == 0 || jobs == 0) throw InvalidInput("threads and jobs must be positive");
  }
};

inline void to_json(nlohmann::json& j, const StageConfig& s) {
  j = {{"steps", s.steps}, {"batch_size", s.batch_size}, {"optimizer", s.optimizer}, {"log_every", s.log_every}};
}

inline void from_json(const nlohmann::json& j, StageConfig& s) {
  s.steps = j.value("steps", s.steps);
  s.batch_size = j.value("batch_size", s.batch_size);
  if (j.contains("optimizer")) {
    auto o = nlohmann::json(s.optimizer);
    o.update(j.at("optimizer"));
    s.optimizer = o.get<OptimizerConfig>();
  }
  s.log_every = j.value("log_every", s.log_every);
}

inline const char* to_string(ScoreRule r) {
  return r == ScoreRule::kMagnitudeOfMean ? "magnitude_of_mean" : "mean_of_magnitude";
}

inline ScoreRule parse_score_rule(const std::string& s) {
  if (s == "magnitude_of_mean") return ScoreRule::kMagnitudeOfMean;
  if (s == "mean_of_magnitude") return ScoreRule::kMeanOfMagnitude;
  throw InvalidInput("unknown score rule '" + s + "'");
}

inline void to_json(nlohmann::json& j, const GeneratorConfig& g) {
  to_json(j, static_cast<const StageConfig&>(g));
  j["caption_batch_size"] = g.caption_batch_size;
  j["caption_weight"] = g.caption_weight;
  j["k"] = g.k;
  j["score_rule"] = to_string(g.score_rule);
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& g) {
  from_json(j, static_cast<StageConfig&>(g));
  g.caption_batch_size = j.value("caption_batch_size", g.caption_batch_size);
  g.caption_weight = j.value("caption_weight", g.caption_weight);
  g.k = j.value("k", g.k);
  if (j.contains("score_rule")) g.score_rule = parse_score_rule(j.at("score_rule").get<std::string>());
}

inline void to_json(nlohmann::json& j, const DecodeConfig& d) {
  j = {{"mode", d.mode == DecodeMode::kGreedy ? "greedy" : "nucleus"},
       {"top_p", d.top_p},
       {"temperature", d.temperature},
       {"max_new_tokens", d.max_new_tokens},
       {"samples_per_visual", d.samples_per_visual},
       {"rng_seed", d.rng_seed},
       {"min_new_tokens", d.min_new_tokens},
       {"open_question", d.open_question}};
}

inline void from_json(const nlohmann::json& j, DecodeConfig& d) {
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m == "greedy") d.mode = DecodeMode::kGreedy;
    else if (m == "nucleus") d.mode = DecodeMode::kNucleus;
    else throw InvalidInput("unknown decode mode '" + m + "'");
  }
  d.top_p = j.value("top_p", d.top_p);
  d.temperature = j.value("temperature", d.temperature);
  d.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
  d.samples_per_visual = j.value("samples_per_visual", d.samples_per_visual);
  d.rng_seed = j.value("rng_seed", d.rng_seed);
  d.min_new_tokens = j.value("min_new_tokens", d.min_new_tokens);
  d.open_question = j.value("open_question", d.open_question);
}

/// Results-relevant fields only.
inline nlohmann::json config_core_json(const RunConfig& c) {
  return {{"model", c.model},
          {"benchmark", c.benchmark},
          {"pretrain", c.pretrain},
          {"generator", c.generator},
          {"vqa", c.vqa},
          {"decode", c.decode},
          {"eval_max_new_tokens", c.eval_max_new_tokens},
          {"use_distill", c.use_distill},
          {"use_selection", c.use_selection},
          {"caption_corruption", c.caption_corruption},
          {"master_seed", c.master_seed},
          {"seeds", c.seeds}};
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = config_core_json(c);
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["jobs"] = c.jobs;
}

template <typename U>
void merge_into(const nlohmann::json& j, const char* key, U& target) {
  if (!j.contains(key)) return;
  auto base = nlohmann::json(target);
  if (base.is_object() && j.at(key).is_object()) {
    base.update(j.at(key));
    target = base.template get<U>();
  } else {
    target = j.at(key).template get<U>();
  }
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw InvalidInput("run config must be a JSON object");
  merge_into(j, "model", c.model);
  merge_into(j, "benchmark", c.benchmark);
  merge_into(j, "pretrain", c.pretrain);
  merge_into(j, "generator", c.generator);
  merge_into(j, "vqa", c.vqa);
  merge_into(j, "decode", c.decode);
  c.eval_max_new_tokens = j.value("eval_max_new_tokens", c.eval_max_new_tokens);
  c.use_distill = j.value("use_distill", c.use_distill);
  c.use_selection = j.value("use_selection", c.use_selection);
  c.caption_corruption = j.value("caption_corruption", c.caption_corruption);
  c.master_seed = j.value("master_seed", c.master_seed);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.threads = j.value("threads", c.threads);
  c.jobs = j.value("jobs", c.jobs);
}

/// Desk-scale defaults. The learning rates are far larger than a 2B-parameter
/// fine-tune would use; the tiny model trains for a few hundred steps only.
inline RunConfig::RunConfig() {
  model.visual_dim = benchmark.visual_dim;
  model.visual_prefix_len = benchmark.visual_rows;
  model.vocab_size = synth::build_vocabulary().size();

  pretrain.steps = 1500;
  pretrain.optimizer.lr = 2e-3;
  pretrain.optimizer.warmup_steps = 50;
  pretrain.optimizer.min_lr_ratio = 0.1;

  generator.steps = 600;
  generator.optimizer.lr = 1e-2;
  generator.optimizer.min_lr_ratio = 0.1;

  vqa.steps = 600;
  vqa.optimizer.lr = 5e-4;
  vqa.optimizer.min_lr_ratio = 0.1;
}

inline std::uint64_t config_hash(const RunConfig& c) {
  const auto s = config_core_json(c).dump();
  return fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Parses a config document; any structural or range problem becomes InvalidInput.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  try {
    nlohmann::json::parse(text).get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << nlohmann::json(c).dump(2) << '\n';
}

}  // namespace leaml
