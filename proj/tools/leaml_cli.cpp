// Command-line driver: one subcommand per pipeline stage, plus the full
// comparison matrix. Every stage reads the files earlier stages wrote under
// the output directory.
//
// Exit codes: 0 success, 2 invalid configuration or arguments, 3 stage failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "leaml/leaml.hpp"
#include "leaml/remote.hpp"

namespace fs = std::filesystem;
using namespace leaml;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct ConfigError : InvalidInput {
  using InvalidInput::InvalidInput;
};

struct Options {
  std::string config_path;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> jobs;
  std::optional<bool> use_distill;
  std::optional<bool> use_selection;
  std::optional<std::size_t> k;
  std::optional<double> label_fraction;
};

/// Applies "a.b.c=value" overrides; the value is parsed as JSON when possible,
/// otherwise taken as a string.
void apply_set(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      if (!node->contains(part)) throw ConfigError("unknown config field '" + key + "'");
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) throw ConfigError("unknown config section '" + part + "'");
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig resolve_config(const Options& o, bool prefer_saved) {
  RunConfig cfg;
  nlohmann::json j;
  fs::path saved = fs::path(o.out.empty() ? cfg.output_dir : o.out) / "config.json";
  try {
    if (!o.config_path.empty()) {
      cfg = load_run_config(o.config_path);
    } else if (prefer_saved && fs::exists(saved)) {
      cfg = load_run_config(saved);
    }
    j = cfg;
    for (const auto& s : o.sets) apply_set(j, s);
    cfg = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (o.seed) cfg.master_seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.use_distill) cfg.use_distill = *o.use_distill;
  if (o.use_selection) cfg.use_selection = *o.use_selection;
  if (o.k) cfg.generator.k = *o.k;
  if (o.label_fraction) cfg.benchmark.label_fraction = *o.label_fraction;
  try {
    cfg.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

struct Paths {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path labeled() const { return data() / "labeled.jsonl"; }
  fs::path unlabeled() const { return data() / "unlabeled.jsonl"; }
  fs::path test() const { return data() / "test.jsonl"; }
  fs::path train_full() const { return data() / "train_full.jsonl"; }
  fs::path base_corpus() const { return data() / "base_corpus.jsonl"; }
  fs::path scenes(const char* split) const { return data() / (std::string(split) + ".scenes.jsonl"); }
  fs::path catalog() const { return data() / "catalog.json"; }
  fs::path captions() const { return root / "captions.jsonl"; }
  fs::path base() const { return root / "base.ckpt"; }
  fs::path scores() const { return root / "scores.bin"; }
  fs::path mask() const { return root / "mask.bin"; }
  fs::path selection_report() const { return root / "selection_report.json"; }
  fs::path generator() const { return root / "generator.ckpt"; }
  fs::path pseudo() const { return root / "pseudo.jsonl"; }
  fs::path synthesis_report() const { return root / "synthesis_report.json"; }
  fs::path vqa() const { return root / "vqa.ckpt"; }
  fs::path eval() const { return root / "eval.json"; }
  fs::path metrics() const { return root / "metrics.jsonl"; }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

ParameterStore<float> load_params(const fs::path& path, const RunConfig& cfg) {
  auto ck = load_checkpoint(path);
  if (!(ck.config == cfg.model)) throw InvalidState(path.string() + " was written for a different model config");
  return std::move(ck.params);
}

void log_line(const std::string& s) { std::cerr << "[leaml] " << s << '\n'; }

// ---------------------------------------------------------------- stages

void stage_gen_data(const RunConfig& cfg, const Paths& p) {
  fs::create_directories(p.root);
  save_run_config(p.root / "config.json", cfg);
  auto bench = synth::generate_benchmark(cfg.benchmark);
  save_labeled(p.labeled(), bench.labeled, Split::kLabeled);
  save_unlabeled(p.unlabeled(), bench.unlabeled);
  save_labeled(p.test(), bench.test, Split::kTest);
  save_labeled(p.train_full(), bench.train_full, Split::kLabeled);
  synth::save_scenes(p.scenes("labeled"), bench.labeled_scenes);
  synth::save_scenes(p.scenes("unlabeled"), bench.unlabeled_scenes);
  synth::save_scenes(p.scenes("test"), bench.test_scenes);
  write_json(p.catalog(), bench.catalog);
  save_caption_corpus(p.base_corpus(), synth::generate_base_corpus(cfg.benchmark));
  log_line("gen-data: " + std::to_string(bench.labeled.size()) + " labeled pairs, " +
           std::to_string(bench.unlabeled.size()) + " unlabeled visuals, " + std::to_string(bench.test.size()) +
           " test items");
}

void stage_caption(const RunConfig& cfg, const Paths& p, const std::string& remote_endpoint) {
  std::vector<std::string> captions;
  if (remote_endpoint.empty()) {
    const auto scenes = synth::load_scenes(p.scenes("unlabeled"));
    captions = oracle_captions(cfg, scenes);
  } else {
    RemoteCaptionConfig rc;
    rc.endpoint = remote_endpoint;
    rc.cache_dir = p.root / "caption_cache";
    RemoteCaptioner captioner(rc, std::make_shared<HttplibTransport>());
    for (const auto& u : load_unlabeled(p.unlabeled())) captions.push_back(captioner.caption(u.visual));
  }
  synth::save_captions(p.captions(), captions);
  log_line("caption: " + std::to_string(captions.size()) + " captions");
}

void stage_pretrain(const RunConfig& cfg, const Paths& p, MetricsLog& log) {
  const auto corpus = load_caption_corpus(p.base_corpus());
  const auto vocab = synth::build_vocabulary();
  TrainResult tr;
  auto params = run_pretrain(cfg, std::span<const CaptionExample>(corpus), vocab, &log, &tr);
  save_checkpoint(p.base(), cfg.model, params, config_hash(cfg));
  if (!tr.losses.empty()) {
    log_line("pretrain: loss " + std::to_string(tr.initial_loss()) + " -> " + std::to_string(tr.final_loss()));
  }
}

void stage_score(const RunConfig& cfg, const Paths& p) {
  const auto base = load_params(p.base(), cfg);
  const auto labeled = load_labeled(p.labeled());
  const auto vocab = synth::build_vocabulary();
  auto [scores, mask] = select_neurons(cfg, base, std::span<const LabeledExample>(labeled), vocab);
  save_scores(p.scores(), cfg.model, scores, config_hash(cfg));
  save_mask(p.mask(), cfg.model, mask, config_hash(cfg));
  auto report = selection_report(scores, mask);
  write_json(p.selection_report(), report);
  log_line("score: " + std::to_string(report.total_selected) + " of " + std::to_string(report.total_selectable) +
           " selectable weights trainable (k=" + std::to_string(cfg.generator.k) + ")");
}

void stage_train_gen(const RunConfig& cfg, const Paths& p, MetricsLog& log) {
  const auto base = load_params(p.base(), cfg);
  const auto labeled = load_labeled(p.labeled());
  const auto vocab = synth::build_vocabulary();
  std::vector<UnlabeledExample> unlabeled;
  std::vector<std::string> captions;
  if (cfg.use_distill) {
    unlabeled = load_unlabeled(p.unlabeled());
    captions = synth::load_captions(p.captions());
  }
  InMemoryCaptionFeed feed{std::span<const UnlabeledExample>(unlabeled), std::span<const std::string>(captions)};
  std::optional<UpdateMask> mask;
  if (cfg.use_selection) {
    if (!fs::exists(p.mask())) throw InvalidState("use_selection needs " + p.mask().string() + "; run 'score' first");
    mask = load_mask(p.mask());
    if (mask->k() != cfg.generator.k) throw InvalidState("mask on disk was built with a different k");
  }
  auto res = run_generator_training(cfg, base, std::span<const LabeledExample>(labeled), &feed, vocab, &log,
                                    mask ? &*mask : nullptr);
  save_checkpoint(p.generator(), cfg.model, res.params, config_hash(cfg));
  if (!res.train.losses.empty()) {
    log_line("train-gen: loss " + std::to_string(res.train.initial_loss()) + " -> " +
             std::to_string(res.train.final_loss()));
  }
}

void stage_synth(const RunConfig& cfg, const Paths& p, MetricsLog& log) {
  const auto gen = load_params(p.generator(), cfg);
  const auto unlabeled = load_unlabeled(p.unlabeled());
  const auto vocab = synth::build_vocabulary();
  const auto run_id = "run-" + hash_hex(config_hash(cfg));
  auto syn = synthesize_pseudo_dataset(cfg.model, gen, std::span<const UnlabeledExample>(unlabeled), vocab,
                                       synthesis_decode(cfg), run_id, cfg.threads);
  save_pseudo(p.pseudo(), syn.examples);
  nlohmann::json rep = syn.report;
  rep["config_hash"] = hash_hex(config_hash(cfg));
  write_json(p.synthesis_report(), rep);
  MetricsRecord r;
  r.stage = "synth";
  r.values = {{"parse_failure_rate", syn.report.parse_failure_rate()},
              {"dedup_rate", syn.report.dedup_rate()},
              {"emitted", double(syn.report.emitted)}};
  log.append(r);
  log_line("synth: " + std::to_string(syn.report.emitted) + " pseudo pairs, parse failure rate " +
           std::to_string(syn.report.parse_failure_rate()));
  if (syn.report.emitted == 0) log_line("synth: WARNING every sample failed to parse; the pseudo set is empty");
}

void stage_finetune(const RunConfig& cfg, const Paths& p, MetricsLog& log, const std::string& data) {
  const auto base = load_params(p.base(), cfg);
  const auto vocab = synth::build_vocabulary();
  std::vector<LabeledExample> labeled;
  std::vector<PseudoExample> pseudo;
  if (data == "full") {
    labeled = load_labeled(p.train_full());
  } else {
    labeled = load_labeled(p.labeled());
    if (data == "leaml") pseudo = load_pseudo(p.pseudo());
  }
  auto pool = training_pool(std::span<const LabeledExample>(labeled), std::span<const PseudoExample>(pseudo));
  TrainResult tr;
  auto params = run_vqa_finetune(cfg, base, std::span<const QaExample* const>(pool), vocab, &log, &tr);
  save_checkpoint(p.vqa(), cfg.model, params, config_hash(cfg));
  log_line("finetune: " + std::to_string(labeled.size()) + " labeled + " + std::to_string(pseudo.size()) +
           " pseudo examples");
}

void stage_eval(const RunConfig& cfg, const Paths& p, MetricsLog& log, const std::string& checkpoint) {
  const auto params = load_params(checkpoint.empty() ? p.vqa() : fs::path(checkpoint), cfg);
  const auto test = load_labeled(p.test());
  const auto vocab = synth::build_vocabulary();
  std::vector<std::string> predictions;
  auto rep = run_eval(cfg, params, std::span<const LabeledExample>(test), vocab, &predictions);
  nlohmann::json j = rep;
  j["config_hash"] = hash_hex(config_hash(cfg));
  j["predictions"] = predictions;
  write_json(p.eval(), j);
  MetricsRecord r;
  r.stage = "eval";
  r.values = {{"accuracy", rep.accuracy()}, {"option_accuracy", rep.option_accuracy()}};
  for (const auto& [k, v] : rep.by_category) r.values["accuracy/" + k] = v.accuracy();
  for (const auto& [k, v] : rep.by_difficulty) r.values["accuracy/" + k] = v.accuracy();
  log.append(r);
  std::printf("accuracy %.4f  option-constrained %.4f  (%zu items)\n", rep.accuracy(), rep.option_accuracy(),
              rep.overall.total);
  for (const auto& [k, v] : rep.by_category) std::printf("  %-8s %.4f (%zu)\n", k.c_str(), v.accuracy(), v.total);
}

void stage_matrix(const RunConfig& cfg, const Paths& p) {
  fs::create_directories(p.root);
  save_run_config(p.root / "config.json", cfg);
  auto rep = run_matrix(cfg, p.root);
  std::cout << format_matrix(rep);
  std::printf("wall clock %.1f s\n", rep.wall_seconds);
}

void stage_report(const Paths& p) {
  const auto matrix = p.root / "matrix.json";
  if (fs::exists(matrix)) {
    auto rep = read_json(matrix).get<MatrixReport>();
    std::cout << format_matrix(rep);
    return;
  }
  if (fs::exists(p.eval())) {
    auto rep = read_json(p.eval()).get<EvalReport>();
    std::printf("accuracy %.4f  option-constrained %.4f  (%zu items)\n", rep.accuracy(), rep.option_accuracy(),
                rep.overall.total);
    for (const auto& [k, v] : rep.by_category) std::printf("  %-8s %.4f (%zu)\n", k.c_str(), v.accuracy(), v.total);
    return;
  }
  throw InvalidState("nothing to report under " + p.root.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-efficient VQA adaptation pipeline on a synthetic out-of-distribution domain"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config_path, "JSON run config (defaults to <out>/config.json when present)");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--set", o.sets, "override a config field, e.g. --set vqa.steps=300");
  app.add_option("--seed", o.seed, "master seed");
  app.add_option("--threads", o.threads, "worker threads for synthesis and evaluation");
  app.add_option("--jobs", o.jobs, "parallel matrix branches");
  app.add_option("--use-distill", o.use_distill, "train the generator with caption distillation");
  app.add_option("--use-selection", o.use_selection, "restrict generator updates to selected neurons");
  app.add_option("--k", o.k, "weights kept per neuron");
  app.add_option("--label-fraction", o.label_fraction, "fraction of training QA pairs that are labeled");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark and base caption corpus");
  std::string remote;
  auto* cap = app.add_subcommand("caption", "caption the unlabeled visuals");
  cap->add_option("--remote", remote, "chat-completion endpoint URL; defaults to the built-in oracle captioner");
  auto* pre = app.add_subcommand("pretrain", "pretrain the base model on base-domain captions");
  auto* score = app.add_subcommand("score", "compute importance scores and the update mask");
  auto* tgen = app.add_subcommand("train-gen", "train the QA generator");
  auto* syn = app.add_subcommand("synth", "sample pseudo QA pairs for the unlabeled visuals");
  std::string data = "leaml";
  auto* fin = app.add_subcommand("finetune", "fine-tune the VQA model");
  fin->add_option("--data", data, "training data: leaml (labeled + pseudo), labeled, or full")
      ->check(CLI::IsMember({"leaml", "labeled", "full"}));
  std::string checkpoint;
  auto* ev = app.add_subcommand("eval", "evaluate a VQA checkpoint on the test split");
  ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (default <out>/vqa.ckpt)");
  auto* mat = app.add_subcommand("matrix", "run every method over all configured seeds");
  auto* rep = app.add_subcommand("report", "print the matrix table or the last evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  RunConfig cfg;
  try {
    cfg = resolve_config(o, !gen->parsed() && !mat->parsed());
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kExitConfig;
  }
  const Paths p{cfg.output_dir};
  try {
    MetricsLog log(p.metrics(), hash_hex(config_hash(cfg)));
    if (gen->parsed()) stage_gen_data(cfg, p);
    else if (cap->parsed()) stage_caption(cfg, p, remote);
    else if (pre->parsed()) stage_pretrain(cfg, p, log);
    else if (score->parsed()) stage_score(cfg, p);
    else if (tgen->parsed()) stage_train_gen(cfg, p, log);
    else if (syn->parsed()) stage_synth(cfg, p, log);
    else if (fin->parsed()) stage_finetune(cfg, p, log, data);
    else if (ev->parsed()) stage_eval(cfg, p, log, checkpoint);
    else if (mat->parsed()) stage_matrix(cfg, p);
    else if (rep->parsed()) stage_report(p);
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}
