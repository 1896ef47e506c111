// Acceptance suite: one PASS/FAIL line per criterion. Mechanism checks run
// against the oracles in oracles.hpp; the trend checks run the full default
// three-seed matrix and then inspect its artifacts.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "oracles.hpp"

using namespace leaml;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kFdRelTolerance = 1e-4;          // criterion 1
constexpr std::size_t kFdTrials = 100;            // criterion 1
constexpr double kFdCpuBudgetSeconds = 120.0;     // criterion 1
constexpr std::size_t kMaskRows = 200;            // criterion 2
constexpr std::size_t kDenseSteps = 200;          // criterion 4
constexpr double kScoreTolerance = 1e-12;         // criterion 5
constexpr std::size_t kNucleusDraws = 10000;      // criterion 6
constexpr double kNucleusTolerance = 0.02;        // criterion 6
constexpr double kLeamlMarginPoints = 5.0;        // criterion 7
constexpr double kMatrixBudgetSeconds = 30 * 60;  // criterion 7
constexpr double kAblationMarginPoints = 2.0;     // criterion 8

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return double(std::clock()) / CLOCKS_PER_SEC; }

void progress(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

Outcome run_guarded(const std::function<Outcome()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

// ---------------------------------------------------------------- 1

Outcome gradient_correctness() {
  const double c0 = cpu_seconds();
  auto ops = oracle::op_gradient_suite(kFdTrials, 101);
  const auto losses = oracle::loss_gradient_suite(kFdTrials, 202);
  const double cpu = cpu_seconds() - c0;
  ops.insert(ops.end(), losses.begin(), losses.end());
  bool ok = cpu < kFdCpuBudgetSeconds;
  double worst = 0;
  std::string worst_name, failed;
  std::size_t coords = 0;
  for (const auto& s : ops) {
    coords += s.coordinates;
    const bool good = s.trials >= kFdTrials && s.max_rel_error < kFdRelTolerance;
    if (!good) failed += " " + s.name;
    ok = ok && good;
    if (s.max_rel_error >= worst) {
      worst = s.max_rel_error;
      worst_name = s.name;
    }
  }
  return {ok, fmt("%zu checks (%zu ops + 4 losses) x %zu trials, %zu coordinates, max rel err %.2e (%s), cpu %.1fs%s",
                  ops.size(), ops.size() - losses.size(), kFdTrials, coords, worst, worst_name.c_str(), cpu,
                  failed.empty() ? "" : (", failing:" + failed).c_str())};
}

// ---------------------------------------------------------------- 2

Outcome selection_exactness() {
  std::size_t rows = 0, ties = 0, mismatch = 0, card = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = oracle::mask_sort_check(kMaskRows, seed);
    rows += r.rows;
    ties += r.rows_with_ties;
    mismatch += r.set_mismatches;
    card += r.cardinality_violations;
  }
  return {ties > 0 && mismatch == 0 && card == 0,
          fmt("%zu rows (%zu with ties), %zu set mismatches, %zu cardinality violations", rows, ties, mismatch, card)};
}

// ---------------------------------------------------------------- 3

Outcome frozen_invariance(const RunConfig& cfg, const fs::path& out) {
  std::size_t frozen = 0, frozen_changed = 0, trainable = 0, trainable_changed = 0, nonselectable = 0;
  for (auto seed : cfg.seeds) {
    const auto dir = out / ("seed_" + std::to_string(seed));
    const auto base = load_checkpoint(dir / "base.ckpt").params;
    const auto gen = load_checkpoint(dir / "generator_distill_neurons.ckpt").params;
    const auto mask = load_mask(dir / "mask_distill_neurons.bin");
    const auto& a = base.parameters();
    const auto& b = gen.parameters();
    if (a.size() != b.size()) return {false, "checkpoint layouts differ"};
    for (std::size_t p = 0; p < a.size(); ++p) {
      const auto* e = mask.find(a[p].name);
      if (!e) nonselectable += a[p].tensor->size();
      for (std::size_t i = 0; i < a[p].tensor->size(); ++i) {
        const bool changed =
            std::memcmp(&a[p].tensor->data[i], &b[p].tensor->data[i], sizeof(float)) != 0;
        if (e && e->trainable[i]) {
          ++trainable;
          trainable_changed += changed;
        } else {
          ++frozen;
          frozen_changed += changed;
        }
      }
    }
  }
  return {frozen > 0 && frozen_changed == 0 && trainable_changed > 0,
          fmt("default runs, %zu seeds: %zu/%zu frozen coordinates changed (%zu in non-selectable tensors); "
              "%zu/%zu trainable changed",
              cfg.seeds.size(), frozen_changed, frozen, nonselectable, trainable_changed, trainable)};
}

// ---------------------------------------------------------------- 4

Outcome dense_equivalence() {
  std::size_t ok = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) ok += oracle::dense_equivalence_check(seed, kDenseSteps);
  return {ok == 3, fmt("%zu/3 seeds bit-identical after %zu SGD steps with K = max row width", ok, kDenseSteps)};
}

// ---------------------------------------------------------------- 5

Outcome score_fidelity() {
  bool ok = true;
  double max_cancel = 0, max_err = 0;
  std::size_t cancelled = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = oracle::cancellation_check(seed);
    ok = ok && r.cancelled > 0 && r.max_cancelled_score == 0.0 && r.max_other_error <= kScoreTolerance &&
         r.other_nonzero > 0 && r.min_magnitude_rule_score > 0.0;
    cancelled += r.cancelled;
    max_cancel = std::max(max_cancel, r.max_cancelled_score);
    max_err = std::max(max_err, r.max_other_error);
  }
  return {ok, fmt("%zu cancellation coordinates, max score there %.1e; elsewhere max |diff| vs hand accumulation %.2e",
                  cancelled, max_cancel, max_err)};
}

// ---------------------------------------------------------------- 6

Outcome decoding_contracts() {
  bool ok = true;
  // Greedy: toy model in 64-bit against the recompute-everything oracle, and
  // the default model in 32-bit across repeated runs.
  {
    const auto vocab = oracle::toy_vocab();
    const auto cfg = oracle::toy_config(vocab.size());
    Rng rng(61);
    auto params = init_model<double>(cfg, 61);
    oracle::jitter(params, rng, 0.3);
    for (int i = 0; i < 20; ++i) {
      const auto v = oracle::random_visual(rng, cfg.visual_prefix_len, cfg.visual_dim);
      const std::vector<TokenId> prompt{tok::kBos};
      const auto a = greedy_decode(cfg, params, v, std::span<const TokenId>(prompt), 30);
      const auto b = greedy_decode(cfg, params, v, std::span<const TokenId>(prompt), 30);
      ok = ok && a.tokens == b.tokens && a.tokens == oracle::greedy_oracle(cfg, params, v, prompt, 30);
    }
  }
  {
    const RunConfig rc;
    const auto params = init_model<float>(rc.model, 62);
    Rng rng(62);
    std::vector<VisualInput> vs;
    std::vector<std::vector<TokenId>> prompts;
    for (int i = 0; i < 16; ++i) {
      vs.push_back(oracle::random_visual(rng, rc.model.visual_prefix_len, rc.model.visual_dim));
      prompts.push_back({tok::kBos});
    }
    std::vector<const VisualInput*> ptrs;
    for (const auto& v : vs) ptrs.push_back(&v);
    auto run = [&] {
      return greedy_decode_batch(rc.model, params, std::span<const VisualInput* const>(ptrs),
                                 std::span<const std::vector<TokenId>>(prompts), 16);
    };
    const auto a = run(), b = run();
    for (std::size_t i = 0; i < a.size(); ++i) ok = ok && a[i].tokens == b[i].tokens;
  }
  const std::vector<double> probs{0.5, 0.3, 0.2};
  const std::vector<double> expect{0.625, 0.375, 0.0};
  const auto f = oracle::nucleus_frequencies(probs, 0.7, kNucleusDraws, 7);
  double worst = 0;
  for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, std::abs(f[i] - expect[i]));
  ok = ok && worst <= kNucleusTolerance;
  return {ok, fmt("greedy reproducible and oracle-exact; nucleus [%.4f, %.4f, %.4f] over %zu draws, max dev %.4f",
                  f[0], f[1], f[2], kNucleusDraws, worst)};
}

// ---------------------------------------------------------------- 7 and 8

double pts(const MatrixReport& r, const std::string& m) { return 100.0 * r.mean_accuracy(m); }

Outcome pipeline_trend(const MatrixReport& r) {
  const double zs = pts(r, method::kZeroShot), ft = pts(r, method::kFullTuning), le = pts(r, method::kLeaml),
               fs_ = pts(r, method::kFullySupervised);
  const bool ok = zs < ft && ft < le && le >= ft + kLeamlMarginPoints && le <= fs_ &&
                  r.wall_seconds < kMatrixBudgetSeconds;
  return {ok, fmt("zero-shot %.1f < labeled-only %.1f < LEAML %.1f (margin %+.1f, need >= %.0f) <= fully-supervised "
                  "%.1f; matrix wall clock %.0fs on %u hardware threads",
                  zs, ft, le, le - ft, kLeamlMarginPoints, fs_, r.wall_seconds, std::thread::hardware_concurrency())};
}

Outcome ablation_trend(const MatrixReport& r) {
  const double b = pts(r, method::kBaseline), d = pts(r, method::kDistill), n = pts(r, method::kDistillNeurons);
  const bool ok = b <= d && d <= n && n >= b + kAblationMarginPoints;
  return {ok, fmt("Baseline %.1f <= +Distill. %.1f <= +QA Neurons %.1f (margin over Baseline %+.1f, need >= %.0f)", b,
                  d, n, n - b, kAblationMarginPoints)};
}

// ---------------------------------------------------------------- 9

Outcome pseudo_integrity(const RunConfig& cfg, const fs::path& out, const MatrixReport& rep) {
  const auto vocab = synth::build_vocabulary();
  std::size_t emitted = 0, reparsed = 0;
  std::string rates;
  for (const auto& row : rep.rows) {
    if (row.synthesis.is_null() || row.method == method::kLeaml) continue;
    if (!row.synthesis.contains("parse_failure_rate") || !row.synthesis.contains("dedup_rate")) {
      return {false, "synthesis report lacks rates"};
    }
    if (row.seed == cfg.seeds.front()) {
      rates += fmt(" %s: fail %.3f dedup %.3f;", row.method.c_str(), row.synthesis["parse_failure_rate"].get<double>(),
                   row.synthesis["dedup_rate"].get<double>());
    }
  }
  for (auto seed : cfg.seeds)
    for (const char* v : {"baseline", "distill", "distill_neurons"}) {
      const auto pseudo = load_pseudo(out / ("seed_" + std::to_string(seed)) / (std::string("pseudo_") + v + ".jsonl"));
      for (const auto& e : pseudo) {
        ++emitted;
        const auto seq = assemble_qa_sequence(e.question, e.answer, vocab, cfg.model.max_text_len());
        const std::vector<TokenId> body(seq.ids.begin() + 1, seq.ids.end());
        const auto parsed = parse_qa_output(vocab.decode(body));
        if (const auto* qa = std::get_if<QaPair>(&parsed); qa && qa->question == e.question && qa->answer == e.answer)
          ++reparsed;
      }
    }

  // Re-synthesize one seed's pseudo set from its saved generator checkpoint.
  const auto seed = cfg.seeds.front();
  const auto sc = config_for_seed(cfg, seed);
  const auto dir = out / ("seed_" + std::to_string(seed));
  const auto data = prepare_data(sc);
  const auto ck = load_checkpoint(dir / "generator_distill_neurons.ckpt");
  auto again = synthesize_pseudo_dataset(ck.config, ck.params, std::span<const UnlabeledExample>(data.bench.unlabeled),
                                         vocab, synthesis_decode(sc), "seed" + std::to_string(seed) + "/distill_neurons",
                                         std::max<std::size_t>(1, std::thread::hardware_concurrency()));
  const auto redo = out / "resynthesized.jsonl";
  save_pseudo(redo, again.examples);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const bool identical = slurp(redo) == slurp(dir / "pseudo_distill_neurons.jsonl");
  return {emitted > 0 && reparsed == emitted && identical,
          fmt("%zu/%zu emitted pairs re-parse; resynthesis from checkpoint byte-identical: %s;", reparsed, emitted,
              identical ? "yes" : "no") +
              rates};
}

// ---------------------------------------------------------------- 10

template <typename F>
std::string typed_error_of(F&& f) {
  try {
    f();
    return "none";
  } catch (const CheckpointError& e) {
    return to_string(e.code());
  } catch (const FormatError&) {
    return "format";
  } catch (const Error& e) {
    return std::string("untyped: ") + e.what();
  } catch (const std::exception& e) {
    return std::string("foreign: ") + e.what();
  }
}

Outcome persistence(const fs::path& out) {
  const auto dir = out / "persistence";
  fs::create_directories(dir);
  const RunConfig rc;
  bool ok = true;
  std::vector<std::string> notes;

  const auto params = init_model<float>(rc.model, 5);
  save_checkpoint(dir / "model.ckpt", rc.model, params, 99);
  const auto back = load_checkpoint(dir / "model.ckpt");
  ok = ok && back.params.bit_equal(params) && back.config == rc.model && back.config_hash == 99;

  synth::BenchmarkSpec spec;
  spec.n_train_visuals = 200;
  spec.label_fraction = 0.05;
  spec.n_test = 50;
  spec.n_base_captions = 30;
  const auto bench = synth::generate_benchmark(spec);
  save_labeled(dir / "labeled.jsonl", bench.labeled, Split::kLabeled);
  save_unlabeled(dir / "unlabeled.jsonl", bench.unlabeled);
  std::vector<PseudoExample> pseudo;
  for (std::size_t i = 0; i < 10; ++i) {
    PseudoExample p;
    static_cast<QaExample&>(p) = bench.train_full[i];
    p.source = {"run-x", long(i) * 3 + 1};
    pseudo.push_back(p);
  }
  save_pseudo(dir / "pseudo.jsonl", pseudo);
  const auto corpus = synth::generate_base_corpus(spec);
  save_caption_corpus(dir / "corpus.jsonl", corpus);

  const auto l2 = load_labeled(dir / "labeled.jsonl");
  const auto u2 = load_unlabeled(dir / "unlabeled.jsonl");
  const auto p2 = load_pseudo(dir / "pseudo.jsonl");
  const auto c2 = load_caption_corpus(dir / "corpus.jsonl");
  bool data_ok = l2.size() == bench.labeled.size() && u2.size() == bench.unlabeled.size() && p2.size() == pseudo.size() &&
                 c2.size() == corpus.size();
  for (std::size_t i = 0; data_ok && i < l2.size(); ++i)
    data_ok = l2[i].visual.features == bench.labeled[i].visual.features && l2[i].question == bench.labeled[i].question &&
              l2[i].answer == bench.labeled[i].answer && l2[i].options == bench.labeled[i].options;
  for (std::size_t i = 0; data_ok && i < u2.size(); ++i)
    data_ok = u2[i].visual.features == bench.unlabeled[i].visual.features;
  for (std::size_t i = 0; data_ok && i < p2.size(); ++i)
    data_ok = p2[i].visual.features == pseudo[i].visual.features && p2[i].question == pseudo[i].question &&
              p2[i].answer == pseudo[i].answer && p2[i].source == pseudo[i].source;
  for (std::size_t i = 0; data_ok && i < c2.size(); ++i)
    data_ok = c2[i].visual.features == corpus[i].visual.features && c2[i].caption == corpus[i].caption;
  ok = ok && data_ok;

  // Checkpoint corruption.
  std::ifstream in(dir / "model.ckpt", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), {});
  std::map<std::string, std::size_t> seen;
  std::size_t cases = 0, untyped = 0, silent = 0;
  auto probe = [&](const std::string& content, const std::string& want) {
    std::ofstream(dir / "bad.ckpt", std::ios::binary | std::ios::trunc) << content;
    const auto got = typed_error_of([&] { load_checkpoint(dir / "bad.ckpt"); });
    ++cases;
    ++seen[got];
    if (got == "none") ++silent;
    else if (got.rfind("untyped", 0) == 0 || got.rfind("foreign", 0) == 0) ++untyped;
    if (!want.empty() && got != want) {
      ok = false;
      notes.push_back("wanted " + want + ", got " + got);
    }
  };
  for (std::size_t cut : {0ul, 3ul, 4ul, 8ul, 20ul, 64ul, bytes.size() / 2, bytes.size() - 9, bytes.size() - 1})
    probe(bytes.substr(0, cut), "truncated");
  {
    auto b = bytes;
    b[0] = 'X';
    probe(b, "bad-magic");
    b = bytes;
    b[4] = 99;
    probe(b, "unsupported-version");
  }
  Rng rng(10);
  for (int i = 0; i < 200; ++i) {
    auto b = bytes;
    const std::size_t pos = 8 + rng.below(b.size() - 16);
    b[pos] = char(b[pos] ^ (1 + rng.below(255)));
    probe(b, "");
  }
  probe(bytes + "trailing", "");
  const auto missing = typed_error_of([&] { load_checkpoint(dir / "does_not_exist.ckpt"); });
  ok = ok && missing == "io" && silent == 0 && untyped == 0;

  // Dataset corruption.
  std::ifstream lin(dir / "labeled.jsonl", std::ios::binary);
  const std::string lines((std::istreambuf_iterator<char>(lin)), {});
  std::size_t data_cases = 0, data_bad = 0;
  auto data_probe = [&](const std::string& content) {
    std::ofstream(dir / "bad.jsonl", std::ios::binary | std::ios::trunc) << content;
    ++data_cases;
    if (typed_error_of([&] { load_labeled(dir / "bad.jsonl"); }) != "format") ++data_bad;
  };
  data_probe(lines.substr(0, lines.size() / 2));
  data_probe(lines + "{\"visual\": [[1, 2]], \"question\": 3}\n");
  data_probe(lines + "not json at all\n");
  data_probe("{\"visual\": [[1, 2], [3]], \"question\": \"q\", \"answer\": \"a\", \"options\": [\"a\"], \"split\": \"labeled\"}\n");
  data_probe("{\"visual\": [[1, 2]], \"question\": \"q\", \"answer\": \"a\", \"options\": [\"b\"], \"split\": \"labeled\"}\n");
  ok = ok && data_bad == 0;

  std::string summary;
  for (const auto& [k, v] : seen) summary += fmt(" %s=%zu", k.c_str(), v);
  for (const auto& n : notes) summary += "; " + n;
  return {ok, fmt("model, datasets, pseudo set and caption corpus round-trip bit-exact: %s; %zu corrupted checkpoints "
                  "(%zu silent, %zu untyped):",
                  data_ok ? "yes" : "no", cases, silent, untyped) +
                  summary + fmt("; %zu corrupted datasets, %zu not FormatError", data_cases, data_bad)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string out = "acceptance_run";
  std::string report;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--out", out, "directory for matrix artifacts");
  app.add_option("--report", report, "also write the PASS/FAIL lines and the matrix table to this file");
  app.add_option("--jobs", jobs, "parallel matrix branches");
  CLI11_PARSE(app, argc, argv);
  const fs::path out_dir(out);
  fs::create_directories(out_dir);

  std::map<int, Outcome> results;
  progress("criterion 1: finite differences");
  results[1] = run_guarded(gradient_correctness);
  progress("criterion 2: selection");
  results[2] = run_guarded(selection_exactness);
  progress("criterion 4: dense equivalence");
  results[4] = run_guarded(dense_equivalence);
  progress("criterion 5: score cancellation");
  results[5] = run_guarded(score_fidelity);
  progress("criterion 6: decoding");
  results[6] = run_guarded(decoding_contracts);
  progress("criterion 10: persistence");
  results[10] = run_guarded([&] { return persistence(out_dir); });

  RunConfig cfg;
  cfg.jobs = jobs;
  cfg.threads = 1;
  cfg.output_dir = (out_dir / "matrix").string();
  progress("criteria 3, 7, 8, 9: default matrix over seeds {1,2,3} with " + std::to_string(jobs) + " jobs");
  std::optional<MatrixReport> rep;
  std::string table;
  try {
    rep = run_matrix(cfg, out_dir / "matrix");
    table = format_matrix(*rep);
    std::cerr << table;
  } catch (const std::exception& e) {
    for (int c : {3, 7, 8, 9}) results[c] = {false, std::string("matrix failed: ") + e.what()};
  }
  if (rep) {
    results[3] = run_guarded([&] { return frozen_invariance(cfg, out_dir / "matrix"); });
    results[7] = run_guarded([&] { return pipeline_trend(*rep); });
    results[8] = run_guarded([&] { return ablation_trend(*rep); });
    results[9] = run_guarded([&] { return pseudo_integrity(cfg, out_dir / "matrix", *rep); });
  }

  static const char* names[] = {"",
                                "gradient correctness",
                                "selection exactness",
                                "frozen invariance",
                                "dense equivalence",
                                "importance score fidelity",
                                "decoding contracts",
                                "pipeline trend",
                                "ablation trend",
                                "pseudo-data integrity",
                                "persistence"};
  int failed = 0;
  std::string lines;
  for (int c = 1; c <= 10; ++c) {
    const auto& r = results[c];
    failed += !r.pass;
    lines += fmt("%s [%d] %s: ", r.pass ? "PASS" : "FAIL", c, names[c]) + r.detail + "\n";
  }
  std::fputs(lines.c_str(), stdout);
  std::fflush(stdout);
  if (!report.empty()) std::ofstream(report) << lines << '\n' << table;
  return failed == 0 ? 0 : 1;
}
