#pragma once

// Procedural visual-QA domain. Scenes are small sets of latent attributes; a
// seeded random projection turns them into visual prefix features. The same
// attribute slots carry a "base" vocabulary used for pretraining captions and a
// disjoint "ood" vocabulary used for the target benchmark.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/dataset.hpp"
#include "leaml/rng.hpp"
#include "leaml/vocab.hpp"

namespace leaml::synth {

enum class Domain { kBase, kOod };

inline const char* to_string(Domain d) { return d == Domain::kBase ? "base" : "ood"; }

inline Domain parse_domain(const std::string& s) {
  if (s == "base") return Domain::kBase;
  if (s == "ood") return Domain::kOod;
  throw FormatError("unknown domain '" + s + "'");
}

inline constexpr std::size_t kObjects = 8;
inline constexpr std::size_t kColors = 6;
inline constexpr std::size_t kCounts = 4;
inline constexpr std::size_t kZones = 4;
inline constexpr std::size_t kAttributeDim = kObjects + kColors + kCounts + kZones + 2 + 2;

struct Scene {
  int object = 0;
  int color = 0;
  int count = 1;  // 1..4
  int zone = 0;
  bool anomaly = false;
  Domain domain = Domain::kOod;

  bool operator==(const Scene&) const = default;
};

inline void validate(const Scene& s) {
  if (s.object < 0 || s.object >= int(kObjects) || s.color < 0 || s.color >= int(kColors) || s.count < 1 ||
      s.count > int(kCounts) || s.zone < 0 || s.zone >= int(kZones)) {
    throw InvalidInput("scene attribute outside its declared range");
  }
}

inline void to_json(nlohmann::json& j, const Scene& s) {
  j = {{"object", s.object}, {"color", s.color},     {"count", s.count},
       {"zone", s.zone},     {"anomaly", s.anomaly}, {"domain", to_string(s.domain)}};
}

inline void from_json(const nlohmann::json& j, Scene& s) {
  s.object = j.at("object").get<int>();
  s.color = j.at("color").get<int>();
  s.count = j.at("count").get<int>();
  s.zone = j.at("zone").get<int>();
  s.anomaly = j.at("anomaly").get<bool>();
  s.domain = parse_domain(j.at("domain").get<std::string>());
  validate(s);
}

struct Lexicon {
  std::array<const char*, kObjects> objects;
  std::array<const char*, kColors> colors;
  std::array<const char*, kCounts> counts;
  std::array<const char*, kZones> zones;
  const char* anomaly_present;
  const char* anomaly_absent;
  std::vector<const char*> caption_styles;
};

inline const Lexicon& lexicon(Domain d) {
  static const Lexicon base{
      {"cat", "dog", "car", "tree", "house", "boat", "bird", "chair"},
      {"red", "blue", "green", "yellow", "black", "white"},
      {"single", "pair", "trio", "quartet"},
      {"left", "right", "top", "bottom"},
      "damaged",
      "clean",
      {"a photo of {count} {color} {object} on the {zone} side {anomaly}",
       "{count} {color} {object} at the {zone} looking {anomaly}",
       "picture showing {count} {object} colored {color} toward the {zone} {anomaly}"}};
  static const Lexicon ood{
      {"polyp", "ulcer", "lesion", "erosion", "clip", "stent", "diverticulum", "varix"},
      {"pink", "crimson", "pale", "violet", "amber", "ochre"},
      {"one", "two", "three", "four"},
      {"proximal", "distal", "anterior", "posterior"},
      "with active bleeding",
      "without bleeding",
      {"endoscopic view shows {count} {color} {object} in the {zone} segment {anomaly}",
       "{zone} mucosa with {count} {color} {object} {anomaly}",
       "the lumen contains {count} {color} {object} located {zone} {anomaly}",
       "{count} {object} of {color} tone seen on the {zone} wall {anomaly}"}};
  return d == Domain::kBase ? base : ood;
}

// ---------------------------------------------------------------- templates

enum class Template { kObject, kColor, kZone, kCount, kAnomaly };

inline constexpr std::array<Template, 5> kTemplates{Template::kObject, Template::kColor, Template::kZone,
                                                    Template::kCount, Template::kAnomaly};

struct TemplateInfo {
  const char* name;
  const char* question;
  const char* difficulty;
};

inline const TemplateInfo& info(Template t) {
  static const std::array<TemplateInfo, 5> table{{
      {"object", "what finding is visible", "hard"},
      {"color", "what color is the finding", "medium"},
      {"zone", "where is the finding located", "medium"},
      {"count", "how many findings are there", "easy"},
      {"anomaly", "is there any bleeding", "easy"},
  }};
  return table[static_cast<std::size_t>(t)];
}

inline std::optional<Template> template_of(std::string_view question) {
  const auto q = normalize_whitespace(question);
  for (auto t : kTemplates)
    if (q == info(t).question) return t;
  return std::nullopt;
}

inline std::optional<Template> template_by_name(std::string_view name) {
  for (auto t : kTemplates)
    if (name == info(t).name) return t;
  return std::nullopt;
}

/// Gold answer of a template question for an OOD scene.
inline std::string answer_for(Template t, const Scene& s) {
  if (s.domain != Domain::kOod) throw InvalidInput("benchmark questions are defined for ood scenes only");
  validate(s);
  const auto& lx = lexicon(Domain::kOod);
  switch (t) {
    case Template::kObject: return lx.objects[std::size_t(s.object)];
    case Template::kColor: return lx.colors[std::size_t(s.color)];
    case Template::kZone: return lx.zones[std::size_t(s.zone)];
    case Template::kCount: return lx.counts[std::size_t(s.count - 1)];
    case Template::kAnomaly: return s.anomaly ? "yes" : "no";
  }
  return {};
}

/// Every answer a template can take, in lexicon order.
inline std::vector<std::string> answer_space(Template t) {
  const auto& lx = lexicon(Domain::kOod);
  switch (t) {
    case Template::kObject: return {lx.objects.begin(), lx.objects.end()};
    case Template::kColor: return {lx.colors.begin(), lx.colors.end()};
    case Template::kZone: return {lx.zones.begin(), lx.zones.end()};
    case Template::kCount: return {lx.counts.begin(), lx.counts.end()};
    case Template::kAnomaly: return {"yes", "no"};
  }
  return {};
}

// ---------------------------------------------------------------- visuals

/// Fixed random projection from the attribute one-hot to visual features.
class SceneEncoder {
 public:
  SceneEncoder(std::size_t rows, std::size_t dim, std::uint64_t seed, double noise)
      : rows_(rows), dim_(dim), noise_(noise), proj_(rows * dim * kAttributeDim) {
    if (rows == 0 || dim == 0) throw InvalidInput("scene encoder needs positive rows and dim");
    if (!(noise >= 0.0)) throw InvalidInput("noise scale must be non-negative");
    Rng rng(derive_seed({seed, 0xe7c0de}));
    const double s = 1.0 / std::sqrt(6.0);  // six active attribute bits per scene
    for (auto& w : proj_) w = rng.normal() * s;
  }

  std::size_t rows() const { return rows_; }
  std::size_t dim() const { return dim_; }
  double noise() const { return noise_; }

  static std::array<double, kAttributeDim> one_hot(const Scene& s) {
    validate(s);
    std::array<double, kAttributeDim> h{};
    std::size_t o = 0;
    h[o + std::size_t(s.object)] = 1.0;
    o += kObjects;
    h[o + std::size_t(s.color)] = 1.0;
    o += kColors;
    h[o + std::size_t(s.count - 1)] = 1.0;
    o += kCounts;
    h[o + std::size_t(s.zone)] = 1.0;
    o += kZones;
    h[o + (s.anomaly ? 1 : 0)] = 1.0;
    o += 2;
    h[o + (s.domain == Domain::kOod ? 1 : 0)] = 1.0;
    return h;
  }

  VisualInput encode(const Scene& s, std::uint64_t noise_seed) const {
    const auto h = one_hot(s);
    VisualInput v{rows_, dim_, std::vector<double>(rows_ * dim_, 0.0)};
    Rng rng(noise_seed);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < dim_; ++c) {
        const double* w = proj_.data() + (r * dim_ + c) * kAttributeDim;
        double x = 0.0;
        for (std::size_t a = 0; a < kAttributeDim; ++a) x += w[a] * h[a];
        v.features[r * dim_ + c] = x + noise_ * rng.normal();
      }
    return v;
  }

 private:
  std::size_t rows_, dim_;
  double noise_;
  std::vector<double> proj_;
};

// ---------------------------------------------------------------- captions

inline std::string fill_style(std::string_view style, const Scene& s, const Lexicon& lx,
                              const std::array<int, 4>& attr) {
  std::string out;
  for (const auto& w : split_words(style)) {
    std::string word;
    if (w == "{object}") word = lx.objects[std::size_t(attr[0])];
    else if (w == "{color}") word = lx.colors[std::size_t(attr[1])];
    else if (w == "{count}") word = lx.counts[std::size_t(attr[2] - 1)];
    else if (w == "{zone}") word = lx.zones[std::size_t(attr[3])];
    else if (w == "{anomaly}") word = s.anomaly ? lx.anomaly_present : lx.anomaly_absent;
    else word = w;
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

/// Teacher caption for an OOD scene. With corruption_rate > 0, one attribute
/// word is replaced by a wrong value with that probability.
inline std::string oracle_caption(const Scene& s, std::uint64_t style_seed, double corruption_rate = 0.0) {
  if (s.domain != Domain::kOod) throw InvalidInput("oracle_caption: scene is not from the ood domain");
  if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0)) throw InvalidInput("corruption rate must be in [0, 1]");
  validate(s);
  const auto& lx = lexicon(Domain::kOod);
  Rng rng(derive_seed({style_seed, 0xca9}));
  const auto& style = lx.caption_styles[rng.below(lx.caption_styles.size())];
  std::array<int, 4> attr{s.object, s.color, s.count, s.zone};
  if (corruption_rate > 0.0 && rng.bernoulli(corruption_rate)) {
    const std::size_t which = rng.below(4);
    const std::array<int, 4> arity{int(kObjects), int(kColors), int(kCounts), int(kZones)};
    const int base = which == 2 ? 1 : 0;
    const int shift = 1 + int(rng.below(std::uint64_t(arity[which] - 1)));
    attr[which] = base + (attr[which] - base + shift) % arity[which];
  }
  return fill_style(style, s, lx, attr);
}

inline std::string base_caption(const Scene& s, std::uint64_t style_seed) {
  if (s.domain != Domain::kBase) throw InvalidInput("base_caption: scene is not from the base domain");
  validate(s);
  const auto& lx = lexicon(Domain::kBase);
  Rng rng(derive_seed({style_seed, 0xba5e}));
  const auto& style = lx.caption_styles[rng.below(lx.caption_styles.size())];
  return fill_style(style, s, lx, {s.object, s.color, s.count, s.zone});
}

/// Every word the domain can produce: captions of both domains, questions and answers.
inline Vocabulary build_vocabulary() {
  std::set<std::string> words;
  auto add_text = [&](std::string_view text) {
    for (auto& w : split_words(text))
      if (w.front() != '{') words.insert(w);
  };
  for (auto d : {Domain::kBase, Domain::kOod}) {
    const auto& lx = lexicon(d);
    for (auto w : lx.objects) add_text(w);
    for (auto w : lx.colors) add_text(w);
    for (auto w : lx.counts) add_text(w);
    for (auto w : lx.zones) add_text(w);
    add_text(lx.anomaly_present);
    add_text(lx.anomaly_absent);
    for (auto s : lx.caption_styles) add_text(s);
  }
  for (auto t : kTemplates) {
    add_text(info(t).question);
    for (const auto& a : answer_space(t)) add_text(a);
  }
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

// ---------------------------------------------------------------- benchmark

struct BenchmarkSpec {
  std::size_t n_train_visuals = 2000;
  double label_fraction = 0.01;
  std::size_t n_test = 500;
  std::size_t questions_per_visual = 2;
  std::size_t n_base_captions = 5000;
  std::size_t visual_rows = 4;
  std::size_t visual_dim = 32;
  double noise = 0.3;
  double anomaly_rate = 0.5;
  std::uint64_t encoder_seed = 7;
  std::uint64_t content_seed = 11;
  std::uint64_t split_seed = 13;

  void validate() const {
    if (n_train_visuals == 0 || n_test == 0 || questions_per_visual == 0 || n_base_captions == 0) {
      throw InvalidInput("benchmark sizes must be positive");
    }
    if (questions_per_visual > kTemplates.size()) throw InvalidInput("more questions per visual than templates");
    if (!(label_fraction > 0.0 && label_fraction < 1.0)) throw InvalidInput("label_fraction must lie in (0, 1)");
    if (!(anomaly_rate >= 0.0 && anomaly_rate <= 1.0)) throw InvalidInput("anomaly_rate must lie in [0, 1]");
    if (labeled_pair_target() == 0) throw InvalidInput("label_fraction yields zero labeled QA pairs");
  }

  std::size_t labeled_pair_target() const {
    return static_cast<std::size_t>(
        std::llround(double(n_train_visuals * questions_per_visual) * label_fraction));
  }
};

inline void to_json(nlohmann::json& j, const BenchmarkSpec& s) {
  j = {{"n_train_visuals", s.n_train_visuals},
       {"label_fraction", s.label_fraction},
       {"n_test", s.n_test},
       {"questions_per_visual", s.questions_per_visual},
       {"n_base_captions", s.n_base_captions},
       {"visual_rows", s.visual_rows},
       {"visual_dim", s.visual_dim},
       {"noise", s.noise},
       {"anomaly_rate", s.anomaly_rate},
       {"encoder_seed", s.encoder_seed},
       {"content_seed", s.content_seed},
       {"split_seed", s.split_seed}};
}

inline void from_json(const nlohmann::json& j, BenchmarkSpec& s) {
  BenchmarkSpec d;
  s.n_train_visuals = j.value("n_train_visuals", d.n_train_visuals);
  s.label_fraction = j.value("label_fraction", d.label_fraction);
  s.n_test = j.value("n_test", d.n_test);
  s.questions_per_visual = j.value("questions_per_visual", d.questions_per_visual);
  s.n_base_captions = j.value("n_base_captions", d.n_base_captions);
  s.visual_rows = j.value("visual_rows", d.visual_rows);
  s.visual_dim = j.value("visual_dim", d.visual_dim);
  s.noise = j.value("noise", d.noise);
  s.anomaly_rate = j.value("anomaly_rate", d.anomaly_rate);
  s.encoder_seed = j.value("encoder_seed", d.encoder_seed);
  s.content_seed = j.value("content_seed", d.content_seed);
  s.split_seed = j.value("split_seed", d.split_seed);
}

/// Template name -> every answer observed for it across the benchmark.
using OptionCatalog = std::map<std::string, std::vector<std::string>>;

struct Benchmark {
  std::vector<LabeledExample> labeled;
  std::vector<UnlabeledExample> unlabeled;
  std::vector<LabeledExample> test;
  std::vector<LabeledExample> train_full;  // every training QA pair, labeled or not
  std::vector<Scene> labeled_scenes;       // aligned with labeled
  std::vector<Scene> unlabeled_scenes;     // aligned with unlabeled
  std::vector<Scene> test_scenes;          // aligned with test
  OptionCatalog catalog;
};

inline Scene random_scene(Rng& rng, Domain d, double anomaly_rate) {
  Scene s;
  s.domain = d;
  s.object = int(rng.below(kObjects));
  s.color = int(rng.below(kColors));
  s.count = 1 + int(rng.below(kCounts));
  s.zone = int(rng.below(kZones));
  s.anomaly = rng.bernoulli(anomaly_rate);
  return s;
}

inline SceneEncoder make_encoder(const BenchmarkSpec& spec) {
  return SceneEncoder(spec.visual_rows, spec.visual_dim, spec.encoder_seed, spec.noise);
}

inline Benchmark generate_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  const auto enc = make_encoder(spec);
  struct Item {
    Scene scene;
    VisualInput visual;
    std::vector<Template> questions;
  };
  auto make_items = [&](std::size_t n, std::uint64_t tag) {
    std::vector<Item> items(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed({spec.content_seed, tag, i}));
      items[i].scene = random_scene(rng, Domain::kOod, spec.anomaly_rate);
      std::vector<Template> ts(kTemplates.begin(), kTemplates.end());
      rng.shuffle(ts);
      items[i].questions.assign(ts.begin(), ts.begin() + std::ptrdiff_t(spec.questions_per_visual));
      items[i].visual = enc.encode(items[i].scene, derive_seed({spec.content_seed, tag + 1, i}));
    }
    return items;
  };
  const auto train = make_items(spec.n_train_visuals, 100);
  const auto test = make_items(spec.n_test, 200);

  Benchmark b;
  std::map<std::string, std::set<std::string>> seen;
  for (const auto* items : {&train, &test})
    for (const auto& it : *items)
      for (auto t : it.questions) seen[info(t).name].insert(answer_for(t, it.scene));
  for (auto t : kTemplates) {
    auto& opts = b.catalog[info(t).name];
    for (const auto& a : answer_space(t))
      if (seen[info(t).name].count(a)) opts.push_back(a);
  }
  auto qa = [&](const Item& it, Template t) {
    LabeledExample e;
    e.visual = it.visual;
    e.question = info(t).question;
    e.answer = answer_for(t, it.scene);
    e.options = b.catalog.at(info(t).name);
    return e;
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed({spec.split_seed, 0x5b1}));
  split_rng.shuffle(order);
  const std::size_t target = spec.labeled_pair_target();
  std::vector<bool> is_labeled(train.size(), false);
  std::size_t pairs = 0;
  for (std::size_t k = 0; k < order.size() && pairs < target; ++k) {
    is_labeled[order[k]] = true;
    pairs += train[order[k]].questions.size();
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (auto t : train[i].questions) {
      b.train_full.push_back(qa(train[i], t));
      if (is_labeled[i]) {
        b.labeled.push_back(b.train_full.back());
        b.labeled_scenes.push_back(train[i].scene);
      }
    }
    if (!is_labeled[i]) {
      b.unlabeled.push_back({train[i].visual});
      b.unlabeled_scenes.push_back(train[i].scene);
    }
  }
  for (const auto& it : test)
    for (auto t : it.questions) {
      b.test.push_back(qa(it, t));
      b.test_scenes.push_back(it.scene);
    }
  return b;
}

/// Base-domain caption corpus used for pretraining.
inline std::vector<CaptionExample> generate_base_corpus(const BenchmarkSpec& spec) {
  spec.validate();
  const auto enc = make_encoder(spec);
  std::vector<CaptionExample> out(spec.n_base_captions);
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng(derive_seed({spec.content_seed, 300, i}));
    const auto s = random_scene(rng, Domain::kBase, spec.anomaly_rate);
    out[i].visual = enc.encode(s, derive_seed({spec.content_seed, 301, i}));
    out[i].caption = base_caption(s, derive_seed({spec.content_seed, 302, i}));
  }
  return out;
}

/// Caption style seed for the i-th unlabeled visual.
inline std::uint64_t caption_style_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed({seed, 0xc4b, index});
}

// ---------------------------------------------------------------- files

inline void save_scenes(const std::filesystem::path& path, const std::vector<Scene>& scenes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& s : scenes) out << nlohmann::json(s).dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<Scene> load_scenes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Scene> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Scene>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Captions keyed by unlabeled index: {"index": int, "caption": str} per line.
inline void save_captions(const std::filesystem::path& path, const std::vector<std::string>& captions) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < captions.size(); ++i)
    out << nlohmann::json{{"index", i}, {"caption", captions[i]}}.dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<std::string> load_captions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto index = j.at("index").get<std::size_t>();
      if (index != out.size()) throw FormatError("caption index out of sequence");
      out.push_back(j.at("caption").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace leaml::synth
