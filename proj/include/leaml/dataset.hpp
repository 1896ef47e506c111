#pragma once

// Example containers and the JSON Lines dataset format:
//   {"visual": [[...], ...], "question": str|null, "answer": str|null,
//    "options": [str, ...]|null, "split": "labeled"|"unlabeled"|"test"}
// Pseudo examples additionally carry {"source": {"run": str, "sample": int}}.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "leaml/error.hpp"
#include "leaml/vocab.hpp"

namespace leaml {

/// Visual features, one row per prefix position.
struct VisualInput {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> features;  // rows * dim, row-major

  double at(std::size_t r, std::size_t c) const { return features[r * dim + c]; }
  bool operator==(const VisualInput&) const = default;
};

struct QaExample {
  VisualInput visual;
  std::string question;
  std::string answer;
};

struct LabeledExample : QaExample {
  std::vector<std::string> options;
};

struct UnlabeledExample {
  VisualInput visual;
};

struct PseudoSource {
  std::string run;
  long sample = 0;
  bool operator==(const PseudoSource&) const = default;
};

struct PseudoExample : QaExample {
  PseudoSource source;
};

struct CaptionExample {
  VisualInput visual;
  std::string caption;
};

enum class Split { kLabeled, kUnlabeled, kTest };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kLabeled: return "labeled";
    case Split::kUnlabeled: return "unlabeled";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::kLabeled;
  if (s == "unlabeled") return Split::kUnlabeled;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

/// One line of a dataset file.
struct DatasetRecord {
  VisualInput visual;
  std::optional<std::string> question;
  std::optional<std::string> answer;
  std::optional<std::vector<std::string>> options;
  Split split = Split::kLabeled;
  std::optional<PseudoSource> source;
};

inline void validate_visual(const VisualInput& v) {
  if (v.rows == 0 || v.dim == 0 || v.features.size() != v.rows * v.dim) {
    throw InvalidInput("visual input has inconsistent shape");
  }
  for (double x : v.features)
    if (!std::isfinite(x)) throw InvalidInput("visual input contains a non-finite value");
}

inline void validate_labeled(const LabeledExample& e) {
  validate_visual(e.visual);
  if (normalize_whitespace(e.question).empty() || normalize_whitespace(e.answer).empty()) {
    throw InvalidInput("labeled example needs a question and an answer");
  }
  if (std::find(e.options.begin(), e.options.end(), e.answer) == e.options.end()) {
    throw InvalidInput("answer '" + e.answer + "' is not among the options");
  }
}

inline nlohmann::json visual_to_json(const VisualInput& v) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < v.rows; ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < v.dim; ++c) row.push_back(v.at(i, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline VisualInput visual_from_json(const nlohmann::json& rows) {
  if (!rows.is_array() || rows.empty()) throw FormatError("'visual' must be a non-empty matrix");
  VisualInput v;
  v.rows = rows.size();
  v.dim = rows.at(0).size();
  for (const auto& row : rows) {
    if (!row.is_array() || row.size() != v.dim) throw FormatError("'visual' rows differ in width");
    for (const auto& x : row) {
      if (!x.is_number()) throw FormatError("'visual' entries must be numbers");
      v.features.push_back(x.get<double>());
    }
  }
  validate_visual(v);
  return v;
}

inline nlohmann::json to_json(const DatasetRecord& r) {
  nlohmann::json j;
  j["visual"] = visual_to_json(r.visual);
  j["question"] = r.question ? nlohmann::json(*r.question) : nlohmann::json(nullptr);
  j["answer"] = r.answer ? nlohmann::json(*r.answer) : nlohmann::json(nullptr);
  j["options"] = r.options ? nlohmann::json(*r.options) : nlohmann::json(nullptr);
  j["split"] = to_string(r.split);
  if (r.source) j["source"] = {{"run", r.source->run}, {"sample", r.source->sample}};
  return j;
}

inline DatasetRecord record_from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.visual = visual_from_json(j.at("visual"));
  auto opt_string = [&](const char* key) -> std::optional<std::string> {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    if (!j.at(key).is_string()) throw FormatError(std::string("'") + key + "' must be a string");
    return j.at(key).get<std::string>();
  };
  r.question = opt_string("question");
  r.answer = opt_string("answer");
  if (j.contains("options") && !j.at("options").is_null()) {
    r.options = j.at("options").get<std::vector<std::string>>();
  }
  r.split = parse_split(j.at("split").get<std::string>());
  if (j.contains("source")) {
    r.source = PseudoSource{j.at("source").at("run").get<std::string>(),
                            j.at("source").at("sample").get<long>()};
  }
  return r;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<DatasetRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<DatasetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline DatasetRecord to_record(const LabeledExample& e, Split split) {
  return {e.visual, e.question, e.answer, e.options, split, std::nullopt};
}

inline DatasetRecord to_record(const UnlabeledExample& e) {
  return {e.visual, std::nullopt, std::nullopt, std::nullopt, Split::kUnlabeled, std::nullopt};
}

inline DatasetRecord to_record(const PseudoExample& e) {
  return {e.visual, e.question, e.answer, std::nullopt, Split::kUnlabeled, e.source};
}

inline void save_labeled(const std::filesystem::path& path, const std::vector<LabeledExample>& xs,
                         Split split) {
  std::vector<DatasetRecord> rs;
  for (const auto& x : xs) rs.push_back(to_record(x, split));
  write_jsonl(path, rs);
}

inline std::vector<LabeledExample> load_labeled(const std::filesystem::path& path) {
  std::vector<LabeledExample> out;
  for (auto& r : read_jsonl(path)) {
    if (!r.question || !r.answer || !r.options) {
      throw FormatError(path.string() + ": labeled record lacks question/answer/options");
    }
    LabeledExample e;
    e.visual = std::move(r.visual);
    e.question = *r.question;
    e.answer = *r.answer;
    e.options = *r.options;
    try {
      validate_labeled(e);
    } catch (const InvalidInput& err) {
      throw FormatError(path.string() + ": " + err.what());
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline void save_unlabeled(const std::filesystem::path& path, const std::vector<UnlabeledExample>& xs) {
  std::vector<DatasetRecord> rs;
  for (const auto& x : xs) rs.push_back(to_record(x));
  write_jsonl(path, rs);
}

inline std::vector<UnlabeledExample> load_unlabeled(const std::filesystem::path& path) {
  std::vector<UnlabeledExample> out;
  for (auto& r : read_jsonl(path)) {
    if (r.question || r.answer) throw FormatError(path.string() + ": unlabeled record carries text");
    out.push_back({std::move(r.visual)});
  }
  return out;
}

inline void save_pseudo(const std::filesystem::path& path, const std::vector<PseudoExample>& xs) {
  std::vector<DatasetRecord> rs;
  for (const auto& x : xs) rs.push_back(to_record(x));
  write_jsonl(path, rs);
}

inline std::vector<PseudoExample> load_pseudo(const std::filesystem::path& path) {
  std::vector<PseudoExample> out;
  for (auto& r : read_jsonl(path)) {
    if (!r.question || !r.answer || !r.source) {
      throw FormatError(path.string() + ": pseudo record lacks question/answer/source");
    }
    if (normalize_whitespace(*r.question).empty() || normalize_whitespace(*r.answer).empty()) {
      throw FormatError(path.string() + ": pseudo record has empty text");
    }
    PseudoExample e;
    e.visual = std::move(r.visual);
    e.question = *r.question;
    e.answer = *r.answer;
    e.source = *r.source;
    out.push_back(std::move(e));
  }
  return out;
}

/// Caption corpora use their own line shape: {"visual": [[...]], "caption": str}.
inline void save_caption_corpus(const std::filesystem::path& path, const std::vector<CaptionExample>& xs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& x : xs) out << nlohmann::json{{"visual", visual_to_json(x.visual)}, {"caption", x.caption}}.dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline std::vector<CaptionExample> load_caption_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<CaptionExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      CaptionExample e{visual_from_json(j.at("visual")), j.at("caption").get<std::string>()};
      if (normalize_whitespace(e.caption).empty()) throw FormatError("empty caption");
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace leaml
