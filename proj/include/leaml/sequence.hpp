#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "leaml/error.hpp"
#include "leaml/vocab.hpp"

namespace leaml {

/// Token ids plus the positions whose prediction enters the loss. loss_mask[i]
/// refers to predicting ids[i] from ids[0..i-1].
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<bool> loss_mask;

  std::size_t size() const { return ids.size(); }
  std::size_t masked_in_count() const {
    std::size_t n = 0;
    for (bool b : loss_mask) n += b ? 1 : 0;
    return n;
  }
};

inline constexpr std::size_t kDefaultMaxTextLen = 60;

namespace detail {

inline std::vector<TokenId> encode_field(std::string_view text, const Vocabulary& vocab,
                                         const char* what) {
  auto ids = vocab.encode(text);
  if (ids.empty()) throw InvalidInput(std::string("empty ") + what + " rejected");
  for (TokenId id : ids) {
    if (id != tok::kUnk && is_special(id)) {
      throw InvalidInput(std::string(what) + " contains a reserved token: '" +
                         std::string(text) + "'");
    }
  }
  return ids;
}

inline void check_length(std::size_t n, std::size_t max_len) {
  if (n > max_len) {
    throw TruncationError("sequence of " + std::to_string(n) + " tokens exceeds the limit of " +
                          std::to_string(max_len));
  }
}

}  // namespace detail

/// [BOS, <q>, Q, <q>, <a>, A, <a>, EOS]; every position after BOS is a target.
inline TokenSequence assemble_qa_sequence(std::string_view question, std::string_view answer,
                                          const Vocabulary& vocab,
                                          std::size_t max_len = kDefaultMaxTextLen) {
  const auto q = detail::encode_field(question, vocab, "question");
  const auto a = detail::encode_field(answer, vocab, "answer");
  TokenSequence s;
  s.ids.reserve(q.size() + a.size() + 6);
  s.ids.push_back(tok::kBos);
  s.ids.push_back(tok::kQOpen);
  s.ids.insert(s.ids.end(), q.begin(), q.end());
  s.ids.push_back(tok::kQOpen);
  s.ids.push_back(tok::kAOpen);
  s.ids.insert(s.ids.end(), a.begin(), a.end());
  s.ids.push_back(tok::kAOpen);
  s.ids.push_back(tok::kEos);
  detail::check_length(s.ids.size(), max_len);
  s.loss_mask.assign(s.ids.size(), true);
  s.loss_mask[0] = false;
  return s;
}

/// [BOS, Q, <a>, A, EOS]; only the answer tokens and EOS are targets.
inline TokenSequence assemble_vqa_sequence(std::string_view question, std::string_view answer,
                                           const Vocabulary& vocab,
                                           std::size_t max_len = kDefaultMaxTextLen) {
  const auto q = detail::encode_field(question, vocab, "question");
  const auto a = detail::encode_field(answer, vocab, "answer");
  TokenSequence s;
  s.ids.push_back(tok::kBos);
  s.ids.insert(s.ids.end(), q.begin(), q.end());
  s.ids.push_back(tok::kAOpen);
  const std::size_t answer_start = s.ids.size();
  s.ids.insert(s.ids.end(), a.begin(), a.end());
  s.ids.push_back(tok::kEos);
  detail::check_length(s.ids.size(), max_len);
  s.loss_mask.assign(s.ids.size(), false);
  for (std::size_t i = answer_start; i < s.ids.size(); ++i) s.loss_mask[i] = true;
  return s;
}

/// [BOS, C, EOS]; every position after BOS is a target.
inline TokenSequence assemble_caption_sequence(std::string_view caption, const Vocabulary& vocab,
                                               std::size_t max_len = kDefaultMaxTextLen) {
  const auto c = detail::encode_field(caption, vocab, "caption");
  TokenSequence s;
  s.ids.push_back(tok::kBos);
  s.ids.insert(s.ids.end(), c.begin(), c.end());
  s.ids.push_back(tok::kEos);
  detail::check_length(s.ids.size(), max_len);
  s.loss_mask.assign(s.ids.size(), true);
  s.loss_mask[0] = false;
  return s;
}

/// Decoding prompt for answering: [BOS, Q, <a>].
inline std::vector<TokenId> vqa_prompt(std::string_view question, const Vocabulary& vocab) {
  const auto q = detail::encode_field(question, vocab, "question");
  std::vector<TokenId> ids{tok::kBos};
  ids.insert(ids.end(), q.begin(), q.end());
  ids.push_back(tok::kAOpen);
  return ids;
}

enum class ParseFailureReason {
  kMissingQuestionOpen,
  kMissingQuestionClose,
  kEmptyQuestion,
  kMissingAnswerOpen,
  kMissingAnswerClose,
  kEmptyAnswer,
  kDuplicateDelimiter,
  kReservedToken,
  kTrailingTokens,
};

inline const char* to_string(ParseFailureReason r) {
  switch (r) {
    case ParseFailureReason::kMissingQuestionOpen: return "missing-question-open";
    case ParseFailureReason::kMissingQuestionClose: return "missing-question-close";
    case ParseFailureReason::kEmptyQuestion: return "empty-question";
    case ParseFailureReason::kMissingAnswerOpen: return "missing-answer-open";
    case ParseFailureReason::kMissingAnswerClose: return "missing-answer-close";
    case ParseFailureReason::kEmptyAnswer: return "empty-answer";
    case ParseFailureReason::kDuplicateDelimiter: return "duplicate-delimiter";
    case ParseFailureReason::kReservedToken: return "reserved-token";
    case ParseFailureReason::kTrailingTokens: return "trailing-tokens";
  }
  return "unknown";
}

struct QaPair {
  std::string question;
  std::string answer;
  bool operator==(const QaPair&) const = default;
};

struct ParseFailure {
  ParseFailureReason reason;
};

using ParseResult = std::variant<QaPair, ParseFailure>;

/// Strict parser for "<q> Q <q> <a> A <a>" optionally followed by EOS/PAD.
/// Never repairs malformed text.
inline ParseResult parse_qa_output(std::string_view text) {
  const auto words = split_words(text);
  const auto q_open = tok::kSpecialText[tok::kQOpen];
  const auto a_open = tok::kSpecialText[tok::kAOpen];
  auto is_tail = [](std::string_view w) {
    return w == tok::kSpecialText[tok::kEos] || w == tok::kSpecialText[tok::kPad];
  };
  auto is_reserved = [](std::string_view w) {
    for (auto s : tok::kSpecialText)
      if (w == s) return true;
    return false;
  };
  auto fail = [](ParseFailureReason r) { return ParseResult{ParseFailure{r}}; };

  std::size_t i = 0;
  if (words.empty() || words[0] != q_open) return fail(ParseFailureReason::kMissingQuestionOpen);
  ++i;
  std::string question;
  for (;; ++i) {
    if (i >= words.size()) return fail(ParseFailureReason::kMissingQuestionClose);
    if (words[i] == q_open) break;
    if (words[i] == a_open) return fail(ParseFailureReason::kMissingQuestionClose);
    if (is_reserved(words[i])) return fail(ParseFailureReason::kReservedToken);
    if (!question.empty()) question += ' ';
    question += words[i];
  }
  if (question.empty()) return fail(ParseFailureReason::kEmptyQuestion);
  ++i;
  if (i >= words.size() || words[i] != a_open) {
    if (i < words.size() && words[i] == q_open) return fail(ParseFailureReason::kDuplicateDelimiter);
    return fail(ParseFailureReason::kMissingAnswerOpen);
  }
  ++i;
  std::string answer;
  for (;; ++i) {
    if (i >= words.size()) return fail(ParseFailureReason::kMissingAnswerClose);
    if (words[i] == a_open) break;
    if (words[i] == q_open) return fail(ParseFailureReason::kDuplicateDelimiter);
    if (is_tail(words[i])) return fail(ParseFailureReason::kMissingAnswerClose);
    if (is_reserved(words[i])) return fail(ParseFailureReason::kReservedToken);
    if (!answer.empty()) answer += ' ';
    answer += words[i];
  }
  if (answer.empty()) return fail(ParseFailureReason::kEmptyAnswer);
  for (++i; i < words.size(); ++i) {
    if (words[i] == q_open || words[i] == a_open) return fail(ParseFailureReason::kDuplicateDelimiter);
    if (!is_tail(words[i])) return fail(ParseFailureReason::kTrailingTokens);
  }
  return QaPair{std::move(question), std::move(answer)};
}

}  // namespace leaml
