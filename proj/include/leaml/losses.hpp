#pragma once

// Autoregressive objectives. Every loss is a mean negative log-likelihood over
// the masked-in target positions of a padded batch.

#include <algorithm>
#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "leaml/model.hpp"
#include "leaml/sequence.hpp"

namespace leaml {

struct SequenceItem {
  const VisualInput* visual;
  TokenSequence sequence;
};

/// Teacher-forced batch: inputs are ids[0..n-2], targets ids[1..n-1], padded
/// with PAD to a common length. Padded targets are always masked out.
struct Batch {
  std::vector<const VisualInput*> visuals;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;
  std::vector<bool> mask;
  std::size_t length = 0;

  std::size_t size() const { return visuals.size(); }
};

inline Batch make_batch(std::span<const SequenceItem> items) {
  if (items.empty()) throw InvalidInput("empty batch");
  Batch b;
  for (const auto& it : items) {
    if (it.sequence.ids.size() < 2 || it.sequence.ids.size() != it.sequence.loss_mask.size()) {
      throw InvalidInput("training sequence needs at least two tokens and a matching mask");
    }
    b.length = std::max(b.length, it.sequence.ids.size() - 1);
  }
  for (const auto& it : items) {
    const auto& s = it.sequence;
    b.visuals.push_back(it.visual);
    const std::size_t n = s.ids.size() - 1;
    for (std::size_t t = 0; t < b.length; ++t) {
      const bool real = t < n;
      b.inputs.push_back(real ? s.ids[t] : tok::kPad);
      b.targets.push_back(real ? s.ids[t + 1] : tok::kPad);
      b.mask.push_back(real && s.loss_mask[t + 1]);
    }
  }
  return b;
}

template <typename T>
Var<T> batch_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                  const Batch& batch) {
  auto logits = forward_batch(tape, config, params,
                              std::span<const VisualInput* const>(batch.visuals),
                              std::span<const TokenId>(batch.inputs), batch.length);
  // std::vector<bool> is not contiguous; bridge through a plain array.
  std::unique_ptr<bool[]> flags(new bool[batch.mask.size()]);
  for (std::size_t i = 0; i < batch.mask.size(); ++i) flags[i] = batch.mask[i];
  return softmax_cross_entropy(tape, logits, std::span<const TokenId>(batch.targets),
                               std::span<const bool>(flags.get(), batch.mask.size()));
}

template <typename T>
Var<T> sequence_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                     std::span<const SequenceItem> items) {
  return batch_loss(tape, config, params, make_batch(items));
}

/// Generator objective over [BOS, <q>, Q, <q>, <a>, A, <a>, EOS].
template <typename T>
Var<T> qa_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
               std::span<const LabeledExample> examples, const Vocabulary& vocab) {
  if (examples.empty()) throw InvalidInput("qa_loss: empty batch");
  std::vector<SequenceItem> items;
  for (const auto& e : examples)
    items.push_back({&e.visual, assemble_qa_sequence(e.question, e.answer, vocab, config.max_text_len())});
  return sequence_loss(tape, config, params, std::span<const SequenceItem>(items));
}

/// Caption distillation objective over [BOS, C, EOS].
template <typename T>
Var<T> caption_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                    std::span<const CaptionExample> examples, const Vocabulary& vocab) {
  if (examples.empty()) throw InvalidInput("caption_loss: empty batch");
  std::vector<SequenceItem> items;
  for (const auto& e : examples)
    items.push_back({&e.visual, assemble_caption_sequence(e.caption, vocab, config.max_text_len())});
  return sequence_loss(tape, config, params, std::span<const SequenceItem>(items));
}

/// L_QA + caption_weight * L_C.
template <typename T>
Var<T> generator_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                      std::span<const LabeledExample> labeled, std::span<const CaptionExample> captions,
                      const Vocabulary& vocab, T caption_weight = T(1)) {
  if (labeled.empty() || captions.empty()) throw InvalidInput("generator_loss: empty batch");
  auto lqa = qa_loss(tape, config, params, labeled, vocab);
  auto lc = caption_loss(tape, config, params, captions, vocab);
  if (caption_weight == T(1)) return add(tape, lqa, lc);
  return add(tape, lqa, scale(tape, lc, caption_weight));
}

/// Answer-only objective over [BOS, Q, <a>, A, EOS].
template <typename T>
Var<T> vqa_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                std::span<const QaExample* const> examples, const Vocabulary& vocab) {
  if (examples.empty()) throw InvalidInput("vqa_loss: empty batch");
  std::vector<SequenceItem> items;
  for (const auto* e : examples)
    items.push_back({&e->visual, assemble_vqa_sequence(e->question, e->answer, vocab, config.max_text_len())});
  return sequence_loss(tape, config, params, std::span<const SequenceItem>(items));
}

template <typename Example, typename T>
Var<T> vqa_loss(Tape<T>& tape, const ModelConfig& config, const ParameterStore<T>& params,
                std::span<const Example> examples, const Vocabulary& vocab) {
  std::vector<const QaExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return vqa_loss(tape, config, params, std::span<const QaExample* const>(ptrs), vocab);
}

}  // namespace leaml
