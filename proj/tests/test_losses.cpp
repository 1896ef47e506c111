#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "oracles.hpp"

using namespace leaml;

namespace {

struct Fixture {
  Vocabulary vocab = oracle::toy_vocab();
  ModelConfig cfg = oracle::toy_config(vocab.size());
  ParameterStore<double> params;
  Rng rng;

  explicit Fixture(std::uint64_t seed) : params(init_model<double>(cfg, seed)), rng(seed) {
    oracle::jitter(params, rng, 0.2);
  }

  std::vector<LabeledExample> labeled(std::size_t n) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_labeled(rng, cfg));
    return out;
  }
  std::vector<CaptionExample> captions(std::size_t n) {
    std::vector<CaptionExample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_caption(rng, cfg));
    return out;
  }
};

using Items = std::vector<std::pair<const VisualInput*, TokenSequence>>;

/// -log softmax(row)[target] for one position of a single forward pass.
double direct_nll(const Fixture& f, const VisualInput& v, const std::vector<TokenId>& prefix, TokenId target) {
  Tape<double> tape(false);
  auto logits = forward(tape, f.cfg, f.params, v, std::span<const TokenId>(prefix));
  const std::size_t V = f.cfg.vocab_size, last = prefix.size() - 1;
  std::vector<double> row(logits->data.begin() + last * V, logits->data.begin() + (last + 1) * V);
  return oracle::brute_force_nll(row, 1, V, {target}, {true});
}

std::vector<std::vector<double>> grads(const ParameterStore<double>& p) {
  std::vector<std::vector<double>> out;
  for (const auto& prm : p.parameters()) out.push_back(prm.tensor->grad);
  return out;
}

}  // namespace

TEST(QaLoss, ZeroHeadGivesExactlyLogVocab) {
  Fixture f(1);
  for (auto& x : f.params.at("head.w")->data) x = 0.0;
  const auto ex = f.labeled(3);
  Tape<double> tape(false);
  EXPECT_NEAR(qa_loss(tape, f.cfg, f.params, std::span<const LabeledExample>(ex), f.vocab)->data[0],
              std::log(static_cast<double>(f.cfg.vocab_size)), 1e-12);
}

TEST(QaLoss, UntrainedModelIsNearLogVocab) {
  Fixture f(2);
  auto fresh = init_model<double>(f.cfg, 2);
  const auto ex = f.labeled(8);
  Tape<double> tape(false);
  const double loss = qa_loss(tape, f.cfg, fresh, std::span<const LabeledExample>(ex), f.vocab)->data[0];
  EXPECT_NEAR(loss / std::log(static_cast<double>(f.cfg.vocab_size)), 1.0, 0.10);
}

TEST(QaLoss, SingleMaskedPositionIsDirectNll) {
  Fixture f(3);
  const auto v = oracle::random_visual(f.rng, f.cfg.visual_prefix_len, f.cfg.visual_dim);
  TokenSequence s;
  s.ids = {tok::kBos, tok::kQOpen, 9, 12};
  s.loss_mask = {false, false, false, true};
  const SequenceItem item{&v, s};
  Tape<double> tape(false);
  const double loss = sequence_loss(tape, f.cfg, f.params, std::span<const SequenceItem>(&item, 1))->data[0];
  EXPECT_DOUBLE_EQ(loss, direct_nll(f, v, {tok::kBos, tok::kQOpen, 9}, 12));
}

TEST(QaLoss, MatchesDecompositionOracle) {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    Fixture f(seed);
    const auto ex = f.labeled(1 + seed % 4);
    Items items;
    for (const auto& e : ex) items.emplace_back(&e.visual, assemble_qa_sequence(e.question, e.answer, f.vocab));
    Tape<double> tape(false);
    EXPECT_NEAR(qa_loss(tape, f.cfg, f.params, std::span<const LabeledExample>(ex), f.vocab)->data[0],
                oracle::decomposed_loss(f.cfg, f.params, items), 1e-10);
  }
}

TEST(CaptionLoss, SingleTokenCaptionHasTwoTargets) {
  const auto vocab = oracle::toy_vocab();
  EXPECT_EQ(assemble_caption_sequence("polyp", vocab).masked_in_count(), 2u);
  Fixture f(4);
  const std::vector<CaptionExample> ex{{oracle::random_visual(f.rng, 2, 3), "polyp"}};
  Tape<double> tape(false);
  const double loss = caption_loss(tape, f.cfg, f.params, std::span<const CaptionExample>(ex), f.vocab)->data[0];
  const TokenId polyp = f.vocab.id("polyp");
  const double expect = 0.5 * (direct_nll(f, ex[0].visual, {tok::kBos}, polyp) +
                               direct_nll(f, ex[0].visual, {tok::kBos, polyp}, tok::kEos));
  EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(CaptionLoss, InvariantToBatchOrder) {
  Fixture f(5);
  auto ex = f.captions(5);
  Tape<double> tape(false);
  const double a = caption_loss(tape, f.cfg, f.params, std::span<const CaptionExample>(ex), f.vocab)->data[0];
  std::reverse(ex.begin(), ex.end());
  std::swap(ex[0], ex[2]);
  const double b = caption_loss(tape, f.cfg, f.params, std::span<const CaptionExample>(ex), f.vocab)->data[0];
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(CaptionLoss, MatchesDecompositionOracle) {
  for (std::uint64_t seed = 20; seed < 30; ++seed) {
    Fixture f(seed);
    const auto ex = f.captions(1 + seed % 4);
    Items items;
    for (const auto& e : ex) items.emplace_back(&e.visual, assemble_caption_sequence(e.caption, f.vocab));
    Tape<double> tape(false);
    EXPECT_NEAR(caption_loss(tape, f.cfg, f.params, std::span<const CaptionExample>(ex), f.vocab)->data[0],
                oracle::decomposed_loss(f.cfg, f.params, items), 1e-10);
  }
}

TEST(GeneratorLoss, IsSumOfParts) {
  Fixture f(6);
  const auto l = f.labeled(3);
  const auto c = f.captions(4);
  const std::span<const LabeledExample> ls(l);
  const std::span<const CaptionExample> cs(c);
  Tape<double> tape(false);
  const double sum = qa_loss(tape, f.cfg, f.params, ls, f.vocab)->data[0] +
                     caption_loss(tape, f.cfg, f.params, cs, f.vocab)->data[0];
  EXPECT_NEAR(generator_loss(tape, f.cfg, f.params, ls, cs, f.vocab)->data[0], sum, 1e-12);
}

TEST(GeneratorLoss, GradientIsSumOfComponentGradients) {
  Fixture f(7);
  const auto l = f.labeled(3);
  const auto c = f.captions(2);
  const std::span<const LabeledExample> ls(l);
  const std::span<const CaptionExample> cs(c);
  auto run = [&](auto&& loss_fn) {
    f.params.zero_grad();
    Tape<double> tape;
    tape.backward(loss_fn(tape));
    return grads(f.params);
  };
  const auto gq = run([&](Tape<double>& t) { return qa_loss(t, f.cfg, f.params, ls, f.vocab); });
  const auto gc = run([&](Tape<double>& t) { return caption_loss(t, f.cfg, f.params, cs, f.vocab); });
  const auto gg = run([&](Tape<double>& t) { return generator_loss(t, f.cfg, f.params, ls, cs, f.vocab); });
  for (std::size_t p = 0; p < gg.size(); ++p)
    for (std::size_t i = 0; i < gg[p].size(); ++i)
      ASSERT_EQ(gg[p][i], gq[p][i] + gc[p][i]) << f.params.parameters()[p].name << "[" << i << "]";
}

TEST(GeneratorLoss, CaptionWeightScalesCaptionTerm) {
  Fixture f(8);
  const auto l = f.labeled(2);
  const auto c = f.captions(2);
  const std::span<const LabeledExample> ls(l);
  const std::span<const CaptionExample> cs(c);
  Tape<double> tape(false);
  const double q = qa_loss(tape, f.cfg, f.params, ls, f.vocab)->data[0];
  const double cap = caption_loss(tape, f.cfg, f.params, cs, f.vocab)->data[0];
  EXPECT_NEAR(generator_loss(tape, f.cfg, f.params, ls, cs, f.vocab, 0.25)->data[0], q + 0.25 * cap, 1e-12);
}

TEST(VqaLoss, QuestionTargetsDoNotAffectLoss) {
  Fixture f(9);
  const auto ex = f.labeled(3);
  std::vector<SequenceItem> items;
  for (const auto& e : ex) items.push_back({&e.visual, assemble_vqa_sequence(e.question, e.answer, f.vocab)});
  auto batch = make_batch(std::span<const SequenceItem>(items));
  Tape<double> tape(false);
  const double before = batch_loss(tape, f.cfg, f.params, batch)->data[0];
  std::size_t changed = 0;
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    if (batch.mask[i]) continue;
    batch.targets[i] = static_cast<TokenId>((batch.targets[i] + 3) % f.cfg.vocab_size);
    ++changed;
  }
  ASSERT_GT(changed, 0u);
  EXPECT_EQ(batch_loss(tape, f.cfg, f.params, batch)->data[0], before);
}

TEST(VqaLoss, MaskedOutRowsGetExactlyZeroLogitGradient) {
  Fixture f(10);
  const auto ex = f.labeled(3);
  std::vector<SequenceItem> items;
  for (const auto& e : ex) items.push_back({&e.visual, assemble_vqa_sequence(e.question, e.answer, f.vocab)});
  const auto batch = make_batch(std::span<const SequenceItem>(items));
  Tape<double> tape;
  auto logits = forward_batch(tape, f.cfg, f.params, std::span<const VisualInput* const>(batch.visuals),
                              std::span<const TokenId>(batch.inputs), batch.length);
  std::unique_ptr<bool[]> m(new bool[batch.mask.size()]);
  for (std::size_t i = 0; i < batch.mask.size(); ++i) m[i] = batch.mask[i];
  tape.backward(softmax_cross_entropy(tape, logits, std::span<const TokenId>(batch.targets),
                                      std::span<const bool>(m.get(), batch.mask.size())));
  const std::size_t V = f.cfg.vocab_size;
  for (std::size_t r = 0; r < batch.mask.size(); ++r) {
    double norm = 0;
    for (std::size_t c = 0; c < V; ++c) norm += std::abs(logits->grad[r * V + c]);
    if (batch.mask[r])
      EXPECT_GT(norm, 0.0) << r;
    else
      EXPECT_EQ(norm, 0.0) << r;
  }
}

TEST(VqaLoss, SingleTokenAnswerIsDirectNll) {
  Fixture f(11);
  const QaExample e{oracle::random_visual(f.rng, 2, 3), "what color is it", "red"};
  const QaExample* p = &e;
  Tape<double> tape(false);
  const double loss = vqa_loss(tape, f.cfg, f.params, std::span<const QaExample* const>(&p, 1), f.vocab)->data[0];
  auto prefix = f.vocab.encode("what color is it");
  prefix.insert(prefix.begin(), tok::kBos);
  prefix.push_back(tok::kAOpen);
  const TokenId red = f.vocab.id("red");
  const double answer = direct_nll(f, e.visual, prefix, red);
  prefix.push_back(red);
  const double eos = direct_nll(f, e.visual, prefix, tok::kEos);
  EXPECT_NEAR(loss, 0.5 * (answer + eos), 1e-12);
}

TEST(VqaLoss, MatchesDecompositionOracle) {
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    Fixture f(seed);
    const auto ex = f.labeled(1 + seed % 4);
    Items items;
    for (const auto& e : ex) items.emplace_back(&e.visual, assemble_vqa_sequence(e.question, e.answer, f.vocab));
    Tape<double> tape(false);
    EXPECT_NEAR(vqa_loss(tape, f.cfg, f.params, std::span<const LabeledExample>(ex), f.vocab)->data[0],
                oracle::decomposed_loss(f.cfg, f.params, items), 1e-10);
  }
}

TEST(Losses, EmptyBatchesAreInvalid) {
  Fixture f(12);
  const auto l = f.labeled(1);
  const auto c = f.captions(1);
  const std::span<const LabeledExample> none_l;
  const std::span<const CaptionExample> none_c;
  Tape<double> tape(false);
  EXPECT_THROW(qa_loss(tape, f.cfg, f.params, none_l, f.vocab), InvalidInput);
  EXPECT_THROW(caption_loss(tape, f.cfg, f.params, none_c, f.vocab), InvalidInput);
  EXPECT_THROW(generator_loss(tape, f.cfg, f.params, std::span<const LabeledExample>(l), none_c, f.vocab),
               InvalidInput);
  EXPECT_THROW(generator_loss(tape, f.cfg, f.params, none_l, std::span<const CaptionExample>(c), f.vocab),
               InvalidInput);
  EXPECT_THROW(vqa_loss(tape, f.cfg, f.params, std::span<const QaExample* const>(), f.vocab), InvalidInput);
}

TEST(Losses, FiniteAndNonNegative) {
  for (std::uint64_t seed = 40; seed < 45; ++seed) {
    Fixture f(seed);
    oracle::jitter(f.params, f.rng, 2.0);
    const auto l = f.labeled(3);
    const auto c = f.captions(3);
    const std::span<const LabeledExample> ls(l);
    const std::span<const CaptionExample> cs(c);
    Tape<double> tape(false);
    for (double v : {qa_loss(tape, f.cfg, f.params, ls, f.vocab)->data[0],
                     caption_loss(tape, f.cfg, f.params, cs, f.vocab)->data[0],
                     generator_loss(tape, f.cfg, f.params, ls, cs, f.vocab)->data[0],
                     vqa_loss(tape, f.cfg, f.params, ls, f.vocab)->data[0]}) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Losses, GradientsPassFiniteDifferenceCheck) {
  for (const auto& st : oracle::loss_gradient_suite(25, 77)) {
    EXPECT_EQ(st.trials, 25u) << st.name;
    EXPECT_LT(st.max_rel_error, oracle::kFdTolerance) << st.name << " over " << st.coordinates << " coordinates";
  }
}
