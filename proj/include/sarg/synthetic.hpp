#pragma once

#include <array>
#include <string>
#include <vector>

#include "sarg/errors.hpp"
#include "sarg/prng.hpp"
#include "sarg/text.hpp"

namespace sarg {

// Knobs for the synthetic dialogue generator. Content tokens are "w0".."wN-1";
// pronouns come from a small closed list so copy-from-history is always
// sufficient to restore an utterance.
struct SynthConfig {
  int n_examples = 200;
  int vocab_size = 30;
  int max_turns = 3;
  double omission_rate = 0.45;
  double coref_rate = 0.35;
  int min_turn_len = 2;
  int max_turn_len = 5;
  int min_utt_len = 3;
  int max_utt_len = 8;
  int max_phrase_len = 3;
};

inline constexpr std::array<const char*, 4> kPronouns = {"it", "that", "this", "them"};

namespace detail {

inline Tokens draw_tokens(SplitMix64& rng, int len, int vocab_size) {
  Tokens out;
  out.reserve(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i)
    out.push_back("w" + std::to_string(rng.below(static_cast<uint64_t>(vocab_size))));
  return out;
}

// Contiguous phrase of length 1..max_phrase_len from a uniformly chosen turn.
inline Tokens draw_phrase(SplitMix64& rng, const std::vector<Tokens>& history, int max_phrase_len) {
  const Tokens& turn = history[rng.below(history.size())];
  int max_len = std::min<int>(max_phrase_len, static_cast<int>(turn.size()));
  int len = static_cast<int>(rng.range(1, static_cast<uint64_t>(max_len)));
  int start = static_cast<int>(rng.below(turn.size() - static_cast<size_t>(len) + 1));
  return Tokens(turn.begin() + start, turn.begin() + start + len);
}

}  // namespace detail

// Deterministic for fixed (config, seed). Draw order per example: turn count,
// then each turn's length and tokens, utterance length and tokens, one real
// for the mode, then the mode's own draws (phrase turn/length/start, position).
// Omission inserts a history phrase into the reference; coreference swaps one
// utterance token for a pronoun whose reference keeps a history phrase instead.
inline Corpus gen_synthetic(const SynthConfig& cfg, uint64_t seed) {
  if (cfg.n_examples < 1) throw InvalidConfig("n_examples must be >= 1");
  if (cfg.vocab_size < 1) throw InvalidConfig("vocab_size must be >= 1");
  if (cfg.max_turns < 1) throw InvalidConfig("max_turns must be >= 1");
  if (cfg.omission_rate < 0 || cfg.coref_rate < 0)
    throw InvalidConfig("rates must be non-negative");
  if (cfg.omission_rate + cfg.coref_rate > 1.0)
    throw InvalidConfig("omission_rate + coref_rate must not exceed 1");
  if (cfg.min_turn_len < 1 || cfg.max_turn_len < cfg.min_turn_len)
    throw InvalidConfig("turn length bounds out of order");
  if (cfg.min_utt_len < 1 || cfg.max_utt_len < cfg.min_utt_len)
    throw InvalidConfig("utterance length bounds out of order");
  if (cfg.max_phrase_len < 1) throw InvalidConfig("max_phrase_len must be >= 1");

  SplitMix64 rng(seed);
  Corpus corpus;
  corpus.source_path = "synthetic(seed=" + std::to_string(seed) + ")";
  corpus.examples.reserve(static_cast<size_t>(cfg.n_examples));

  for (int e = 0; e < cfg.n_examples; ++e) {
    Dialogue d;
    int n_turns = static_cast<int>(rng.range(1, static_cast<uint64_t>(cfg.max_turns)));
    for (int t = 0; t < n_turns; ++t) {
      int len = static_cast<int>(rng.range(static_cast<uint64_t>(cfg.min_turn_len),
                                           static_cast<uint64_t>(cfg.max_turn_len)));
      d.history.push_back(detail::draw_tokens(rng, len, cfg.vocab_size));
    }
    int utt_len = static_cast<int>(rng.range(static_cast<uint64_t>(cfg.min_utt_len),
                                             static_cast<uint64_t>(cfg.max_utt_len)));
    Tokens utt = detail::draw_tokens(rng, utt_len, cfg.vocab_size);

    double u = rng.real();
    if (u < cfg.omission_rate) {
      // the utterance omits a phrase that the restored form includes
      Tokens phrase = detail::draw_phrase(rng, d.history, cfg.max_phrase_len);
      size_t pos = rng.below(utt.size() + 1);
      Tokens ref = utt;
      ref.insert(ref.begin() + static_cast<long>(pos), phrase.begin(), phrase.end());
      d.utterance = std::move(utt);
      d.reference = std::move(ref);
    } else if (u < cfg.omission_rate + cfg.coref_rate) {
      // the utterance refers with a pronoun; the restored form names the
      // antecedent phrase
      Tokens phrase = detail::draw_phrase(rng, d.history, cfg.max_phrase_len);
      size_t pos = rng.below(utt.size());
      Tokens ref;
      ref.reserve(utt.size() - 1 + phrase.size());
      ref.insert(ref.end(), utt.begin(), utt.begin() + static_cast<long>(pos));
      ref.insert(ref.end(), phrase.begin(), phrase.end());
      ref.insert(ref.end(), utt.begin() + static_cast<long>(pos) + 1, utt.end());
      utt[pos] = kPronouns[rng.below(kPronouns.size())];
      d.utterance = std::move(utt);
      d.reference = std::move(ref);
    } else {
      // already complete, restoration is the identity
      d.utterance = utt;
      d.reference = std::move(utt);
    }
    corpus.examples.push_back(std::move(d));
  }
  return corpus;
}

}  // namespace sarg
