#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "sarg/errors.hpp"
#include "sarg/labeler.hpp"
#include "sarg/model.hpp"
#include "sarg/text.hpp"

namespace sarg {

struct DecodeConfig {
  enum class Strategy { Greedy, Beam };
  Strategy strategy = Strategy::Greedy;
  int beam_width = 1;
  int max_phrase_len = 0;  // 0 = take the model's configured limit

  void validate() const {
    if (beam_width < 1) throw InvalidConfig("beam_width must be >= 1");
  }
};

struct BeamHyp {
  std::vector<int> ids;  // emitted tokens, end marker excluded
  double logp = 0.0;
  bool complete = false;
};

namespace detail {

inline bool hyp_better(const BeamHyp& a, const BeamHyp& b) {
  if (a.logp != b.logp) return a.logp > b.logp;
  return a.ids < b.ids;
}

}  // namespace detail

// Length-unnormalized beam search over a per-step distribution. step must be a
// callable (const State&, int x_prev) -> std::pair<std::vector<double>, State>
// returning the next-token distribution and the advanced state. Hypotheses
// that emit eop_id are complete; the best complete hypothesis wins, falling
// back to the best live one at max_len. The pool is seeded with the greedy
// rollout, so the result never scores below greedy. step_count, when given,
// accumulates the number of step invocations.
template <typename State, typename StepFn>
BeamHyp beam_search(const State& init, StepFn&& step, int start_id, int eop_id, int width,
                    int max_len, long* step_count = nullptr) {
  if (width < 1) throw InvalidConfig("beam width must be >= 1");
  if (max_len < 1) throw InvalidConfig("max_len must be >= 1");

  struct Live {
    BeamHyp hyp;
    State state;
    int x_prev;
  };

  long steps = 0;

  // greedy rollout: always-available baseline hypothesis
  BeamHyp best;
  {
    State st = init;
    int x = start_id;
    BeamHyp g;
    for (int t = 0; t < max_len; ++t) {
      auto [probs, next] = step(st, x);
      ++steps;
      const size_t arg = static_cast<size_t>(
          std::max_element(probs.begin(), probs.end()) - probs.begin());
      g.logp += std::log(probs[arg]);
      if (static_cast<int>(arg) == eop_id) {
        g.complete = true;
        break;
      }
      g.ids.push_back(static_cast<int>(arg));
      st = std::move(next);
      x = static_cast<int>(arg);
    }
    best = g;
  }
  if (width == 1) {
    if (step_count) *step_count += steps;
    return best;
  }

  std::optional<BeamHyp> best_complete;
  if (best.complete) best_complete = best;
  std::vector<Live> live;
  live.push_back({BeamHyp{}, init, start_id});

  for (int t = 0; t < max_len && !live.empty(); ++t) {
    struct Cand {
      BeamHyp hyp;
      size_t parent;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<State> advanced;
    advanced.reserve(live.size());
    for (size_t b = 0; b < live.size(); ++b) {
      auto [probs, next] = step(live[b].state, live[b].x_prev);
      ++steps;
      advanced.push_back(std::move(next));
      for (size_t w = 0; w < probs.size(); ++w) {
        if (probs[w] <= 0.0) continue;
        Cand c;
        c.hyp = live[b].hyp;
        c.hyp.logp += std::log(probs[w]);
        c.parent = b;
        c.token = static_cast<int>(w);
        if (c.token == eop_id) c.hyp.complete = true;
        else c.hyp.ids.push_back(c.token);
        cands.push_back(std::move(c));
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.hyp.logp != b.hyp.logp) return a.hyp.logp > b.hyp.logp;
      if (a.token != b.token) return a.token < b.token;
      return a.parent < b.parent;
    });

    std::vector<Live> next_live;
    for (const Cand& c : cands) {
      if (c.hyp.complete) {
        if (!best_complete || detail::hyp_better(c.hyp, *best_complete)) best_complete = c.hyp;
      } else if (static_cast<int>(next_live.size()) < width) {
        next_live.push_back({c.hyp, advanced[c.parent], c.token});
      }
      if (static_cast<int>(next_live.size()) >= width) break;
    }
    live = std::move(next_live);
  }

  if (step_count) *step_count += steps;
  // The greedy rollout stays a candidate whatever its completeness, so the
  // returned score can never drop below greedy's.
  if (best_complete) {
    return detail::hyp_better(*best_complete, best) ? *best_complete : best;
  }
  // nothing completed anywhere: compare surviving prefixes with the greedy one
  for (const Live& l : live)
    if (detail::hyp_better(l.hyp, best)) best = l.hyp;
  return best;
}

struct SlotResult {
  int pos = 0;  // augmented utterance index
  std::vector<int> phrase_ids;
  double logprob = 0.0;
};

struct Restoration {
  Tokens tokens;
  std::vector<EditOp> tags;
  std::vector<SlotResult> slots;
  long decode_steps = 0;  // decode_step invocations across all slots
};

// Full restoration of one dialogue: argmax tags under the structural mask
// (dummies cannot KEEP, originals cannot CHANGE), one decoder run per CHANGE
// slot, then realization. A slot whose phrase comes back empty degrades to
// DELETE.
inline Restoration predict(SargModel& model, const Dialogue& d, const Vocabulary& vocab,
                           const DecodeConfig& dc = {}) {
  dc.validate();
  const AugmentedUtterance aug = insert_dummies(d.utterance);
  const EncoderInput input = build_encoder_input(d.history, aug.tokens, vocab, model.config());

  ad::Tape tape;
  Pass pass(tape);
  Encoded enc = model.encode(pass, input);
  ad::Tensor probs = model.tag_probs(pass, enc);

  Restoration out;
  out.tags.resize(aug.size());
  const auto& pv = probs.val();
  for (size_t i = 0; i < aug.size(); ++i) {
    const double pk = pv[i * 3 + kTagKeep], pd = pv[i * 3 + kTagDelete], pc = pv[i * 3 + kTagChange];
    if (aug.is_dummy[i])
      out.tags[i] = pc > pd ? EditOp::change({}) : EditOp::del();
    else
      out.tags[i] = pk >= pd ? EditOp::keep() : EditOp::del();
  }

  const int max_len = dc.max_phrase_len > 0 ? dc.max_phrase_len : model.config().max_phrase_len;
  const int width = dc.strategy == DecodeConfig::Strategy::Beam ? dc.beam_width : 1;
  for (size_t i = 0; i < aug.size(); ++i) {
    if (out.tags[i].kind != EditKind::Change) continue;
    DecodeState st0 = model.init_slot(pass, enc, static_cast<int>(i));
    auto step = [&](const DecodeState& st, int x_prev) {
      DecodeState next = st;
      StepResult res = model.decode_step(pass, enc, next, x_prev);
      return std::make_pair(res.p.val(), next);
    };
    BeamHyp hyp = beam_search(st0, step, vocab.start_id(), vocab.eop_id(), width, max_len,
                              &out.decode_steps);
    if (hyp.ids.empty()) {
      out.tags[i] = EditOp::del();
      continue;
    }
    SlotResult slot;
    slot.pos = static_cast<int>(i);
    slot.phrase_ids = hyp.ids;
    slot.logprob = hyp.logp;
    out.tags[i].phrase = vocab.decode(hyp.ids);
    out.slots.push_back(std::move(slot));
  }

  out.tokens = realize(aug, out.tags);
  return out;
}

}  // namespace sarg
