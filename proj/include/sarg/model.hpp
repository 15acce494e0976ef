#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sarg/errors.hpp"
#include "sarg/labeler.hpp"
#include "sarg/optim.hpp"
#include "sarg/prng.hpp"
#include "sarg/tensor.hpp"
#include "sarg/text.hpp"

namespace sarg {

struct ModelConfig {
  int hidden_size = 64;
  int n_layers = 2;
  int n_heads = 2;
  int max_positions = 128;
  int max_turns = 8;
  int vocab_size = 0;
  int max_phrase_len = 8;
  double alpha = 3.0;   // tagger loss weight
  double lambda = 1.0;  // coverage loss weight
  bool use_copy = true;
  bool use_gen = true;

  void validate() const {
    if (hidden_size < 1 || n_layers < 0 || n_heads < 1 || max_positions < 1 || max_turns < 1 ||
        vocab_size < 1 || max_phrase_len < 1)
      throw InvalidConfig("all model sizes must be >= 1");
    if (hidden_size % n_heads != 0)
      throw InvalidConfig("hidden_size must be divisible by n_heads");
    if (!use_copy && !use_gen)
      throw InvalidConfig("at least one of the copy and generate paths must be enabled");
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"hidden_size", hidden_size}, {"n_layers", n_layers},
                          {"n_heads", n_heads},         {"max_positions", max_positions},
                          {"max_turns", max_turns},     {"vocab_size", vocab_size},
                          {"max_phrase_len", max_phrase_len}, {"alpha", alpha},
                          {"lambda", lambda},           {"use_copy", use_copy},
                          {"use_gen", use_gen}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.hidden_size = j.at("hidden_size").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.max_turns = j.at("max_turns").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_phrase_len = j.at("max_phrase_len").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.use_copy = j.at("use_copy").get<bool>();
    c.use_gen = j.at("use_gen").get<bool>();
    return c;
  }
};

// tagger classes
inline constexpr int kTagKeep = 0;
inline constexpr int kTagDelete = 1;
inline constexpr int kTagChange = 2;

inline int tag_class(EditKind k) {
  switch (k) {
    case EditKind::Keep: return kTagKeep;
    case EditKind::Delete: return kTagDelete;
    case EditKind::Change: return kTagChange;
  }
  return kTagDelete;
}

// One forward pass: a tape plus a cache so each parameter lands on the tape
// exactly once. Workers running in parallel each build their own Pass with
// local_grads set, keeping gradient sums private until merge_grads.
struct Pass {
  explicit Pass(ad::Tape& t, bool local_grads = false) : tape(&t), local(local_grads) {}
  ad::Tape* tape;
  bool local;
  std::unordered_map<const Parameter*, ad::Tensor> cache;
  std::unordered_map<Parameter*, std::vector<double>> grads;

  ad::Tensor use(Parameter& p) {
    auto it = cache.find(&p);
    if (it != cache.end()) return it->second;
    ad::Tensor t;
    if (!local) {
      t = leaf(*tape, p);
    } else {
      t = tape->alloc(p.shape, p.trainable);
      t.node->val = p.value;
      if (p.trainable) {
        auto& buf = grads[&p];
        buf.assign(p.size(), 0.0);
        std::vector<double>* pbuf = &buf;
        t.node->back = [pbuf](ad::Node& n) {
          for (size_t i = 0; i < n.grad.size(); ++i) (*pbuf)[i] += n.grad[i];
        };
      }
    }
    cache.emplace(&p, t);
    return t;
  }

  void merge_grads() {
    for (auto& [p, buf] : grads)
      for (size_t i = 0; i < buf.size(); ++i) p->grad[i] += buf[i];
  }
};

// Flattened encoder view of one example: history block then augmented
// utterance block, possibly padded to fixed widths. Positions and turn ids
// describe the real tokens only; pads carry position 0, turn 0, mask 0.
struct EncoderInput {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<int> turns;
  std::vector<uint8_t> mask;
  int history_width = 0;
  int utterance_width = 0;
};

inline EncoderInput build_encoder_input(const std::vector<Tokens>& history,
                                        const Tokens& augmented, const Vocabulary& vocab,
                                        const ModelConfig& cfg, int pad_history_to = 0,
                                        int pad_utterance_to = 0) {
  size_t m = 0;
  for (const auto& turn : history) m += turn.size();
  const size_t u = augmented.size();
  if (m + u > static_cast<size_t>(cfg.max_positions)) throw SequenceTooLong(m + u, cfg.max_positions);

  EncoderInput in;
  in.history_width = std::max(pad_history_to, static_cast<int>(m));
  in.utterance_width = std::max(pad_utterance_to, static_cast<int>(u));
  in.ids.reserve(static_cast<size_t>(in.history_width + in.utterance_width));

  int pos = 0;
  for (size_t t = 0; t < history.size(); ++t) {
    const int turn_id = std::min(static_cast<int>(t) + 1, cfg.max_turns);
    for (const auto& tok : history[t]) {
      in.ids.push_back(vocab.id(tok));
      in.positions.push_back(pos++);
      in.turns.push_back(turn_id);
      in.mask.push_back(1);
    }
  }
  while (in.ids.size() < static_cast<size_t>(in.history_width)) {
    in.ids.push_back(vocab.pad_id());
    in.positions.push_back(0);
    in.turns.push_back(0);
    in.mask.push_back(0);
  }
  const int utt_turn = std::min(static_cast<int>(history.size()) + 1, cfg.max_turns);
  for (const auto& tok : augmented) {
    in.ids.push_back(vocab.id(tok));
    in.positions.push_back(pos++);
    in.turns.push_back(utt_turn);
    in.mask.push_back(1);
  }
  while (in.ids.size() < static_cast<size_t>(in.history_width + in.utterance_width)) {
    in.ids.push_back(vocab.pad_id());
    in.positions.push_back(0);
    in.turns.push_back(0);
    in.mask.push_back(0);
  }
  return in;
}

struct Encoded {
  ad::Tensor history;    // H x d
  ad::Tensor utterance;  // U x d
  ad::Tensor history_attn_proj;  // H x d, history rows through the attention projection
  std::vector<int> history_ids;
  std::vector<uint8_t> history_mask;
  std::vector<uint8_t> utterance_mask;
};

struct DecodeState {
  ad::Tensor s;    // recurrent hidden, initialized from the slot's encoding
  ad::Tensor c;    // recurrent cell, initialized to zero
  ad::Tensor cov;  // coverage over history positions, zero at step 0
};

struct StepResult {
  ad::Tensor p;        // mixture distribution over the vocabulary
  ad::Tensor attn;     // attention over history positions
  ad::Tensor covloss;  // sum_j min(attn_j, cov_j) for this step
};

struct SlotSupervision {
  int slot_pos = 0;             // index into the augmented utterance block
  std::vector<int> target_ids;  // gold phrase ids terminated by EOP
};

struct DecoderLoss {
  ad::Tensor total;    // nll + lambda * coverage
  ad::Tensor nll;
  ad::Tensor coverage; // unweighted coverage sum
  int n_steps = 0;
};

class SargModel {
 public:
  SargModel(ModelConfig cfg, uint64_t seed = 1) : cfg_(cfg) {
    cfg_.validate();
    SplitMix64 rng(seed);
    const int d = cfg_.hidden_size;
    const int ff = 4 * d;

    auto matrix = [&](const std::string& name, int rows, int cols) {
      init_uniform(params_.create(name, {rows, cols}), rng, cols, rows);
    };
    auto vec = [&](const std::string& name, int n) {
      init_uniform(params_.create(name, {n}), rng, n, 1);
    };
    auto zero_vec = [&](const std::string& name, int n) { params_.create(name, {n}); };
    auto ones_vec = [&](const std::string& name, int n) {
      auto& p = params_.create(name, {n});
      std::fill(p.value.begin(), p.value.end(), 1.0);
    };

    matrix("embed/word", cfg_.vocab_size, d);
    matrix("embed/pos", cfg_.max_positions, d);
    matrix("embed/turn", cfg_.max_turns + 1, d);
    ones_vec("embed/ln_g", d);
    zero_vec("embed/ln_b", d);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string base = "enc/" + std::to_string(l) + "/";
      for (const char* w : {"wq", "wk", "wv", "wo"}) matrix(base + w, d, d);
      for (const char* b : {"bq", "bk", "bv", "bo"}) zero_vec(base + b, d);
      matrix(base + "w1", ff, d);
      zero_vec(base + "b1", ff);
      matrix(base + "w2", d, ff);
      zero_vec(base + "b2", d);
      ones_vec(base + "ln1_g", d);
      zero_vec(base + "ln1_b", d);
      ones_vec(base + "ln2_g", d);
      zero_vec(base + "ln2_b", d);
    }
    matrix("tag/w", 3, d);
    zero_vec("tag/b", 3);
    matrix("dec/w_ih", 4 * d, d);
    matrix("dec/w_hh", 4 * d, d);
    zero_vec("dec/b", 4 * d);
    matrix("attn/w_s", d, d);
    matrix("attn/w_h", d, d);
    vec("attn/w_c", d);
    zero_vec("attn/b", d);
    vec("attn/v", d);
    vec("gate/w_sstar", d);
    vec("gate/w_s", d);
    vec("gate/w_x", d);
    zero_vec("gate/b", 1);
    matrix("vocab/w", cfg_.vocab_size, d);
    zero_vec("vocab/b", cfg_.vocab_size);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& config() { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  // E0 = LN(WE + PE + TE), rows for pads are garbage but masked downstream
  ad::Tensor embed_input(Pass& pass, const std::vector<int>& ids,
                         const std::vector<int>& positions, const std::vector<int>& turns) {
    ad::Tensor we = ad::gather_rows(pass.use(params_.get("embed/word")), ids, "word embedding");
    ad::Tensor pe = ad::gather_rows(pass.use(params_.get("embed/pos")), positions, "position embedding");
    ad::Tensor te = ad::gather_rows(pass.use(params_.get("embed/turn")), turns, "turn embedding");
    ad::Tensor sum = ad::add(ad::add(we, pe), te);
    return ad::layer_norm(sum, pass.use(params_.get("embed/ln_g")), pass.use(params_.get("embed/ln_b")));
  }

  Encoded encode(Pass& pass, const EncoderInput& in) {
    ad::Tensor x = embed_input(pass, in.ids, in.positions, in.turns);
    for (int l = 0; l < cfg_.n_layers; ++l) x = block(pass, x, l, in.mask);

    Encoded enc;
    const int H = in.history_width, U = in.utterance_width;
    enc.history = ad::slice_rows(x, 0, H);
    enc.utterance = ad::slice_rows(x, H, H + U);
    enc.history_attn_proj = ad::matmul_nt(enc.history, pass.use(params_.get("attn/w_h")));
    enc.history_ids.assign(in.ids.begin(), in.ids.begin() + H);
    enc.history_mask.assign(in.mask.begin(), in.mask.begin() + H);
    enc.utterance_mask.assign(in.mask.begin() + H, in.mask.end());
    return enc;
  }

  // softmax(W_t u_i + b_t) per utterance position
  ad::Tensor tag_probs(Pass& pass, const Encoded& enc) {
    ad::Tensor logits = ad::add_rowvec(ad::matmul_nt(enc.utterance, pass.use(params_.get("tag/w"))),
                                       pass.use(params_.get("tag/b")));
    return ad::softmax(logits);
  }

  ad::Tensor tagger_loss(Pass&, ad::Tensor probs, const std::vector<int>& gold,
                         const std::vector<uint8_t>& include) {
    return ad::nll_rows(probs, gold, include);
  }

  DecodeState init_slot(Pass& pass, const Encoded& enc, int slot_pos) {
    DecodeState st;
    st.s = ad::row(enc.utterance, slot_pos);
    st.c = pass.tape->zeros({cfg_.hidden_size});
    st.cov = pass.tape->zeros({enc.history.dim(0)});
    return st;
  }

  // One recurrent step: cell update, coverage-aware attention over history,
  // copy/generate mixture. Advances the state in place.
  StepResult decode_step(Pass& pass, const Encoded& enc, DecodeState& st, int x_prev) {
    const int d = cfg_.hidden_size;
    ad::Tensor x_emb =
        ad::row(ad::gather_rows(pass.use(params_.get("embed/word")), {x_prev}, "word embedding"), 0);

    ad::Tensor gates = ad::add(
        ad::add(ad::matvec(pass.use(params_.get("dec/w_ih")), x_emb),
                ad::matvec(pass.use(params_.get("dec/w_hh")), st.s)),
        pass.use(params_.get("dec/b")));
    ad::Tensor gi = ad::sigmoid(ad::slice_vec(gates, 0, d));
    ad::Tensor gf = ad::sigmoid(ad::slice_vec(gates, d, 2 * d));
    ad::Tensor gg = ad::tanh(ad::slice_vec(gates, 2 * d, 3 * d));
    ad::Tensor go = ad::sigmoid(ad::slice_vec(gates, 3 * d, 4 * d));
    ad::Tensor c_next = ad::add(ad::mul(gf, st.c), ad::mul(gi, gg));
    ad::Tensor s_next = ad::mul(go, ad::tanh(c_next));

    // e_j = v' tanh(W_s s + W_h h_j + w_c cov_j + b)
    ad::Tensor pre = ad::add_rowvec(enc.history_attn_proj,
                                    ad::matvec(pass.use(params_.get("attn/w_s")), s_next));
    pre = ad::add(pre, ad::outer(st.cov, pass.use(params_.get("attn/w_c"))));
    pre = ad::add_rowvec(pre, pass.use(params_.get("attn/b")));
    ad::Tensor e = ad::matvec(ad::tanh(pre), pass.use(params_.get("attn/v")));
    ad::Tensor attn = ad::softmax(ad::masked_fill(e, enc.history_mask, -1e30));
    ad::Tensor sstar = ad::vecmat(attn, enc.history);

    StepResult out;
    out.attn = attn;
    out.covloss = ad::sum(ad::min_elem(attn, st.cov));
    out.p = mixture(pass, s_next, sstar, x_emb, attn, enc);

    st.s = s_next;
    st.c = c_next;
    st.cov = ad::add(st.cov, attn);
    return out;
  }

  // Teacher-forced loss over the CHANGE slots of one example.
  DecoderLoss decoder_loss(Pass& pass, const Encoded& enc,
                           const std::vector<SlotSupervision>& slots, double lambda,
                           int start_id) {
    DecoderLoss out;
    out.nll = pass.tape->scalar_const(0.0);
    out.coverage = pass.tape->scalar_const(0.0);
    for (const auto& slot : slots) {
      DecodeState st = init_slot(pass, enc, slot.slot_pos);
      int x = start_id;
      for (int gold : slot.target_ids) {
        StepResult step = decode_step(pass, enc, st, x);
        out.nll = ad::add(out.nll, ad::nll(step.p, gold));
        out.coverage = ad::add(out.coverage, step.covloss);
        x = gold;
        ++out.n_steps;
      }
    }
    out.total = ad::add(out.nll, ad::affine(out.coverage, lambda, 0.0));
    return out;
  }

  ad::Tensor joint_loss(Pass&, ad::Tensor tag_loss, ad::Tensor dec_loss) const {
    return ad::add(ad::affine(tag_loss, cfg_.alpha, 0.0), dec_loss);
  }

 private:
  // post-norm transformer block: LN(x + MHA(x)), then LN(x + FFN(x))
  ad::Tensor block(Pass& pass, ad::Tensor x, int l, const std::vector<uint8_t>& mask) {
    const std::string base = "enc/" + std::to_string(l) + "/";
    const int d = cfg_.hidden_size;
    const int dh = d / cfg_.n_heads;

    ad::Tensor q = ad::add_rowvec(ad::matmul_nt(x, pass.use(params_.get(base + "wq"))),
                                  pass.use(params_.get(base + "bq")));
    ad::Tensor k = ad::add_rowvec(ad::matmul_nt(x, pass.use(params_.get(base + "wk"))),
                                  pass.use(params_.get(base + "bk")));
    ad::Tensor v = ad::add_rowvec(ad::matmul_nt(x, pass.use(params_.get(base + "wv"))),
                                  pass.use(params_.get(base + "bv")));
    std::vector<ad::Tensor> heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      ad::Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
      ad::Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
      ad::Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
      ad::Tensor scores = ad::affine(ad::matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)), 0.0);
      ad::Tensor attn = ad::softmax(ad::masked_fill(scores, mask, -1e30));
      heads.push_back(ad::matmul(attn, vh));
    }
    ad::Tensor ctx = ad::add_rowvec(ad::matmul_nt(ad::concat_cols(heads), pass.use(params_.get(base + "wo"))),
                                    pass.use(params_.get(base + "bo")));
    ad::Tensor x1 = ad::layer_norm(ad::add(x, ctx), pass.use(params_.get(base + "ln1_g")),
                                   pass.use(params_.get(base + "ln1_b")));

    ad::Tensor f = ad::gelu(ad::add_rowvec(ad::matmul_nt(x1, pass.use(params_.get(base + "w1"))),
                                           pass.use(params_.get(base + "b1"))));
    ad::Tensor ff = ad::add_rowvec(ad::matmul_nt(f, pass.use(params_.get(base + "w2"))),
                                   pass.use(params_.get(base + "b2")));
    return ad::layer_norm(ad::add(x1, ff), pass.use(params_.get(base + "ln2_g")),
                          pass.use(params_.get(base + "ln2_b")));
  }

  // p = g * p_vocab + (1-g) * copy; ablation flags drop one side entirely
  ad::Tensor mixture(Pass& pass, ad::Tensor s, ad::Tensor sstar, ad::Tensor x_emb,
                     ad::Tensor attn, const Encoded& enc) {
    ad::Tensor pv, cp;
    if (cfg_.use_gen)
      pv = ad::softmax(ad::add(ad::matvec(pass.use(params_.get("vocab/w")), sstar),
                               pass.use(params_.get("vocab/b"))));
    if (cfg_.use_copy) cp = ad::scatter_sum(attn, enc.history_ids, cfg_.vocab_size);
    if (cfg_.use_gen && cfg_.use_copy) {
      ad::Tensor g = ad::sigmoid(ad::add(
          ad::add(ad::dot(pass.use(params_.get("gate/w_sstar")), sstar),
                  ad::dot(pass.use(params_.get("gate/w_s")), s)),
          ad::add(ad::dot(pass.use(params_.get("gate/w_x")), x_emb),
                  pass.use(params_.get("gate/b")))));
      return ad::add(ad::mul_scalar(pv, g), ad::mul_scalar(cp, ad::affine(g, -1.0, 1.0)));
    }
    if (cfg_.use_gen) return pv;
    // copy-only: a vanishing floor keeps tokens outside the history (the end
    // marker in particular) at finite loss; still sums to one
    const double eps = 1e-9;
    const double z = 1.0 + eps * cfg_.vocab_size;
    return ad::affine(cp, 1.0 / z, eps / z);
  }

  ModelConfig cfg_;
  ParamRegistry params_;
};

}  // namespace sarg
