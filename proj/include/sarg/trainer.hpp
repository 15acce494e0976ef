#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sarg/checkpoint.hpp"
#include "sarg/errors.hpp"
#include "sarg/inference.hpp"
#include "sarg/labeler.hpp"
#include "sarg/metrics.hpp"
#include "sarg/model.hpp"
#include "sarg/optim.hpp"
#include "sarg/prng.hpp"
#include "sarg/text.hpp"

namespace sarg {

struct TrainConfig {
  int batch_size = 16;
  double lr = 1e-3;
  long max_steps = 5000;
  long no_coverage_steps = 500;
  long eval_every = 100;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;
  std::string resume_from;
  int patience = 10;        // evals without dev improvement before stopping; 0 disables
  double grad_clip = 0.0;   // global-norm clip; 0 disables
  double stop_train_em = 0.0;  // stop once train exact match reaches this; 0 disables
  int threads = 1;

  void validate() const {
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    if (max_steps < 1) throw InvalidConfig("max_steps must be >= 1");
    if (no_coverage_steps < 0) throw InvalidConfig("no_coverage_steps must be >= 0");
    if (eval_every < 1) throw InvalidConfig("eval_every must be >= 1");
    if (patience < 0) throw InvalidConfig("patience must be >= 0");
    if (threads < 1) throw InvalidConfig("threads must be >= 1");
    if (!std::isfinite(lr) || lr < 0) throw InvalidConfig("lr must be finite and >= 0");
    if (grad_clip < 0) throw InvalidConfig("grad_clip must be >= 0");
    if (stop_train_em < 0 || stop_train_em > 1) throw InvalidConfig("stop_train_em must be in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"batch_size", batch_size},
            {"lr", lr},
            {"max_steps", max_steps},
            {"no_coverage_steps", no_coverage_steps},
            {"eval_every", eval_every},
            {"seed", seed},
            {"checkpoint_dir", checkpoint_dir},
            {"patience", patience},
            {"grad_clip", grad_clip},
            {"stop_train_em", stop_train_em},
            {"threads", threads}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.no_coverage_steps = j.value("no_coverage_steps", c.no_coverage_steps);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.patience = j.value("patience", c.patience);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.stop_train_em = j.value("stop_train_em", c.stop_train_em);
    c.threads = j.value("threads", c.threads);
    return c;
  }
};

// An example after labeling: gold tags per augmented position plus the
// teacher-forcing targets (phrase tokens then the end marker) per CHANGE slot.
struct PreparedExample {
  Dialogue dialogue;
  AugmentedUtterance augmented;
  std::vector<int> tag_gold;
  std::vector<SlotSupervision> slots;
  size_t encoder_len = 0;
};

struct PreparedCorpus {
  std::vector<PreparedExample> train;
  std::vector<PreparedExample> dev;
  long skipped_too_long = 0;
};

inline PreparedExample prepare_example(const Dialogue& d, const Vocabulary& vocab) {
  PreparedExample ex;
  ex.dialogue = d;
  LabeledExample lab = label_example(d);
  ex.augmented = lab.augmented;
  ex.tag_gold.reserve(lab.labels.size());
  for (size_t i = 0; i < lab.labels.size(); ++i) {
    ex.tag_gold.push_back(tag_class(lab.labels[i].kind));
    if (lab.labels[i].kind == EditKind::Change) {
      SlotSupervision s;
      s.slot_pos = static_cast<int>(i);
      s.target_ids = vocab.encode(lab.labels[i].phrase);
      s.target_ids.push_back(vocab.eop_id());
      ex.slots.push_back(std::move(s));
    }
  }
  size_t m = 0;
  for (const auto& turn : d.history) m += turn.size();
  ex.encoder_len = m + ex.augmented.size();
  return ex;
}

// Dev split is a deterministic hash of the example index, roughly 10%.
inline bool is_dev_index(size_t index) {
  return SplitMix64(static_cast<std::uint64_t>(index)).next() % 10 == 0;
}

inline PreparedCorpus prepare_corpus(const Corpus& corpus, const Vocabulary& vocab,
                                     const ModelConfig& mcfg) {
  if (corpus.examples.empty()) throw EmptyInput();
  PreparedCorpus out;
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    const Dialogue& d = corpus.examples[i];
    if (!d.reference) throw InvalidConfig("training requires restored references");
    PreparedExample ex = prepare_example(d, vocab);
    if (ex.encoder_len > static_cast<size_t>(mcfg.max_positions)) {
      ++out.skipped_too_long;
      continue;
    }
    (is_dev_index(i) ? out.dev : out.train).push_back(std::move(ex));
  }
  return out;
}

// One padded batch item ready for the encoder, with per-position tag
// supervision masked off over padding.
struct BatchItem {
  EncoderInput input;
  std::vector<int> tag_gold;
  std::vector<uint8_t> tag_mask;
  std::vector<SlotSupervision> slots;
};

struct Batch {
  std::vector<BatchItem> items;
};

inline Batch make_batch(const std::vector<PreparedExample>& pool,
                        const std::vector<size_t>& order, size_t begin, size_t end,
                        const Vocabulary& vocab, const ModelConfig& mcfg) {
  int hist_w = 0, utt_w = 0;
  for (size_t k = begin; k < end; ++k) {
    const PreparedExample& ex = pool[order[k]];
    size_t m = ex.encoder_len - ex.augmented.size();
    hist_w = std::max(hist_w, static_cast<int>(m));
    utt_w = std::max(utt_w, static_cast<int>(ex.augmented.size()));
  }
  Batch b;
  b.items.reserve(end - begin);
  for (size_t k = begin; k < end; ++k) {
    const PreparedExample& ex = pool[order[k]];
    BatchItem item;
    item.input = build_encoder_input(ex.dialogue.history, ex.augmented.tokens, vocab, mcfg,
                                     hist_w, utt_w);
    item.tag_gold = ex.tag_gold;
    item.tag_mask.assign(ex.tag_gold.size(), 1);
    while (item.tag_gold.size() < static_cast<size_t>(utt_w)) {
      item.tag_gold.push_back(kTagDelete);
      item.tag_mask.push_back(0);
    }
    item.slots = ex.slots;
    b.items.push_back(std::move(item));
  }
  return b;
}

// Shuffle order for one epoch, reproducible from (seed, epoch) alone.
inline std::vector<size_t> epoch_order(size_t n, std::uint64_t seed, long epoch) {
  SplitMix64 seq(seed);
  std::uint64_t s = seq.next();
  for (long e = 0; e < epoch; ++e) s = seq.next();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  SplitMix64 rng(s);
  shuffle(order, rng);
  return order;
}

struct BatchStats {
  double loss = 0.0;      // mean joint loss over the batch
  double loss_tag = 0.0;  // mean tagger term, pre alpha weighting
  double loss_dec = 0.0;  // mean decoder term, coverage included
  double covloss = 0.0;   // mean lambda-weighted coverage term
};

namespace detail {

struct WorkerOut {
  Pass* pass = nullptr;
  double tag = 0.0, dec = 0.0, cov = 0.0, joint = 0.0;
};

inline void run_worker(SargModel& model, const Batch& batch, size_t begin, size_t end,
                       double lambda, int start_id, double inv_batch, ad::Tape& tape,
                       Pass& pass, WorkerOut& out) {
  ad::Tensor total = tape.scalar_const(0.0);
  for (size_t i = begin; i < end; ++i) {
    const BatchItem& item = batch.items[i];
    Encoded enc = model.encode(pass, item.input);
    ad::Tensor probs = model.tag_probs(pass, enc);
    ad::Tensor tag = model.tagger_loss(pass, probs, item.tag_gold, item.tag_mask);
    DecoderLoss dec = model.decoder_loss(pass, enc, item.slots, lambda, start_id);
    ad::Tensor joint = model.joint_loss(pass, tag, dec.total);
    total = ad::add(total, joint);
    out.tag += tag.scalar();
    out.dec += dec.total.scalar();
    out.cov += lambda * dec.coverage.scalar();
    out.joint += joint.scalar();
  }
  if (end > begin) tape.backward(total, inv_batch);
  out.pass = &pass;
}

}  // namespace detail

// Forward and backward over one batch; leaves summed gradients scaled by
// 1/batch in the parameter registry and returns the mean loss decomposition.
inline BatchStats train_batch(SargModel& model, const Batch& batch, double lambda,
                              int start_id, int threads) {
  const size_t n = batch.items.size();
  const double inv = 1.0 / static_cast<double>(n);
  BatchStats stats;
  if (threads <= 1 || n <= 1) {
    ad::Tape tape;
    Pass pass(tape);
    detail::WorkerOut out;
    detail::run_worker(model, batch, 0, n, lambda, start_id, inv, tape, pass, out);
    stats.loss = out.joint * inv;
    stats.loss_tag = out.tag * inv;
    stats.loss_dec = out.dec * inv;
    stats.covloss = out.cov * inv;
    return stats;
  }
  const size_t t = std::min<size_t>(threads, n);
  std::vector<ad::Tape> tapes(t);
  std::vector<Pass> passes;
  passes.reserve(t);
  for (size_t w = 0; w < t; ++w) passes.emplace_back(tapes[w], true);
  std::vector<detail::WorkerOut> outs(t);
  std::vector<std::thread> pool;
  const size_t chunk = (n + t - 1) / t;
  for (size_t w = 0; w < t; ++w) {
    size_t begin = w * chunk, end = std::min(n, begin + chunk);
    pool.emplace_back([&, w, begin, end] {
      detail::run_worker(model, batch, begin, end, lambda, start_id, inv, tapes[w], passes[w],
                         outs[w]);
    });
  }
  for (auto& th : pool) th.join();
  for (size_t w = 0; w < t; ++w) {
    passes[w].merge_grads();
    stats.loss += outs[w].joint;
    stats.loss_tag += outs[w].tag;
    stats.loss_dec += outs[w].dec;
    stats.covloss += outs[w].cov;
  }
  stats.loss *= inv;
  stats.loss_tag *= inv;
  stats.loss_dec *= inv;
  stats.covloss *= inv;
  return stats;
}

inline void clip_gradients(ParamRegistry& params, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (auto& p : params.all())
    if (p.trainable)
      for (double g : p.grad) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  double scale = max_norm / norm;
  for (auto& p : params.all())
    if (p.trainable)
      for (double& g : p.grad) g *= scale;
}

struct EvalScores {
  double exact_match = 0.0;
  double f1 = 0.0;
};

// Greedy decode over a split, scored against references.
inline EvalScores eval_split(SargModel& model, const std::vector<PreparedExample>& split,
                             const Vocabulary& vocab) {
  EvalScores s;
  if (split.empty()) return s;
  Corpus refs;
  std::vector<Tokens> preds;
  preds.reserve(split.size());
  for (const auto& ex : split) {
    refs.examples.push_back(ex.dialogue);
    preds.push_back(predict(model, ex.dialogue, vocab).tokens);
  }
  CorpusEvaluation ev = evaluate_corpus(preds, refs);
  s.exact_match = ev.corpus.exact_match;
  s.f1 = ev.corpus.restoration[0].f;
  return s;
}

struct TrainResult {
  long steps = 0;
  double best_dev_em = -1.0;
  double final_dev_em = 0.0;
  double final_dev_f1 = 0.0;
  double final_train_em = -1.0;  // -1 when never computed
  long skipped_too_long = 0;
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string stop_reason = "max_steps";
};

inline void save_train_checkpoint(const std::string& path, const SargModel& model,
                                  const Vocabulary& vocab, const TrainConfig& cfg, long step,
                                  const Adam& opt) {
  nlohmann::json header;
  header["config"] = model.config().to_json();
  header["train_config"] = cfg.to_json();
  header["vocab"] = vocab.to_json();
  header["step"] = step;
  save_checkpoint(path, header, model.params(), &opt);
}

// Full training loop: shuffled padded batches, coverage weight switched on at
// no_coverage_steps, Adam updates, periodic dev evaluation with patience, and
// best/last checkpoints. Deterministic for a fixed config, and resumable from
// a checkpoint with an identical batch schedule.
inline TrainResult train(const Corpus& corpus, SargModel& model, const Vocabulary& vocab,
                         const TrainConfig& cfg, std::ostream* metrics_log = nullptr) {
  cfg.validate();
  PreparedCorpus prep = prepare_corpus(corpus, vocab, model.config());
  if (prep.train.empty()) throw InvalidConfig("no trainable examples after length filtering");

  TrainResult result;
  result.skipped_too_long = prep.skipped_too_long;

  Adam opt(AdamConfig{cfg.lr});
  long step = 0;
  if (!cfg.resume_from.empty()) {
    Checkpoint ck = load_checkpoint(cfg.resume_from);
    restore_params(ck, model.params());
    step = restore_optimizer(ck, opt);
  }

  const bool has_dir = !cfg.checkpoint_dir.empty();
  if (has_dir) std::filesystem::create_directories(cfg.checkpoint_dir);
  const std::string best_path = cfg.checkpoint_dir + "/best.ckpt";
  const std::string last_path = cfg.checkpoint_dir + "/last.ckpt";

  const size_t n_train = prep.train.size();
  const long bpe = static_cast<long>((n_train + cfg.batch_size - 1) / cfg.batch_size);
  const int start_id = vocab.start_id();

  int evals_since_best = 0;
  bool stop = false;

  auto evaluate = [&](long at_step, BatchStats last) {
    EvalScores dev = eval_split(model, prep.dev, vocab);
    result.final_dev_em = dev.exact_match;
    result.final_dev_f1 = dev.f1;
    double train_em = -1.0;
    if (cfg.stop_train_em > 0) {
      EvalScores tr = eval_split(model, prep.train, vocab);
      train_em = tr.exact_match;
      result.final_train_em = train_em;
    }
    if (metrics_log) {
      nlohmann::json rec = {{"step", at_step},         {"loss", last.loss},
                            {"loss_tag", last.loss_tag}, {"loss_dec", last.loss_dec},
                            {"covloss", last.covloss},   {"dev_exact_match", dev.exact_match},
                            {"dev_f1", dev.f1}};
      if (train_em >= 0) rec["train_exact_match"] = train_em;
      (*metrics_log) << rec.dump() << "\n";
    }
    if (!prep.dev.empty()) {
      if (dev.exact_match > result.best_dev_em) {
        result.best_dev_em = dev.exact_match;
        evals_since_best = 0;
        if (has_dir) {
          save_train_checkpoint(best_path, model, vocab, cfg, at_step, opt);
          result.best_checkpoint = best_path;
        }
      } else {
        ++evals_since_best;
      }
      if (cfg.patience > 0 && evals_since_best >= cfg.patience) {
        result.stop_reason = "patience";
        stop = true;
      }
    }
    if (train_em >= 0 && train_em >= cfg.stop_train_em) {
      result.stop_reason = "train_exact_match";
      stop = true;
    }
    if (has_dir) {
      save_train_checkpoint(last_path, model, vocab, cfg, at_step, opt);
      result.last_checkpoint = last_path;
    }
  };

  while (!stop && step < cfg.max_steps) {
    const long epoch = step / bpe;
    std::vector<size_t> order = epoch_order(n_train, cfg.seed, epoch);
    for (long b = step % bpe; b < bpe && !stop && step < cfg.max_steps; ++b) {
      size_t begin = static_cast<size_t>(b) * cfg.batch_size;
      size_t end = std::min(n_train, begin + cfg.batch_size);
      Batch batch = make_batch(prep.train, order, begin, end, vocab, model.config());
      double lambda = step < cfg.no_coverage_steps ? 0.0 : model.config().lambda;
      BatchStats stats = train_batch(model, batch, lambda, start_id, cfg.threads);
      if (!std::isfinite(stats.loss)) throw DivergedLoss(step);
      clip_gradients(model.params(), cfg.grad_clip);
      opt.step(model.params());
      ++step;
      if (metrics_log && step % cfg.eval_every != 0 && step != cfg.max_steps) {
        nlohmann::json rec = {{"step", step},
                              {"loss", stats.loss},
                              {"loss_tag", stats.loss_tag},
                              {"loss_dec", stats.loss_dec},
                              {"covloss", stats.covloss}};
        (*metrics_log) << rec.dump() << "\n";
      }
      if (step % cfg.eval_every == 0 || step == cfg.max_steps) evaluate(step, stats);
    }
  }

  if (has_dir && result.last_checkpoint.empty()) {
    save_train_checkpoint(last_path, model, vocab, cfg, step, opt);
    result.last_checkpoint = last_path;
  }
  result.steps = step;
  return result;
}

}  // namespace sarg
