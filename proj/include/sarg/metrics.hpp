#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarg/errors.hpp"
#include "sarg/text.hpp"

namespace sarg {

// n-gram multiset
using NgramCounts = std::map<std::vector<std::string>, long>;

inline NgramCounts ngram_counts(const Tokens& toks, int n) {
  NgramCounts out;
  if (n < 1 || toks.size() < static_cast<size_t>(n)) return out;
  for (size_t i = 0; i + static_cast<size_t>(n) <= toks.size(); ++i)
    ++out[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                   toks.begin() + static_cast<long>(i) + n)];
  return out;
}

inline long ngram_total(const NgramCounts& c) {
  long t = 0;
  for (const auto& [g, n] : c) t += n;
  return t;
}

// multiset a minus b, clamped at zero
inline NgramCounts ngram_diff(const NgramCounts& a, const NgramCounts& b) {
  NgramCounts out;
  for (const auto& [g, n] : a) {
    auto it = b.find(g);
    const long rest = n - (it == b.end() ? 0 : it->second);
    if (rest > 0) out[g] = rest;
  }
  return out;
}

// size of the multiset intersection
inline long ngram_overlap(const NgramCounts& a, const NgramCounts& b) {
  long t = 0;
  for (const auto& [g, n] : a) {
    auto it = b.find(g);
    if (it != b.end()) t += std::min(n, it->second);
  }
  return t;
}

namespace detail {

// num/den with the shared zero rule: 0/0 is 1 when the opposite side is empty
// too, otherwise 0
inline double ratio(long num, long den, long opposite_den) {
  if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
  return opposite_den == 0 ? 1.0 : 0.0;
}

inline double f_score(double p, double r) { return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace detail

struct PRF {
  double p = 0.0, r = 0.0, f = 0.0;
};

// Precision/recall/F over "restored" n-grams: each side's n-grams minus
// (multiset-wise) the source utterance's n-grams.
inline PRF restoration_score(const Tokens& hyp, const Tokens& ref, const Tokens& src, int n) {
  if (n < 1) throw InvalidConfig("n-gram order must be >= 1");
  const NgramCounts src_n = ngram_counts(src, n);
  const NgramCounts rest_hyp = ngram_diff(ngram_counts(hyp, n), src_n);
  const NgramCounts rest_ref = ngram_diff(ngram_counts(ref, n), src_n);
  const long overlap = ngram_overlap(rest_hyp, rest_ref);
  const long den_h = ngram_total(rest_hyp), den_r = ngram_total(rest_ref);
  PRF out;
  out.p = detail::ratio(overlap, den_h, den_r);
  out.r = detail::ratio(overlap, den_r, den_h);
  out.f = detail::f_score(out.p, out.r);
  return out;
}

// Geometric mean of clipped k-gram precisions (k = 1..n), brevity penalty
// exp(min(0, 1 - |ref|/|hyp|)), no smoothing.
inline double bleu_n(const Tokens& hyp, const Tokens& ref, int n) {
  if (n < 1) throw InvalidConfig("n-gram order must be >= 1");
  if (hyp.empty()) return ref.empty() ? 1.0 : 0.0;
  double log_acc = 0.0;
  for (int k = 1; k <= n; ++k) {
    const NgramCounts h = ngram_counts(hyp, k);
    const long den = ngram_total(h);
    const long num = ngram_overlap(h, ngram_counts(ref, k));
    const double pk = detail::ratio(num, den, ngram_total(ngram_counts(ref, k)));
    if (pk == 0.0) return 0.0;
    log_acc += std::log(pk);
  }
  const double bp =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size())));
  return bp * std::exp(log_acc / n);
}

// F1 over plain n-gram overlap.
inline double rouge_n(const Tokens& hyp, const Tokens& ref, int n) {
  if (n < 1) throw InvalidConfig("n-gram order must be >= 1");
  const NgramCounts h = ngram_counts(hyp, n), r = ngram_counts(ref, n);
  const long overlap = ngram_overlap(h, r);
  const double p = detail::ratio(overlap, ngram_total(h), ngram_total(r));
  const double rec = detail::ratio(overlap, ngram_total(r), ngram_total(h));
  return detail::f_score(p, rec);
}

struct RestorationReport {
  PRF restoration[3];  // n = 1, 2, 3
  double bleu1 = 0.0, bleu2 = 0.0;
  double rouge1 = 0.0, rouge2 = 0.0;
  double exact_match = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (int n = 0; n < 3; ++n) {
      const std::string suf = std::to_string(n + 1);
      j["p" + suf] = restoration[n].p;
      j["r" + suf] = restoration[n].r;
      j["f" + suf] = restoration[n].f;
    }
    j["bleu1"] = bleu1;
    j["bleu2"] = bleu2;
    j["rouge1"] = rouge1;
    j["rouge2"] = rouge2;
    j["exact_match"] = exact_match;
    return j;
  }
};

struct ExampleScore {
  PRF restoration[3];
  double bleu1 = 0.0, bleu2 = 0.0;
  double rouge1 = 0.0, rouge2 = 0.0;
  bool exact = false;
};

struct CorpusEvaluation {
  RestorationReport corpus;
  std::vector<ExampleScore> examples;
};

// Micro-averaged corpus scores: numerators and denominators are summed over
// examples before dividing. BLEU aggregates clipped counts and lengths the
// same way.
inline CorpusEvaluation evaluate_corpus(const std::vector<Tokens>& predictions,
                                        const Corpus& corpus) {
  if (predictions.empty()) throw EmptyInput();
  if (predictions.size() != corpus.examples.size())
    throw LengthMismatch("predictions vs corpus", predictions.size(), corpus.examples.size());

  CorpusEvaluation out;
  long rest_num[3] = {0, 0, 0}, rest_den_h[3] = {0, 0, 0}, rest_den_r[3] = {0, 0, 0};
  long bleu_num[2] = {0, 0}, bleu_den[2] = {0, 0}, bleu_ref_den[2] = {0, 0};
  long rouge_num[2] = {0, 0}, rouge_den_h[2] = {0, 0}, rouge_den_r[2] = {0, 0};
  long hyp_len = 0, ref_len = 0;
  long exact = 0;

  for (size_t i = 0; i < predictions.size(); ++i) {
    const Dialogue& ex = corpus.examples[i];
    if (!ex.reference)
      throw InvalidConfig("example " + std::to_string(i) + " has no restored reference");
    const Tokens& hyp = predictions[i];
    const Tokens& ref = *ex.reference;
    const Tokens& src = ex.utterance;

    ExampleScore score;
    for (int n = 1; n <= 3; ++n) {
      score.restoration[n - 1] = restoration_score(hyp, ref, src, n);
      const NgramCounts src_n = ngram_counts(src, n);
      const NgramCounts rh = ngram_diff(ngram_counts(hyp, n), src_n);
      const NgramCounts rr = ngram_diff(ngram_counts(ref, n), src_n);
      rest_num[n - 1] += ngram_overlap(rh, rr);
      rest_den_h[n - 1] += ngram_total(rh);
      rest_den_r[n - 1] += ngram_total(rr);
    }
    for (int n = 1; n <= 2; ++n) {
      const NgramCounts h = ngram_counts(hyp, n), r = ngram_counts(ref, n);
      const long num = ngram_overlap(h, r);
      bleu_num[n - 1] += num;
      bleu_den[n - 1] += ngram_total(h);
      bleu_ref_den[n - 1] += ngram_total(r);
      rouge_num[n - 1] += num;
      rouge_den_h[n - 1] += ngram_total(h);
      rouge_den_r[n - 1] += ngram_total(r);
    }
    score.bleu1 = bleu_n(hyp, ref, 1);
    score.bleu2 = bleu_n(hyp, ref, 2);
    score.rouge1 = rouge_n(hyp, ref, 1);
    score.rouge2 = rouge_n(hyp, ref, 2);
    score.exact = hyp == ref;
    hyp_len += static_cast<long>(hyp.size());
    ref_len += static_cast<long>(ref.size());
    if (score.exact) ++exact;
    out.examples.push_back(score);
  }

  RestorationReport& rep = out.corpus;
  for (int n = 0; n < 3; ++n) {
    rep.restoration[n].p = detail::ratio(rest_num[n], rest_den_h[n], rest_den_r[n]);
    rep.restoration[n].r = detail::ratio(rest_num[n], rest_den_r[n], rest_den_h[n]);
    rep.restoration[n].f = detail::f_score(rep.restoration[n].p, rep.restoration[n].r);
  }
  auto corpus_bleu = [&](int n) {
    if (hyp_len == 0) return ref_len == 0 ? 1.0 : 0.0;
    double log_acc = 0.0;
    for (int k = 1; k <= n; ++k) {
      const double pk = detail::ratio(bleu_num[k - 1], bleu_den[k - 1], bleu_ref_den[k - 1]);
      if (pk == 0.0) return 0.0;
      log_acc += std::log(pk);
    }
    const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
    return bp * std::exp(log_acc / n);
  };
  rep.bleu1 = corpus_bleu(1);
  rep.bleu2 = corpus_bleu(2);
  auto corpus_rouge = [&](int n) {
    const double p = detail::ratio(rouge_num[n - 1], rouge_den_h[n - 1], rouge_den_r[n - 1]);
    const double r = detail::ratio(rouge_num[n - 1], rouge_den_r[n - 1], rouge_den_h[n - 1]);
    return detail::f_score(p, r);
  };
  rep.rouge1 = corpus_rouge(1);
  rep.rouge2 = corpus_rouge(2);
  rep.exact_match = static_cast<double>(exact) / static_cast<double>(predictions.size());
  return out;
}

}  // namespace sarg
