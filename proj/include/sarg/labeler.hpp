#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "sarg/errors.hpp"
#include "sarg/text.hpp"

namespace sarg {

enum class EditKind { Keep, Delete, Change };

struct EditOp {
  EditKind kind = EditKind::Delete;
  Tokens phrase;  // non-empty exactly when kind == Change

  static EditOp keep() { return {EditKind::Keep, {}}; }
  static EditOp del() { return {EditKind::Delete, {}}; }
  static EditOp change(Tokens p) { return {EditKind::Change, std::move(p)}; }

  bool operator==(const EditOp&) const = default;
};

// Utterance with a dummy slot between every pair of tokens and at both ends:
// positions 0,2,4,... are dummies, odd positions hold the original tokens.
struct AugmentedUtterance {
  Tokens tokens;
  std::vector<bool> is_dummy;

  size_t size() const { return tokens.size(); }
};

inline AugmentedUtterance insert_dummies(const Tokens& utterance) {
  if (utterance.empty()) throw EmptyUtterance();
  AugmentedUtterance out;
  out.tokens.reserve(2 * utterance.size() + 1);
  out.is_dummy.reserve(2 * utterance.size() + 1);
  for (const auto& tok : utterance) {
    out.tokens.push_back(kDummyToken);
    out.is_dummy.push_back(true);
    out.tokens.push_back(tok);
    out.is_dummy.push_back(false);
  }
  out.tokens.push_back(kDummyToken);
  out.is_dummy.push_back(true);
  return out;
}

inline Tokens strip_dummies(const AugmentedUtterance& aug) {
  Tokens out;
  for (size_t i = 0; i < aug.size(); ++i)
    if (!aug.is_dummy[i]) out.push_back(aug.tokens[i]);
  return out;
}

// Longest common subsequence with a deterministic leftmost alignment: walk
// both sequences forward and repeatedly take the feasible match with the
// smallest (i, j) pair, feasibility checked against a suffix-length table.
inline Tokens lcs(const Tokens& a, const Tokens& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<std::vector<int>> L(n + 1, std::vector<int>(m + 1, 0));
  for (size_t i = n; i-- > 0;)
    for (size_t j = m; j-- > 0;)
      L[i][j] = a[i] == b[j] ? L[i + 1][j + 1] + 1 : std::max(L[i + 1][j], L[i][j + 1]);

  Tokens out;
  size_t i = 0, j = 0;
  int need = L[0][0];
  while (need > 0) {
    bool took = false;
    for (size_t ii = i; ii < n && !took; ++ii) {
      if (L[ii][j] != need) break;  // feasible matches cannot start further down
      for (size_t jj = j; jj < m; ++jj) {
        if (a[ii] == b[jj] && L[ii + 1][jj + 1] == need - 1) {
          out.push_back(a[ii]);
          i = ii + 1;
          j = jj + 1;
          --need;
          took = true;
          break;
        }
      }
    }
  }
  return out;
}

// Per-token supervision for one dialogue: the augmented source and an edit op
// for every augmented position.
struct LabeledExample {
  Dialogue dialogue;
  AugmentedUtterance augmented;
  std::vector<EditOp> labels;
};

// Converts a target utterance into edit labels over the augmented source.
// Walks the common subsequence left to right; target tokens consumed before a
// match become a CHANGE phrase on the dummy just before the matched token, and
// any trailing target tokens attach to the final dummy. Unmatched source
// tokens stay DELETE.
inline std::vector<EditOp> make_labels(const Tokens& S, const Tokens& T) {
  if (S.empty() || T.empty()) throw EmptyInput();
  const Tokens K = lcs(S, T);
  const size_t n = S.size(), m = T.size();
  std::vector<EditOp> labels(2 * n + 1, EditOp::del());

  size_t j = 0, k = 0;
  for (size_t s = 0; s < n; ++s) {
    const size_t pos = 2 * s + 1;  // augmented index of S[s]
    if (k < K.size() && S[s] == K[k]) {
      Tokens acc;
      while (T[j] != K[k]) acc.push_back(T[j++]);
      ++j;  // consume the matched target token as well
      if (!acc.empty()) labels[pos - 1] = EditOp::change(std::move(acc));
      labels[pos] = EditOp::keep();
      ++k;
    }
  }
  if (j < m) labels[2 * n] = EditOp::change(Tokens(T.begin() + static_cast<long>(j), T.end()));
  return labels;
}

struct LabelViolation {
  size_t index;
  std::string what;
};

// Position/kind constraint: originals carry KEEP or DELETE, dummies carry
// DELETE or CHANGE, and the phrase is non-empty exactly for CHANGE.
inline std::vector<LabelViolation> validate_labels(const std::vector<EditOp>& labels,
                                                   const AugmentedUtterance& aug) {
  if (labels.size() != aug.size())
    throw LengthMismatch("labels vs augmented utterance", labels.size(), aug.size());
  std::vector<LabelViolation> out;
  for (size_t i = 0; i < labels.size(); ++i) {
    const EditOp& op = labels[i];
    if (aug.is_dummy[i] && op.kind == EditKind::Keep)
      out.push_back({i, "KEEP on a dummy position"});
    if (!aug.is_dummy[i] && op.kind == EditKind::Change)
      out.push_back({i, "CHANGE on an original position"});
    if (op.kind == EditKind::Change && op.phrase.empty())
      out.push_back({i, "CHANGE with empty phrase"});
    if (op.kind != EditKind::Change && !op.phrase.empty())
      out.push_back({i, "phrase on a non-CHANGE op"});
  }
  return out;
}

// KEEP emits the token, DELETE drops it, CHANGE emits its phrase in place.
inline Tokens realize(const AugmentedUtterance& aug, const std::vector<EditOp>& labels) {
  auto violations = validate_labels(labels, aug);
  if (!violations.empty())
    throw InvalidLabels("position " + std::to_string(violations.front().index) + ": " +
                        violations.front().what);
  Tokens out;
  for (size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i].kind) {
      case EditKind::Keep: out.push_back(aug.tokens[i]); break;
      case EditKind::Delete: break;
      case EditKind::Change:
        out.insert(out.end(), labels[i].phrase.begin(), labels[i].phrase.end());
        break;
    }
  }
  return out;
}

inline LabeledExample label_example(const Dialogue& d) {
  if (!d.reference) throw Error("cannot label a dialogue without a restored reference");
  LabeledExample ex;
  ex.dialogue = d;
  ex.augmented = insert_dummies(d.utterance);
  ex.labels = make_labels(d.utterance, *d.reference);
  return ex;
}

}  // namespace sarg
