#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <string>
#include <vector>

#include "sarg/labeler.hpp"
#include "sarg/prng.hpp"
#include "sarg/synthetic.hpp"

using namespace sarg;

namespace {

Tokens random_tokens(SplitMix64& rng, size_t len, int vocab) {
  Tokens out;
  for (size_t i = 0; i < len; ++i)
    out.push_back("w" + std::to_string(rng.below(static_cast<uint64_t>(vocab))));
  return out;
}

bool is_subsequence(const Tokens& sub, const Tokens& seq) {
  size_t i = 0;
  for (const auto& t : seq)
    if (i < sub.size() && sub[i] == t) ++i;
  return i == sub.size();
}

// Exhaustive longest-common-subsequence length over all subsequences of a.
int lcs_brute(const Tokens& a, const Tokens& b) {
  REQUIRE(a.size() <= 16);
  int best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    Tokens sub;
    for (size_t i = 0; i < a.size(); ++i)
      if (mask & (1u << i)) sub.push_back(a[i]);
    if (static_cast<int>(sub.size()) > best && is_subsequence(sub, b))
      best = static_cast<int>(sub.size());
  }
  return best;
}

}  // namespace

TEST_SUITE("dummies") {
  TEST_CASE("dummies sit at every even position") {
    AugmentedUtterance aug = insert_dummies({"a", "b"});
    CHECK(aug.tokens == Tokens{"<ui>", "a", "<ui>", "b", "<ui>"});
    CHECK(aug.is_dummy == std::vector<bool>{true, false, true, false, true});
    CHECK(aug.size() == 5);
    CHECK(strip_dummies(aug) == Tokens{"a", "b"});
  }

  TEST_CASE("single token and empty input") {
    AugmentedUtterance one = insert_dummies({"x"});
    CHECK(one.size() == 3);
    CHECK(one.tokens[1] == "x");
    CHECK_THROWS_AS(insert_dummies({}), EmptyUtterance);
  }

  TEST_CASE("strip inverts insert for random utterances") {
    SplitMix64 rng(11);
    for (int t = 0; t < 50; ++t) {
      Tokens u = random_tokens(rng, 1 + rng.below(12), 20);
      CHECK(strip_dummies(insert_dummies(u)) == u);
    }
  }
}

TEST_SUITE("lcs") {
  TEST_CASE("classic pair has length 4 and a fixed alignment") {
    Tokens a = {"A", "B", "C", "B", "D", "A", "B"};
    Tokens b = {"B", "D", "C", "A", "B", "A"};
    Tokens k = lcs(a, b);
    CHECK(k.size() == 4);
    // the walk takes the lexicographically smallest feasible (i, j) each time
    CHECK(k == Tokens{"B", "C", "B", "A"});
    CHECK(is_subsequence(k, a));
    CHECK(is_subsequence(k, b));
  }

  TEST_CASE("edge shapes") {
    CHECK(lcs({"a"}, {"a"}) == Tokens{"a"});
    CHECK(lcs({"a"}, {"b"}).empty());
    CHECK(lcs({"a", "b", "c"}, {"a", "b", "c"}) == Tokens{"a", "b", "c"});
    CHECK(lcs({"x", "x", "x"}, {"x", "x"}) == Tokens{"x", "x"});
    CHECK(lcs({}, {"a"}).empty());
    CHECK(lcs({}, {}).empty());
  }

  TEST_CASE("matches the exhaustive oracle on random pairs") {
    SplitMix64 rng(21);
    for (int t = 0; t < 300; ++t) {
      Tokens a = random_tokens(rng, rng.below(13), 4);
      Tokens b = random_tokens(rng, rng.below(13), 4);
      Tokens k = lcs(a, b);
      CHECK(static_cast<int>(k.size()) == lcs_brute(a, b));
      CHECK(is_subsequence(k, a));
      CHECK(is_subsequence(k, b));
      CHECK(lcs(a, b) == k);
    }
  }
}

TEST_SUITE("labels") {
  TEST_CASE("substitution in the middle") {
    std::vector<EditOp> labels = make_labels({"a", "b", "c"}, {"a", "X", "c"});
    std::vector<EditOp> want = {EditOp::del(),           EditOp::keep(), EditOp::del(),
                                EditOp::del(),           EditOp::change({"X"}), EditOp::keep(),
                                EditOp::del()};
    CHECK(labels == want);
  }

  TEST_CASE("identity keeps every original token") {
    std::vector<EditOp> labels = make_labels({"a", "b"}, {"a", "b"});
    std::vector<EditOp> want = {EditOp::del(), EditOp::keep(), EditOp::del(), EditOp::keep(),
                                EditOp::del()};
    CHECK(labels == want);
  }

  TEST_CASE("trailing insertion lands on the final dummy") {
    std::vector<EditOp> labels = make_labels({"a"}, {"a", "b"});
    std::vector<EditOp> want = {EditOp::del(), EditOp::keep(), EditOp::change({"b"})};
    CHECK(labels == want);
  }

  TEST_CASE("disjoint target becomes one big replacement") {
    std::vector<EditOp> labels = make_labels({"a", "b"}, {"x", "y"});
    CHECK(labels[1] == EditOp::del());
    CHECK(labels[3] == EditOp::del());
    CHECK(labels[4] == EditOp::change({"x", "y"}));
    CHECK(realize(insert_dummies({"a", "b"}), labels) == Tokens{"x", "y"});
  }

  TEST_CASE("pronoun swap deletes the pronoun and generates the antecedent") {
    Tokens utt = {"do", "you", "like", "him"};
    Tokens ref = {"do", "you", "like", "li", "chunfeng"};
    std::vector<EditOp> labels = make_labels(utt, ref);
    CHECK(labels[7] == EditOp::del());  // "him"
    CHECK(labels[8] == EditOp::change({"li", "chunfeng"}));
    CHECK(realize(insert_dummies(utt), labels) == ref);
  }

  TEST_CASE("empty inputs are rejected") {
    CHECK_THROWS_AS(make_labels({}, {"a"}), EmptyInput);
    CHECK_THROWS_AS(make_labels({"a"}, {}), EmptyInput);
  }

  TEST_CASE("round trip holds on random pairs including identity and disjoint") {
    SplitMix64 rng(31);
    long checked = 0;
    for (int t = 0; t < 2000; ++t) {
      Tokens s = random_tokens(rng, 1 + rng.below(20), 30);
      Tokens tt;
      switch (t % 4) {
        case 0: tt = random_tokens(rng, 1 + rng.below(20), 30); break;  // arbitrary
        case 1: tt = s; break;                                          // identity
        case 2: {                                                       // disjoint vocab
          const size_t len = 1 + rng.below(20);
          for (size_t i = 0; i < len; ++i) tt.push_back("z" + std::to_string(rng.below(30)));
          break;
        }
        default: {  // target shares a prefix with the source
          tt = Tokens(s.begin(), s.begin() + static_cast<long>(1 + rng.below(s.size())));
          const size_t extra = rng.below(8);
          for (size_t i = 0; i < extra; ++i) tt.push_back("w" + std::to_string(rng.below(30)));
          break;
        }
      }
      AugmentedUtterance aug = insert_dummies(s);
      std::vector<EditOp> labels = make_labels(s, tt);
      CHECK(validate_labels(labels, aug).empty());
      CHECK(realize(aug, labels) == tt);
      ++checked;
    }
    CHECK(checked == 2000);
  }
}

TEST_SUITE("label validation") {
  TEST_CASE("violations are located and named") {
    AugmentedUtterance aug = insert_dummies({"a"});
    std::vector<EditOp> bad = {EditOp::keep(), EditOp::change({"x"}), EditOp::del()};
    auto v = validate_labels(bad, aug);
    REQUIRE(v.size() == 2);
    CHECK(v[0].index == 0);
    CHECK(v[0].what == "KEEP on a dummy position");
    CHECK(v[1].index == 1);
    CHECK(v[1].what == "CHANGE on an original position");
  }

  TEST_CASE("empty change phrase and stray phrase are violations") {
    AugmentedUtterance aug = insert_dummies({"a"});
    std::vector<EditOp> empty_change = {EditOp{EditKind::Change, {}}, EditOp::keep(),
                                        EditOp::del()};
    auto v1 = validate_labels(empty_change, aug);
    REQUIRE(v1.size() == 1);
    CHECK(v1[0].what == "CHANGE with empty phrase");

    std::vector<EditOp> stray = {EditOp::del(), EditOp{EditKind::Keep, {"x"}}, EditOp::del()};
    auto v2 = validate_labels(stray, aug);
    REQUIRE(v2.size() == 1);
    CHECK(v2[0].what == "phrase on a non-CHANGE op");
  }

  TEST_CASE("length mismatch throws, realize rejects invalid labels") {
    AugmentedUtterance aug = insert_dummies({"a"});
    CHECK_THROWS_AS(validate_labels({EditOp::del()}, aug), LengthMismatch);
    std::vector<EditOp> bad = {EditOp::keep(), EditOp::keep(), EditOp::del()};
    CHECK_THROWS_AS(realize(aug, bad), InvalidLabels);
  }
}

TEST_SUITE("label pipeline") {
  TEST_CASE("labeling a dialogue needs a reference") {
    Dialogue d{{{"ctx"}}, {"a"}, std::nullopt};
    CHECK_THROWS_AS(label_example(d), Error);
  }

  TEST_CASE("synthetic corpus round trips and non-identity implies a CHANGE") {
    SynthConfig cfg;
    cfg.n_examples = 120;
    Corpus corpus = gen_synthetic(cfg, 99);
    for (const auto& ex : corpus.examples) {
      LabeledExample lab = label_example(ex);
      CHECK(realize(lab.augmented, lab.labels) == *ex.reference);
      if (ex.utterance != *ex.reference) {
        bool has_change = false;
        for (const auto& op : lab.labels) has_change = has_change || op.kind == EditKind::Change;
        CHECK(has_change);
      }
    }
  }
}
