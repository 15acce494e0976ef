#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sarg/errors.hpp"

namespace sarg {

using Tokens = std::vector<std::string>;

enum class TokenizeMode { Whitespace, Char };

inline TokenizeMode tokenize_mode_from_string(const std::string& s) {
  if (s == "whitespace") return TokenizeMode::Whitespace;
  if (s == "char") return TokenizeMode::Char;
  throw InvalidConfig("unknown tokenize mode \"" + s + "\"");
}

// Whitespace mode splits on runs of whitespace; char mode drops whitespace and
// splits at UTF-8 code point boundaries. Joining with the mode's joiner
// (" " resp. "") reproduces the normalized text.
inline Tokens tokenize(std::string_view text, TokenizeMode mode) {
  Tokens out;
  if (mode == TokenizeMode::Whitespace) {
    size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      size_t start = i;
      while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
      if (i > start) out.emplace_back(text.substr(start, i - start));
    }
  } else {
    size_t i = 0;
    while (i < text.size()) {
      unsigned char c = static_cast<unsigned char>(text[i]);
      if (std::isspace(c)) {
        ++i;
        continue;
      }
      size_t len = 1;
      // continuation bytes have the form 10xxxxxx
      while (i + len < text.size() && (static_cast<unsigned char>(text[i + len]) & 0xC0) == 0x80) ++len;
      out.emplace_back(text.substr(i, len));
      i += len;
    }
  }
  if (out.empty()) throw EmptyInput();
  return out;
}

inline std::string join(const Tokens& tokens, const std::string& sep = " ") {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// --- vocabulary -------------------------------------------------------------

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kStartToken = "<s>";
inline constexpr const char* kEopToken = "</p>";
inline constexpr const char* kDummyToken = "<ui>";

inline bool is_special_token(std::string_view tok) {
  return tok == kPadToken || tok == kUnkToken || tok == kStartToken || tok == kEopToken ||
         tok == kDummyToken;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const char* s : {kPadToken, kUnkToken, kStartToken, kEopToken, kDummyToken}) add(s);
  }

  int add(const std::string& tok) {
    auto [it, inserted] = token_to_id_.emplace(tok, static_cast<int>(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(tok);
    return it->second;
  }

  int id(std::string_view tok) const {
    auto it = token_to_id_.find(std::string(tok));
    return it == token_to_id_.end() ? unk_id() : it->second;
  }

  bool contains(std::string_view tok) const { return token_to_id_.count(std::string(tok)) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw InvalidId(id, size());
    return id_to_token_[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(id_to_token_.size()); }

  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int start_id() const { return 2; }
  int eop_id() const { return 3; }
  int dummy_id() const { return 4; }

  std::vector<int> encode(const Tokens& tokens) const {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  Tokens decode(const std::vector<int>& ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  nlohmann::json to_json() const { return nlohmann::json{{"id_to_token", id_to_token_}}; }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    const auto& list = j.at("id_to_token");
    for (size_t i = 5; i < list.size(); ++i) v.add(list[i].get<std::string>());
    // the first five entries must be the fixed specials
    for (int i = 0; i < 5; ++i) {
      if (list[static_cast<size_t>(i)].get<std::string>() != v.id_to_token_[static_cast<size_t>(i)])
        throw Error("vocabulary specials do not match this build");
    }
    return v;
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// --- dialogues and corpora ---------------------------------------------------

struct Dialogue {
  std::vector<Tokens> history;
  Tokens utterance;
  std::optional<Tokens> reference;
};

struct Corpus {
  std::vector<Dialogue> examples;
  std::string source_path;
};

inline void validate_dialogue(const Dialogue& d, const std::string& file = "<memory>",
                              size_t line = 0) {
  auto bad = [&](const std::string& what) { throw ParseError(file, line, what); };
  if (d.history.empty()) bad("history must be non-empty");
  if (d.utterance.empty()) bad("utterance must be non-empty");
  for (const auto& turn : d.history)
    if (turn.empty()) bad("history turn must be non-empty");
  auto check_tokens = [&](const Tokens& toks) {
    for (const auto& t : toks)
      if (is_special_token(t)) bad("token \"" + t + "\" collides with a special token");
  };
  for (const auto& turn : d.history) check_tokens(turn);
  check_tokens(d.utterance);
  if (d.reference) check_tokens(*d.reference);
}

// Specials first (fixed ids 0..4), then tokens with frequency >= min_count by
// descending frequency, ties lexicographic. Deterministic across runs.
inline Vocabulary build_vocab(const Corpus& corpus, int min_count) {
  std::map<std::string, long> counts;
  auto count = [&](const Tokens& toks) {
    for (const auto& t : toks) ++counts[t];
  };
  for (const auto& ex : corpus.examples) {
    for (const auto& turn : ex.history) count(turn);
    count(ex.utterance);
    if (ex.reference) count(*ex.reference);
  }
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, c] : items)
    if (c >= min_count) v.add(tok);
  return v;
}

namespace detail {

inline Tokens field_tokens(const nlohmann::json& value, bool pretokenized, TokenizeMode mode,
                           const std::string& file, size_t line, const std::string& field) {
  try {
    if (pretokenized) {
      Tokens toks = value.get<Tokens>();
      if (toks.empty()) throw ParseError(file, line, "field \"" + field + "\" is empty");
      for (const auto& t : toks)
        if (t.empty()) throw ParseError(file, line, "empty token in field \"" + field + "\"");
      return toks;
    }
    return tokenize(value.get<std::string>(), mode);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(file, line, "field \"" + field + "\": " + e.what());
  } catch (const EmptyInput&) {
    throw ParseError(file, line, "field \"" + field + "\" is empty");
  }
}

}  // namespace detail

// One JSON record per non-blank line: {"history": [...], "utterance": ...,
// "restored": ...}. Fields are strings by default, arrays of tokens when
// pretokenized is set.
inline Corpus load_corpus(const std::string& path, TokenizeMode mode = TokenizeMode::Whitespace,
                          bool pretokenized = false) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.source_path = path;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;  // blank lines skipped
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path, line_no, e.what());
    }
    if (!rec.is_object()) throw ParseError(path, line_no, "record is not an object");
    if (!rec.contains("history")) throw MissingField(path, line_no, "history");
    if (!rec.contains("utterance")) throw MissingField(path, line_no, "utterance");
    if (!rec["history"].is_array()) throw ParseError(path, line_no, "\"history\" must be an array");
    Dialogue d;
    for (size_t t = 0; t < rec["history"].size(); ++t)
      d.history.push_back(detail::field_tokens(rec["history"][t], pretokenized, mode, path, line_no,
                                               "history[" + std::to_string(t) + "]"));
    d.utterance = detail::field_tokens(rec["utterance"], pretokenized, mode, path, line_no, "utterance");
    if (rec.contains("restored") && !rec["restored"].is_null())
      d.reference = detail::field_tokens(rec["restored"], pretokenized, mode, path, line_no, "restored");
    validate_dialogue(d, path, line_no);
    corpus.examples.push_back(std::move(d));
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& path, bool pretokenized = false) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus file: " + path);
  for (const auto& ex : corpus.examples) {
    nlohmann::ordered_json rec;
    if (pretokenized) {
      rec["history"] = ex.history;
      rec["utterance"] = ex.utterance;
      if (ex.reference) rec["restored"] = *ex.reference;
    } else {
      std::vector<std::string> hist;
      for (const auto& turn : ex.history) hist.push_back(join(turn));
      rec["history"] = hist;
      rec["utterance"] = join(ex.utterance);
      if (ex.reference) rec["restored"] = join(*ex.reference);
    }
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("failed writing corpus file: " + path);
}

}  // namespace sarg
