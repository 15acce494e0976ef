#pragma once

#include <stdexcept>
#include <string>

namespace sarg {

// Base of every recoverable error raised by this library.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// --- input / validation errors -------------------------------------------

struct EmptyInput : Error {
  EmptyInput() : Error("input is empty after trimming") {}
};

struct EmptyUtterance : Error {
  EmptyUtterance() : Error("utterance must contain at least one token") {}
};

struct InvalidConfig : Error {
  explicit InvalidConfig(const std::string& what) : Error("invalid config: " + what) {}
};

struct InvalidId : Error {
  InvalidId(int id, int vocab_size)
      : Error("token id " + std::to_string(id) + " out of range for vocabulary of size " +
              std::to_string(vocab_size)) {}
};

struct LengthMismatch : Error {
  LengthMismatch(const std::string& what, size_t a, size_t b)
      : Error(what + ": lengths " + std::to_string(a) + " vs " + std::to_string(b)) {}
};

struct InvalidLabels : Error {
  explicit InvalidLabels(const std::string& what) : Error("invalid labels: " + what) {}
};

// --- file / parse errors (CLI exit code 2) --------------------------------

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(what) {}
};

struct ParseError : IoError {
  ParseError(const std::string& file, size_t line, const std::string& what)
      : IoError(file + ":" + std::to_string(line) + ": " + what), line_number(line) {}
  size_t line_number;
};

struct MissingField : ParseError {
  MissingField(const std::string& file, size_t line, const std::string& field)
      : ParseError(file, line, "missing field \"" + field + "\""), field_name(field) {}
  std::string field_name;
};

// --- numeric errors --------------------------------------------------------

struct ShapeMismatch : Error {
  ShapeMismatch(const std::string& op, const std::string& a, const std::string& b)
      : Error("shape mismatch in " + op + ": " + a + " vs " + b) {}
};

struct IndexOutOfBounds : Error {
  IndexOutOfBounds(const std::string& table, int index, int size)
      : Error("index " + std::to_string(index) + " out of bounds for " + table + " of size " +
              std::to_string(size)) {}
};

struct SequenceTooLong : Error {
  SequenceTooLong(size_t length, size_t max_positions)
      : Error("sequence of length " + std::to_string(length) + " exceeds max_positions " +
              std::to_string(max_positions)) {}
};

struct NonFiniteValue : Error {
  explicit NonFiniteValue(const std::string& where) : Error("non-finite value in " + where) {}
};

struct DivergedLoss : Error {
  explicit DivergedLoss(long step)
      : Error("training loss became non-finite at step " + std::to_string(step)), step(step) {}
  long step;
};

}  // namespace sarg
