#ifndef CTRACE_ERRORS_HPP_
#define CTRACE_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace ctrace {

// Base class for all toolkit errors. Subtypes map onto CLI exit codes:
// IoError -> 2, everything else -> 3 (validation / domain failures).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : Error {
  using Error::Error;
};

// A token id outside the vocabulary, or an out-of-vocab surface form.
struct InvalidToken : Error {
  using Error::Error;
};

// Patch cell indices outside the donor record's bounds.
struct InvalidPatch : Error {
  using Error::Error;
};

// Non-finite value produced during a forward pass.
struct NumericalOverflow : Error {
  NumericalOverflow(int layer, int token)
      : Error("non-finite value at layer " + std::to_string(layer) +
              ", token " + std::to_string(token)),
        layer(layer),
        token(token) {}
  int layer;
  int token;
};

// Malformed input line (JSONL, CSV, vocab file).
struct ParseError : Error {
  ParseError(const std::string& what, long line)
      : Error(what + " (line " + std::to_string(line) + ")"), line(line) {}
  long line;
};

// A structurally valid record that breaks a domain invariant.
struct ValidationError : Error {
  ValidationError(const std::string& what, std::string sample_id = {})
      : Error(sample_id.empty() ? what : sample_id + ": " + what),
        sample_id(std::move(sample_id)) {}
  std::string sample_id;
};

// Synthetic corpus generation ran out of distinct words or concepts.
struct GenerationError : Error {
  using Error::Error;
};

// Non-finite training loss.
struct TrainingDiverged : Error {
  using Error::Error;
};

// Embedding matrix has zero variance; noise scale would be degenerate.
struct ZeroVarianceEmbeddings : Error {
  using Error::Error;
};

// Corruption position outside the definiens range.
struct InvalidCorruptionTarget : Error {
  using Error::Error;
};

// Corruption failed to damage the prediction; the trace is meaningless.
struct DegenerateTrace : Error {
  using Error::Error;
};

// Sample was not predicted correctly and is not eligible for tracing.
struct NotPredicted : Error {
  using Error::Error;
};

// Rank correlation of a constant matrix.
struct UndefinedCorrelation : Error {
  using Error::Error;
};

// Mixing trace component kinds where one kind is required.
struct KindMismatch : Error {
  using Error::Error;
};

}  // namespace ctrace

#endif  // CTRACE_ERRORS_HPP_
