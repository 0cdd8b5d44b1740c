#ifndef CTRACE_TRACE_HPP_
#define CTRACE_TRACE_HPP_

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctrace/data.hpp"
#include "ctrace/model.hpp"

namespace ctrace {

inline constexpr double kDegeneracyThreshold = 1e-6;

struct TraceConfig {
  StateKind kind = StateKind::kHidden;
  int window = 1;                  // 1 for hidden, 10 for mha/mlp by default
  double noise_multiplier = 3.0;   // noise std = multiplier * embedding std
  int noise_samples = 10;          // S corruption draws, averaged
  // nullopt corrupts every definiens position.
  std::optional<std::vector<int>> corrupt_positions;
  std::uint64_t seed = 0;

  static int default_window(StateKind kind) {
    return kind == StateKind::kHidden ? 1 : 10;
  }
  static TraceConfig for_kind(StateKind kind) {
    TraceConfig c;
    c.kind = kind;
    c.window = default_window(kind);
    return c;
  }
  void validate() const;
};

struct ScoreTriple {
  double p_clean = 0.0;
  double p_corrupted = 0.0;  // mean over the S noise draws
  double p_restored = 0.0;   // mean over the same S draws
};

struct TraceToken {
  std::string surface;
  bool corrupted = false;
  std::string segment;  // early / mid / prompt
  std::string dsr;      // role name, "prompt", or "unlabeled"
};

// The T x L interpretation trace of one sample for one component kind.
struct TraceResult {
  std::string sample_id;
  StateKind kind = StateKind::kHidden;
  Eigen::MatrixXd normalized;  // rows = tokens, cols = layers, in [0,1]
  Eigen::MatrixXd restored;    // raw mean p_restored per cell
  double p_clean = 0.0;
  double p_corrupted = 0.0;
  TraceConfig config;
  std::vector<TraceToken> tokens;
  int boundary = 0;  // definiens length N
  std::optional<PosTag> definiendum_pos;

  int n_tokens() const { return static_cast<int>(normalized.rows()); }
  int n_layers() const { return static_cast<int>(normalized.cols()); }
};

// Population standard deviation over all embedding entries.
// Throws ZeroVarianceEmbeddings when it is zero.
double embedding_std(const Parameters& params);

// e* = e + alpha at the selected rows, alpha ~ N(0, (multiplier * sigma)^2)
// elementwise; other rows untouched. Deterministic per seed. Positions must
// lie inside [0, n_definiens).
Matrix corrupt(const Matrix& embeddings, std::span<const int> positions,
               int n_definiens, double multiplier, double sigma,
               std::uint64_t seed);

// Inclusive layer range [max(0, l - floor(w/2)), min(L-1, l + ceil(w/2) - 1)].
std::pair<int, int> window_layers(int layer, int window, int n_layers);

// clamp((p_restored - p_corrupted) / (p_clean - p_corrupted), 0, 1).
// Throws DegenerateTrace when the corruption gap is below the threshold.
double normalize_score(const ScoreTriple& triple);

// The full clean / corrupt / restore sweep for one sample. The same S
// corruption draws are reused across all cells (paired comparison).
// Throws NotPredicted when the clean argmax misses the definiendum and
// DegenerateTrace when corruption does not damage the prediction.
TraceResult trace(const Model& model, const ReverseDictionarySample& sample,
                  const PromptTemplate& tmpl, const Vocab& vocab,
                  const TraceConfig& config);

// Spearman rank correlation over flattened cells, the shorter token axis
// zero-padded. Throws KindMismatch on different kinds and
// UndefinedCorrelation when either side is constant.
double compare_traces(const TraceResult& a, const TraceResult& b);

// Plain numeric CSV at 9 significant digits; rows = tokens, cols = layers.
void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path);
Eigen::MatrixXd read_matrix_csv(const std::string& path);

// File pair: "<stem>.csv" (normalized matrix) and "<stem>.json" (metadata
// plus the per-token overlay).
void write_trace(const TraceResult& result, const std::string& stem);
TraceResult read_trace(const std::string& stem);  // restored matrix not kept

}  // namespace ctrace

#endif  // CTRACE_TRACE_HPP_
