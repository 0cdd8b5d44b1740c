#ifndef CTRACE_ANALYTICS_HPP_
#define CTRACE_ANALYTICS_HPP_

#include <Eigen/Core>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctrace/data.hpp"
#include "ctrace/trace.hpp"

namespace ctrace {

struct TopCell {
  int token;
  int layer;
  double value;
};

struct TopKSummary {
  int k = 0;
  std::vector<TopCell> cells;       // descending; ties by (token, layer)
  std::vector<long> layer_counts;   // occurrences per layer among the cells
  std::map<std::string, double> segment_shares;  // filled via overlay
  std::map<std::string, double> dsr_shares;
};

// The min(k, T*L) highest cells of the matrix. Ordering is total: value
// descending, then lower token, then lower layer.
TopKSummary top_k(const Eigen::MatrixXd& cells, int k);

struct LayerHistogram {
  std::vector<long> counts;
  std::vector<double> smoothed;  // centered moving average, width 3
};

LayerHistogram layer_histogram(std::span<const TopKSummary> summaries,
                               int n_layers);

// Smallest token-length interval [a, b] covering at least `coverage` of the
// traces; mode-containing windows win ties, then the lower interval.
struct LengthBucket {
  int min_len = 0;
  int max_len = 0;
  std::vector<int> selected;  // indices into the input span
};
LengthBucket select_length_bucket(std::span<const TraceResult> traces,
                                  double coverage = 0.8);

struct AggregateTrace {
  int n_tokens = 0;  // max token length in the selection
  int n_layers = 0;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd median;
  int n_samples = 0;
  LengthBucket bucket;
};

// Elementwise mean/median over the stack, shorter matrices zero-padded with
// bottom rows. Throws KindMismatch when kinds differ.
AggregateTrace aggregate_traces(std::span<const TraceResult> traces);

// Per-POS layer histograms over top-k summaries; empty groups are omitted.
std::map<std::string, LayerHistogram> group_by_pos(
    std::span<const TopKSummary> summaries,
    std::span<const std::optional<PosTag>> pos_tags, int n_layers);

// Distribution of top-cell layer indices per input-length bucket.
std::map<int, std::vector<long>> length_stats(
    std::span<const TopKSummary> summaries, std::span<const int> input_lengths,
    int n_layers);

}  // namespace ctrace

#endif  // CTRACE_ANALYTICS_HPP_
