#include "ctrace/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ctrace/errors.hpp"

namespace ctrace {

TopKSummary top_k(const Eigen::MatrixXd& cells, int k) {
  if (k < 1) throw ValidationError("k must be >= 1");
  const int rows = static_cast<int>(cells.rows());
  const int cols = static_cast<int>(cells.cols());

  TopKSummary summary;
  summary.k = k;
  summary.cells.reserve(static_cast<size_t>(rows) * cols);
  for (int t = 0; t < rows; ++t)
    for (int l = 0; l < cols; ++l)
      summary.cells.push_back({t, l, cells(t, l)});

  // value descending; ties by lower token, then lower layer
  std::sort(summary.cells.begin(), summary.cells.end(),
            [](const TopCell& a, const TopCell& b) {
              if (a.value != b.value) return a.value > b.value;
              if (a.token != b.token) return a.token < b.token;
              return a.layer < b.layer;
            });
  summary.cells.resize(std::min<size_t>(summary.cells.size(), k));

  summary.layer_counts.assign(cols, 0);
  for (const auto& cell : summary.cells) ++summary.layer_counts[cell.layer];
  return summary;
}

LayerHistogram layer_histogram(std::span<const TopKSummary> summaries,
                               int n_layers) {
  if (summaries.empty()) throw ValidationError("no summaries to histogram");
  LayerHistogram hist;
  hist.counts.assign(n_layers, 0);
  for (const auto& summary : summaries)
    for (const auto& cell : summary.cells) ++hist.counts[cell.layer];

  hist.smoothed.assign(n_layers, 0.0);
  for (int l = 0; l < n_layers; ++l) {
    int lo = std::max(0, l - 1);
    int hi = std::min(n_layers - 1, l + 1);
    double sum = 0.0;
    for (int i = lo; i <= hi; ++i) sum += static_cast<double>(hist.counts[i]);
    hist.smoothed[l] = sum / (hi - lo + 1);
  }
  return hist;
}

LengthBucket select_length_bucket(std::span<const TraceResult> traces,
                                  double coverage) {
  if (traces.empty()) throw ValidationError("no traces to bucket");

  std::map<int, int> freq;
  for (const auto& trace : traces) ++freq[trace.n_tokens()];
  // modal length; smallest wins ties
  int mode = freq.begin()->first;
  for (const auto& [len, count] : freq)
    if (count > freq.at(mode)) mode = len;

  const double needed = coverage * static_cast<double>(traces.size()) - 1e-9;
  std::vector<int> lengths;
  for (const auto& [len, count] : freq) lengths.push_back(len);

  // smallest [a, b] with enough coverage; prefer windows containing the
  // modal length, then the lower interval
  int best_a = lengths.front(), best_b = lengths.back();
  long best_width = -1;
  bool best_has_mode = false;
  for (size_t i = 0; i < lengths.size(); ++i) {
    long covered = 0;
    for (size_t j = i; j < lengths.size(); ++j) {
      covered += freq.at(lengths[j]);
      if (static_cast<double>(covered) < needed) continue;
      long width = lengths[j] - lengths[i];
      bool has_mode = lengths[i] <= mode && mode <= lengths[j];
      bool better = best_width < 0 || width < best_width ||
                    (width == best_width && has_mode && !best_has_mode) ||
                    (width == best_width && has_mode == best_has_mode &&
                     lengths[i] < best_a);
      if (better) {
        best_a = lengths[i];
        best_b = lengths[j];
        best_width = width;
        best_has_mode = has_mode;
      }
      break;  // widening j further only grows the window
    }
  }

  LengthBucket bucket;
  bucket.min_len = best_a;
  bucket.max_len = best_b;
  for (size_t i = 0; i < traces.size(); ++i) {
    int len = traces[i].n_tokens();
    if (len >= best_a && len <= best_b)
      bucket.selected.push_back(static_cast<int>(i));
  }
  return bucket;
}

AggregateTrace aggregate_traces(std::span<const TraceResult> traces) {
  if (traces.empty()) throw ValidationError("no traces to aggregate");
  const StateKind kind = traces.front().kind;
  const int n_layers = traces.front().n_layers();
  int max_tokens = 0;
  for (const auto& trace : traces) {
    if (trace.kind != kind)
      throw KindMismatch("aggregation mixes component kinds");
    if (trace.n_layers() != n_layers)
      throw ValidationError("aggregation mixes layer counts");
    max_tokens = std::max(max_tokens, trace.n_tokens());
  }

  AggregateTrace agg;
  agg.n_tokens = max_tokens;
  agg.n_layers = n_layers;
  agg.n_samples = static_cast<int>(traces.size());
  agg.mean = Eigen::MatrixXd::Zero(max_tokens, n_layers);
  agg.median = Eigen::MatrixXd::Zero(max_tokens, n_layers);

  std::vector<double> column(traces.size());
  for (int t = 0; t < max_tokens; ++t) {
    for (int l = 0; l < n_layers; ++l) {
      double sum = 0.0;
      for (size_t i = 0; i < traces.size(); ++i) {
        // shorter traces contribute zero-padded bottom rows
        column[i] = t < traces[i].n_tokens() ? traces[i].normalized(t, l) : 0.0;
        sum += column[i];
      }
      agg.mean(t, l) = sum / static_cast<double>(traces.size());
      std::sort(column.begin(), column.end());
      const size_t n = column.size();
      agg.median(t, l) = n % 2 == 1
                             ? column[n / 2]
                             : 0.5 * (column[n / 2 - 1] + column[n / 2]);
    }
  }
  return agg;
}

std::map<std::string, LayerHistogram> group_by_pos(
    std::span<const TopKSummary> summaries,
    std::span<const std::optional<PosTag>> pos_tags, int n_layers) {
  if (summaries.size() != pos_tags.size())
    throw ValidationError("summaries and pos tags must align");
  std::map<std::string, std::vector<TopKSummary>> groups;
  for (size_t i = 0; i < summaries.size(); ++i) {
    if (!pos_tags[i]) continue;
    groups[to_string(*pos_tags[i])].push_back(summaries[i]);
  }
  std::map<std::string, LayerHistogram> result;
  for (const auto& [pos, members] : groups)
    result[pos] = layer_histogram(members, n_layers);
  return result;
}

std::map<int, std::vector<long>> length_stats(
    std::span<const TopKSummary> summaries, std::span<const int> input_lengths,
    int n_layers) {
  if (summaries.size() != input_lengths.size())
    throw ValidationError("summaries and lengths must align");
  std::map<int, std::vector<long>> buckets;
  for (size_t i = 0; i < summaries.size(); ++i) {
    auto& counts = buckets[input_lengths[i]];
    if (counts.empty()) counts.assign(n_layers, 0);
    for (const auto& cell : summaries[i].cells) ++counts[cell.layer];
  }
  return buckets;
}

}  // namespace ctrace
