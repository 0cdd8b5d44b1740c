#include "ctrace/overlay.hpp"

#include <functional>

#include "ctrace/analytics.hpp"
#include "ctrace/errors.hpp"

namespace ctrace {

const char* to_string(Segment segment) {
  switch (segment) {
    case Segment::kEarly: return "early";
    case Segment::kMid: return "mid";
    case Segment::kPrompt: return "prompt";
  }
  return "?";
}

std::string OverlayMap::dsr_name(int position) const {
  const auto& label = dsr.at(position);
  return label ? to_string(*label) : "unlabeled";
}

std::vector<Segment> segment_positions(int definiens_len, int total_len) {
  if (definiens_len < 0 || definiens_len > total_len)
    throw ValidationError("definiens length exceeds the input length");
  std::vector<Segment> segments(total_len);
  const int half = (definiens_len + 1) / 2;  // odd lengths round to early
  for (int p = 0; p < total_len; ++p) {
    if (p < half)
      segments[p] = Segment::kEarly;
    else if (p < definiens_len)
      segments[p] = Segment::kMid;
    else
      segments[p] = Segment::kPrompt;
  }
  return segments;
}

std::vector<std::optional<DsrLabel>> dsr_for_positions(
    const ReverseDictionarySample& sample, int total_len) {
  const int n = sample.definiens_len();
  if (n > total_len)
    throw ValidationError("definiens longer than the input", sample.sample_id);
  std::vector<std::optional<DsrLabel>> labels(total_len);
  for (const auto& span : sample.dsr_spans)
    for (int p = span.start; p < span.end && p < n; ++p)
      labels[p] = span.label;
  for (int p = n; p < total_len; ++p) labels[p] = DsrLabel::kPrompt;
  return labels;
}

OverlayMap build_overlay(const ReverseDictionarySample& sample, int total_len) {
  OverlayMap overlay;
  overlay.segments = segment_positions(sample.definiens_len(), total_len);
  overlay.dsr = dsr_for_positions(sample, total_len);
  overlay.definiendum_pos = sample.definiendum_pos;
  return overlay;
}

OverlayMap overlay_from_trace(const TraceResult& trace) {
  OverlayMap overlay;
  overlay.definiendum_pos = trace.definiendum_pos;
  for (const auto& token : trace.tokens) {
    if (token.segment == "early")
      overlay.segments.push_back(Segment::kEarly);
    else if (token.segment == "mid")
      overlay.segments.push_back(Segment::kMid);
    else if (token.segment == "prompt")
      overlay.segments.push_back(Segment::kPrompt);
    else
      throw ValidationError("unknown segment: " + token.segment,
                            trace.sample_id);
    if (token.dsr == "unlabeled") {
      overlay.dsr.push_back(std::nullopt);
    } else {
      auto label = dsr_from_string(token.dsr);
      if (!label)
        throw ValidationError("unknown dsr label: " + token.dsr,
                              trace.sample_id);
      overlay.dsr.push_back(*label);
    }
  }
  return overlay;
}

namespace {

std::map<std::string, double> shares_over_top_cells(
    const TraceResult& trace, int k,
    const std::function<std::string(int token)>& name_of) {
  if (k < 1) throw ValidationError("k must be >= 1");
  TopKSummary summary = top_k(trace.normalized, k);
  std::map<std::string, long> counts;
  for (const auto& cell : summary.cells) ++counts[name_of(cell.token)];
  std::map<std::string, double> shares;
  const double denom = static_cast<double>(summary.cells.size());
  for (const auto& [name, count] : counts)
    shares[name] = 100.0 * static_cast<double>(count) / denom;
  return shares;
}

}  // namespace

std::map<std::string, double> label_share(const TraceResult& trace,
                                          const OverlayMap& overlay, int k) {
  if (overlay.n_tokens() != trace.n_tokens())
    throw ValidationError("overlay does not match the trace token count");
  return shares_over_top_cells(
      trace, k, [&](int token) { return overlay.dsr_name(token); });
}

std::map<std::string, double> segment_share(const TraceResult& trace,
                                            const OverlayMap& overlay, int k) {
  if (overlay.n_tokens() != trace.n_tokens())
    throw ValidationError("overlay does not match the trace token count");
  return shares_over_top_cells(trace, k, [&](int token) {
    return std::string(to_string(overlay.segments[token]));
  });
}

}  // namespace ctrace
