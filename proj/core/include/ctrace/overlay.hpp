#ifndef CTRACE_OVERLAY_HPP_
#define CTRACE_OVERLAY_HPP_

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctrace/data.hpp"
#include "ctrace/trace.hpp"

namespace ctrace {

enum class Segment { kEarly, kMid, kPrompt };

const char* to_string(Segment segment);

// Token-position abstraction categories for one prompted input.
struct OverlayMap {
  std::vector<Segment> segments;                    // per position
  std::vector<std::optional<DsrLabel>> dsr;         // nullopt = unlabeled
  std::optional<PosTag> definiendum_pos;

  int n_tokens() const { return static_cast<int>(segments.size()); }
  // "unlabeled", a role name, or "prompt".
  std::string dsr_name(int position) const;
};

// early = [0, ceil(N/2)), mid = [ceil(N/2), N), prompt = [N, T).
std::vector<Segment> segment_positions(int definiens_len, int total_len);

// Definiens positions inherit their covering span's label; prompt positions
// get the derived prompt label.
std::vector<std::optional<DsrLabel>> dsr_for_positions(
    const ReverseDictionarySample& sample, int total_len);

OverlayMap build_overlay(const ReverseDictionarySample& sample, int total_len);

// Rebuilds the overlay of a loaded trace from its token annotations.
OverlayMap overlay_from_trace(const TraceResult& trace);

// Share of the top-k trace cells per DSR label, in percent; keys are role
// names plus "prompt" and "unlabeled". Values sum to 100.
std::map<std::string, double> label_share(const TraceResult& trace,
                                          const OverlayMap& overlay, int k);

// Same computation keyed by position segment (early / mid / prompt).
std::map<std::string, double> segment_share(const TraceResult& trace,
                                            const OverlayMap& overlay, int k);

}  // namespace ctrace

#endif  // CTRACE_OVERLAY_HPP_
