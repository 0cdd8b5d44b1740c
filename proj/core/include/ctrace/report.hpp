#ifndef CTRACE_REPORT_HPP_
#define CTRACE_REPORT_HPP_

#include <string>
#include <vector>

#include "ctrace/trace.hpp"

namespace ctrace {

// Heatmap following the tracing figures: rows = input tokens top to bottom
// (corrupted ones starred), columns = layers 0..L-1 left to right, cell fill
// intensity linear in the normalized value, plus a value colorbar.
std::string render_heatmap_svg(const TraceResult& trace);

struct ReportOptions {
  std::vector<int> k_values = {10, 50};
  bool write_svgs = true;
};

struct ReportOutcome {
  int n_traces = 0;
  std::vector<std::string> skipped;  // unparseable trace stems
};

// Loads every trace pair under `trace_dir`, then writes per-trace SVGs,
// per-kind aggregate mean/median CSVs and summary.json into `out_dir`.
// Throws IoError when the directory holds no readable trace.
ReportOutcome write_report(const std::string& trace_dir,
                           const std::string& out_dir,
                           const ReportOptions& options);

}  // namespace ctrace

#endif  // CTRACE_REPORT_HPP_
