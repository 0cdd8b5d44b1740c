#include "ctrace/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctrace/analytics.hpp"
#include "ctrace/errors.hpp"
#include "ctrace/overlay.hpp"
#include "json.hpp"

namespace ctrace {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string xml_escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

// White at 0 to deep blue at 1, linear per channel.
std::string cell_color(double value) {
  double v = std::clamp(value, 0.0, 1.0);
  int r = static_cast<int>(std::lround(255.0 + v * (8.0 - 255.0)));
  int g = static_cast<int>(std::lround(255.0 + v * (48.0 - 255.0)));
  int b = static_cast<int>(std::lround(255.0 + v * (107.0 - 255.0)));
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "rgb(%d,%d,%d)", r, g, b);
  return buffer;
}

std::string format_value(double v, const char* fmt = "%.3f") {
  char buffer[48];
  std::snprintf(buffer, sizeof buffer, fmt, v);
  return buffer;
}

}  // namespace

std::string render_heatmap_svg(const TraceResult& trace) {
  const int T = trace.n_tokens();
  const int L = trace.n_layers();
  const int cell = 22;
  const int left = 150;
  const int top = 44;
  const int bar_gap = 24;
  const int bar_w = 18;
  const int width = left + L * cell + bar_gap + bar_w + 64;
  const int height = std::max(top + T * cell + 64, top + 160);

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" font-family=\"monospace\" font-size=\"12\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left << "\" y=\"20\">" << xml_escape(trace.sample_id)
      << " [" << to_string(trace.kind) << "] p_clean="
      << format_value(trace.p_clean) << " p_corrupted="
      << format_value(trace.p_corrupted) << "</text>\n";

  // grid; rows are input tokens top to bottom, columns layers 0..L-1
  for (int t = 0; t < T; ++t) {
    for (int l = 0; l < L; ++l) {
      int x = left + l * cell;
      int y = top + t * cell;
      svg << "<rect class=\"cell\" x=\"" << x << "\" y=\"" << y << "\" width=\""
          << cell - 1 << "\" height=\"" << cell - 1 << "\" fill=\""
          << cell_color(trace.normalized(t, l)) << "\"><title>t=" << t
          << " l=" << l << " v=" << format_value(trace.normalized(t, l), "%.6f")
          << "</title></rect>\n";
    }
  }

  for (int t = 0; t < T; ++t) {
    std::string label = trace.tokens[t].surface;
    if (trace.tokens[t].corrupted) label += "*";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top + t * cell + 15
        << "\" text-anchor=\"end\">" << xml_escape(label) << "</text>\n";
  }
  for (int l = 0; l < L; ++l) {
    svg << "<text x=\"" << left + l * cell + cell / 2 << "\" y=\""
        << top + T * cell + 16 << "\" text-anchor=\"middle\">" << l
        << "</text>\n";
  }
  svg << "<text x=\"" << left + (L * cell) / 2 << "\" y=\""
      << top + T * cell + 36 << "\" text-anchor=\"middle\">layer</text>\n";

  // colorbar, 1.0 at the top
  const int bar_x = left + L * cell + bar_gap;
  const int bar_h = std::max(T * cell, 96);
  const int steps = 32;
  for (int s = 0; s < steps; ++s) {
    double v = 1.0 - static_cast<double>(s) / (steps - 1);
    int y = top + (s * bar_h) / steps;
    int h = (((s + 1) * bar_h) / steps) - (s * bar_h) / steps;
    svg << "<rect x=\"" << bar_x << "\" y=\"" << y << "\" width=\"" << bar_w
        << "\" height=\"" << h << "\" fill=\"" << cell_color(v) << "\"/>\n";
  }
  svg << "<text x=\"" << bar_x + bar_w + 6 << "\" y=\"" << top + 10
      << "\">1.0</text>\n";
  svg << "<text x=\"" << bar_x + bar_w + 6 << "\" y=\"" << top + bar_h / 2 + 5
      << "\">0.5</text>\n";
  svg << "<text x=\"" << bar_x + bar_w + 6 << "\" y=\"" << top + bar_h
      << "\">0.0</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

namespace {

json histogram_json(const LayerHistogram& hist) {
  return {{"counts", hist.counts}, {"smoothed", hist.smoothed}};
}

json shares_json(const std::map<std::string, double>& shares) {
  json obj = json::object();
  for (const auto& [name, pct] : shares) obj[name] = pct;
  return obj;
}

}  // namespace

ReportOutcome write_report(const std::string& trace_dir,
                           const std::string& out_dir,
                           const ReportOptions& options) {
  for (int k : options.k_values)
    if (k < 1) throw ValidationError("k values must be >= 1");

  std::vector<std::string> stems;
  {
    std::error_code ec;
    fs::directory_iterator it(trace_dir, ec);
    if (ec) throw IoError("cannot open trace dir: " + trace_dir);
    for (const auto& entry : it) {
      if (entry.path().extension() == ".json" &&
          fs::exists(entry.path().parent_path() /
                     (entry.path().stem().string() + ".csv")))
        stems.push_back((entry.path().parent_path() / entry.path().stem())
                            .string());
    }
  }
  std::sort(stems.begin(), stems.end());

  ReportOutcome outcome;
  std::vector<TraceResult> traces;
  for (const auto& stem : stems) {
    try {
      traces.push_back(read_trace(stem));
    } catch (const Error&) {
      outcome.skipped.push_back(fs::path(stem).filename().string());
    }
  }
  if (traces.empty()) throw IoError("no traces found in " + trace_dir);
  outcome.n_traces = static_cast<int>(traces.size());

  fs::create_directories(out_dir);

  if (options.write_svgs) {
    for (const auto& trace : traces) {
      std::string name = trace.sample_id + "_" + to_string(trace.kind) + ".svg";
      std::ofstream out(fs::path(out_dir) / name, std::ios::binary);
      if (!out) throw IoError("cannot write svg: " + name);
      out << render_heatmap_svg(trace);
    }
  }

  json summary;
  summary["k_values"] = options.k_values;
  summary["n_traces"] = outcome.n_traces;
  summary["skipped"] = outcome.skipped;

  json kinds = json::object();
  for (StateKind kind : {StateKind::kHidden, StateKind::kMha, StateKind::kMlp}) {
    std::vector<TraceResult> group;
    for (const auto& trace : traces)
      if (trace.kind == kind) group.push_back(trace);
    if (group.empty()) continue;

    const int n_layers = group.front().n_layers();
    json kind_json;
    kind_json["n_traces"] = static_cast<int>(group.size());

    json per_k = json::object();
    for (int k : options.k_values) {
      std::vector<TopKSummary> summaries;
      std::vector<std::optional<PosTag>> pos_tags;
      std::vector<int> lengths;
      std::map<std::string, double> dsr_pool, segment_pool;
      long pooled_cells = 0;
      for (const auto& trace : group) {
        TopKSummary s = top_k(trace.normalized, k);
        auto overlay = overlay_from_trace(trace);
        s.dsr_shares = label_share(trace, overlay, k);
        s.segment_shares = segment_share(trace, overlay, k);
        // pool cell counts across traces for corpus-level shares
        const double cells = static_cast<double>(s.cells.size());
        for (const auto& [name, pct] : s.dsr_shares)
          dsr_pool[name] += pct * cells / 100.0;
        for (const auto& [name, pct] : s.segment_shares)
          segment_pool[name] += pct * cells / 100.0;
        pooled_cells += static_cast<long>(s.cells.size());
        pos_tags.push_back(trace.definiendum_pos);
        lengths.push_back(trace.n_tokens());
        summaries.push_back(std::move(s));
      }
      for (auto& [name, count] : dsr_pool)
        count = 100.0 * count / static_cast<double>(pooled_cells);
      for (auto& [name, count] : segment_pool)
        count = 100.0 * count / static_cast<double>(pooled_cells);

      json entry;
      entry["layer_histogram"] = histogram_json(layer_histogram(summaries, n_layers));
      entry["dsr_shares"] = shares_json(dsr_pool);
      entry["segment_shares"] = shares_json(segment_pool);

      json pos_json = json::object();
      for (const auto& [pos, hist] : group_by_pos(summaries, pos_tags, n_layers))
        pos_json[pos] = histogram_json(hist);
      entry["pos_groups"] = pos_json;

      json len_json = json::object();
      for (const auto& [len, counts] : length_stats(summaries, lengths, n_layers))
        len_json[std::to_string(len)] = counts;
      entry["length_stats"] = len_json;

      per_k[std::to_string(k)] = entry;
    }
    kind_json["per_k"] = per_k;

    // zero-padded aggregates over the dominant length bucket
    auto bucket = select_length_bucket(group, 0.8);
    std::vector<TraceResult> selected;
    for (int idx : bucket.selected) selected.push_back(group[idx]);
    AggregateTrace agg = aggregate_traces(selected);
    std::string mean_name = std::string(to_string(kind)) + "_mean.csv";
    std::string median_name = std::string(to_string(kind)) + "_median.csv";
    write_matrix_csv(agg.mean, (fs::path(out_dir) / mean_name).string());
    write_matrix_csv(agg.median, (fs::path(out_dir) / median_name).string());
    kind_json["aggregate"] = {
        {"bucket", {bucket.min_len, bucket.max_len}},
        {"n_selected", static_cast<int>(bucket.selected.size())},
        {"mean_csv", mean_name},
        {"median_csv", median_name},
    };

    kinds[to_string(kind)] = kind_json;
  }
  summary["kinds"] = kinds;

  std::ofstream out(fs::path(out_dir) / "summary.json", std::ios::binary);
  if (!out) throw IoError("cannot write summary.json");
  out << summary.dump(2) << '\n';
  return outcome;
}

}  // namespace ctrace
