#include "ctrace/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "ctrace/errors.hpp"
#include "ctrace/overlay.hpp"
#include "ctrace/rng.hpp"
#include "json.hpp"

namespace ctrace {

void TraceConfig::validate() const {
  if (window < 1) throw ValidationError("trace window must be >= 1");
  if (noise_samples < 1) throw ValidationError("noise_samples must be >= 1");
  if (noise_multiplier < 0)
    throw ValidationError("noise_multiplier must be >= 0");
}

double embedding_std(const Parameters& params) {
  const auto& e = params.embedding;
  if (e.size() == 0) throw ValidationError("empty embedding matrix");
  double mean = 0.0;
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) mean += e(r, c);
  mean /= static_cast<double>(e.size());
  double var = 0.0;
  for (Eigen::Index r = 0; r < e.rows(); ++r)
    for (Eigen::Index c = 0; c < e.cols(); ++c) {
      double d = e(r, c) - mean;
      var += d * d;
    }
  var /= static_cast<double>(e.size());
  double sigma = std::sqrt(var);
  if (sigma <= 1e-12 * (1.0 + std::abs(mean)))
    throw ZeroVarianceEmbeddings("embedding matrix has zero variance");
  return sigma;
}

Matrix corrupt(const Matrix& embeddings, std::span<const int> positions,
               int n_definiens, double multiplier, double sigma,
               std::uint64_t seed) {
  if (n_definiens < 0 || n_definiens > embeddings.rows())
    throw InvalidCorruptionTarget("definiens range outside the input");
  std::set<int> selected;
  for (int p : positions) {
    if (p < 0 || p >= n_definiens)
      throw InvalidCorruptionTarget("corruption position " + std::to_string(p) +
                                    " outside the definiens");
    selected.insert(p);
  }

  Matrix out = embeddings;
  const double stddev = multiplier * sigma;
  if (stddev == 0.0 || selected.empty()) return out;

  auto engine = make_engine(seed);
  std::normal_distribution<double> noise(0.0, stddev);
  for (int p : selected)
    for (Eigen::Index d = 0; d < out.cols(); ++d)
      out(p, d) += static_cast<float>(noise(engine));
  return out;
}

std::pair<int, int> window_layers(int layer, int window, int n_layers) {
  if (layer < 0 || layer >= n_layers)
    throw ValidationError("layer index out of range");
  if (window < 1) throw ValidationError("window must be >= 1");
  int lo = std::max(0, layer - window / 2);
  int hi = std::min(n_layers - 1, layer + (window + 1) / 2 - 1);
  return {lo, hi};
}

double normalize_score(const ScoreTriple& triple) {
  double gap = triple.p_clean - triple.p_corrupted;
  if (!(gap > kDegeneracyThreshold))
    throw DegenerateTrace("corruption did not damage the prediction (gap " +
                          std::to_string(gap) + ")");
  double score = (triple.p_restored - triple.p_corrupted) / gap;
  return std::clamp(score, 0.0, 1.0);
}

TraceResult trace(const Model& model, const ReverseDictionarySample& sample,
                  const PromptTemplate& tmpl, const Vocab& vocab,
                  const TraceConfig& config) {
  config.validate();
  const auto input = apply_prompt(sample, tmpl, vocab);
  const int T = static_cast<int>(input.tokens.size());
  const int L = model.config().n_layers;
  const int target = sample.definiendum_id;

  // clean run
  Matrix x0 = model.embed(input.tokens);
  ActivationRecord clean;
  Matrix clean_logits = model.forward(x0, &clean);
  if (argmax_token(clean_logits, T - 1) != target)
    throw NotPredicted(sample.sample_id + ": model does not predict the definiendum");
  const double p_clean = next_token_distribution(clean_logits, T - 1)(target);

  // corruption positions default to the whole definiens
  std::vector<int> positions;
  if (config.corrupt_positions) {
    positions = *config.corrupt_positions;
  } else {
    positions.resize(input.boundary);
    std::iota(positions.begin(), positions.end(), 0);
  }

  // the same S draws are shared by the corrupted baseline and every cell
  const double sigma = embedding_std(model.params());
  std::vector<Matrix> corrupted;
  corrupted.reserve(config.noise_samples);
  double p_corrupted = 0.0;
  for (int s = 0; s < config.noise_samples; ++s) {
    corrupted.push_back(corrupt(x0, positions, input.boundary,
                                config.noise_multiplier, sigma,
                                derive_seed(config.seed, s)));
    Matrix logits = model.forward(corrupted.back());
    p_corrupted += next_token_distribution(logits, T - 1)(target);
  }
  p_corrupted /= config.noise_samples;

  ScoreTriple base{p_clean, p_corrupted, 0.0};
  if (!(p_clean - p_corrupted > kDegeneracyThreshold))
    throw DegenerateTrace(sample.sample_id +
                          ": corruption did not damage the prediction");

  TraceResult result;
  result.sample_id = sample.sample_id;
  result.kind = config.kind;
  result.normalized.resize(T, L);
  result.restored.resize(T, L);
  result.p_clean = p_clean;
  result.p_corrupted = p_corrupted;
  result.config = config;
  result.boundary = input.boundary;
  result.definiendum_pos = sample.definiendum_pos;

  for (int t = 0; t < T; ++t) {
    for (int l = 0; l < L; ++l) {
      auto [lo, hi] = window_layers(l, config.window, L);
      PatchSpec patch;
      patch.kind = config.kind;
      patch.source = &clean;
      for (int lw = lo; lw <= hi; ++lw) patch.cells.push_back({t, lw});

      double p_restored = 0.0;
      for (const Matrix& xc : corrupted) {
        Matrix logits = model.forward_patched(xc, patch);
        p_restored += next_token_distribution(logits, T - 1)(target);
      }
      p_restored /= config.noise_samples;

      base.p_restored = p_restored;
      result.restored(t, l) = p_restored;
      result.normalized(t, l) = normalize_score(base);
    }
  }

  const std::set<int> corrupted_set(positions.begin(), positions.end());
  auto overlay = build_overlay(sample, T);
  result.tokens.resize(T);
  for (int t = 0; t < T; ++t) {
    result.tokens[t].surface = vocab.surface(input.tokens[t]);
    result.tokens[t].corrupted = corrupted_set.count(t) > 0;
    result.tokens[t].segment = to_string(overlay.segments[t]);
    result.tokens[t].dsr = overlay.dsr_name(t);
  }
  return result;
}

namespace {

// Average ranks (1-based); ties share the mean of their rank run.
std::vector<double> average_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    double rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0)
    throw UndefinedCorrelation("constant matrix has no rank ordering");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> flatten_padded(const Eigen::MatrixXd& m, int rows) {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(rows) * m.cols());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < m.cols(); ++c)
      flat.push_back(r < m.rows() ? m(r, c) : 0.0);
  return flat;
}

}  // namespace

double compare_traces(const TraceResult& a, const TraceResult& b) {
  if (a.kind != b.kind)
    throw KindMismatch("cannot compare " + std::string(to_string(a.kind)) +
                       " against " + to_string(b.kind));
  if (a.n_layers() != b.n_layers())
    throw ValidationError("traces have different layer counts");
  const int rows = std::max(a.n_tokens(), b.n_tokens());
  auto flat_a = flatten_padded(a.normalized, rows);
  auto flat_b = flatten_padded(b.normalized, rows);
  return pearson(average_ranks(flat_a), average_ranks(flat_b));
}

// --- file pair I/O --------------------------------------------------------

void write_matrix_csv(const Eigen::MatrixXd& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write csv: " + path);
  char buffer[64];
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      std::snprintf(buffer, sizeof buffer, "%.9g", m(r, c));
      if (c) out << ',';
      out << buffer;
    }
    out << '\n';
  }
}

Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read csv: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      double value = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str())
        throw ParseError("bad csv value: " + cell, line_no);
      row.push_back(value);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError("ragged csv row", line_no);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("empty csv", 0);
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  return m;
}

namespace {

nlohmann::json trace_config_json(const TraceConfig& c) {
  nlohmann::json j{
      {"kind", to_string(c.kind)},
      {"window", c.window},
      {"noise_multiplier", c.noise_multiplier},
      {"noise_samples", c.noise_samples},
      {"seed", c.seed},
  };
  if (c.corrupt_positions)
    j["corrupt_positions"] = *c.corrupt_positions;
  else
    j["corrupt_positions"] = "all_definiens";
  return j;
}

TraceConfig trace_config_from_json(const nlohmann::json& j) {
  TraceConfig c;
  auto kind = kind_from_string(j.at("kind").get<std::string>());
  if (!kind) throw ParseError("unknown trace kind", 0);
  c.kind = *kind;
  c.window = j.at("window").get<int>();
  c.noise_multiplier = j.at("noise_multiplier").get<double>();
  c.noise_samples = j.at("noise_samples").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("corrupt_positions") && j["corrupt_positions"].is_array())
    c.corrupt_positions = j["corrupt_positions"].get<std::vector<int>>();
  return c;
}

}  // namespace

void write_trace(const TraceResult& result, const std::string& stem) {
  write_matrix_csv(result.normalized, stem + ".csv");

  nlohmann::json meta;
  meta["sample_id"] = result.sample_id;
  meta["kind"] = to_string(result.kind);
  meta["p_clean"] = result.p_clean;
  meta["p_corrupted"] = result.p_corrupted;
  meta["config"] = trace_config_json(result.config);
  meta["boundary"] = result.boundary;
  if (result.definiendum_pos)
    meta["pos"] = to_string(*result.definiendum_pos);
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& token : result.tokens)
    tokens.push_back({{"surface", token.surface},
                      {"corrupted", token.corrupted},
                      {"segment", token.segment},
                      {"dsr", token.dsr}});
  meta["tokens"] = tokens;

  std::ofstream out(stem + ".json", std::ios::binary);
  if (!out) throw IoError("cannot write trace metadata: " + stem + ".json");
  out << meta.dump(2) << '\n';
}

TraceResult read_trace(const std::string& stem) {
  std::ifstream in(stem + ".json", std::ios::binary);
  if (!in) throw IoError("cannot read trace metadata: " + stem + ".json");
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid trace metadata: ") + e.what(), 0);
  }

  TraceResult result;
  try {
    result.sample_id = meta.at("sample_id").get<std::string>();
    auto kind = kind_from_string(meta.at("kind").get<std::string>());
    if (!kind) throw ParseError("unknown trace kind", 0);
    result.kind = *kind;
    result.p_clean = meta.at("p_clean").get<double>();
    result.p_corrupted = meta.at("p_corrupted").get<double>();
    result.config = trace_config_from_json(meta.at("config"));
    result.boundary = meta.at("boundary").get<int>();
    if (meta.contains("pos")) {
      auto pos = pos_from_string(meta.at("pos").get<std::string>());
      if (!pos) throw ParseError("unknown pos tag", 0);
      result.definiendum_pos = *pos;
    }
    for (const auto& token : meta.at("tokens"))
      result.tokens.push_back({token.at("surface").get<std::string>(),
                               token.at("corrupted").get<bool>(),
                               token.at("segment").get<std::string>(),
                               token.at("dsr").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("trace metadata schema: ") + e.what(), 0);
  }

  result.normalized = read_matrix_csv(stem + ".csv");
  if (result.normalized.rows() != static_cast<Eigen::Index>(result.tokens.size()))
    throw ValidationError("trace csv rows do not match token list",
                          result.sample_id);
  return result;
}

}  // namespace ctrace
