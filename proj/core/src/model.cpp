#include "ctrace/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

#include "ctrace/errors.hpp"
#include "ctrace/rng.hpp"
#include "kernels.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace ctrace {

const char* to_string(PositionalScheme scheme) {
  return scheme == PositionalScheme::kLearnedAbsolute ? "learned_absolute"
                                                      : "rotary";
}

const char* to_string(StateKind kind) {
  switch (kind) {
    case StateKind::kHidden: return "hidden";
    case StateKind::kMha: return "mha";
    case StateKind::kMlp: return "mlp";
  }
  return "?";
}

std::optional<StateKind> kind_from_string(const std::string& name) {
  if (name == "hidden") return StateKind::kHidden;
  if (name == "mha") return StateKind::kMha;
  if (name == "mlp") return StateKind::kMlp;
  return std::nullopt;
}

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 ||
      vocab_size < 1 || max_context < 1)
    throw ValidationError("model config counts must be >= 1");
  if (d_model % n_heads != 0)
    throw ValidationError("d_model must be divisible by n_heads");
  if (positional_scheme == PositionalScheme::kRotary) {
    if (rotary_dims < 2 || rotary_dims % 2 != 0 || rotary_dims > d_head())
      throw ValidationError("rotary_dims must be even and <= d_head");
  }
  if (layernorm_epsilon <= 0)
    throw ValidationError("layernorm_epsilon must be positive");
}

namespace {

void fill_gaussian(Matrix& m, std::mt19937_64& engine,
                   std::normal_distribution<float>& dist) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(engine);
}

}  // namespace

Parameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  auto engine = make_engine(seed);
  std::normal_distribution<float> dist(
      0.0f, 1.0f / std::sqrt(static_cast<float>(config.d_model)));

  Parameters p;
  p.embedding.resize(config.vocab_size, config.d_model);
  fill_gaussian(p.embedding, engine, dist);
  if (config.positional_scheme == PositionalScheme::kLearnedAbsolute) {
    p.positional.resize(config.max_context, config.d_model);
    fill_gaussian(p.positional, engine, dist);
  }
  p.layers.resize(config.n_layers);
  for (auto& lp : p.layers) {
    lp.wq.resize(config.d_model, config.d_model);
    lp.wk.resize(config.d_model, config.d_model);
    lp.wv.resize(config.d_model, config.d_model);
    lp.wo.resize(config.d_model, config.d_model);
    fill_gaussian(lp.wq, engine, dist);
    fill_gaussian(lp.wk, engine, dist);
    fill_gaussian(lp.wv, engine, dist);
    fill_gaussian(lp.wo, engine, dist);
    lp.w1.resize(config.d_model, config.d_ff);
    fill_gaussian(lp.w1, engine, dist);
    lp.b1 = Vector::Zero(config.d_ff);
    lp.w2.resize(config.d_ff, config.d_model);
    fill_gaussian(lp.w2, engine, dist);
    lp.b2 = Vector::Zero(config.d_model);
    lp.ln_attn_scale = Vector::Ones(config.d_model);
    lp.ln_attn_bias = Vector::Zero(config.d_model);
    lp.ln_mid_scale = Vector::Ones(config.d_model);
    lp.ln_mid_bias = Vector::Zero(config.d_model);
  }
  p.ln_final_scale = Vector::Ones(config.d_model);
  p.ln_final_bias = Vector::Zero(config.d_model);
  if (!config.tied_unembedding) {
    p.unembedding.resize(config.vocab_size, config.d_model);
    fill_gaussian(p.unembedding, engine, dist);
  }
  return p;
}

Parameters make_zero_parameters(const ModelConfig& config) {
  ModelConfig untied = config;
  untied.tied_unembedding = false;
  untied.validate();
  Parameters p;
  p.embedding = Matrix::Zero(config.vocab_size, config.d_model);
  if (config.positional_scheme == PositionalScheme::kLearnedAbsolute)
    p.positional = Matrix::Zero(config.max_context, config.d_model);
  p.layers.resize(config.n_layers);
  for (auto& lp : p.layers) {
    lp.wq = Matrix::Zero(config.d_model, config.d_model);
    lp.wk = Matrix::Zero(config.d_model, config.d_model);
    lp.wv = Matrix::Zero(config.d_model, config.d_model);
    lp.wo = Matrix::Zero(config.d_model, config.d_model);
    lp.w1 = Matrix::Zero(config.d_model, config.d_ff);
    lp.b1 = Vector::Zero(config.d_ff);
    lp.w2 = Matrix::Zero(config.d_ff, config.d_model);
    lp.b2 = Vector::Zero(config.d_model);
    lp.ln_attn_scale = Vector::Zero(config.d_model);
    lp.ln_attn_bias = Vector::Zero(config.d_model);
    lp.ln_mid_scale = Vector::Zero(config.d_model);
    lp.ln_mid_bias = Vector::Zero(config.d_model);
  }
  p.ln_final_scale = Vector::Zero(config.d_model);
  p.ln_final_bias = Vector::Zero(config.d_model);
  p.unembedding = Matrix::Zero(config.vocab_size, config.d_model);
  return p;
}

bool Parameters::all_finite() const {
  auto ok = [](const auto& m) { return m.size() == 0 || m.allFinite(); };
  if (!ok(embedding) || !ok(positional) || !ok(ln_final_scale) ||
      !ok(ln_final_bias) || !ok(unembedding))
    return false;
  for (const auto& lp : layers) {
    if (!ok(lp.wq) || !ok(lp.wk) || !ok(lp.wv) || !ok(lp.wo) || !ok(lp.w1) ||
        !ok(lp.b1) || !ok(lp.w2) || !ok(lp.b2) || !ok(lp.ln_attn_scale) ||
        !ok(lp.ln_attn_bias) || !ok(lp.ln_mid_scale) || !ok(lp.ln_mid_bias))
      return false;
  }
  return true;
}

float ActivationRecord::residual_defect() const {
  float worst = 0.0f;
  for (int l = 0; l < n_layers(); ++l) {
    const Matrix& prev = l == 0 ? input : hidden[l - 1];
    Matrix defect = hidden[l] - prev - mha[l] - mlp[l];
    worst = std::max(worst, defect.cwiseAbs().maxCoeff());
  }
  return worst;
}

Model::Model(ModelConfig config, Parameters params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  if (params_.embedding.rows() != config_.vocab_size ||
      params_.embedding.cols() != config_.d_model ||
      static_cast<int>(params_.layers.size()) != config_.n_layers)
    throw ValidationError("parameter shapes inconsistent with config");
  if (!config_.tied_unembedding && params_.unembedding.rows() == 0)
    throw ValidationError("untied config requires an unembedding matrix");
  if (!params_.all_finite())
    throw ValidationError("parameters contain non-finite entries");
}

Model::Model(const ModelConfig& config)
    : Model(config, init_parameters(config, config.seed)) {}

Matrix Model::embed(std::span<const int> tokens) const {
  const int T = static_cast<int>(tokens.size());
  if (T > config_.max_context)
    throw ValidationError("sequence longer than max_context");
  Matrix out(T, config_.d_model);
  for (int t = 0; t < T; ++t) {
    if (tokens[t] < 0 || tokens[t] >= config_.vocab_size)
      throw InvalidToken("token id " + std::to_string(tokens[t]) +
                         " out of range");
    out.row(t) = params_.embedding.row(tokens[t]);
    if (config_.positional_scheme == PositionalScheme::kLearnedAbsolute)
      out.row(t) += params_.positional.row(t);
  }
  return out;
}

namespace {

void throw_on_nonfinite(const Matrix& m, int layer) {
  if (m.allFinite()) return;
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    if (!m.row(t).allFinite())
      throw NumericalOverflow(layer, static_cast<int>(t));
  throw NumericalOverflow(layer, 0);
}

void validate_patch(const PatchSpec& patch, int T, int L) {
  if (patch.cells.empty()) return;
  if (patch.source == nullptr)
    throw InvalidPatch("patch has cells but no donor record");
  const int donor_tokens = patch.source->n_tokens();
  const int donor_layers = patch.source->n_layers();
  for (const auto& cell : patch.cells) {
    if (cell.token < 0 || cell.layer < 0 || cell.token >= donor_tokens ||
        cell.layer >= donor_layers || cell.token >= T || cell.layer >= L)
      throw InvalidPatch("patch cell (" + std::to_string(cell.token) + ", " +
                         std::to_string(cell.layer) + ") out of bounds");
  }
}

}  // namespace

Matrix Model::forward_patched(const Matrix& input_embeddings,
                              const PatchSpec& patch,
                              ActivationRecord* record) const {
  const int T = static_cast<int>(input_embeddings.rows());
  const int L = config_.n_layers;
  if (input_embeddings.cols() != config_.d_model)
    throw ValidationError("input embedding width != d_model");
  if (T < 1 || T > config_.max_context)
    throw ValidationError("sequence length out of range");
  throw_on_nonfinite(input_embeddings, -1);
  validate_patch(patch, T, L);

  if (record) {
    record->input = input_embeddings;
    record->hidden.assign(L, Matrix());
    record->mha.assign(L, Matrix());
    record->mlp.assign(L, Matrix());
  }

  auto patched_rows = [&](StateKind kind, int layer, Matrix& states) {
    if (patch.kind != kind) return;
    for (const auto& cell : patch.cells) {
      if (cell.layer != layer) continue;
      switch (kind) {
        case StateKind::kHidden:
          states.row(cell.token) = patch.source->hidden[layer].row(cell.token);
          break;
        case StateKind::kMha:
          states.row(cell.token) = patch.source->mha[layer].row(cell.token);
          break;
        case StateKind::kMlp:
          states.row(cell.token) = patch.source->mlp[layer].row(cell.token);
          break;
      }
    }
  };

  Matrix h_prev = input_embeddings;
  for (int l = 0; l < L; ++l) {
    const auto& lp = params_.layers[l];

    Matrix a_in = detail::layernorm(h_prev, lp.ln_attn_scale, lp.ln_attn_bias,
                                    config_.layernorm_epsilon, nullptr);
    Matrix mha_out = detail::attention(a_in, lp, config_, nullptr);
    patched_rows(StateKind::kMha, l, mha_out);
    throw_on_nonfinite(mha_out, l);

    Matrix mid = detail::layernorm(h_prev + mha_out, lp.ln_mid_scale,
                                   lp.ln_mid_bias, config_.layernorm_epsilon,
                                   nullptr);
    Matrix mlp_out = detail::mlp(mid, lp, nullptr);
    patched_rows(StateKind::kMlp, l, mlp_out);
    throw_on_nonfinite(mlp_out, l);

    Matrix h = h_prev + mha_out + mlp_out;
    patched_rows(StateKind::kHidden, l, h);
    throw_on_nonfinite(h, l);

    if (record) {
      record->mha[l] = mha_out;
      record->mlp[l] = mlp_out;
      record->hidden[l] = h;
    }
    h_prev = std::move(h);
  }

  Matrix final_norm =
      detail::layernorm(h_prev, params_.ln_final_scale, params_.ln_final_bias,
                        config_.layernorm_epsilon, nullptr);
  const Matrix& unembed =
      config_.tied_unembedding ? params_.embedding : params_.unembedding;
  Matrix logits = final_norm * unembed.transpose();
  throw_on_nonfinite(logits, L);
  return logits;
}

Matrix Model::forward(const Matrix& input_embeddings,
                      ActivationRecord* record) const {
  return forward_patched(input_embeddings, PatchSpec{}, record);
}

Matrix Model::forward_tokens(std::span<const int> tokens,
                             ActivationRecord* record) const {
  return forward(embed(tokens), record);
}

Eigen::VectorXd next_token_distribution(const Matrix& logits, int position) {
  if (position < 0 || position >= logits.rows())
    throw ValidationError("position out of range");
  Eigen::VectorXd row = logits.row(position).cast<double>();
  double max_logit = row.maxCoeff();
  Eigen::ArrayXd e = (row.array() - max_logit).exp();
  return (e / e.sum()).matrix();
}

int argmax_token(const Matrix& logits, int position) {
  if (position < 0 || position >= logits.rows())
    throw ValidationError("position out of range");
  int best = 0;
  float best_value = logits(position, 0);
  for (Eigen::Index i = 1; i < logits.cols(); ++i) {
    if (logits(position, i) > best_value) {
      best_value = logits(position, i);
      best = static_cast<int>(i);
    }
  }
  return best;
}

// --- checkpoint serialization -------------------------------------------
//
// magic "CTRC1", then little-endian u64 header fields, then row-major f32
// tensors in declaration order.

namespace {

constexpr char kMagic[5] = {'C', 'T', 'R', 'C', '1'};

void write_u64(std::ostream& out, std::uint64_t value) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>(value >> (8 * i));
  out.write(bytes, 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t value = 0;
  for (int i = 0; i < 8; ++i) value |= std::uint64_t(bytes[i]) << (8 * i);
  return value;
}

void write_tensor(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * m.size()));
}

void write_tensor(std::ostream& out, const Vector& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(sizeof(float) * v.size()));
}

void read_tensor(std::istream& in, Matrix& m, Eigen::Index rows,
                 Eigen::Index cols) {
  m.resize(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(float) * m.size()));
}

void read_tensor(std::istream& in, Vector& v, Eigen::Index size) {
  v.resize(size);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(float) * v.size()));
}

}  // namespace

void Model::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);

  out.write(kMagic, sizeof kMagic);
  write_u64(out, static_cast<std::uint64_t>(config_.n_layers));
  write_u64(out, static_cast<std::uint64_t>(config_.n_heads));
  write_u64(out, static_cast<std::uint64_t>(config_.d_model));
  write_u64(out, static_cast<std::uint64_t>(config_.d_ff));
  write_u64(out, static_cast<std::uint64_t>(config_.vocab_size));
  write_u64(out, static_cast<std::uint64_t>(config_.max_context));
  write_u64(out, config_.positional_scheme == PositionalScheme::kRotary ? 1 : 0);
  write_u64(out, static_cast<std::uint64_t>(config_.rotary_dims));
  write_u64(out, std::bit_cast<std::uint64_t>(config_.layernorm_epsilon));
  write_u64(out, config_.seed);
  write_u64(out, config_.tied_unembedding ? 1 : 0);

  write_tensor(out, params_.embedding);
  if (config_.positional_scheme == PositionalScheme::kLearnedAbsolute)
    write_tensor(out, params_.positional);
  for (const auto& lp : params_.layers) {
    write_tensor(out, lp.wq);
    write_tensor(out, lp.wk);
    write_tensor(out, lp.wv);
    write_tensor(out, lp.wo);
    write_tensor(out, lp.w1);
    write_tensor(out, lp.b1);
    write_tensor(out, lp.w2);
    write_tensor(out, lp.b2);
    write_tensor(out, lp.ln_attn_scale);
    write_tensor(out, lp.ln_attn_bias);
    write_tensor(out, lp.ln_mid_scale);
    write_tensor(out, lp.ln_mid_bias);
  }
  write_tensor(out, params_.ln_final_scale);
  write_tensor(out, params_.ln_final_bias);
  if (!config_.tied_unembedding) write_tensor(out, params_.unembedding);

  if (!out) throw IoError("short write to checkpoint: " + path);
}

Model Model::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);

  char magic[5];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw IoError("not a CTRC1 checkpoint: " + path);

  ModelConfig config;
  config.n_layers = static_cast<int>(read_u64(in));
  config.n_heads = static_cast<int>(read_u64(in));
  config.d_model = static_cast<int>(read_u64(in));
  config.d_ff = static_cast<int>(read_u64(in));
  config.vocab_size = static_cast<int>(read_u64(in));
  config.max_context = static_cast<int>(read_u64(in));
  config.positional_scheme = read_u64(in) == 1 ? PositionalScheme::kRotary
                                               : PositionalScheme::kLearnedAbsolute;
  config.rotary_dims = static_cast<int>(read_u64(in));
  config.layernorm_epsilon = std::bit_cast<double>(read_u64(in));
  config.seed = read_u64(in);
  config.tied_unembedding = read_u64(in) == 1;
  if (!in) throw IoError("truncated checkpoint header: " + path);
  config.validate();

  Parameters p;
  read_tensor(in, p.embedding, config.vocab_size, config.d_model);
  if (config.positional_scheme == PositionalScheme::kLearnedAbsolute)
    read_tensor(in, p.positional, config.max_context, config.d_model);
  p.layers.resize(config.n_layers);
  for (auto& lp : p.layers) {
    read_tensor(in, lp.wq, config.d_model, config.d_model);
    read_tensor(in, lp.wk, config.d_model, config.d_model);
    read_tensor(in, lp.wv, config.d_model, config.d_model);
    read_tensor(in, lp.wo, config.d_model, config.d_model);
    read_tensor(in, lp.w1, config.d_model, config.d_ff);
    read_tensor(in, lp.b1, config.d_ff);
    read_tensor(in, lp.w2, config.d_ff, config.d_model);
    read_tensor(in, lp.b2, config.d_model);
    read_tensor(in, lp.ln_attn_scale, config.d_model);
    read_tensor(in, lp.ln_attn_bias, config.d_model);
    read_tensor(in, lp.ln_mid_scale, config.d_model);
    read_tensor(in, lp.ln_mid_bias, config.d_model);
  }
  read_tensor(in, p.ln_final_scale, config.d_model);
  read_tensor(in, p.ln_final_bias, config.d_model);
  if (!config.tied_unembedding)
    read_tensor(in, p.unembedding, config.vocab_size, config.d_model);
  if (!in) throw IoError("truncated checkpoint tensors: " + path);

  return Model(config, std::move(p));
}

}  // namespace ctrace
