#ifndef CTRACE_MODEL_HPP_
#define CTRACE_MODEL_HPP_

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ctrace {

// Row-major so tensors serialize to the checkpoint format without copies.
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::RowVectorXf;

enum class PositionalScheme { kLearnedAbsolute, kRotary };

const char* to_string(PositionalScheme scheme);

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;
  int max_context = 64;
  PositionalScheme positional_scheme = PositionalScheme::kLearnedAbsolute;
  int rotary_dims = 0;  // used by the rotary scheme; even, <= d_head
  double layernorm_epsilon = 1e-5;
  std::uint64_t seed = 0;
  bool tied_unembedding = true;

  int d_head() const { return d_model / n_heads; }

  // Throws ValidationError when a structural invariant fails
  // (d_model % n_heads, rotary_dims bounds, nonpositive counts).
  void validate() const;
};

struct LayerParameters {
  Matrix wq, wk, wv, wo;  // d_model x d_model
  Matrix w1;              // d_model x d_ff
  Vector b1;              // d_ff
  Matrix w2;              // d_ff x d_model
  Vector b2;              // d_model
  Vector ln_attn_scale, ln_attn_bias;  // pre-attention layernorm
  Vector ln_mid_scale, ln_mid_bias;    // post-attention layernorm (Eq. 4 slot)
};

struct Parameters {
  Matrix embedding;   // vocab_size x d_model
  Matrix positional;  // max_context x d_model (learned_absolute only)
  std::vector<LayerParameters> layers;
  Vector ln_final_scale, ln_final_bias;
  Matrix unembedding;  // vocab_size x d_model; empty when tied to embedding

  bool all_finite() const;
};

// Gaussian weights with standard deviation 1/sqrt(d_model), zero biases,
// unit layernorm scales. Deterministic per seed.
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

// All tensors zero with an untied zero unembedding; uniform predictor.
Parameters make_zero_parameters(const ModelConfig& config);

// Per-layer, per-token states of one recorded forward pass:
//   hidden[l] = hidden[l-1] + mha[l] + mlp[l]   (hidden[-1] == input)
// Each matrix is T x d_model.
struct ActivationRecord {
  Matrix input;  // embedding-layer output, the h^{-1} row
  std::vector<Matrix> hidden;
  std::vector<Matrix> mha;
  std::vector<Matrix> mlp;

  int n_layers() const { return static_cast<int>(hidden.size()); }
  int n_tokens() const { return static_cast<int>(input.rows()); }

  // Max absolute residual defect over all (layer, token) cells.
  float residual_defect() const;
};

enum class StateKind { kHidden, kMha, kMlp };

const char* to_string(StateKind kind);
std::optional<StateKind> kind_from_string(const std::string& name);

struct PatchCell {
  int token;
  int layer;
};

// Restores kind-states at the given cells from a donor record:
//   hidden: h[l][t] is replaced after layer l, before layer l+1 consumes it
//   mha/mlp: the sublayer output at (t, l) is replaced where it is produced,
//            so both the residual sum and any downstream reader see it
struct PatchSpec {
  StateKind kind = StateKind::kHidden;
  std::vector<PatchCell> cells;
  const ActivationRecord* source = nullptr;
};

class Model {
 public:
  Model(ModelConfig config, Parameters params);

  // Initializes parameters from config.seed.
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Parameters& params() const { return params_; }
  Parameters& mutable_params() { return params_; }

  // Token embeddings ready for forward(): learned_absolute adds the
  // positional rows; rotary returns raw embedding rows (rotation happens
  // inside attention). Throws InvalidToken on out-of-range ids.
  Matrix embed(std::span<const int> tokens) const;

  // Causal forward pass over pre-built input embeddings (T x d_model).
  // Returns logits (T x vocab_size); fills `record` when non-null.
  // Throws NumericalOverflow with the first offending (layer, token).
  Matrix forward(const Matrix& input_embeddings,
                 ActivationRecord* record = nullptr) const;

  // Forward pass with state restoration. An empty cell set reproduces
  // forward() exactly. Throws InvalidPatch on out-of-bounds cells.
  Matrix forward_patched(const Matrix& input_embeddings, const PatchSpec& patch,
                         ActivationRecord* record = nullptr) const;

  // Logits for a token sequence (embed + forward).
  Matrix forward_tokens(std::span<const int> tokens,
                        ActivationRecord* record = nullptr) const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  ModelConfig config_;
  Parameters params_;
};

// Numerically stable softmax of logits row `position`; sums to 1 within
// 1e-9. Computed in double precision.
Eigen::VectorXd next_token_distribution(const Matrix& logits, int position);

int argmax_token(const Matrix& logits, int position);

}  // namespace ctrace

#endif  // CTRACE_MODEL_HPP_
