#include "ctrace/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "ctrace/errors.hpp"
#include "ctrace/rng.hpp"
#include "json.hpp"
#include "kernels.hpp"

namespace ctrace {

Split split(std::span<const ReverseDictionarySample> corpus, double fraction,
            std::uint64_t seed) {
  if (corpus.empty()) throw ValidationError("cannot split an empty corpus");
  if (fraction <= 0.0 || fraction >= 1.0)
    throw ValidationError("split fraction must lie in (0, 1)");

  std::vector<int> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  auto engine = make_engine(seed);
  std::shuffle(order.begin(), order.end(), engine);

  auto n_train = static_cast<size_t>(
      std::llround(fraction * static_cast<double>(corpus.size())));
  n_train = std::min(n_train, corpus.size());

  Split result;
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (i < n_train)
      result.train.push_back(corpus[order[i]]);
    else
      result.test.push_back(corpus[order[i]]);
  }
  return result;
}

namespace {

// Per-layer forward state kept for backprop.
struct LayerCache {
  Matrix h_prev;
  detail::LnCache ln_attn;
  Matrix a_in;
  detail::AttnCache attn;
  Matrix mha;
  detail::LnCache ln_mid;
  Matrix mid;
  detail::MlpCache mlp;
  Matrix mlp_out;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix final_in;
  detail::LnCache ln_final;
  Matrix final_norm;
  Matrix logits;
};

// Mirrors Model::forward_patched (no patches) with caches; the arithmetic is
// the same kernels, so logits agree bit for bit with Model::forward.
void forward_cached(const Model& model, const Matrix& x0, ForwardCache& cache) {
  const auto& config = model.config();
  const auto& params = model.params();
  const int L = config.n_layers;

  cache.layers.resize(L);
  Matrix h_prev = x0;
  for (int l = 0; l < L; ++l) {
    const auto& lp = params.layers[l];
    LayerCache& lc = cache.layers[l];
    lc.h_prev = h_prev;
    lc.a_in = detail::layernorm(h_prev, lp.ln_attn_scale, lp.ln_attn_bias,
                                config.layernorm_epsilon, &lc.ln_attn);
    lc.mha = detail::attention(lc.a_in, lp, config, &lc.attn);
    lc.mid = detail::layernorm(h_prev + lc.mha, lp.ln_mid_scale, lp.ln_mid_bias,
                               config.layernorm_epsilon, &lc.ln_mid);
    lc.mlp_out = detail::mlp(lc.mid, lp, &lc.mlp);
    h_prev = lc.h_prev + lc.mha + lc.mlp_out;
  }
  cache.final_in = h_prev;
  cache.final_norm =
      detail::layernorm(h_prev, params.ln_final_scale, params.ln_final_bias,
                        config.layernorm_epsilon, &cache.ln_final);
  const Matrix& unembed =
      config.tied_unembedding ? params.embedding : params.unembedding;
  cache.logits = cache.final_norm * unembed.transpose();
}

Parameters make_grad_slot(const ModelConfig& config) {
  Parameters g;
  g.embedding = Matrix::Zero(config.vocab_size, config.d_model);
  if (config.positional_scheme == PositionalScheme::kLearnedAbsolute)
    g.positional = Matrix::Zero(config.max_context, config.d_model);
  g.layers.resize(config.n_layers);
  for (auto& lp : g.layers) {
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
  g.ln_final_scale = Vector::Zero(config.d_model);
  g.ln_final_bias = Vector::Zero(config.d_model);
  if (!config.tied_unembedding)
    g.unembedding = Matrix::Zero(config.vocab_size, config.d_model);
  return g;
}

// Applies fn to every allocated tensor of the given Parameters objects, in a
// fixed order; all arguments must share the same allocation layout.
template <typename Fn, typename... Ps>
void for_each_tensor(Fn&& fn, Ps&... ps) {
  auto& first = std::get<0>(std::tie(ps...));
  fn(ps.embedding...);
  if (first.positional.size() > 0) fn(ps.positional...);
  for (size_t l = 0; l < first.layers.size(); ++l) {
    fn(ps.layers[l].wq...);
    fn(ps.layers[l].wk...);
    fn(ps.layers[l].wv...);
    fn(ps.layers[l].wo...);
    fn(ps.layers[l].w1...);
    fn(ps.layers[l].b1...);
    fn(ps.layers[l].w2...);
    fn(ps.layers[l].b2...);
    fn(ps.layers[l].ln_attn_scale...);
    fn(ps.layers[l].ln_attn_bias...);
    fn(ps.layers[l].ln_mid_scale...);
    fn(ps.layers[l].ln_mid_bias...);
  }
  fn(ps.ln_final_scale...);
  fn(ps.ln_final_bias...);
  if (first.unembedding.size() > 0) fn(ps.unembedding...);
}

double cross_entropy(const Matrix& logits, int position, int target,
                     Eigen::VectorXd* probs_out) {
  Eigen::VectorXd p = next_token_distribution(logits, position);
  if (probs_out) *probs_out = p;
  return -std::log(std::max(p(target), 1e-300));
}

// Loss and parameter gradients for one sample. dlogits carries the softmax
// cross-entropy gradient at the final position, plus the optional full-LM
// term at earlier positions.
double backward_sample(const Model& model, const ForwardCache& cache,
                       std::span<const int> tokens, int target,
                       double aux_lm_weight, Parameters& grads) {
  const auto& config = model.config();
  const auto& params = model.params();
  const int T = static_cast<int>(tokens.size());
  const int L = config.n_layers;
  const int hd = config.d_head();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  Matrix dlogits = Matrix::Zero(T, config.vocab_size);
  Eigen::VectorXd probs;
  double loss = cross_entropy(cache.logits, T - 1, target, &probs);
  dlogits.row(T - 1) = probs.cast<float>().transpose();
  dlogits(T - 1, target) -= 1.0f;

  if (aux_lm_weight > 0.0 && T > 1) {
    const float w = static_cast<float>(aux_lm_weight) / (T - 1);
    double aux = 0.0;
    for (int t = 0; t + 1 < T; ++t) {
      Eigen::VectorXd pt;
      aux += cross_entropy(cache.logits, t, tokens[t + 1], &pt);
      dlogits.row(t) += w * pt.cast<float>().transpose();
      dlogits(t, tokens[t + 1]) -= w;
    }
    loss += aux_lm_weight * aux / (T - 1);
  }

  // unembedding
  const Matrix& unembed =
      config.tied_unembedding ? params.embedding : params.unembedding;
  Matrix dfinal_norm = dlogits * unembed;
  Matrix dunembed = dlogits.transpose() * cache.final_norm;
  if (config.tied_unembedding)
    grads.embedding += dunembed;
  else
    grads.unembedding += dunembed;

  Matrix dh = detail::layernorm_backward(dfinal_norm, cache.ln_final,
                                         params.ln_final_scale,
                                         grads.ln_final_scale,
                                         grads.ln_final_bias);

  for (int l = L - 1; l >= 0; --l) {
    const auto& lp = params.layers[l];
    const LayerCache& lc = cache.layers[l];
    auto& lg = grads.layers[l];

    // h = h_prev + mha + mlp
    Matrix dmlp_out = dh;
    Matrix dmha = dh;
    Matrix dh_prev = dh;

    // mlp
    Matrix dact = dmlp_out * lp.w2.transpose();
    lg.w2 += lc.mlp.act.transpose() * dmlp_out;
    lg.b2 += dmlp_out.colwise().sum();
    Matrix dpre = dact.cwiseProduct(
        lc.mlp.pre_act.unaryExpr([](float v) { return detail::gelu_grad(v); }));
    lg.w1 += lc.mid.transpose() * dpre;
    lg.b1 += dpre.colwise().sum();
    Matrix dmid = dpre * lp.w1.transpose();

    Matrix dmid_in = detail::layernorm_backward(dmid, lc.ln_mid,
                                                lp.ln_mid_scale,
                                                lg.ln_mid_scale, lg.ln_mid_bias);
    dh_prev += dmid_in;
    dmha += dmid_in;

    // attention
    Matrix dcontext = dmha * lp.wo.transpose();
    lg.wo += lc.attn.context.transpose() * dmha;

    Matrix dq = Matrix::Zero(T, config.d_model);
    Matrix dk = Matrix::Zero(T, config.d_model);
    Matrix dv = Matrix::Zero(T, config.d_model);
    for (int h = 0; h < config.n_heads; ++h) {
      auto qh = lc.attn.q.middleCols(h * hd, hd);
      auto kh = lc.attn.k.middleCols(h * hd, hd);
      auto vh = lc.attn.v.middleCols(h * hd, hd);
      const Matrix& p = lc.attn.probs[h];
      auto dch = dcontext.middleCols(h * hd, hd);

      Matrix dp = dch * vh.transpose();
      dv.middleCols(h * hd, hd) = p.transpose() * dch;

      Matrix ds(T, T);
      for (int i = 0; i < T; ++i) {
        float dot = dp.row(i).head(i + 1).dot(p.row(i).head(i + 1));
        ds.row(i).setZero();
        ds.row(i).head(i + 1) = (p.row(i).head(i + 1).array() *
                                 (dp.row(i).head(i + 1).array() - dot))
                                    .matrix();
      }
      dq.middleCols(h * hd, hd) = ds * kh * scale;
      dk.middleCols(h * hd, hd) = ds.transpose() * qh * scale;
    }

    if (config.positional_scheme == PositionalScheme::kRotary) {
      for (int h = 0; h < config.n_heads; ++h)
        for (int t = 0; t < T; ++t) {
          detail::apply_rotary_inverse(dq.row(t).segment(h * hd, hd), t,
                                       config.rotary_dims);
          detail::apply_rotary_inverse(dk.row(t).segment(h * hd, hd), t,
                                       config.rotary_dims);
        }
    }

    Matrix da = dq * lp.wq.transpose() + dk * lp.wk.transpose() +
                dv * lp.wv.transpose();
    lg.wq += lc.a_in.transpose() * dq;
    lg.wk += lc.a_in.transpose() * dk;
    lg.wv += lc.a_in.transpose() * dv;

    dh_prev += detail::layernorm_backward(da, lc.ln_attn, lp.ln_attn_scale,
                                          lg.ln_attn_scale, lg.ln_attn_bias);
    dh = std::move(dh_prev);
  }

  // embedding (and positional) scatter
  for (int t = 0; t < T; ++t) {
    grads.embedding.row(tokens[t]) += dh.row(t);
    if (config.positional_scheme == PositionalScheme::kLearnedAbsolute)
      grads.positional.row(t) += dh.row(t);
  }
  return loss;
}

struct AdamState {
  Parameters m;
  Parameters v;
  long step = 0;
};

}  // namespace

std::vector<double> train(Model& model,
                          std::span<const ReverseDictionarySample> train_set,
                          const PromptTemplate& tmpl, const Vocab& vocab,
                          const TrainConfig& config) {
  if (train_set.empty()) throw ValidationError("empty training set");
  if (config.learning_rate < 0)
    throw ValidationError("learning rate must be >= 0");
  if (config.batch_size < 1 || config.epochs < 0)
    throw ValidationError("bad batch size or epoch count");

  struct Prepared {
    std::vector<int> tokens;
    int target;
  };
  std::vector<Prepared> prepared;
  prepared.reserve(train_set.size());
  for (const auto& sample : train_set) {
    auto input = apply_prompt(sample, tmpl, vocab);
    prepared.push_back({std::move(input.tokens), sample.definiendum_id});
  }

  const int n = static_cast<int>(prepared.size());
  const int steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::vector<double> history;
  history.reserve(static_cast<size_t>(config.epochs) * steps_per_epoch);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto engine = make_engine(config.seed);

  Parameters grads = make_grad_slot(model.config());
  AdamState adam;
  if (config.optimizer == OptimizerKind::kAdam) {
    adam.m = make_grad_slot(model.config());
    adam.v = make_grad_slot(model.config());
  }

  ForwardCache cache;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), engine);
    for (int start = 0; start < n; start += config.batch_size) {
      const int batch_n = std::min(config.batch_size, n - start);

      for_each_tensor([](auto& g) { g.setZero(); }, grads);
      double batch_loss = 0.0;
      for (int i = 0; i < batch_n; ++i) {
        const Prepared& item = prepared[order[start + i]];
        forward_cached(model, model.embed(item.tokens), cache);
        batch_loss += backward_sample(model, cache, item.tokens, item.target,
                                      config.aux_lm_weight, grads);
      }
      batch_loss /= batch_n;
      if (!std::isfinite(batch_loss))
        throw TrainingDiverged("non-finite loss at step " +
                               std::to_string(history.size()));

      const float inv_batch = 1.0f / static_cast<float>(batch_n);
      const float lr = static_cast<float>(config.learning_rate);
      if (config.optimizer == OptimizerKind::kSgd) {
        for_each_tensor([&](auto& p, auto& g) { p -= lr * inv_batch * g; },
                        model.mutable_params(), grads);
      } else {
        ++adam.step;
        const float b1 = static_cast<float>(config.adam_beta1);
        const float b2 = static_cast<float>(config.adam_beta2);
        const float eps = static_cast<float>(config.adam_epsilon);
        const float corr1 = 1.0f - std::pow(b1, static_cast<float>(adam.step));
        const float corr2 = 1.0f - std::pow(b2, static_cast<float>(adam.step));
        for_each_tensor(
            [&](auto& p, auto& g, auto& m, auto& v) {
              m = b1 * m + (1.0f - b1) * inv_batch * g;
              v.array() = b2 * v.array() +
                          (1.0f - b2) * (inv_batch * g.array()).square();
              p.array() -=
                  lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + eps);
            },
            model.mutable_params(), grads, adam.m, adam.v);
      }
      history.push_back(batch_loss);
    }
  }
  return history;
}

double loss_and_gradient(const Model& model,
                         std::span<const ReverseDictionarySample> samples,
                         const PromptTemplate& tmpl, const Vocab& vocab,
                         double aux_lm_weight, Parameters& grads) {
  if (samples.empty()) throw ValidationError("no samples");
  grads = make_grad_slot(model.config());
  ForwardCache cache;
  double loss = 0.0;
  for (const auto& sample : samples) {
    auto input = apply_prompt(sample, tmpl, vocab);
    forward_cached(model, model.embed(input.tokens), cache);
    loss += backward_sample(model, cache, input.tokens, sample.definiendum_id,
                            aux_lm_weight, grads);
  }
  const float inv_n = 1.0f / static_cast<float>(samples.size());
  for_each_tensor([&](auto& g) { g *= inv_n; }, grads);
  return loss / static_cast<double>(samples.size());
}

EvalResult evaluate(const Model& model,
                    std::span<const ReverseDictionarySample> samples,
                    const PromptTemplate& tmpl, const Vocab& vocab) {
  EvalResult result;
  if (samples.empty()) return result;
  int correct = 0;
  for (const auto& sample : samples) {
    auto input = apply_prompt(sample, tmpl, vocab);
    Matrix logits = model.forward_tokens(input.tokens);
    int predicted = argmax_token(logits, static_cast<int>(input.tokens.size()) - 1);
    if (predicted == sample.definiendum_id) {
      ++correct;
      result.correct_ids.push_back(sample.sample_id);
    }
  }
  result.accuracy = static_cast<double>(correct) / samples.size();
  return result;
}

std::vector<TemplateAccuracy> select_prompt(
    std::span<const PromptTemplate> templates, const Model& model,
    std::span<const ReverseDictionarySample> samples, const Vocab& vocab) {
  if (templates.empty()) throw ValidationError("no templates to rank");
  std::vector<TemplateAccuracy> ranking;
  ranking.reserve(templates.size());
  for (const auto& tmpl : templates)
    ranking.push_back({tmpl.template_id,
                       evaluate(model, samples, tmpl, vocab).accuracy});
  std::stable_sort(ranking.begin(), ranking.end(),
                   [](const TemplateAccuracy& a, const TemplateAccuracy& b) {
                     return a.accuracy > b.accuracy;
                   });
  return ranking;
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"d_model", c.d_model},
      {"d_ff", c.d_ff},
      {"vocab_size", c.vocab_size},
      {"max_context", c.max_context},
      {"positional_scheme", to_string(c.positional_scheme)},
      {"rotary_dims", c.rotary_dims},
      {"layernorm_epsilon", c.layernorm_epsilon},
      {"seed", c.seed},
      {"tied_unembedding", c.tied_unembedding},
  };
}

}  // namespace

void save_checkpoint(const Model& model, const TrainConfig& train_config,
                     double final_accuracy, const std::string& path) {
  model.save(path);
  nlohmann::json sidecar;
  sidecar["config"] = config_to_json(model.config());
  sidecar["train"] = {
      {"learning_rate", train_config.learning_rate},
      {"batch_size", train_config.batch_size},
      {"epochs", train_config.epochs},
      {"seed", train_config.seed},
      {"optimizer",
       train_config.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"},
      {"split_fraction", train_config.split_fraction},
      {"aux_lm_weight", train_config.aux_lm_weight},
  };
  sidecar["final_accuracy"] = final_accuracy;
  sidecar["seed"] = model.config().seed;

  std::ofstream out(path + ".json", std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint sidecar: " + path + ".json");
  out << sidecar.dump(2) << '\n';
}

Model load_checkpoint(const std::string& path) { return Model::load(path); }

}  // namespace ctrace
