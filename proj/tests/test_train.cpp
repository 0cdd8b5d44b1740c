#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>
#include <set>

#include "ctrace/errors.hpp"
#include "ctrace/train.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"

using namespace ctrace;

namespace {

// Every tensor of a Parameters object, in declaration order. Test-side
// mirror used for finite-difference probing.
std::vector<float*> tensor_entries(Parameters& p, std::vector<long>& sizes) {
  std::vector<float*> out;
  sizes.clear();
  auto add = [&](auto& m) {
    if (m.size() == 0) return;
    out.push_back(m.data());
    sizes.push_back(m.size());
  };
  add(p.embedding);
  add(p.positional);
  for (auto& lp : p.layers) {
    add(lp.wq);
    add(lp.wk);
    add(lp.wv);
    add(lp.wo);
    add(lp.w1);
    add(lp.b1);
    add(lp.w2);
    add(lp.b2);
    add(lp.ln_attn_scale);
    add(lp.ln_attn_bias);
    add(lp.ln_mid_scale);
    add(lp.ln_mid_bias);
  }
  add(p.ln_final_scale);
  add(p.ln_final_bias);
  add(p.unembedding);
  return out;
}

}  // namespace

TEST_CASE("split fractions and determinism") {
  auto corpus = synth_generate(
      {.n_concepts = 5, .n_attributes = 2, .defs_per_concept = 2, .seed = 2});
  REQUIRE(corpus.samples.size() == 10);

  auto parts = split(corpus.samples, 0.8, 3);
  CHECK(parts.train.size() == 8);
  CHECK(parts.test.size() == 2);

  // disjoint and exhaustive
  std::set<std::string> ids;
  for (const auto& s : parts.train) ids.insert(s.sample_id);
  for (const auto& s : parts.test) CHECK(ids.insert(s.sample_id).second);
  CHECK(ids.size() == 10);

  auto again = split(corpus.samples, 0.8, 3);
  for (size_t i = 0; i < parts.train.size(); ++i)
    CHECK(parts.train[i].sample_id == again.train[i].sample_id);

  std::vector<ReverseDictionarySample> two(corpus.samples.begin(),
                                           corpus.samples.begin() + 2);
  auto half = split(two, 0.5, 1);
  CHECK(half.train.size() == 1);
  CHECK(half.test.size() == 1);

  CHECK_THROWS_AS((void)split(corpus.samples, 1.5, 0), ValidationError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto corpus = ctest::tiny_corpus();
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 4);
  Model model(config);
  Matrix embedding_before = model.params().embedding;
  Matrix wq_before = model.params().layers[0].wq;

  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 4;
  tc.batch_size = 64;  // one step per epoch covers the whole set
  tc.seed = 8;
  auto history = train(model, corpus.samples, default_template(), corpus.vocab, tc);

  REQUIRE(history.size() == 4);
  for (double loss : history) CHECK(loss == history.front());
  CHECK(model.params().embedding == embedding_before);
  CHECK(model.params().layers[0].wq == wq_before);
}

TEST_CASE("initial loss of the zero-unembedding preset is ln(vocab)") {
  auto corpus = ctest::tiny_corpus();
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 4);
  config.tied_unembedding = false;
  Model model(config, make_zero_parameters(config));

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs = 1;
  tc.batch_size = 64;
  auto history = train(model, corpus.samples, default_template(), corpus.vocab, tc);
  REQUIRE(history.size() == 1);
  CHECK(std::abs(history[0] - std::log(corpus.vocab.size())) <= 1e-3);
}

TEST_CASE("loss history is deterministic and sized epochs * ceil(n/batch)") {
  auto corpus = ctest::tiny_corpus();  // 5 samples
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 4);

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs = 3;
  tc.batch_size = 2;  // ceil(5/2) = 3 steps per epoch
  tc.seed = 12;

  Model a(config);
  auto ha = train(a, corpus.samples, default_template(), corpus.vocab, tc);
  Model b(config);
  auto hb = train(b, corpus.samples, default_template(), corpus.vocab, tc);

  CHECK(ha.size() == 9);
  CHECK(ha == hb);
  CHECK(a.params().embedding == b.params().embedding);
}

TEST_CASE("training reduces the loss on the toy corpus") {
  auto corpus = synth_generate(
      {.n_concepts = 8, .n_attributes = 2, .defs_per_concept = 2, .seed = 6});
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 5);
  config.d_model = 32;
  config.d_ff = 64;
  config.max_context = 16;
  Model model(config);

  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.epochs = 60;
  tc.batch_size = 8;
  tc.seed = 6;
  auto history = train(model, corpus.samples, default_template(), corpus.vocab, tc);
  CHECK(history.back() < history.front());
  auto result = evaluate(model, corpus.samples, default_template(), corpus.vocab);
  CHECK(result.accuracy > 0.5);  // fits the training set
}

TEST_CASE("divergence raises TrainingDiverged") {
  auto corpus = ctest::tiny_corpus();
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 4);
  Model model(config);
  TrainConfig tc;
  tc.learning_rate = 1e9;
  tc.optimizer = OptimizerKind::kSgd;
  tc.epochs = 50;
  tc.batch_size = 8;
  CHECK_THROWS_AS(
      (void)train(model, corpus.samples, default_template(), corpus.vocab, tc),
      TrainingDiverged);
}

TEST_CASE("analytic gradients match central finite differences") {
  auto corpus = ctest::tiny_corpus();
  ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 2;
  config.d_model = 8;
  config.d_ff = 12;
  config.vocab_size = corpus.vocab.size();
  config.max_context = 16;
  config.seed = 13;

  std::span<const ReverseDictionarySample> samples(corpus.samples.data(), 3);

  for (double aux : {0.0, 0.5}) {
    CAPTURE(aux);
    Model model(config);
    Parameters analytic;
    (void)loss_and_gradient(model, samples, default_template(), corpus.vocab,
                            aux, analytic);

    std::vector<long> sizes, grad_sizes;
    Parameters probe = model.params();
    auto tensors = tensor_entries(probe, sizes);
    auto grad_tensors = tensor_entries(analytic, grad_sizes);
    REQUIRE(tensors.size() == grad_tensors.size());

    std::mt19937_64 rng(17);
    const float h = 1e-2f;
    Parameters scratch;
    for (int trial = 0; trial < 30; ++trial) {
      size_t ti = rng() % tensors.size();
      long ci = static_cast<long>(rng() % static_cast<std::uint64_t>(sizes[ti]));
      float saved = tensors[ti][ci];

      tensors[ti][ci] = saved + h;
      double up = loss_and_gradient(Model(config, probe), samples,
                                    default_template(), corpus.vocab, aux,
                                    scratch);
      tensors[ti][ci] = saved - h;
      double down = loss_and_gradient(Model(config, probe), samples,
                                      default_template(), corpus.vocab, aux,
                                      scratch);
      tensors[ti][ci] = saved;

      double fd = (up - down) / (2.0 * h);
      double an = grad_tensors[ti][ci];
      CHECK(std::abs(fd - an) <=
            2e-3 + 2e-2 * std::max(std::abs(fd), std::abs(an)));
    }
  }
}

TEST_CASE("evaluate: uniform predictor, purity, oracle recount") {
  auto corpus = ctest::tiny_corpus();
  ModelConfig config = ctest::tiny_config(corpus.vocab.size(), 4);
  config.tied_unembedding = false;

  SUBCASE("zero model predicts near chance") {
    Model zero(config, make_zero_parameters(config));
    auto result = evaluate(zero, corpus.samples, default_template(), corpus.vocab);
    CHECK(result.accuracy <= 0.25);
    CHECK(result.correct_ids.size() ==
          static_cast<size_t>(result.accuracy * corpus.samples.size() + 0.5));
  }

  SUBCASE("repeated calls are identical and match a per-sample recount") {
    Model model(ctest::tiny_config(corpus.vocab.size(), 4));
    auto r1 = evaluate(model, corpus.samples, default_template(), corpus.vocab);
    auto r2 = evaluate(model, corpus.samples, default_template(), corpus.vocab);
    CHECK(r1.accuracy == r2.accuracy);
    CHECK(r1.correct_ids == r2.correct_ids);

    int correct = 0;
    for (const auto& sample : corpus.samples) {
      auto input = apply_prompt(sample, default_template(), corpus.vocab);
      Matrix logits = model.forward_tokens(input.tokens);
      if (argmax_token(logits, static_cast<int>(input.tokens.size()) - 1) ==
          sample.definiendum_id)
        ++correct;
    }
    CHECK(r1.accuracy == double(correct) / corpus.samples.size());
  }
}

TEST_CASE("select_prompt ranks by accuracy with stable ties") {
  auto corpus = ctest::tiny_corpus();
  Model model(ctest::tiny_config(corpus.vocab.size(), 4));

  SUBCASE("single template wins by default") {
    std::vector<PromptTemplate> one = {default_template()};
    auto ranking = select_prompt(one, model, corpus.samples, corpus.vocab);
    REQUIRE(ranking.size() == 1);
    CHECK(ranking[0].template_id == 0);
  }

  SUBCASE("equal accuracies preserve input order") {
    std::vector<PromptTemplate> dup = {
        PromptTemplate::make(5, default_template().text),
        PromptTemplate::make(6, default_template().text),
    };
    auto ranking = select_prompt(dup, model, corpus.samples, corpus.vocab);
    REQUIRE(ranking.size() == 2);
    CHECK(ranking[0].accuracy == ranking[1].accuracy);
    CHECK(ranking[0].template_id == 5);
    CHECK(ranking[1].template_id == 6);
  }

  SUBCASE("descending accuracy order") {
    auto ranking = select_prompt(builtin_templates(), model, corpus.samples,
                                 corpus.vocab);
    REQUIRE(ranking.size() == builtin_templates().size());
    for (size_t i = 1; i < ranking.size(); ++i)
      CHECK(ranking[i - 1].accuracy >= ranking[i].accuracy);
  }
}

TEST_CASE("checkpoint sidecar carries config and accuracy") {
  ctest::TempDir dir("sidecar");
  auto corpus = ctest::tiny_corpus();
  Model model(ctest::tiny_config(corpus.vocab.size(), 4));
  TrainConfig tc;
  tc.epochs = 7;
  save_checkpoint(model, tc, 0.75, dir.file("m.bin"));

  Model loaded = load_checkpoint(dir.file("m.bin"));
  CHECK(loaded.config().vocab_size == model.config().vocab_size);

  std::ifstream in(dir.file("m.bin") + ".json");
  REQUIRE(in.good());
  nlohmann::json sidecar;
  in >> sidecar;
  CHECK(sidecar["final_accuracy"].get<double>() == 0.75);
  CHECK(sidecar["config"]["d_model"].get<int>() == model.config().d_model);
  CHECK(sidecar["train"]["epochs"].get<int>() == 7);
  CHECK(sidecar["seed"].get<std::uint64_t>() == model.config().seed);
}
