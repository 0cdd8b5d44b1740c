#ifndef CTRACE_TRAIN_HPP_
#define CTRACE_TRAIN_HPP_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctrace/data.hpp"
#include "ctrace/model.hpp"

namespace ctrace {

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 16;
  int epochs = 200;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double split_fraction = 0.8;
  // Weight of the full next-token LM loss added to the final-position loss;
  // 0 trains on the definiendum position only.
  double aux_lm_weight = 0.0;
};

// Deterministic shuffled split; train gets round(n * fraction) samples.
struct Split {
  std::vector<ReverseDictionarySample> train;
  std::vector<ReverseDictionarySample> test;
};
Split split(std::span<const ReverseDictionarySample> corpus, double fraction,
            std::uint64_t seed);

// Minimizes cross-entropy of the definiendum at the final position.
// One loss entry per optimizer step: epochs * ceil(n / batch_size).
// Throws TrainingDiverged on a non-finite loss.
std::vector<double> train(Model& model,
                          std::span<const ReverseDictionarySample> train_set,
                          const PromptTemplate& tmpl, const Vocab& vocab,
                          const TrainConfig& config);

// Mean loss over the samples plus its parameter gradient, exactly as one
// optimizer step sees them. `grads` is (re)built to match the model layout.
double loss_and_gradient(const Model& model,
                         std::span<const ReverseDictionarySample> samples,
                         const PromptTemplate& tmpl, const Vocab& vocab,
                         double aux_lm_weight, Parameters& grads);

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::string> correct_ids;  // samples eligible for tracing
};

// Fraction of samples whose argmax next token equals the definiendum.
EvalResult evaluate(const Model& model,
                    std::span<const ReverseDictionarySample> samples,
                    const PromptTemplate& tmpl, const Vocab& vocab);

struct TemplateAccuracy {
  int template_id;
  double accuracy;
};

// Ranks templates by evaluate() accuracy, descending; ties keep input order.
std::vector<TemplateAccuracy> select_prompt(
    std::span<const PromptTemplate> templates, const Model& model,
    std::span<const ReverseDictionarySample> samples, const Vocab& vocab);

// Checkpoint = model binary plus a "<path>.json" sidecar carrying the
// configs, final accuracy and seed.
void save_checkpoint(const Model& model, const TrainConfig& train_config,
                     double final_accuracy, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace ctrace

#endif  // CTRACE_TRAIN_HPP_
