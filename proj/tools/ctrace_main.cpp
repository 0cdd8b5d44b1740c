// ctrace: train a toy reverse-dictionary transformer, run causal traces over
// its hidden/MHA/MLP states, and report aggregate trace analytics.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctrace/analytics.hpp"
#include "ctrace/data.hpp"
#include "ctrace/errors.hpp"
#include "ctrace/model.hpp"
#include "ctrace/overlay.hpp"
#include "ctrace/report.hpp"
#include "ctrace/trace.hpp"
#include "ctrace/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitValidation = 3;

struct SharedArgs {
  std::string model_path;
  std::string data_path;
  std::string vocab_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  int template_id = 0;
};

std::string default_vocab_path(const std::string& data_path) {
  return (fs::path(data_path).parent_path() / "vocab.txt").string();
}

ctrace::Vocab load_vocab_for(const SharedArgs& args) {
  std::string path = args.vocab_path.empty()
                         ? default_vocab_path(args.data_path)
                         : args.vocab_path;
  return ctrace::load_vocab(path);
}

void write_json(const json& obj, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ctrace::IoError("cannot write " + path.string());
  out << obj.dump(2) << '\n';
}

int run_synth(const SharedArgs& shared, const ctrace::SynthSpec& spec) {
  auto corpus = ctrace::synth_generate(spec);
  fs::create_directories(shared.out_dir);
  ctrace::save_jsonl(corpus.samples, (fs::path(shared.out_dir) / "corpus.jsonl").string());
  ctrace::save_vocab(corpus.vocab, (fs::path(shared.out_dir) / "vocab.txt").string());
  std::cout << "wrote " << corpus.samples.size() << " samples, vocab size "
            << corpus.vocab.size() << " -> " << shared.out_dir << "\n";
  return 0;
}

int run_train(const SharedArgs& shared, ctrace::ModelConfig model_config,
              const ctrace::TrainConfig& train_config) {
  auto vocab = load_vocab_for(shared);
  const auto& tmpl = ctrace::template_by_id(shared.template_id);
  auto corpus = ctrace::load_jsonl(shared.data_path, vocab, tmpl);
  if (corpus.empty()) throw ctrace::ValidationError("corpus is empty");

  auto parts = ctrace::split(corpus, train_config.split_fraction, train_config.seed);

  model_config.vocab_size = vocab.size();
  model_config.seed = shared.seed;
  if (model_config.max_context <= 0) {
    int longest = 0;
    for (const auto& sample : corpus) {
      auto input = ctrace::apply_prompt(sample, tmpl, vocab);
      longest = std::max(longest, static_cast<int>(input.tokens.size()));
    }
    model_config.max_context = longest;
  }

  ctrace::Model model(model_config);
  auto history = ctrace::train(model, parts.train, tmpl, vocab, train_config);
  auto test_eval = ctrace::evaluate(model, parts.test, tmpl, vocab);
  auto train_eval = ctrace::evaluate(model, parts.train, tmpl, vocab);

  fs::create_directories(shared.out_dir);
  fs::path out(shared.out_dir);
  ctrace::save_checkpoint(model, train_config, test_eval.accuracy,
                          (out / "checkpoint.bin").string());
  ctrace::save_jsonl(parts.train, (out / "train.jsonl").string());
  ctrace::save_jsonl(parts.test, (out / "test.jsonl").string());

  json metrics;
  metrics["n_train"] = parts.train.size();
  metrics["n_test"] = parts.test.size();
  metrics["steps"] = history.size();
  metrics["initial_loss"] = history.empty() ? 0.0 : history.front();
  metrics["final_loss"] = history.empty() ? 0.0 : history.back();
  metrics["train_accuracy"] = train_eval.accuracy;
  metrics["test_accuracy"] = test_eval.accuracy;
  metrics["template_id"] = shared.template_id;
  write_json(metrics, out / "metrics.json");

  std::cout << "trained " << history.size() << " steps, loss "
            << (history.empty() ? 0.0 : history.front()) << " -> "
            << (history.empty() ? 0.0 : history.back()) << ", test accuracy "
            << test_eval.accuracy << "\n";
  return 0;
}

int run_eval(const SharedArgs& shared) {
  auto vocab = load_vocab_for(shared);
  const auto& tmpl = ctrace::template_by_id(shared.template_id);
  auto corpus = ctrace::load_jsonl(shared.data_path, vocab, tmpl);
  auto model = ctrace::load_checkpoint(shared.model_path);

  auto result = ctrace::evaluate(model, corpus, tmpl, vocab);
  auto ranking =
      ctrace::select_prompt(ctrace::builtin_templates(), model, corpus, vocab);

  json metrics;
  metrics["accuracy"] = result.accuracy;
  metrics["correct_ids"] = result.correct_ids;
  metrics["n_samples"] = corpus.size();
  metrics["template_id"] = shared.template_id;
  json ranks = json::array();
  for (const auto& r : ranking)
    ranks.push_back({{"template_id", r.template_id}, {"accuracy", r.accuracy}});
  metrics["template_ranking"] = ranks;

  fs::create_directories(shared.out_dir);
  write_json(metrics, fs::path(shared.out_dir) / "metrics.json");
  std::cout << "accuracy " << result.accuracy << " (" << result.correct_ids.size()
            << "/" << corpus.size() << " correct)\n";
  return 0;
}

struct TraceArgs {
  std::vector<std::string> sample_ids;  // empty = every correct sample
  std::vector<std::string> kinds = {"hidden", "mha", "mlp"};
  int window = 0;  // 0 = per-kind default
  double noise_mult = 3.0;
  int noise_samples = 10;
};

int run_trace(const SharedArgs& shared, const TraceArgs& args) {
  auto vocab = load_vocab_for(shared);
  const auto& tmpl = ctrace::template_by_id(shared.template_id);
  auto corpus = ctrace::load_jsonl(shared.data_path, vocab, tmpl);
  auto model = ctrace::load_checkpoint(shared.model_path);

  std::vector<const ctrace::ReverseDictionarySample*> targets;
  if (args.sample_ids.empty()) {
    for (const auto& sample : corpus) targets.push_back(&sample);
  } else {
    for (const auto& id : args.sample_ids) {
      auto it = std::find_if(corpus.begin(), corpus.end(),
                             [&](const auto& s) { return s.sample_id == id; });
      if (it == corpus.end())
        throw ctrace::ValidationError("sample id not in corpus: " + id);
      targets.push_back(&*it);
    }
  }

  std::vector<ctrace::StateKind> kinds;
  for (const auto& name : args.kinds) {
    auto kind = ctrace::kind_from_string(name);
    if (!kind) throw ctrace::ValidationError("unknown kind: " + name);
    kinds.push_back(*kind);
  }

  fs::create_directories(shared.out_dir);
  json traced = json::array();
  json skipped = json::array();
  for (const auto* sample : targets) {
    for (auto kind : kinds) {
      ctrace::TraceConfig config = ctrace::TraceConfig::for_kind(kind);
      if (args.window > 0) config.window = args.window;
      config.noise_multiplier = args.noise_mult;
      config.noise_samples = args.noise_samples;
      config.seed = shared.seed;

      std::string stem = sample->sample_id + "_" + ctrace::to_string(kind);
      try {
        auto result = ctrace::trace(model, *sample, tmpl, vocab, config);
        ctrace::write_trace(result, (fs::path(shared.out_dir) / stem).string());
        traced.push_back(stem);
      } catch (const ctrace::NotPredicted&) {
        skipped.push_back({{"id", sample->sample_id},
                           {"kind", ctrace::to_string(kind)},
                           {"reason", "not_predicted"}});
      } catch (const ctrace::DegenerateTrace&) {
        skipped.push_back({{"id", sample->sample_id},
                           {"kind", ctrace::to_string(kind)},
                           {"reason", "degenerate"}});
      }
    }
  }

  json manifest;
  manifest["traced"] = traced;
  manifest["skipped"] = skipped;
  write_json(manifest, fs::path(shared.out_dir) / "manifest.json");
  std::cout << "traced " << traced.size() << ", skipped " << skipped.size()
            << " -> " << shared.out_dir << "\n";
  for (const auto& skip : skipped)
    std::cout << "  skipped " << skip["id"].get<std::string>() << " ["
              << skip["kind"].get<std::string>() << "]: "
              << skip["reason"].get<std::string>() << "\n";
  return 0;
}

int run_report(const SharedArgs& shared, const std::vector<int>& k_values) {
  ctrace::ReportOptions options;
  if (!k_values.empty()) options.k_values = k_values;
  auto outcome = ctrace::write_report(shared.data_path, shared.out_dir, options);
  std::cout << "report over " << outcome.n_traces << " traces -> "
            << shared.out_dir << "\n";
  for (const auto& name : outcome.skipped)
    std::cout << "  skipped unparseable " << name << "\n";
  return 0;
}

std::string strip_trace_extension(std::string path) {
  fs::path p(path);
  if (p.extension() == ".csv" || p.extension() == ".json")
    return (p.parent_path() / p.stem()).string();
  return path;
}

int run_compare(const std::string& file_a, const std::string& file_b,
                const std::string& out_file) {
  auto a = ctrace::read_trace(strip_trace_extension(file_a));
  auto b = ctrace::read_trace(strip_trace_extension(file_b));
  double similarity = ctrace::compare_traces(a, b);

  json result;
  result["similarity"] = similarity;
  result["kind"] = ctrace::to_string(a.kind);
  result["shape_a"] = {a.n_tokens(), a.n_layers()};
  result["shape_b"] = {b.n_tokens(), b.n_layers()};
  result["padded"] = a.n_tokens() != b.n_tokens();
  std::cout << result.dump(2) << "\n";
  if (!out_file.empty()) write_json(result, out_file);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"causal-tracing toolkit for a toy reverse-dictionary transformer"};
  app.require_subcommand(1);

  SharedArgs shared;
  ctrace::SynthSpec synth_spec;
  ctrace::ModelConfig model_config;
  model_config.max_context = 0;  // auto-size from the corpus
  ctrace::TrainConfig train_config;
  TraceArgs trace_args;
  std::vector<int> k_values;
  std::string optimizer = "adam";
  std::string scheme = "learned_absolute";
  std::string compare_a, compare_b, compare_out;

  auto add_shared = [&](CLI::App* cmd, bool model, bool data, bool out) {
    if (model) cmd->add_option("--model", shared.model_path, "model checkpoint")->required();
    if (data) {
      cmd->add_option("--data", shared.data_path, "corpus JSONL / input dir")->required();
      cmd->add_option("--vocab", shared.vocab_path,
                      "vocab file (default: vocab.txt beside --data)");
    }
    if (out) cmd->add_option("--out", shared.out_dir, "output directory")->required();
    cmd->add_option("--seed", shared.seed, "run seed");
    cmd->add_option("--template", shared.template_id, "prompt template id");
    cmd->set_config("--config", "", "flat key=value config file");
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic reverse-dictionary corpus");
  add_shared(synth, false, false, true);
  synth->add_option("--concepts", synth_spec.n_concepts, "number of concepts");
  synth->add_option("--attributes", synth_spec.n_attributes, "attribute words per concept");
  synth->add_option("--defs", synth_spec.defs_per_concept, "definitions per concept");

  auto* train = app.add_subcommand("train", "train the toy transformer");
  add_shared(train, false, true, true);
  train->add_option("--layers", model_config.n_layers, "transformer layers");
  train->add_option("--heads", model_config.n_heads, "attention heads");
  train->add_option("--dmodel", model_config.d_model, "model width");
  train->add_option("--dff", model_config.d_ff, "mlp hidden width");
  train->add_option("--max-context", model_config.max_context,
                    "context length (0 = fit the corpus)");
  train->add_option("--scheme", scheme, "positional scheme")
      ->check(CLI::IsMember({"learned_absolute", "rotary"}));
  train->add_option("--rotary-dims", model_config.rotary_dims, "rotary dims per head");
  train->add_flag("--untied", "use a separate unembedding matrix");
  train->add_option("--epochs", train_config.epochs, "training epochs");
  train->add_option("--lr", train_config.learning_rate, "learning rate");
  train->add_option("--batch", train_config.batch_size, "batch size");
  train->add_option("--optimizer", optimizer, "optimizer")
      ->check(CLI::IsMember({"adam", "sgd"}));
  train->add_option("--split", train_config.split_fraction, "train fraction");
  train->add_option("--aux-lm-weight", train_config.aux_lm_weight,
                    "full next-token loss weight");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and rank templates");
  add_shared(eval, true, true, true);

  auto* trace = app.add_subcommand("trace", "causal-trace correctly predicted samples");
  add_shared(trace, true, true, true);
  trace->add_option("--samples", trace_args.sample_ids,
                    "sample ids (default: all correct)")
      ->delimiter(',');
  trace->add_option("--kind", trace_args.kinds, "state kinds to trace")
      ->delimiter(',');
  trace->add_option("--window", trace_args.window,
                    "restoration window (0 = kind default)");
  trace->add_option("--noise-mult", trace_args.noise_mult,
                    "noise std as a multiple of the embedding std");
  trace->add_option("--noise-samples", trace_args.noise_samples,
                    "corruption draws to average");

  auto* report = app.add_subcommand("report", "summarize a directory of traces");
  add_shared(report, false, true, true);
  report->add_option("--k", k_values, "top-k sizes")->delimiter(',');

  auto* compare = app.add_subcommand("compare", "rank-correlate two traces");
  compare->add_option("file_a", compare_a, "first trace stem")->required();
  compare->add_option("file_b", compare_b, "second trace stem")->required();
  compare->add_option("--out", compare_out, "write the similarity JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return run_synth(shared, synth_spec);
    if (train->parsed()) {
      model_config.positional_scheme = scheme == "rotary"
                                           ? ctrace::PositionalScheme::kRotary
                                           : ctrace::PositionalScheme::kLearnedAbsolute;
      model_config.tied_unembedding = train->count("--untied") == 0;
      train_config.optimizer = optimizer == "sgd" ? ctrace::OptimizerKind::kSgd
                                                  : ctrace::OptimizerKind::kAdam;
      train_config.seed = shared.seed;
      return run_train(shared, model_config, train_config);
    }
    if (eval->parsed()) return run_eval(shared);
    if (trace->parsed()) return run_trace(shared, trace_args);
    if (report->parsed()) return run_report(shared, k_values);
    if (compare->parsed()) return run_compare(compare_a, compare_b, compare_out);
  } catch (const ctrace::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ctrace::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return 0;
}
