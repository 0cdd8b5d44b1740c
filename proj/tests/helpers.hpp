#ifndef CTRACE_TESTS_HELPERS_HPP_
#define CTRACE_TESTS_HELPERS_HPP_

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "ctrace/data.hpp"
#include "ctrace/model.hpp"
#include "ctrace/vocab.hpp"

namespace ctest {

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0;; ++i) {
      path_ = base / ("ctrace_" + tag + "_" + std::to_string(::getpid()) +
                      "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(path_, ec)) break;
    }
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const {
    return (path_ / name).string();
  }

 private:
  std::filesystem::path path_;
};

inline ctrace::ModelConfig tiny_config(int vocab_size, std::uint64_t seed = 1) {
  ctrace::ModelConfig config;
  config.n_layers = 2;
  config.n_heads = 2;
  config.d_model = 16;
  config.d_ff = 32;
  config.vocab_size = vocab_size;
  config.max_context = 24;
  config.seed = seed;
  return config;
}

// Hand-built five-sample corpus over a fixed vocabulary; definitions follow
// the genus/differentia layout so DSR spans are available.
struct TinyCorpus {
  ctrace::Vocab vocab;
  std::vector<ctrace::ReverseDictionarySample> samples;
};

inline TinyCorpus tiny_corpus() {
  TinyCorpus out;
  std::vector<std::string> lines = {
      "a tool that is red",   "a tool that is blue",  "a beast that is red",
      "a beast that is blue", "a plant that is red",  "hammer", "wrench",
      "wolf", "bear", "fern",
  };
  for (const auto& tmpl : ctrace::builtin_templates())
    lines.push_back(tmpl.suffix());
  out.vocab = ctrace::build_vocab(lines);

  auto add = [&](const std::string& id, const std::string& text,
                 const std::string& word, ctrace::PosTag pos) {
    ctrace::ReverseDictionarySample s;
    s.sample_id = id;
    s.language = "en";
    s.definiens_text = text;
    s.definiendum_text = word;
    s.definiens_ids = out.vocab.encode(text);
    s.definiendum_id = out.vocab.lookup(word);
    s.prompt_ids = out.vocab.encode(ctrace::default_template().suffix());
    s.definiendum_pos = pos;
    s.dsr_spans = {{ctrace::DsrLabel::kRoleParticle, 0, 1},
                   {ctrace::DsrLabel::kSupertype, 1, 2},
                   {ctrace::DsrLabel::kRoleParticle, 2, 4},
                   {ctrace::DsrLabel::kDifferentiaQuality, 4, 5}};
    out.samples.push_back(std::move(s));
  };
  add("s0", "a tool that is red", "hammer", ctrace::PosTag::kNoun);
  add("s1", "a tool that is blue", "wrench", ctrace::PosTag::kNoun);
  add("s2", "a beast that is red", "wolf", ctrace::PosTag::kVerb);
  add("s3", "a beast that is blue", "bear", ctrace::PosTag::kVerb);
  add("s4", "a plant that is red", "fern", ctrace::PosTag::kAdjective);
  return out;
}

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

}  // namespace ctest

#endif  // CTRACE_TESTS_HELPERS_HPP_
