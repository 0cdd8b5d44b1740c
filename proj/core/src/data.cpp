#include "ctrace/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ctrace/errors.hpp"
#include "ctrace/rng.hpp"
#include "json.hpp"

namespace ctrace {

namespace {

using nlohmann::json;

constexpr const char* kDsrNames[] = {
    "supertype",         "differentia_quality", "differentia_event",
    "event_time",        "event_location",      "quality_modifier",
    "origin_location",   "purpose",             "associated_fact",
    "accessory_determiner", "accessory_quality", "role_particle",
    "prompt",
};

constexpr const char* kPosNames[] = {"noun", "verb", "adjective", "adverb",
                                     "other"};

constexpr const char* kPlaceholder = "{definition}";

}  // namespace

const char* to_string(DsrLabel label) {
  return kDsrNames[static_cast<int>(label)];
}

std::optional<DsrLabel> dsr_from_string(const std::string& name) {
  for (int i = 0; i < static_cast<int>(std::size(kDsrNames)); ++i)
    if (name == kDsrNames[i]) return static_cast<DsrLabel>(i);
  return std::nullopt;
}

const char* to_string(PosTag pos) { return kPosNames[static_cast<int>(pos)]; }

std::optional<PosTag> pos_from_string(const std::string& name) {
  for (int i = 0; i < static_cast<int>(std::size(kPosNames)); ++i)
    if (name == kPosNames[i]) return static_cast<PosTag>(i);
  return std::nullopt;
}

PromptTemplate PromptTemplate::make(int id, std::string text) {
  size_t first = text.find(kPlaceholder);
  if (first == std::string::npos)
    throw ValidationError("template lacks the {definition} placeholder");
  if (text.find(kPlaceholder, first + 1) != std::string::npos)
    throw ValidationError("template repeats the {definition} placeholder");
  if (first != 0)
    throw ValidationError(
        "the {definition} placeholder must lead the template");
  return PromptTemplate{id, std::move(text)};
}

std::string PromptTemplate::suffix() const {
  return text.substr(std::char_traits<char>::length(kPlaceholder));
}

const std::vector<PromptTemplate>& builtin_templates() {
  static const std::vector<PromptTemplate> templates = {
      PromptTemplate::make(0, "{definition} is often referred to as:"),
      PromptTemplate::make(1, "{definition} is commonly known as"),
      PromptTemplate::make(2, "{definition} is the definition of"),
  };
  return templates;
}

const PromptTemplate& default_template() { return builtin_templates()[0]; }

const PromptTemplate& template_by_id(int id) {
  for (const auto& t : builtin_templates())
    if (t.template_id == id) return t;
  throw ValidationError("unknown template id " + std::to_string(id));
}

const char* to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::kTooLong: return "too_long";
    case RejectReason::kNonAlphabetic: return "non_alphabetic";
    case RejectReason::kMultiToken: return "multi_token";
  }
  return "?";
}

namespace {

bool alphabetic_only(const std::string& word) {
  if (word.empty()) return false;
  return std::all_of(word.begin(), word.end(), [](unsigned char c) {
    return std::isalpha(c) != 0;
  });
}

}  // namespace

FilterResult filter_sample(const RawRecord& raw, const Vocab& vocab) {
  if (tokenize(raw.definition).size() > kMaxDefinitionWords)
    return {RejectReason::kTooLong};
  if (!alphabetic_only(raw.definiendum))
    return {RejectReason::kNonAlphabetic};
  auto words = tokenize(raw.definiendum);
  if (words.size() != 1 || !vocab.contains(words[0]))
    return {RejectReason::kMultiToken};
  return {};
}

namespace {

void validate_spans(std::vector<DsrSpan>& spans, int definiens_len,
                    const std::string& sample_id) {
  std::sort(spans.begin(), spans.end(),
            [](const DsrSpan& a, const DsrSpan& b) { return a.start < b.start; });
  int prev_end = 0;
  for (const auto& span : spans) {
    if (span.label == DsrLabel::kPrompt)
      throw ValidationError("prompt label may not appear in dsr spans",
                            sample_id);
    if (span.start < 0 || span.end > definiens_len || span.start >= span.end)
      throw ValidationError("dsr span out of definiens bounds", sample_id);
    if (span.start < prev_end)
      throw ValidationError("overlapping dsr spans", sample_id);
    prev_end = span.end;
  }
}

ReverseDictionarySample finalize_sample(ReverseDictionarySample sample,
                                        const Vocab& vocab,
                                        const PromptTemplate& tmpl) {
  try {
    sample.definiens_ids = vocab.encode(sample.definiens_text);
  } catch (const InvalidToken& e) {
    throw ValidationError(std::string("definition: ") + e.what(),
                          sample.sample_id);
  }
  if (sample.definiens_ids.empty())
    throw ValidationError("empty definition", sample.sample_id);

  auto words = tokenize(sample.definiendum_text);
  if (words.size() != 1 || !vocab.contains(words[0]))
    throw ValidationError("definiendum must encode to exactly one token",
                          sample.sample_id);
  sample.definiendum_id = vocab.lookup(words[0]);

  validate_spans(sample.dsr_spans, sample.definiens_len(), sample.sample_id);

  try {
    sample.prompt_ids = vocab.encode(tmpl.suffix());
  } catch (const InvalidToken&) {
    sample.prompt_ids.clear();  // template not covered by this vocab
  }
  return sample;
}

}  // namespace

std::vector<ReverseDictionarySample> load_jsonl(const std::string& path,
                                                const Vocab& vocab,
                                                const PromptTemplate& tmpl) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file: " + path);

  std::vector<ReverseDictionarySample> samples;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw ParseError("line is not a JSON object", line_no);

    ReverseDictionarySample sample;
    try {
      sample.sample_id = obj.at("id").get<std::string>();
      sample.language = obj.value("lang", std::string("en"));
      sample.definiens_text = obj.at("definition").get<std::string>();
      sample.definiendum_text = obj.at("definiendum").get<std::string>();
      if (obj.contains("pos")) {
        auto pos = pos_from_string(obj.at("pos").get<std::string>());
        if (!pos) throw ParseError("unknown pos tag", line_no);
        sample.definiendum_pos = *pos;
      }
      if (obj.contains("dsr")) {
        for (const auto& item : obj.at("dsr")) {
          auto label = dsr_from_string(item.at("label").get<std::string>());
          if (!label)
            throw ParseError(
                "unknown dsr label: " + item.at("label").get<std::string>(),
                line_no);
          sample.dsr_spans.push_back({*label, item.at("start").get<int>(),
                                      item.at("end").get<int>()});
        }
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("schema violation: ") + e.what(), line_no);
    }
    samples.push_back(finalize_sample(std::move(sample), vocab, tmpl));
  }
  return samples;
}

void save_jsonl(std::span<const ReverseDictionarySample> samples,
                const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file: " + path);
  for (const auto& sample : samples) {
    json obj;
    obj["id"] = sample.sample_id;
    obj["lang"] = sample.language;
    obj["definition"] = sample.definiens_text;
    obj["definiendum"] = sample.definiendum_text;
    if (sample.definiendum_pos)
      obj["pos"] = to_string(*sample.definiendum_pos);
    if (!sample.dsr_spans.empty()) {
      json spans = json::array();
      for (const auto& span : sample.dsr_spans)
        spans.push_back({{"label", to_string(span.label)},
                         {"start", span.start},
                         {"end", span.end}});
      obj["dsr"] = spans;
    }
    out << obj.dump() << '\n';
  }
}

namespace {

// Pronounceable unique nonce words, built from consonant-vowel syllables.
class WordFactory {
 public:
  explicit WordFactory(std::mt19937_64& engine) : engine_(engine) {}

  std::string fresh() {
    static const std::string consonants = "bcdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    for (int attempt = 0; attempt < 4096; ++attempt) {
      int syllables = 2 + static_cast<int>(engine_() % 2) + attempt / 1024;
      std::string word;
      for (int s = 0; s < syllables; ++s) {
        word += consonants[engine_() % consonants.size()];
        word += vowels[engine_() % vowels.size()];
      }
      if (used_.insert(word).second) return word;
    }
    throw GenerationError("word pool exhausted");
  }

 private:
  std::mt19937_64& engine_;
  std::set<std::string> used_;
};

}  // namespace

SynthCorpus synth_generate(const SynthSpec& spec) {
  if (spec.n_concepts < 1 || spec.n_attributes < 1 || spec.defs_per_concept < 1)
    throw ValidationError("synth spec counts must be >= 1");

  auto engine = make_engine(spec.seed);
  WordFactory words(engine);

  int genus_pool = std::max(2, (spec.n_concepts + 4) / 5);
  int attr_pool = std::max(spec.n_attributes + 1,
                           spec.n_attributes + (spec.n_concepts + 1) / 2);

  std::vector<std::string> genera(genus_pool);
  for (auto& g : genera) g = words.fresh();
  std::vector<std::string> attributes(attr_pool);
  for (auto& a : attributes) a = words.fresh();

  // Concept = (genus, attribute set); pairs must be globally distinct.
  struct Concept {
    int genus;
    std::vector<int> attrs;  // sorted; identity of the set
    std::string definiendum;
    PosTag pos;
  };
  std::set<std::pair<int, std::vector<int>>> used_combos;
  std::vector<Concept> concepts;
  std::vector<int> attr_indices(attr_pool);
  for (int i = 0; i < attr_pool; ++i) attr_indices[i] = i;

  for (int c = 0; c < spec.n_concepts; ++c) {
    Concept entry;
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      entry.genus = static_cast<int>(engine() % genus_pool);
      std::shuffle(attr_indices.begin(), attr_indices.end(), engine);
      entry.attrs.assign(attr_indices.begin(),
                         attr_indices.begin() + spec.n_attributes);
      std::sort(entry.attrs.begin(), entry.attrs.end());
      placed = used_combos.insert({entry.genus, entry.attrs}).second;
    }
    if (!placed)
      throw GenerationError("exhausted distinct (genus, attribute-set) pairs");
    entry.definiendum = words.fresh();
    entry.pos = static_cast<PosTag>(c % 3);  // noun / verb / adjective
    concepts.push_back(std::move(entry));
  }

  SynthCorpus corpus;
  std::vector<std::string> vocab_lines;
  for (int c = 0; c < spec.n_concepts; ++c) {
    const auto& entry = concepts[c];
    std::vector<int> order = entry.attrs;
    for (int d = 0; d < spec.defs_per_concept; ++d) {
      if (d > 0) std::shuffle(order.begin(), order.end(), engine);

      std::string text = "a " + genera[entry.genus] + " that is";
      for (int idx : order) text += " " + attributes[idx];

      ReverseDictionarySample sample;
      char id[32];
      std::snprintf(id, sizeof id, "c%04d_d%d", c, d);
      sample.sample_id = id;
      sample.language = "en";
      sample.definiens_text = text;
      sample.definiendum_text = entry.definiendum;
      sample.definiendum_pos = entry.pos;
      // tokens: [a, genus, that, is, attr...]
      sample.dsr_spans.push_back({DsrLabel::kRoleParticle, 0, 1});
      sample.dsr_spans.push_back({DsrLabel::kSupertype, 1, 2});
      sample.dsr_spans.push_back({DsrLabel::kRoleParticle, 2, 4});
      for (int i = 0; i < spec.n_attributes; ++i)
        sample.dsr_spans.push_back({DsrLabel::kDifferentiaQuality, 4 + i, 5 + i});
      corpus.samples.push_back(std::move(sample));
      vocab_lines.push_back(text);
    }
    vocab_lines.push_back(entry.definiendum);
  }
  for (const auto& tmpl : builtin_templates()) vocab_lines.push_back(tmpl.suffix());

  corpus.vocab = build_vocab(vocab_lines);
  for (auto& sample : corpus.samples)
    sample = finalize_sample(std::move(sample), corpus.vocab, default_template());
  return corpus;
}

PromptedInput apply_prompt(const ReverseDictionarySample& sample,
                           const PromptTemplate& tmpl, const Vocab& vocab) {
  PromptedInput input;
  input.tokens = sample.definiens_ids;
  auto suffix_ids = vocab.encode(tmpl.suffix());
  input.tokens.insert(input.tokens.end(), suffix_ids.begin(), suffix_ids.end());
  input.boundary = sample.definiens_len();
  return input;
}

}  // namespace ctrace
