#ifndef CTRACE_DATA_HPP_
#define CTRACE_DATA_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ctrace/vocab.hpp"

namespace ctrace {

// Definitional semantic roles. The first twelve may appear in annotation
// spans; `prompt` is derived from token position and never stored in spans.
enum class DsrLabel {
  kSupertype,
  kDifferentiaQuality,
  kDifferentiaEvent,
  kEventTime,
  kEventLocation,
  kQualityModifier,
  kOriginLocation,
  kPurpose,
  kAssociatedFact,
  kAccessoryDeterminer,
  kAccessoryQuality,
  kRoleParticle,
  kPrompt,
};

const char* to_string(DsrLabel label);
std::optional<DsrLabel> dsr_from_string(const std::string& name);

enum class PosTag { kNoun, kVerb, kAdjective, kAdverb, kOther };

const char* to_string(PosTag pos);
std::optional<PosTag> pos_from_string(const std::string& name);

// Half-open token span [start, end) over the definiens.
struct DsrSpan {
  DsrLabel label;
  int start;
  int end;
};

// One reverse-dictionary tuple: the definiens (definition body), the prompt
// suffix that turns it into a next-token query, and the single-token answer.
struct ReverseDictionarySample {
  std::string sample_id;
  std::string language;
  std::string definiens_text;
  std::string definiendum_text;
  std::vector<int> definiens_ids;
  std::vector<int> prompt_ids;  // suffix of the template applied at load
  int definiendum_id = -1;
  std::vector<DsrSpan> dsr_spans;
  std::optional<PosTag> definiendum_pos;

  int definiens_len() const { return static_cast<int>(definiens_ids.size()); }
};

// Prompt template with exactly one "{definition}" placeholder, which must
// lead the template so the prompt forms a pure suffix.
struct PromptTemplate {
  int template_id = 0;
  std::string text;

  // Throws ValidationError when the placeholder is missing, repeated, or not
  // at the start.
  static PromptTemplate make(int id, std::string text);

  // Template text after the placeholder, e.g. " is often referred to as:".
  std::string suffix() const;
};

// Templates shipped with the toolkit; id 0 is the default.
const std::vector<PromptTemplate>& builtin_templates();
const PromptTemplate& default_template();
const PromptTemplate& template_by_id(int id);

// A raw ingestion candidate, prior to filtering.
struct RawRecord {
  std::string id;
  std::string language = "en";
  std::string definition;
  std::string definiendum;
  std::optional<PosTag> pos;
  std::vector<DsrSpan> dsr;
};

enum class RejectReason { kTooLong, kNonAlphabetic, kMultiToken };

const char* to_string(RejectReason reason);

// accept == !reject.has_value()
struct FilterResult {
  std::optional<RejectReason> reject;
  bool accepted() const { return !reject.has_value(); }
};

inline constexpr int kMaxDefinitionWords = 25;

// Corpus admission rules, applied in order: definition longer than 25
// whitespace words; definiendum with non-alphabetic characters; definiendum
// that is not a single vocab token.
FilterResult filter_sample(const RawRecord& raw, const Vocab& vocab);

// JSONL corpus I/O. Schema per line:
//   {"id": str, "lang": str, "definition": str, "definiendum": str,
//    "pos": str?, "dsr": [{"label": str, "start": int, "end": int}]?}
// Malformed line -> ParseError with line number; invariant breach ->
// ValidationError with sample id. Order of the file is preserved.
std::vector<ReverseDictionarySample> load_jsonl(const std::string& path,
                                                const Vocab& vocab,
                                                const PromptTemplate& tmpl =
                                                    default_template());
void save_jsonl(std::span<const ReverseDictionarySample> samples,
                const std::string& path);

struct SynthSpec {
  int n_concepts = 50;
  int n_attributes = 3;   // attribute words per concept
  int defs_per_concept = 2;
  std::uint64_t seed = 0;
};

// Synthetic genus/differentia corpus. Definitions read
// "a <genus> that is <attr...>", with the genus span labeled supertype,
// attribute words differentia_quality, and connectives role_particle.
// Every definiendum is a unique single-token word; no two concepts share
// both genus and attribute set. Byte-deterministic per seed.
struct SynthCorpus {
  std::vector<ReverseDictionarySample> samples;
  Vocab vocab;  // covers all definitions, definienda and builtin templates
};
SynthCorpus synth_generate(const SynthSpec& spec);

// Full model input for one sample under one template.
struct PromptedInput {
  std::vector<int> tokens;  // definiens_ids ++ prompt-suffix ids
  int boundary;             // index of the first prompt token (== N)
};

// Throws InvalidToken when a template word is out of vocab.
PromptedInput apply_prompt(const ReverseDictionarySample& sample,
                           const PromptTemplate& tmpl, const Vocab& vocab);

}  // namespace ctrace

#endif  // CTRACE_DATA_HPP_
