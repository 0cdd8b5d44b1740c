#ifndef CTRACE_VOCAB_HPP_
#define CTRACE_VOCAB_HPP_

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ctrace {

// Splits on runs of whitespace; no other normalization.
std::vector<std::string> tokenize(const std::string& text);

// Word-level vocabulary. Ids are dense in [0, size()) in first-occurrence
// order over the corpus it was built from.
class Vocab {
 public:
  Vocab() = default;

  // Inserts the surface if unseen and returns its id.
  int add(const std::string& surface);

  // Returns the id, or -1 when unknown.
  int lookup(const std::string& surface) const;

  bool contains(const std::string& surface) const {
    return lookup(surface) >= 0;
  }

  const std::string& surface(int id) const;

  int size() const { return static_cast<int>(surfaces_.size()); }

  // Throws InvalidToken on an out-of-vocab word.
  std::vector<int> encode(const std::string& text) const;

  // Space-joined surfaces. Throws InvalidToken on an out-of-range id.
  std::string decode(std::span<const int> ids) const;

  const std::vector<std::string>& surfaces() const { return surfaces_; }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, int> ids_;
};

// Whitespace word-level vocabulary over the corpus lines, insertion order =
// first occurrence. Deterministic.
Vocab build_vocab(std::span<const std::string> corpus);

// One surface per line, line number = id.
void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace ctrace

#endif  // CTRACE_VOCAB_HPP_
