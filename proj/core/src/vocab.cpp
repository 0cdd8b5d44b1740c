#include "ctrace/vocab.hpp"

#include <fstream>
#include <sstream>

#include "ctrace/errors.hpp"

namespace ctrace {

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string word;
  while (in >> word) words.push_back(word);
  return words;
}

int Vocab::add(const std::string& surface) {
  auto it = ids_.find(surface);
  if (it != ids_.end()) return it->second;
  int id = static_cast<int>(surfaces_.size());
  surfaces_.push_back(surface);
  ids_.emplace(surface, id);
  return id;
}

int Vocab::lookup(const std::string& surface) const {
  auto it = ids_.find(surface);
  return it == ids_.end() ? -1 : it->second;
}

const std::string& Vocab::surface(int id) const {
  if (id < 0 || id >= size())
    throw InvalidToken("token id " + std::to_string(id) + " out of range");
  return surfaces_[id];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& word : tokenize(text)) {
    int id = lookup(word);
    if (id < 0) throw InvalidToken("out-of-vocab word: " + word);
    ids.push_back(id);
  }
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += surface(ids[i]);
  }
  return out;
}

Vocab build_vocab(std::span<const std::string> corpus) {
  Vocab vocab;
  for (const auto& line : corpus)
    for (const auto& word : tokenize(line)) vocab.add(word);
  return vocab;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file: " + path);
  for (const auto& surface : vocab.surfaces()) out << surface << '\n';
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read vocab file: " + path);
  Vocab vocab;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) throw ParseError("empty vocab surface", line_no);
    if (vocab.contains(line))
      throw ParseError("duplicate vocab surface: " + line, line_no);
    vocab.add(line);
  }
  return vocab;
}

}  // namespace ctrace
