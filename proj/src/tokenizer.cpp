#include "edje/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "edje/errors.hpp"

namespace edje {

Vocabulary::Vocabulary() {
  for (const char* special : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"}) add(special);
}

void Vocabulary::add(std::string word) {
  if (ids_.contains(word)) throw DataError("duplicate vocabulary token '" + word + "'");
  ids_.emplace(word, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(word));
}

Vocabulary Vocabulary::build(std::span<const std::string> captions, std::size_t max_size) {
  if (max_size < kReserved) throw ConfigError("vocabulary size below reserved token count");
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : captions)
    for (auto& w : split_words(caption)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (auto& [word, count] : ranked) {
    if (vocab.size() >= max_size) break;
    vocab.add(word);
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("vocabulary file " + path.string() + " not found");
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected token<TAB>id");
    }
    const std::string token = line.substr(0, tab);
    std::size_t id = 0;
    const char* first = line.data() + tab + 1;
    const char* last = line.data() + line.size();
    auto [end, ec] = std::from_chars(first, last, id);
    if (ec != std::errc() || end != last) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad id");
    }
    if (id < kReserved) {
      if (vocab.tokens_[id] != token) {
        throw FormatError(path.string() + ": reserved id " + std::to_string(id) + " is '" + token + "'");
      }
      continue;
    }
    if (id != vocab.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": ids must be dense and sorted");
    }
    vocab.add(token);
  }
  return vocab;
}

TokenId Vocabulary::lookup(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::string> split_words(std::string_view caption) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return words;
}

TokenizedText tokenize(std::string_view caption, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw ConfigError("tokenize: max_len must leave room for [CLS] w [SEP]");
  TokenizedText out;
  out.caption = std::string(caption);
  out.ids.push_back(Vocabulary::kCls);
  const auto words = split_words(caption);
  if (words.empty()) {
    out.ids.push_back(Vocabulary::kUnk);
  } else {
    const std::size_t keep = std::min(words.size(), max_len - 2);
    for (std::size_t i = 0; i < keep; ++i) out.ids.push_back(vocab.lookup(words[i]));
  }
  out.ids.push_back(Vocabulary::kSep);
  out.attention_mask.assign(out.ids.size(), 1);
  return out;
}

}  // namespace edje
