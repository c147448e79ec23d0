#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace edje {

using TokenId = std::uint32_t;

/// Word-level vocabulary. Ids are dense; the first five are reserved.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kUnk = 4;
  static constexpr std::size_t kReserved = 5;

  Vocabulary();

  /// Keeps the most frequent words (ties broken lexicographically) until the
  /// vocabulary, reserved tokens included, holds `max_size` entries.
  static Vocabulary build(std::span<const std::string> captions, std::size_t max_size);

  /// Text file of `token<TAB>id` lines sorted by id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId lookup(std::string_view word) const;
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  static bool is_special(TokenId id) noexcept { return id < kReserved; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(std::string word);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Lowercases and splits on whitespace; each punctuation character becomes
/// its own word.
std::vector<std::string> split_words(std::string_view caption);

/// [CLS] w_1 ... w_k [SEP], k <= max_len - 2 (trailing words dropped).
struct TokenizedText {
  std::vector<TokenId> ids;
  std::vector<unsigned char> attention_mask;
  std::string caption;

  std::size_t content_size() const noexcept { return ids.size() - 2; }
  std::span<const TokenId> content() const {
    return std::span<const TokenId>(ids).subspan(1, content_size());
  }
};

/// An empty caption tokenizes to [CLS] [UNK] [SEP].
TokenizedText tokenize(std::string_view caption, const Vocabulary& vocab, std::size_t max_len);

}  // namespace edje
