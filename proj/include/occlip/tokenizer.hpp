#pragma once

#include "occlip/vocab.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace occlip {

/// Word-level tokenizer over a closed vocabulary. Id 0 is padding, id 1 is
/// the unknown-word token.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    struct Encoded {
        std::vector<int> ids;             // context_length entries
        std::vector<std::uint8_t> mask;   // 1 for content tokens
        int length = 0;                   // number of content tokens kept
    };

    explicit Tokenizer(std::vector<std::string> words);

    /// Every word the world's caption templates and vocabulary can emit.
    static Tokenizer for_world(const WorldVocab& vocab);

    /// Lowercased words with punctuation removed.
    static std::vector<std::string> split(std::string_view text);

    /// Pads or truncates to context_length.
    Encoded encode(std::string_view text, int context_length) const;

    /// Number of words (no padding, no truncation).
    std::size_t count_tokens(std::string_view text) const { return split(text).size(); }

    int id(const std::string& word) const;
    int size() const { return static_cast<int>(words_.size()) + 2; }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace occlip
