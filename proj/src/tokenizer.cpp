#include "occlip/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace occlip {

Tokenizer::Tokenizer(std::vector<std::string> words) : words_(std::move(words))
{
    for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i) + 2);
}

Tokenizer Tokenizer::for_world(const WorldVocab& vocab)
{
    std::set<std::string> seen;
    std::vector<std::string> words;
    auto push = [&](std::string_view phrase) {
        for (auto& w : split(phrase)) {
            if (seen.insert(w).second) words.push_back(w);
        }
    };
    push("a photo of a and in background");
    for (const auto& v : vocab.attributes) push(v);
    for (const auto& v : vocab.object_classes) push(v);
    for (const auto& v : vocab.backgrounds) push(v);
    for (const auto& v : vocab.relations) push(v);
    return Tokenizer(std::move(words));
}

std::vector<std::string> Tokenizer::split(std::string_view text)
{
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

int Tokenizer::id(const std::string& word) const
{
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

Tokenizer::Encoded Tokenizer::encode(std::string_view text, int context_length) const
{
    Encoded e;
    e.ids.assign(static_cast<std::size_t>(std::max(context_length, 0)), kPad);
    e.mask.assign(e.ids.size(), 0);
    const auto words = split(text);
    const std::size_t n = std::min(words.size(), e.ids.size());
    for (std::size_t i = 0; i < n; ++i) {
        e.ids[i] = id(words[i]);
        e.mask[i] = 1;
    }
    e.length = static_cast<int>(n);
    return e;
}

}  // namespace occlip
