#include "padapter/vocab.hpp"

#include <algorithm>
#include <sstream>

#include "padapter/errors.hpp"

namespace padapter::vocab {

const std::vector<std::string>& words() {
    static const std::vector<std::string> table = [] {
        std::vector<std::string> w = {"<pad>", "|", "object", "background"};
        for (const auto* group : {&kFamilies, &kOrientations, &kScales, &kColors, &kShapes, &kFills})
            w.insert(w.end(), group->begin(), group->end());
        return w;
    }();
    return table;
}

std::size_t size() { return words().size(); }

TokenId id(std::string_view word) {
    const auto& w = words();
    auto it = std::find(w.begin(), w.end(), word);
    if (it == w.end() || it == w.begin()) throw ContractError("unknown prompt token '" + std::string(word) + "'");
    return static_cast<TokenId>(it - w.begin());
}

const std::string& word(TokenId id) {
    if (id >= size()) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
    return words()[id];
}

bool contains(std::string_view word) {
    const auto& w = words();
    return std::find(w.begin() + 1, w.end(), word) != w.end();
}

Tokens parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    Tokens out;
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
}

std::string render(const Tokens& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += word(tokens[i]);
    }
    return out;
}

}  // namespace padapter::vocab

namespace padapter {

Tokens compose_prompt(const Tokens& fg, const Tokens& bg) {
    for (const Tokens* part : {&fg, &bg})
        for (TokenId t : *part)
            if (t == vocab::kPad || t >= vocab::size())
                throw ContractError("compose_prompt: token id " + std::to_string(t) + " outside vocabulary");
    Tokens out = fg;
    if (!fg.empty() && !bg.empty()) out.push_back(vocab::kSep);
    out.insert(out.end(), bg.begin(), bg.end());
    return out;
}

}  // namespace padapter
