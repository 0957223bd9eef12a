#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace padapter {

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

// Closed prompt vocabulary shared by the data generator, the backbone text
// encoder and the embedder. Id 0 is padding, id 1 the prompt separator "|".
namespace vocab {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kSep = 1;

std::size_t size();
const std::vector<std::string>& words();
TokenId id(std::string_view word);  // ContractError when unknown
const std::string& word(TokenId id);
bool contains(std::string_view word);

// Whitespace-separated words; a bare "|" becomes the separator token.
Tokens parse(std::string_view text);
std::string render(const Tokens& tokens);

inline const std::vector<std::string> kColors = {"red",   "green", "blue",  "yellow", "cyan", "magenta",
                                                 "orange", "purple", "white", "black", "gray", "brown"};
inline const std::vector<std::string> kFamilies = {"stripes", "checker", "gradient", "blobs"};
inline const std::vector<std::string> kOrientations = {"horizontal", "vertical", "diagonal"};
inline const std::vector<std::string> kScales = {"fine", "coarse"};
inline const std::vector<std::string> kShapes = {"circle", "square", "triangle", "diamond", "ring"};
inline const std::vector<std::string> kFills = {"solid", "striped", "dotted"};

}  // namespace vocab

// [fg, "|", bg]; the separator is dropped when either side is empty.
Tokens compose_prompt(const Tokens& fg, const Tokens& bg);

}  // namespace padapter
