#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dualpath/error.hpp"

namespace dualpath {

// Byte-level tokenizer: token id == byte value, vocab of exactly 256.
// Deterministic and dependency-free; truncation keeps the prefix.
struct ByteTokenizer {
    static constexpr std::size_t vocab_size = 256;

    static std::vector<std::size_t> encode(const std::string& text, std::size_t max_len) {
        if (text.empty()) throw data_error("tokenizer: empty input text");
        const std::size_t n = std::min(text.size(), max_len);
        if (n == 0) throw data_error("tokenizer: max_len must be positive");
        std::vector<std::size_t> ids(n);
        for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<unsigned char>(text[i]);
        return ids;
    }

    static std::string decode(const std::vector<std::size_t>& ids) {
        std::string out;
        out.reserve(ids.size());
        for (std::size_t id : ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        return out;
    }
};

}  // namespace dualpath
