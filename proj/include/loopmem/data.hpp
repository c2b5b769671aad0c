#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loopmem/error.hpp"
#include "loopmem/rng.hpp"
#include "loopmem/tokens.hpp"

namespace loopmem {

/// Byte-level vocabulary: ids 0..255 are raw bytes, 256 marks a document start.
inline constexpr TokenId kBosToken = 256;
inline constexpr std::size_t kByteVocab = 257;

/// [BOS, byte0, byte1, ...]
inline std::vector<TokenId> tokenize_bytes(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size() + 1);
    out.push_back(kBosToken);
    for (char c : text) {
        out.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    return out;
}

/// Inverse of tokenize_bytes; BOS markers are dropped.
inline std::string detokenize(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t == kBosToken) {
            continue;
        }
        if (t < 0 || t > 255) {
            throw IndexError("token " + std::to_string(t) + " is not a byte");
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

struct SourceFile {
    std::string path;
    std::size_t bytes = 0;
};

/// Concatenated token stream of BOS-separated documents.
struct Corpus {
    std::vector<TokenId> tokens;
    std::vector<std::size_t> doc_offsets;  // index of each document's BOS
    std::vector<SourceFile> manifest;

    void add_document(std::string_view text) {
        doc_offsets.push_back(tokens.size());
        auto ids = tokenize_bytes(text);
        tokens.insert(tokens.end(), ids.begin(), ids.end());
    }

    static Corpus from_texts(std::span<const std::string> texts) {
        Corpus c;
        for (const auto& t : texts) {
            c.add_document(t);
        }
        return c;
    }

    /// One document per file.
    static Corpus from_files(std::span<const std::filesystem::path> paths) {
        Corpus c;
        for (const auto& p : paths) {
            std::ifstream in(p, std::ios::binary);
            if (!in) {
                throw IoError("cannot read corpus file " + p.string());
            }
            std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            c.manifest.push_back({p.string(), text.size()});
            c.add_document(text);
        }
        return c;
    }
};

struct TokenBatch {
    TokenGrid inputs;
    TokenGrid targets;  // inputs shifted left by one within each window
};

/// Seeded epoch-wise permutation of disjoint length-T windows. Window w covers
/// inputs [w*T, w*T + T) and targets one position later. Each epoch yields
/// floor((N - 1) / (B * T)) batches; epoch e uses permutation seed mix(seed, e).
class BatchIterator {
public:
    BatchIterator(std::shared_ptr<const std::vector<TokenId>> tokens, std::size_t batch, std::size_t seq_len,
                  std::uint64_t seed)
        : tokens_(std::move(tokens)), batch_(batch), seq_len_(seq_len), seed_(seed) {
        if (batch_ == 0 || seq_len_ == 0) {
            throw ConfigError("batch size and sequence length must be positive");
        }
        const std::size_t need = batch_ * seq_len_ + 1;
        if (tokens_->size() < need) {
            throw ConfigError("corpus has " + std::to_string(tokens_->size()) + " tokens, batching " +
                              std::to_string(batch_) + "x" + std::to_string(seq_len_) + " needs at least " +
                              std::to_string(need));
        }
        per_epoch_ = (tokens_->size() - 1) / (batch_ * seq_len_);
    }

    BatchIterator(const std::vector<TokenId>& tokens, std::size_t batch, std::size_t seq_len, std::uint64_t seed)
        : BatchIterator(std::make_shared<const std::vector<TokenId>>(tokens), batch, seq_len, seed) {}

    std::size_t batches_per_epoch() const noexcept { return per_epoch_; }

    /// Number of batches delivered so far.
    std::size_t position() const noexcept { return position_; }

    /// Jumps to absolute batch index `position` (used when resuming).
    void seek(std::size_t position) { position_ = position; }

    /// Window start offsets (in tokens) of batch `index`, without advancing.
    std::vector<std::size_t> window_starts(std::size_t index) {
        const std::size_t epoch = index / per_epoch_;
        const std::size_t within = index % per_epoch_;
        const auto& order = epoch_order(epoch);
        std::vector<std::size_t> starts;
        for (std::size_t b = 0; b < batch_; ++b) {
            starts.push_back(order[within * batch_ + b] * seq_len_);
        }
        return starts;
    }

    TokenBatch batch_at(std::size_t index) {
        TokenBatch out;
        out.inputs = {batch_, seq_len_, {}};
        out.targets = {batch_, seq_len_, {}};
        out.inputs.ids.reserve(batch_ * seq_len_);
        out.targets.ids.reserve(batch_ * seq_len_);
        const auto& tok = *tokens_;
        for (std::size_t start : window_starts(index)) {
            for (std::size_t t = 0; t < seq_len_; ++t) {
                out.inputs.ids.push_back(tok[start + t]);
                out.targets.ids.push_back(tok[start + t + 1]);
            }
        }
        return out;
    }

    TokenBatch next() { return batch_at(position_++); }

private:
    const std::vector<std::size_t>& epoch_order(std::size_t epoch) {
        if (!order_.empty() && order_epoch_ == epoch) {
            return order_;
        }
        order_.resize(per_epoch_ * batch_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng(mix_seed(seed_, epoch));
        rng.shuffle(order_);
        order_epoch_ = epoch;
        return order_;
    }

    std::shared_ptr<const std::vector<TokenId>> tokens_;
    std::size_t batch_;
    std::size_t seq_len_;
    std::uint64_t seed_;
    std::size_t per_epoch_ = 0;
    std::size_t position_ = 0;
    std::vector<std::size_t> order_;
    std::size_t order_epoch_ = 0;
};

// Cached token stream: 8-byte magic followed by little-endian uint16 ids.
inline constexpr char kTokenCacheMagic[8] = {'L', 'M', 'T', 'O', 'K', 'E', 'N', '1'};

inline void write_token_cache(const std::filesystem::path& path, std::span<const TokenId> tokens) {
    std::string bytes(kTokenCacheMagic, sizeof kTokenCacheMagic);
    bytes.reserve(bytes.size() + 2 * tokens.size());
    for (TokenId t : tokens) {
        if (t < 0 || t > 0xFFFF) {
            throw IndexError("token " + std::to_string(t) + " does not fit in 16 bits");
        }
        bytes.push_back(static_cast<char>(t & 0xFF));
        bytes.push_back(static_cast<char>((t >> 8) & 0xFF));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
        throw IoError("cannot write token cache " + path.string());
    }
}

inline std::vector<TokenId> read_token_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read token cache " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof kTokenCacheMagic || bytes.compare(0, sizeof kTokenCacheMagic,
                                                                std::string(kTokenCacheMagic, sizeof kTokenCacheMagic)) != 0) {
        throw IoError(path.string() + " is not a token cache (bad magic)");
    }
    if ((bytes.size() - sizeof kTokenCacheMagic) % 2 != 0) {
        throw IoError(path.string() + " has a truncated token stream");
    }
    std::vector<TokenId> out;
    out.reserve((bytes.size() - sizeof kTokenCacheMagic) / 2);
    for (std::size_t i = sizeof kTokenCacheMagic; i < bytes.size(); i += 2) {
        const auto lo = static_cast<unsigned char>(bytes[i]);
        const auto hi = static_cast<unsigned char>(bytes[i + 1]);
        out.push_back(static_cast<TokenId>(lo | (hi << 8)));
    }
    return out;
}

}  // namespace loopmem
