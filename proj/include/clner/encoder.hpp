#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "clner/num/checkpoint.hpp"
#include "clner/num/random.hpp"
#include "clner/num/tensor.hpp"
#include "clner/types.hpp"

namespace clner::encoder {

// Whitespace-token vocabulary. Ids 0 and 1 are reserved for padding and
// unknown tokens; every other id maps to exactly one token.
class Vocab {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr const char* kPadToken = "<pad>";
    static constexpr const char* kUnkToken = "<unk>";

    Vocab();

    // Tokens are added in first-seen order.
    static Vocab build(std::span<const Sentence> sentences);

    std::size_t add(const std::string& token);
    std::size_t id(const std::string& token) const;
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    std::size_t size() const { return tokens_.size(); }
    std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const;

    // One token per line; the line number is the id.
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> ids_;
};

struct EncoderConfig {
    std::size_t vocab_size = 2;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t max_len = 128;
    double dropout = 0.1;
};

// Token + position embeddings, one multi-head self-attention layer with a
// residual connection and layer norm, then dropout. Produces one dim-sized
// vector per token.
class Encoder {
public:
    Encoder(const EncoderConfig& config, num::Rng& init_rng);

    // ids.size() must lie in [1, max_len]. With train == false the result is
    // deterministic and rng is not touched.
    num::Tensor encode(std::span<const std::size_t> ids, bool train, num::Rng& rng) const;

    const EncoderConfig& config() const { return config_; }
    num::NamedTensors named_parameters() const;
    std::vector<num::Tensor> parameters() const;
    void set_trainable(bool trainable);

private:
    EncoderConfig config_;
    num::Tensor token_emb_;
    num::Tensor pos_emb_;
    num::Tensor wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    num::Tensor ln_gain_, ln_bias_;
};

}  // namespace clner::encoder
