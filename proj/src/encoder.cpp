#include "clner/encoder.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "clner/errors.hpp"
#include "clner/num/ops.hpp"

namespace clner::encoder {

Vocab::Vocab() {
    add(kPadToken);
    add(kUnkToken);
}

Vocab Vocab::build(std::span<const Sentence> sentences) {
    Vocab v;
    for (const auto& s : sentences) {
        for (const auto& tok : s.tokens) v.add(tok);
    }
    return v;
}

std::size_t Vocab::add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    const std::size_t id = tokens_.size();
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

std::size_t Vocab::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocab::encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) os << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open vocabulary " + path.string());
    Vocab v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (v.ids_.contains(line)) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate token '" + line + "'");
        }
        v.add(line);
    }
    if (v.size() < 2 || v.tokens_[kPad] != kPadToken || v.tokens_[kUnk] != kUnkToken) {
        throw DataError(path.string() + ": first two lines must be the reserved tokens");
    }
    return v;
}

namespace {

num::Tensor uniform_param(num::Shape shape, double bound, num::Rng& rng) {
    std::vector<double> v(num::shape_size(shape));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return num::Tensor::from(std::move(shape), std::move(v), true);
}

num::Tensor normal_param(num::Shape shape, double stddev, num::Rng& rng) {
    std::vector<double> v(num::shape_size(shape));
    for (double& x : v) x = stddev * rng.normal();
    return num::Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Encoder::Encoder(const EncoderConfig& config, num::Rng& init_rng) : config_(config) {
    if (config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0) {
        throw std::invalid_argument("encoder: dim must be a positive multiple of heads");
    }
    if (config.vocab_size < 2) throw std::invalid_argument("encoder: vocabulary must include the reserved ids");
    if (config.max_len == 0) throw std::invalid_argument("encoder: max_len must be positive");
    if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw std::invalid_argument("encoder: dropout must lie in [0, 1)");
    const std::size_t d = config.dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    token_emb_ = normal_param({config.vocab_size, d}, 0.5, init_rng);
    pos_emb_ = normal_param({config.max_len, d}, 0.1, init_rng);
    wq_ = uniform_param({d, d}, bound, init_rng);
    bq_ = num::Tensor::zeros({1, d}, true);
    wk_ = uniform_param({d, d}, bound, init_rng);
    bk_ = num::Tensor::zeros({1, d}, true);
    wv_ = uniform_param({d, d}, bound, init_rng);
    bv_ = num::Tensor::zeros({1, d}, true);
    wo_ = uniform_param({d, d}, bound, init_rng);
    bo_ = num::Tensor::zeros({1, d}, true);
    ln_gain_ = num::Tensor::full({1, d}, 1.0, true);
    ln_bias_ = num::Tensor::zeros({1, d}, true);
}

num::Tensor Encoder::encode(std::span<const std::size_t> ids, bool train, num::Rng& rng) const {
    const std::size_t n = ids.size();
    if (n == 0) throw std::invalid_argument("encode: empty sentence");
    if (n > config_.max_len) {
        throw std::invalid_argument("encode: sentence of " + std::to_string(n) + " tokens exceeds max_len " +
                                    std::to_string(config_.max_len));
    }
    using namespace num;
    Tensor e = add(embedding(token_emb_, ids), slice(pos_emb_, 0, 0, n));
    Tensor q = add(matmul(e, wq_), bq_);
    Tensor k = add(matmul(e, wk_), bk_);
    Tensor v = add(matmul(e, wv_), bv_);
    const std::size_t dk = config_.dim / config_.heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Tensor> head_out;
    head_out.reserve(config_.heads);
    for (std::size_t h = 0; h < config_.heads; ++h) {
        Tensor qh = config_.heads == 1 ? q : slice(q, 1, h * dk, (h + 1) * dk);
        Tensor kh = config_.heads == 1 ? k : slice(k, 1, h * dk, (h + 1) * dk);
        Tensor vh = config_.heads == 1 ? v : slice(v, 1, h * dk, (h + 1) * dk);
        Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), 1);
        head_out.push_back(matmul(attn, vh));
    }
    Tensor joined = config_.heads == 1 ? head_out[0] : concat(head_out, 1);
    Tensor o = add(matmul(joined, wo_), bo_);
    Tensor hidden = layer_norm(add(e, o), ln_gain_, ln_bias_);
    return dropout(hidden, config_.dropout, train, rng);
}

num::NamedTensors Encoder::named_parameters() const {
    return {{"encoder.token_emb", token_emb_}, {"encoder.pos_emb", pos_emb_}, {"encoder.attn.wq", wq_},
            {"encoder.attn.bq", bq_},          {"encoder.attn.wk", wk_},      {"encoder.attn.bk", bk_},
            {"encoder.attn.wv", wv_},          {"encoder.attn.bv", bv_},      {"encoder.attn.wo", wo_},
            {"encoder.attn.bo", bo_},          {"encoder.ln.gain", ln_gain_}, {"encoder.ln.bias", ln_bias_}};
}

std::vector<num::Tensor> Encoder::parameters() const {
    std::vector<num::Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

void Encoder::set_trainable(bool trainable) {
    for (auto& t : parameters()) t.set_requires_grad(trainable);
}

}  // namespace clner::encoder
