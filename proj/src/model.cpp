#include "engage/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "engage/util.hpp"
#include "json.hpp"

namespace engage {

using json = nlohmann::json;
using nn::MatrixXd;
using nn::VectorXd;

std::string mode_name(ModelMode mode) {
    switch (mode) {
        case ModelMode::generator: return "generator";
        case ModelMode::reward: return "reward";
        case ModelMode::policy: return "policy";
        case ModelMode::value: return "value";
    }
    return "generator";
}

ModelMode mode_from_name(const std::string& name) {
    if (name == "generator") return ModelMode::generator;
    if (name == "reward") return ModelMode::reward;
    if (name == "policy") return ModelMode::policy;
    if (name == "value") return ModelMode::value;
    throw std::runtime_error("checkpoint: unknown mode tag " + name);
}

namespace {
bool has_token_head(ModelMode m) {
    return m == ModelMode::generator || m == ModelMode::policy;
}
bool has_scalar_head(ModelMode m) { return !has_token_head(m); }
}  // namespace

void ModelConfig::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw std::runtime_error(std::string("model config: ") + what);
    };
    require(n_queries >= 1, "n_queries must be >= 1");
    require(perceiver_layers >= 1, "perceiver_layers must be >= 1");
    require(decoder_layers >= 1, "decoder_layers must be >= 1");
    require(d_model >= 1 && n_heads >= 1, "d_model and n_heads must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    // 0 means "fill in from the corpus vocabulary"
    require(vocab_size == 0 || vocab_size >= 3, "vocab_size must cover the special tokens");
    require(max_comment_len >= 1, "max_comment_len must be >= 1");
    require(max_frames >= 1 && max_patches >= 1 && feature_dim >= 1,
            "feature shape maxima must be positive");
}

void DecodeParams::validate() const {
    if (temperature <= 0.0) throw std::runtime_error("decode: temperature must be positive");
    if (strategy == DecodeStrategy::top_k && top_k < 1) {
        throw std::runtime_error("decode: top_k must be >= 1");
    }
    if (max_len < 1 || n_samples < 1) {
        throw std::runtime_error("decode: max_len and n_samples must be >= 1");
    }
}

Vocab Vocab::build(const Corpus& corpus) {
    std::set<std::string> words;
    for (const Comment& c : corpus.comments()) {
        std::string cur;
        for (char ch : c.text + " ") {
            if (ch == ' ' || ch == '\t') {
                if (!cur.empty()) words.insert(cur), cur.clear();
            } else {
                cur += ch;
            }
        }
    }
    std::vector<std::string> tokens = {"<bos>", "<eos>", "<unk>"};
    tokens.insert(tokens.end(), words.begin(), words.end());
    return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
    Vocab v;
    v.tokens = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
        v.ids[v.tokens[i]] = static_cast<int>(i);
    }
    return v;
}

int Vocab::id_of(const std::string& word) const {
    auto it = ids.find(word);
    return it == ids.end() ? kUnk : it->second;
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> out;
    std::string cur;
    for (char ch : std::string(text) + " ") {
        if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r') {
            if (!cur.empty()) out.push_back(id_of(cur)), cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids_in) const {
    std::string out;
    for (int id : ids_in) {
        if (id < 0 || id >= size()) throw std::runtime_error("vocab: token id out of range");
        if (!out.empty()) out += ' ';
        out += tokens[static_cast<std::size_t>(id)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// caches

namespace {

struct BlockCache {
    MatrixXd x_in;
    nn::LayerNormCache ln1;
    MatrixXd ln1_out;
    nn::AttentionCache attn;
    MatrixXd x_mid;
    nn::LayerNormCache ln2;
    MatrixXd ln2_out;
    MatrixXd ffn_pre;
    MatrixXd ffn_act;
};

struct PerceiverCache {
    MatrixXd kv_raw;  // features + positional rows
    std::vector<Eigen::Index> pos_rows;
    nn::LayerNormCache kv_norm;
    MatrixXd kv;
    std::vector<BlockCache> blocks;
    MatrixXd x_final;
    nn::LayerNormCache out_norm;
    MatrixXd prompts;
};

struct DecoderCache {
    std::vector<int> input_tokens;
    MatrixXd x0;
    std::vector<BlockCache> blocks;
    MatrixXd x_final;
    nn::LayerNormCache out_norm;
    MatrixXd h;  // final hidden states, all rows
};

struct BlockParams {
    nn::Tensor *ln1_g, *ln1_b;
    nn::AttentionParams attn;
    nn::Tensor *ln2_g, *ln2_b;
    nn::Tensor *w1, *b1, *w2, *b2;
};

BlockParams block_params(nn::ParamStore& ps, const std::string& prefix, int n_heads) {
    BlockParams p;
    p.ln1_g = &ps.at(prefix + ".ln1.g");
    p.ln1_b = &ps.at(prefix + ".ln1.b");
    p.attn = {&ps.at(prefix + ".attn.wq"), &ps.at(prefix + ".attn.bq"),
              &ps.at(prefix + ".attn.wk"), &ps.at(prefix + ".attn.bk"),
              &ps.at(prefix + ".attn.wv"), &ps.at(prefix + ".attn.bv"),
              &ps.at(prefix + ".attn.wo"), &ps.at(prefix + ".attn.bo"), n_heads};
    p.ln2_g = &ps.at(prefix + ".ln2.g");
    p.ln2_b = &ps.at(prefix + ".ln2.b");
    p.w1 = &ps.at(prefix + ".ffn.w1");
    p.b1 = &ps.at(prefix + ".ffn.b1");
    p.w2 = &ps.at(prefix + ".ffn.w2");
    p.b2 = &ps.at(prefix + ".ffn.b2");
    return p;
}

// Pre-LN residual block. kv == nullptr means causal self-attention.
MatrixXd block_forward(const MatrixXd& x, const BlockParams& p, const MatrixXd* kv,
                       BlockCache* cache) {
    nn::LayerNormCache ln1c;
    MatrixXd ln1_out = nn::layer_norm(x, p.ln1_g->value, p.ln1_b->value, cache ? &ln1c : nullptr);
    nn::AttentionCache attnc;
    MatrixXd attn_out = nn::attention(ln1_out, kv ? *kv : ln1_out, p.attn, kv == nullptr,
                                      cache ? &attnc : nullptr);
    MatrixXd x_mid = x + attn_out;
    nn::LayerNormCache ln2c;
    MatrixXd ln2_out =
        nn::layer_norm(x_mid, p.ln2_g->value, p.ln2_b->value, cache ? &ln2c : nullptr);
    MatrixXd ffn_pre = (ln2_out * p.w1->value).rowwise() + p.b1->value.row(0);
    MatrixXd ffn_act = nn::gelu(ffn_pre);
    MatrixXd out = x_mid + ((ffn_act * p.w2->value).rowwise() + p.b2->value.row(0));
    if (cache) {
        cache->x_in = x;
        cache->ln1 = std::move(ln1c);
        cache->ln1_out = std::move(ln1_out);
        cache->attn = std::move(attnc);
        cache->x_mid = std::move(x_mid);
        cache->ln2 = std::move(ln2c);
        cache->ln2_out = std::move(ln2_out);
        cache->ffn_pre = std::move(ffn_pre);
        cache->ffn_act = std::move(ffn_act);
    }
    return out;
}

// Returns dx for the block input; dkv accumulates the cross-attention
// key/value gradient when kv was external.
MatrixXd block_backward(const MatrixXd& dout, const BlockParams& p, const BlockCache& cache,
                        bool self_attention, MatrixXd* dkv) {
    // ffn
    p.w2->grad += cache.ffn_act.transpose() * dout;
    p.b2->grad.row(0) += dout.colwise().sum();
    MatrixXd dffn_act = dout * p.w2->value.transpose();
    MatrixXd dffn_pre = nn::gelu_backward(dffn_act, cache.ffn_pre);
    p.w1->grad += cache.ln2_out.transpose() * dffn_pre;
    p.b1->grad.row(0) += dffn_pre.colwise().sum();
    MatrixXd dln2_out = dffn_pre * p.w1->value.transpose();
    MatrixXd dx_mid =
        dout + nn::layer_norm_backward(dln2_out, cache.ln2, p.ln2_g->value, p.ln2_g->grad,
                                       p.ln2_b->grad);
    // attention
    MatrixXd dq_in, dkv_in;
    nn::attention_backward(dx_mid, p.attn, cache.attn, dq_in, dkv_in);
    MatrixXd dln1_out;
    if (self_attention) {
        dln1_out = dq_in + dkv_in;
    } else {
        dln1_out = dq_in;
        *dkv += dkv_in;
    }
    MatrixXd dx = dx_mid + nn::layer_norm_backward(dln1_out, cache.ln1, p.ln1_g->value,
                                                   p.ln1_g->grad, p.ln1_b->grad);
    return dx;
}

}  // namespace

struct CommentModel::TrainForward {
    PerceiverCache per;
    DecoderCache dec;
    MatrixXd logits;   // token rows only
    VectorXd scalars;  // token rows only
};

// ---------------------------------------------------------------------------

CommentModel::CommentModel(ModelConfig config, ModelMode mode, Vocab vocab,
                           std::uint64_t init_seed)
    : config_(config), mode_(mode), vocab_(std::move(vocab)) {
    if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
    if (config_.vocab_size != vocab_.size() || vocab_.size() < 3) {
        throw std::runtime_error("model: config vocab_size disagrees with the vocabulary");
    }
    config_.validate();
    register_params();
    init_values(init_seed);
}

CommentModel::~CommentModel() = default;
CommentModel::CommentModel(CommentModel&&) noexcept = default;
CommentModel& CommentModel::operator=(CommentModel&&) noexcept = default;
CommentModel::CommentModel(const CommentModel&) = default;
CommentModel& CommentModel::operator=(const CommentModel&) = default;

void CommentModel::TrainForwardDeleter::operator()(TrainForward* p) const { delete p; }

void CommentModel::set_mode(ModelMode mode) {
    if (has_token_head(mode) != has_token_head(mode_)) {
        throw std::runtime_error("model: cannot switch between head families via set_mode");
    }
    mode_ = mode;
}

void CommentModel::register_params() {
    const int d = config_.d_model;
    const int dff = 4 * d;
    auto add_block = [&](const std::string& prefix) {
        params_.add(prefix + ".ln1.g", 1, d);
        params_.add(prefix + ".ln1.b", 1, d);
        params_.add(prefix + ".attn.wq", d, d);
        params_.add(prefix + ".attn.bq", 1, d);
        params_.add(prefix + ".attn.wk", d, d);
        params_.add(prefix + ".attn.bk", 1, d);
        params_.add(prefix + ".attn.wv", d, d);
        params_.add(prefix + ".attn.bv", 1, d);
        params_.add(prefix + ".attn.wo", d, d);
        params_.add(prefix + ".attn.bo", 1, d);
        params_.add(prefix + ".ln2.g", 1, d);
        params_.add(prefix + ".ln2.b", 1, d);
        params_.add(prefix + ".ffn.w1", d, dff);
        params_.add(prefix + ".ffn.b1", 1, dff);
        params_.add(prefix + ".ffn.w2", dff, d);
        params_.add(prefix + ".ffn.b2", 1, d);
    };

    params_.add("perceiver.pos_table", static_cast<Eigen::Index>(config_.max_frames) *
                                           config_.max_patches,
                config_.feature_dim);
    params_.add("perceiver.kv_proj.w", config_.feature_dim, d);
    params_.add("perceiver.kv_proj.b", 1, d);
    params_.add("perceiver.kv_norm.g", 1, d);
    params_.add("perceiver.kv_norm.b", 1, d);
    params_.add("perceiver.queries", config_.n_queries, d);
    for (int i = 0; i < config_.perceiver_layers; ++i) {
        add_block("perceiver.L" + std::to_string(i));
    }
    params_.add("perceiver.out_norm.g", 1, d);
    params_.add("perceiver.out_norm.b", 1, d);

    params_.add("decoder.tok_emb", config_.vocab_size, d);
    params_.add("decoder.pos_emb", config_.n_queries + config_.max_comment_len + 2, d);
    for (int i = 0; i < config_.decoder_layers; ++i) {
        add_block("decoder.L" + std::to_string(i));
    }
    params_.add("decoder.out_norm.g", 1, d);
    params_.add("decoder.out_norm.b", 1, d);

    if (has_token_head(mode_)) {
        params_.add("decoder.head.w", d, config_.vocab_size);
        params_.add("decoder.head.b", 1, config_.vocab_size);
    } else {
        params_.add("decoder.scalar.w", d, 1);
        params_.add("decoder.scalar.b", 1, 1);
    }
}

void CommentModel::init_values(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, "model_init"));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& t : params_.tensors()) {
        bool is_gain = t.name.ends_with(".g");
        bool is_bias = t.name.ends_with(".b") || t.name.ends_with("b1") || t.name.ends_with("b2") ||
                       t.name.ends_with("bq") || t.name.ends_with("bk") ||
                       t.name.ends_with("bv") || t.name.ends_with("bo");
        if (is_gain) {
            t.value.setOnes();
        } else if (is_bias) {
            t.value.setZero();
        } else {
            double std_dev = t.name == "decoder.scalar.w" ? 0.01 : 0.02;
            for (Eigen::Index i = 0; i < t.value.rows(); ++i) {
                for (Eigen::Index j = 0; j < t.value.cols(); ++j) {
                    t.value(i, j) = std_dev * gauss(rng);
                }
            }
        }
    }
}

void CommentModel::init_from(const CommentModel& other) {
    params_.copy_matching_from(other.params());
}

std::string CommentModel::params_fingerprint() const { return to_hex(params_.values_hash()); }

// ---------------------------------------------------------------------------
// forward

namespace {

PerceiverCache perceiver_forward(nn::ParamStore& ps, const ModelConfig& cfg, const Video& video,
                                 bool keep_cache) {
    if (static_cast<int>(video.feature_dim) != cfg.feature_dim) {
        throw std::runtime_error("perceive: video feature dim " +
                                 std::to_string(video.feature_dim) + " does not match config " +
                                 std::to_string(cfg.feature_dim));
    }
    if (static_cast<int>(video.frames) > cfg.max_frames ||
        static_cast<int>(video.patches) > cfg.max_patches) {
        throw std::runtime_error("perceive: video exceeds configured T/L maxima");
    }

    PerceiverCache pc;
    const Eigen::Index tl = static_cast<Eigen::Index>(video.frames) * video.patches;
    const auto& pos_table = ps.at("perceiver.pos_table").value;
    pc.kv_raw.resize(tl, cfg.feature_dim);
    pc.pos_rows.resize(static_cast<std::size_t>(tl));
    for (std::uint32_t t = 0; t < video.frames; ++t) {
        for (std::uint32_t l = 0; l < video.patches; ++l) {
            Eigen::Index row = static_cast<Eigen::Index>(t) * video.patches + l;
            Eigen::Index pos_row = static_cast<Eigen::Index>(t) * cfg.max_patches + l;
            for (int k = 0; k < cfg.feature_dim; ++k) {
                pc.kv_raw(row, k) = static_cast<double>(video.feature_at(t, l, k));
            }
            pc.kv_raw.row(row) += pos_table.row(pos_row);
            pc.pos_rows[static_cast<std::size_t>(row)] = pos_row;
        }
    }

    MatrixXd kv_pre = (pc.kv_raw * ps.at("perceiver.kv_proj.w").value).rowwise() +
                      ps.at("perceiver.kv_proj.b").value.row(0);
    pc.kv = nn::layer_norm(kv_pre, ps.at("perceiver.kv_norm.g").value,
                           ps.at("perceiver.kv_norm.b").value, keep_cache ? &pc.kv_norm : nullptr);

    MatrixXd x = ps.at("perceiver.queries").value;
    pc.blocks.resize(keep_cache ? static_cast<std::size_t>(cfg.perceiver_layers) : 0);
    for (int i = 0; i < cfg.perceiver_layers; ++i) {
        BlockParams bp = block_params(ps, "perceiver.L" + std::to_string(i), cfg.n_heads);
        x = block_forward(x, bp, &pc.kv, keep_cache ? &pc.blocks[static_cast<std::size_t>(i)]
                                                    : nullptr);
    }
    pc.x_final = x;
    pc.prompts = nn::layer_norm(x, ps.at("perceiver.out_norm.g").value,
                                ps.at("perceiver.out_norm.b").value,
                                keep_cache ? &pc.out_norm : nullptr);
    return pc;
}

DecoderCache decoder_forward(nn::ParamStore& ps, const ModelConfig& cfg, const MatrixXd& prompts,
                             const std::vector<int>& input_tokens, bool keep_cache) {
    const int d = cfg.d_model;
    const Eigen::Index n_q = cfg.n_queries;
    const Eigen::Index seq = n_q + static_cast<Eigen::Index>(input_tokens.size());
    const auto& tok_emb = ps.at("decoder.tok_emb").value;
    const auto& pos_emb = ps.at("decoder.pos_emb").value;
    if (seq > pos_emb.rows()) {
        throw std::runtime_error("decoder: sequence length exceeds the positional table");
    }

    DecoderCache dc;
    dc.input_tokens = input_tokens;
    dc.x0.resize(seq, d);
    dc.x0.topRows(n_q) = prompts;
    for (std::size_t i = 0; i < input_tokens.size(); ++i) {
        int tok = input_tokens[i];
        if (tok < 0 || tok >= cfg.vocab_size) {
            throw std::runtime_error("decoder: unknown token id " + std::to_string(tok));
        }
        dc.x0.row(n_q + static_cast<Eigen::Index>(i)) = tok_emb.row(tok);
    }
    dc.x0 += pos_emb.topRows(seq);

    MatrixXd x = dc.x0;
    dc.blocks.resize(keep_cache ? static_cast<std::size_t>(cfg.decoder_layers) : 0);
    for (int i = 0; i < cfg.decoder_layers; ++i) {
        BlockParams bp = block_params(ps, "decoder.L" + std::to_string(i), cfg.n_heads);
        x = block_forward(x, bp, nullptr, keep_cache ? &dc.blocks[static_cast<std::size_t>(i)]
                                                     : nullptr);
    }
    dc.x_final = x;
    dc.h = nn::layer_norm(x, ps.at("decoder.out_norm.g").value, ps.at("decoder.out_norm.b").value,
                          keep_cache ? &dc.out_norm : nullptr);
    return dc;
}

}  // namespace

Eigen::MatrixXd CommentModel::perceive(const Video& video) const {
    auto& ps = const_cast<nn::ParamStore&>(params_);
    return perceiver_forward(ps, config_, video, false).prompts;
}

CommentModel::ForwardHandle CommentModel::forward_train(const Video& video,
                                                        const std::vector<int>& input_tokens,
                                                        bool need_logits, bool need_scalars) {
    if (input_tokens.empty()) {
        throw std::runtime_error("forward_train: empty token input");
    }
    if (need_logits && !has_token_head(mode_)) {
        throw std::runtime_error("forward_train: no token head in mode " + mode_name(mode_));
    }
    if (need_scalars && !has_scalar_head(mode_)) {
        throw std::runtime_error("forward_train: no scalar head in mode " + mode_name(mode_));
    }
    ForwardHandle fwd(new TrainForward());
    fwd->per = perceiver_forward(params_, config_, video, true);
    fwd->dec = decoder_forward(params_, config_, fwd->per.prompts, input_tokens, true);
    const Eigen::Index n_q = config_.n_queries;
    const Eigen::Index n_tok = static_cast<Eigen::Index>(input_tokens.size());
    MatrixXd h_tok = fwd->dec.h.bottomRows(n_tok);
    if (need_logits) {
        fwd->logits = (h_tok * params_.at("decoder.head.w").value).rowwise() +
                      params_.at("decoder.head.b").value.row(0);
    }
    if (need_scalars) {
        fwd->scalars = (h_tok * params_.at("decoder.scalar.w").value).col(0).array() +
                       params_.at("decoder.scalar.b").value(0, 0);
    }
    (void)n_q;
    return fwd;
}

const Eigen::MatrixXd& CommentModel::logits(const TrainForward& fwd) const { return fwd.logits; }
const Eigen::VectorXd& CommentModel::scalars(const TrainForward& fwd) const { return fwd.scalars; }

void CommentModel::backward(TrainForward& fwd, const Eigen::MatrixXd& dlogits,
                            const Eigen::VectorXd& dscalars) {
    const Eigen::Index n_q = config_.n_queries;
    const Eigen::Index n_tok = static_cast<Eigen::Index>(fwd.dec.input_tokens.size());
    const Eigen::Index seq = n_q + n_tok;
    const int d = config_.d_model;

    MatrixXd dh = MatrixXd::Zero(seq, d);
    MatrixXd h_tok = fwd.dec.h.bottomRows(n_tok);
    if (dlogits.size() > 0) {
        auto& head_w = params_.at("decoder.head.w");
        auto& head_b = params_.at("decoder.head.b");
        head_w.grad += h_tok.transpose() * dlogits;
        head_b.grad.row(0) += dlogits.colwise().sum();
        dh.bottomRows(n_tok) += dlogits * head_w.value.transpose();
    }
    if (dscalars.size() > 0) {
        auto& sw = params_.at("decoder.scalar.w");
        auto& sb = params_.at("decoder.scalar.b");
        sw.grad += h_tok.transpose() * dscalars;
        sb.grad(0, 0) += dscalars.sum();
        dh.bottomRows(n_tok) += dscalars * sw.value.transpose();
    }

    MatrixXd dx = nn::layer_norm_backward(dh, fwd.dec.out_norm,
                                          params_.at("decoder.out_norm.g").value,
                                          params_.at("decoder.out_norm.g").grad,
                                          params_.at("decoder.out_norm.b").grad);
    for (int i = config_.decoder_layers - 1; i >= 0; --i) {
        BlockParams bp = block_params(params_, "decoder.L" + std::to_string(i), config_.n_heads);
        dx = block_backward(dx, bp, fwd.dec.blocks[static_cast<std::size_t>(i)], true, nullptr);
    }
    // embeddings
    auto& tok_emb = params_.at("decoder.tok_emb");
    auto& pos_emb = params_.at("decoder.pos_emb");
    pos_emb.grad.topRows(seq) += dx;
    for (std::size_t i = 0; i < fwd.dec.input_tokens.size(); ++i) {
        tok_emb.grad.row(fwd.dec.input_tokens[i]) +=
            dx.row(n_q + static_cast<Eigen::Index>(i));
    }

    // perceiver
    MatrixXd dprompts = dx.topRows(n_q);
    MatrixXd dxp = nn::layer_norm_backward(dprompts, fwd.per.out_norm,
                                           params_.at("perceiver.out_norm.g").value,
                                           params_.at("perceiver.out_norm.g").grad,
                                           params_.at("perceiver.out_norm.b").grad);
    MatrixXd dkv = MatrixXd::Zero(fwd.per.kv.rows(), d);
    for (int i = config_.perceiver_layers - 1; i >= 0; --i) {
        BlockParams bp = block_params(params_, "perceiver.L" + std::to_string(i), config_.n_heads);
        dxp = block_backward(dxp, bp, fwd.per.blocks[static_cast<std::size_t>(i)], false, &dkv);
    }
    params_.at("perceiver.queries").grad += dxp;

    MatrixXd dkv_pre = nn::layer_norm_backward(dkv, fwd.per.kv_norm,
                                               params_.at("perceiver.kv_norm.g").value,
                                               params_.at("perceiver.kv_norm.g").grad,
                                               params_.at("perceiver.kv_norm.b").grad);
    auto& kv_w = params_.at("perceiver.kv_proj.w");
    auto& kv_b = params_.at("perceiver.kv_proj.b");
    kv_w.grad += fwd.per.kv_raw.transpose() * dkv_pre;
    kv_b.grad.row(0) += dkv_pre.colwise().sum();
    MatrixXd dkv_raw = dkv_pre * kv_w.value.transpose();
    auto& pos_table = params_.at("perceiver.pos_table");
    for (std::size_t r = 0; r < fwd.per.pos_rows.size(); ++r) {
        pos_table.grad.row(fwd.per.pos_rows[r]) += dkv_raw.row(static_cast<Eigen::Index>(r));
    }
}

// ---------------------------------------------------------------------------
// incremental decoding

namespace {

class DecodeSession {
public:
    DecodeSession(const nn::ParamStore& ps, const ModelConfig& cfg)
        : ps_(const_cast<nn::ParamStore&>(ps)), cfg_(cfg) {
        const Eigen::Index max_rows = cfg.n_queries + cfg.max_comment_len + 2;
        k_.resize(static_cast<std::size_t>(cfg.decoder_layers));
        v_.resize(static_cast<std::size_t>(cfg.decoder_layers));
        for (int i = 0; i < cfg.decoder_layers; ++i) {
            k_[static_cast<std::size_t>(i)].resize(max_rows, cfg.d_model);
            v_[static_cast<std::size_t>(i)].resize(max_rows, cfg.d_model);
        }
    }

    // Feeds one embedding row (position already added); returns the
    // final-normed hidden state for that position.
    Eigen::RowVectorXd feed(Eigen::RowVectorXd x) {
        const int nh = cfg_.n_heads;
        const Eigen::Index dh = cfg_.d_model / nh;
        for (int li = 0; li < cfg_.decoder_layers; ++li) {
            BlockParams bp = block_params(ps_, "decoder.L" + std::to_string(li), nh);
            MatrixXd xr = x;
            MatrixXd a = nn::layer_norm(xr, bp.ln1_g->value, bp.ln1_b->value, nullptr);
            Eigen::RowVectorXd q = a.row(0) * bp.attn.wq->value + bp.attn.bq->value.row(0);
            auto& K = k_[static_cast<std::size_t>(li)];
            auto& V = v_[static_cast<std::size_t>(li)];
            K.row(len_) = a.row(0) * bp.attn.wk->value + bp.attn.bk->value.row(0);
            V.row(len_) = a.row(0) * bp.attn.wv->value + bp.attn.bv->value.row(0);
            Eigen::RowVectorXd concat(cfg_.d_model);
            const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
            for (int h = 0; h < nh; ++h) {
                Eigen::VectorXd scores =
                    scale * K.middleCols(h * dh, dh).topRows(len_ + 1) *
                    q.middleCols(h * dh, dh).transpose();
                double mx = scores.maxCoeff();
                Eigen::ArrayXd e = (scores.array() - mx).exp();
                Eigen::VectorXd p = (e / e.sum()).matrix();
                concat.middleCols(h * dh, dh) =
                    p.transpose() * V.middleCols(h * dh, dh).topRows(len_ + 1);
            }
            x += concat * bp.attn.wo->value + bp.attn.bo->value.row(0);
            MatrixXd xm = x;
            MatrixXd f = nn::layer_norm(xm, bp.ln2_g->value, bp.ln2_b->value, nullptr);
            Eigen::RowVectorXd pre = f.row(0) * bp.w1->value + bp.b1->value.row(0);
            MatrixXd act = nn::gelu(pre);
            x += act.row(0) * bp.w2->value + bp.b2->value.row(0);
        }
        ++len_;
        MatrixXd xf = x;
        MatrixXd h = nn::layer_norm(xf, ps_.at("decoder.out_norm.g").value,
                                    ps_.at("decoder.out_norm.b").value, nullptr);
        return h.row(0);
    }

private:
    nn::ParamStore& ps_;
    const ModelConfig& cfg_;
    std::vector<MatrixXd> k_, v_;
    Eigen::Index len_ = 0;
};

int pick_token(const Eigen::RowVectorXd& logits, const DecodeParams& decode,
               std::mt19937_64& rng) {
    const Eigen::Index v = logits.size();
    if (decode.strategy == DecodeStrategy::greedy) {
        Eigen::Index best = 0;
        logits.maxCoeff(&best);
        return static_cast<int>(best);
    }
    std::vector<Eigen::Index> candidates;
    if (decode.strategy == DecodeStrategy::top_k &&
        decode.top_k < static_cast<int>(v)) {
        std::vector<Eigen::Index> order(static_cast<std::size_t>(v));
        for (Eigen::Index i = 0; i < v; ++i) order[static_cast<std::size_t>(i)] = i;
        std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
            if (logits[a] != logits[b]) return logits[a] > logits[b];
            return a < b;
        });
        candidates.assign(order.begin(), order.begin() + decode.top_k);
    } else {
        candidates.resize(static_cast<std::size_t>(v));
        for (Eigen::Index i = 0; i < v; ++i) candidates[static_cast<std::size_t>(i)] = i;
    }
    double mx = -1e300;
    for (Eigen::Index c : candidates) mx = std::max(mx, logits[c]);
    std::vector<double> w(candidates.size());
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        w[i] = std::exp((logits[candidates[i]] - mx) / decode.temperature);
        total += w[i];
    }
    double u = uniform01(rng) * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        acc += w[i];
        if (u < acc) return static_cast<int>(candidates[i]);
    }
    return static_cast<int>(candidates.back());
}

}  // namespace

std::vector<GenSample> CommentModel::generate(const Video& video, const DecodeParams& decode,
                                              std::mt19937_64& rng) const {
    decode.validate();
    if (!has_token_head(mode_)) {
        throw std::runtime_error("generate: model has no token head in mode " + mode_name(mode_));
    }
    if (decode.max_len > config_.max_comment_len) {
        throw std::runtime_error("generate: max_len exceeds the model's max_comment_len");
    }
    MatrixXd prompts = perceive(video);
    const auto& tok_emb = params_.at("decoder.tok_emb").value;
    const auto& pos_emb = params_.at("decoder.pos_emb").value;
    const auto& head_w = params_.at("decoder.head.w").value;
    const auto& head_b = params_.at("decoder.head.b").value;

    std::vector<GenSample> out;
    out.reserve(static_cast<std::size_t>(decode.n_samples));
    for (int s = 0; s < decode.n_samples; ++s) {
        DecodeSession session(params_, config_);
        Eigen::RowVectorXd h;
        for (int i = 0; i < config_.n_queries; ++i) {
            h = session.feed(prompts.row(i) + pos_emb.row(i));
        }
        h = session.feed(tok_emb.row(Vocab::kBos) + pos_emb.row(config_.n_queries));

        GenSample sample;
        std::vector<double> logps;
        while (true) {
            Eigen::RowVectorXd logits = h * head_w + head_b.row(0);
            int tok = pick_token(logits, decode, rng);
            double logp = nn::log_softmax_row(logits.transpose())[tok];
            if (tok == Vocab::kEos) {
                sample.terminated = true;
                sample.eos_log_prob = logp;
                break;
            }
            sample.tokens.push_back(tok);
            logps.push_back(logp);
            if (static_cast<int>(sample.tokens.size()) >= decode.max_len) {
                sample.terminated = false;
                break;
            }
            h = session.feed(tok_emb.row(tok) +
                             pos_emb.row(config_.n_queries +
                                         static_cast<Eigen::Index>(sample.tokens.size())));
        }
        sample.token_log_probs =
            Eigen::Map<Eigen::VectorXd>(logps.data(), static_cast<Eigen::Index>(logps.size()));
        out.push_back(std::move(sample));
    }
    return out;
}

Eigen::VectorXd CommentModel::log_probs(const Video& video, const std::vector<int>& tokens) const {
    if (!has_token_head(mode_)) {
        throw std::runtime_error("log_probs: model has no token head in mode " + mode_name(mode_));
    }
    if (tokens.empty()) return Eigen::VectorXd(0);
    for (int t : tokens) {
        if (t < 0 || t >= config_.vocab_size) {
            throw std::runtime_error("log_probs: unknown token id " + std::to_string(t));
        }
    }
    std::vector<int> input;
    input.push_back(Vocab::kBos);
    input.insert(input.end(), tokens.begin(), tokens.end());

    auto& ps = const_cast<nn::ParamStore&>(params_);
    MatrixXd prompts = perceiver_forward(ps, config_, video, false).prompts;
    DecoderCache dec = decoder_forward(ps, config_, prompts, input, false);
    MatrixXd h_tok = dec.h.bottomRows(static_cast<Eigen::Index>(input.size()));
    Eigen::VectorXd out(static_cast<Eigen::Index>(tokens.size()));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        Eigen::RowVectorXd logits =
            h_tok.row(static_cast<Eigen::Index>(i)) * params_.at("decoder.head.w").value +
            params_.at("decoder.head.b").value.row(0);
        out[static_cast<Eigen::Index>(i)] = nn::log_softmax_row(logits.transpose())[tokens[i]];
    }
    return out;
}

Eigen::VectorXd CommentModel::next_token_log_probs(const Video& video,
                                                   const std::vector<int>& prefix) const {
    std::vector<int> input;
    input.push_back(Vocab::kBos);
    input.insert(input.end(), prefix.begin(), prefix.end());
    auto& ps = const_cast<nn::ParamStore&>(params_);
    MatrixXd prompts = perceiver_forward(ps, config_, video, false).prompts;
    DecoderCache dec = decoder_forward(ps, config_, prompts, input, false);
    Eigen::RowVectorXd logits = dec.h.row(dec.h.rows() - 1) * params_.at("decoder.head.w").value +
                                params_.at("decoder.head.b").value.row(0);
    return nn::log_softmax_row(logits.transpose());
}

Eigen::VectorXd CommentModel::scalar_scores(const Video& video,
                                            const std::vector<int>& input_tokens) const {
    if (!has_scalar_head(mode_)) {
        throw std::runtime_error("scalar_scores: model has no scalar head in mode " +
                                 mode_name(mode_));
    }
    std::vector<int> input;
    input.push_back(Vocab::kBos);
    input.insert(input.end(), input_tokens.begin(), input_tokens.end());
    auto& ps = const_cast<nn::ParamStore&>(params_);
    MatrixXd prompts = perceiver_forward(ps, config_, video, false).prompts;
    DecoderCache dec = decoder_forward(ps, config_, prompts, input, false);
    MatrixXd h_tok = dec.h.bottomRows(static_cast<Eigen::Index>(input.size()));
    return (h_tok * params_.at("decoder.scalar.w").value).col(0).array() +
           params_.at("decoder.scalar.b").value(0, 0);
}

std::vector<int> CommentModel::reward_input(const std::vector<int>& tokens) const {
    std::vector<int> input = tokens;
    input.push_back(Vocab::kEos);
    return input;
}

double CommentModel::reward_score(const Video& video, const std::vector<int>& tokens) const {
    if (tokens.empty()) {
        throw std::runtime_error("reward_score: empty comment");
    }
    Eigen::VectorXd scores = scalar_scores(video, reward_input(tokens));
    return scores[scores.size() - 1];
}

Eigen::VectorXd CommentModel::value_estimates(const Video& video,
                                              const std::vector<int>& tokens) const {
    return scalar_scores(video, tokens);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {
constexpr char kCheckpointMagic[4] = {'E', 'C', 'K', '1'};

void append_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

json config_to_json(const ModelConfig& c) {
    return json{{"n_queries", c.n_queries},
                {"perceiver_layers", c.perceiver_layers},
                {"d_model", c.d_model},
                {"decoder_layers", c.decoder_layers},
                {"n_heads", c.n_heads},
                {"vocab_size", c.vocab_size},
                {"max_comment_len", c.max_comment_len},
                {"max_frames", c.max_frames},
                {"max_patches", c.max_patches},
                {"feature_dim", c.feature_dim}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.n_queries = j.at("n_queries").get<int>();
    c.perceiver_layers = j.at("perceiver_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_comment_len = j.at("max_comment_len").get<int>();
    c.max_frames = j.at("max_frames").get<int>();
    c.max_patches = j.at("max_patches").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    return c;
}
}  // namespace

void CommentModel::save(const std::filesystem::path& path, const std::string& rng_state) const {
    json header;
    header["format_version"] = 1;
    header["mode"] = mode_name(mode_);
    header["config"] = config_to_json(config_);
    header["vocab"] = vocab_.tokens;
    header["rng"] = rng_state;
    json tensors = json::array();
    for (const auto& t : params_.tensors()) {
        tensors.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
    }
    header["tensors"] = tensors;
    std::string head = header.dump();

    std::string out;
    out.append(kCheckpointMagic, 4);
    std::uint64_t len = head.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out += head;
    for (const auto& t : params_.tensors()) {
        for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < t.value.cols(); ++c) {
                append_f32_le(out, static_cast<float>(t.value(r, c)));
            }
        }
    }
    write_file(path, out);
}

LoadedModel CommentModel::load_with_state(const std::filesystem::path& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) {
        len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[4 + i])) << (8 * i);
    }
    if (bytes.size() < 12 + len) throw std::runtime_error("checkpoint: truncated header");
    json header = json::parse(bytes.substr(12, len));
    ModelConfig cfg = config_from_json(header.at("config"));
    ModelMode mode = mode_from_name(header.at("mode").get<std::string>());
    Vocab vocab = Vocab::from_tokens(header.at("vocab").get<std::vector<std::string>>());

    CommentModel model(cfg, mode, std::move(vocab), 0);
    std::size_t off = 12 + len;
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (const auto& tj : header.at("tensors")) {
        auto& t = model.params_.at(tj.at("name").get<std::string>());
        Eigen::Index rows = tj.at("rows").get<Eigen::Index>();
        Eigen::Index cols = tj.at("cols").get<Eigen::Index>();
        if (rows != t.value.rows() || cols != t.value.cols()) {
            throw std::runtime_error("checkpoint: tensor shape mismatch for " + t.name);
        }
        std::size_t need = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * 4;
        if (off + need > bytes.size()) throw std::runtime_error("checkpoint: truncated data");
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                std::uint32_t bits = static_cast<std::uint32_t>(p[off]) |
                                     (static_cast<std::uint32_t>(p[off + 1]) << 8) |
                                     (static_cast<std::uint32_t>(p[off + 2]) << 16) |
                                     (static_cast<std::uint32_t>(p[off + 3]) << 24);
                float f;
                std::memcpy(&f, &bits, 4);
                t.value(r, c) = static_cast<double>(f);
                off += 4;
            }
        }
    }
    return {std::move(model), header.at("rng").get<std::string>()};
}

CommentModel CommentModel::load(const std::filesystem::path& path) {
    return load_with_state(path).model;
}

}  // namespace engage
