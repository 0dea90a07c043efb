#pragma once

#include <string>
#include <vector>

#include "soda/common.hpp"
#include "soda/tape.hpp"
#include "soda/tensor.hpp"

namespace soda {

struct ModelConfig {
    long vocab_size = 0;
    long n_layers = 0;
    long d_model = 0;
    long n_heads = 0;
    long d_ff = 0;
    long max_seq_len = 0;
    ActKind activation = ActKind::gelu;
    double layernorm_eps = 1e-5;
    bool tie_output = false;

    void validate() const;
};

inline const char* act_name(ActKind k) { return k == ActKind::gelu ? "gelu" : "silu"; }
inline ActKind act_from_name(const std::string& s) {
    if (s == "gelu") return ActKind::gelu;
    if (s == "silu") return ActKind::silu;
    throw ConfigError("unknown activation '" + s + "'");
}

template <typename R>
struct LayerWeights {
    Tensor<R> ln1_g, ln1_b;
    Tensor<R> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<R> ln2_g, ln2_b;
    Tensor<R> w1, b1, w2, b2;
};

// tok_embed is d_model × vocab (a token is a column); head is vocab × d_model
// and empty when tie_output reuses tok_embed.
template <typename R>
struct ModelWeights {
    Tensor<R> tok_embed;
    Tensor<R> pos_embed;
    std::vector<LayerWeights<R>> layers;
    Tensor<R> ln_f_g, ln_f_b;
    Tensor<R> head;
};

template <typename R>
ModelWeights<R> allocate_weights(const ModelConfig& cfg);

// Canonical tensor enumeration; initialization, checkpoint layout and
// validation all walk this order so they agree on names.
template <typename R, typename F>
void for_each_tensor(const ModelConfig& cfg, ModelWeights<R>& w, F&& f) {
    f("tok_embed", w.tok_embed);
    f("pos_embed", w.pos_embed);
    for (long i = 0; i < cfg.n_layers; ++i) {
        LayerWeights<R>& L = w.layers[i];
        std::string p = "layers." + std::to_string(i) + ".";
        f(p + "ln1_g", L.ln1_g);
        f(p + "ln1_b", L.ln1_b);
        f(p + "attn_wq", L.wq);
        f(p + "attn_bq", L.bq);
        f(p + "attn_wk", L.wk);
        f(p + "attn_bk", L.bk);
        f(p + "attn_wv", L.wv);
        f(p + "attn_bv", L.bv);
        f(p + "attn_wo", L.wo);
        f(p + "attn_bo", L.bo);
        f(p + "ln2_g", L.ln2_g);
        f(p + "ln2_b", L.ln2_b);
        f(p + "mlp_w1", L.w1);
        f(p + "mlp_b1", L.b1);
        f(p + "mlp_w2", L.w2);
        f(p + "mlp_b2", L.b2);
    }
    f("ln_f_g", w.ln_f_g);
    f("ln_f_b", w.ln_f_b);
    if (!cfg.tie_output) f("head", w.head);
}

template <typename R>
ModelWeights<R> init_random(const ModelConfig& cfg, std::uint64_t seed);

template <typename R>
void validate_weights(const ModelConfig& cfg, ModelWeights<R>& w);

// Reusable buffers for the plain token-id forward path.
template <typename R>
struct Scratch {
    Tensor<R> x, ln, q, k, v, att, mlp_h, mlp_a, probs, logits;
    std::vector<R> row;
    void ensure(const ModelConfig& cfg, long rows);
};

// Runs the model over explicit token ids and leaves logits (rows × vocab) in
// scratch.logits. Shares every kernel with the tape path, so replaying an
// argmax candidate reproduces target logits bit-for-bit.
template <typename R>
const Tensor<R>& forward_tokens(const ModelConfig& cfg, const ModelWeights<R>& w, const int* ids,
                                long rows, Scratch<R>& s);

template <typename R>
TokenSequence generate_greedy(const ModelConfig& cfg, const ModelWeights<R>& w,
                              const TokenSequence& x, long m, Scratch<R>& s);

template <typename R>
TokenSequence generate_greedy(const ModelConfig& cfg, const ModelWeights<R>& w,
                              const TokenSequence& x, long m);

struct GraphSlots {
    int input = -1;   // grad root: scores, distribution rows, or embeddings
    int hsoft = -1;   // relaxed rows when they exist (fluency term hooks here)
    int logits = -1;
};

// Records the forward graph with auxiliary scores z (n × vocab) as the
// differentiation root; ctx tokens are appended teacher-forced one-hots.
// z and ctx must outlive the recording.
template <typename R>
GraphSlots record_from_scores(Tape<R>& tape, const ModelConfig& cfg, const ModelWeights<R>& w,
                              const Tensor<R>& z, R tau, const std::vector<int>& ctx);

// Same graph but the distribution rows are the root (no softmax in front);
// used for gradients w.r.t. a hard one-hot candidate.
template <typename R>
GraphSlots record_from_dist(Tape<R>& tape, const ModelConfig& cfg, const ModelWeights<R>& w,
                            const Tensor<R>& h, const std::vector<int>& ctx);

// Dense input embeddings (n × d_model) as the root, bypassing tok_embed for
// the searched positions.
template <typename R>
GraphSlots record_from_embeddings(Tape<R>& tape, const ModelConfig& cfg,
                                  const ModelWeights<R>& w, const Tensor<R>& e,
                                  const std::vector<int>& ctx);

}  // namespace soda
