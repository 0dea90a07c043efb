#include "soda/model.hpp"

#include <cstring>

#include "soda/kernels.hpp"
#include "soda/rng.hpp"

namespace soda {

void ModelConfig::validate() const {
    if (vocab_size <= 0 || n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 ||
        max_seq_len <= 0)
        throw ConfigError("model config: every extent must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("model config: d_model " + std::to_string(d_model) +
                          " not divisible by n_heads " + std::to_string(n_heads));
    if (!(layernorm_eps > 0)) throw ConfigError("model config: layernorm_eps must be positive");
}

template <typename R>
ModelWeights<R> allocate_weights(const ModelConfig& cfg) {
    cfg.validate();
    long v = cfg.vocab_size, d = cfg.d_model, f = cfg.d_ff;
    ModelWeights<R> w;
    w.tok_embed.reset({d, v});
    w.pos_embed.reset({cfg.max_seq_len, d});
    w.layers.resize(cfg.n_layers);
    for (auto& L : w.layers) {
        L.ln1_g.reset({d});
        L.ln1_b.reset({d});
        L.wq.reset({d, d});
        L.bq.reset({d});
        L.wk.reset({d, d});
        L.bk.reset({d});
        L.wv.reset({d, d});
        L.bv.reset({d});
        L.wo.reset({d, d});
        L.bo.reset({d});
        L.ln2_g.reset({d});
        L.ln2_b.reset({d});
        L.w1.reset({f, d});
        L.b1.reset({f});
        L.w2.reset({d, f});
        L.b2.reset({d});
    }
    w.ln_f_g.reset({d});
    w.ln_f_b.reset({d});
    if (!cfg.tie_output) w.head.reset({v, d});
    return w;
}

template <typename R>
ModelWeights<R> init_random(const ModelConfig& cfg, std::uint64_t seed) {
    ModelWeights<R> w = allocate_weights<R>(cfg);
    RandomStream rs = RandomStream::from(seed, "model-init", 0);
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<R>& t) {
        if (name.find("ln") != std::string::npos) {
            R c = name.back() == 'g' ? R(1) : R(0);
            t.fill(c);
            return;
        }
        for (auto& x : t.data) x = static_cast<R>(rs.normal(0.0, 0.02));
    });
    return w;
}

template <typename R>
void validate_weights(const ModelConfig& cfg, ModelWeights<R>& w) {
    long v = cfg.vocab_size, d = cfg.d_model;
    if (w.tok_embed.shape != std::vector<long>{d, v} ||
        w.pos_embed.shape != std::vector<long>{cfg.max_seq_len, d} ||
        static_cast<long>(w.layers.size()) != cfg.n_layers)
        throw ConfigError("weights disagree with model config");
    for_each_tensor(cfg, w, [&](const std::string& name, Tensor<R>& t) {
        if (!t.all_finite()) throw ConfigError("non-finite values in tensor " + name);
    });
}

template <typename R>
void Scratch<R>::ensure(const ModelConfig& cfg, long rows) {
    x.reset_shape_only({rows, cfg.d_model});
    ln.reset_shape_only({rows, cfg.d_model});
    q.reset_shape_only({rows, cfg.d_model});
    k.reset_shape_only({rows, cfg.d_model});
    v.reset_shape_only({rows, cfg.d_model});
    att.reset_shape_only({rows, cfg.d_model});
    mlp_h.reset_shape_only({rows, cfg.d_ff});
    mlp_a.reset_shape_only({rows, cfg.d_ff});
    probs.reset_shape_only({cfg.n_heads * rows, rows});
    logits.reset_shape_only({rows, cfg.vocab_size});
    if (row.size() < static_cast<std::size_t>(cfg.vocab_size))
        row.resize(cfg.vocab_size);
}

template <typename R>
const Tensor<R>& forward_tokens(const ModelConfig& cfg, const ModelWeights<R>& w, const int* ids,
                                long rows, Scratch<R>& s) {
    if (rows < 1) throw ContractError("forward_tokens: empty sequence");
    if (rows > cfg.max_seq_len)
        throw CapacityError("sequence length " + std::to_string(rows) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    long d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff;
    s.ensure(cfg, rows);
    for (long i = 0; i < rows; ++i) {
        int id = ids[i];
        if (id < 0 || id >= v) throw ContractError("token id out of vocabulary");
        R* xi = s.x.row(i);
        const R* pi = w.pos_embed.row(i);
        for (long j = 0; j < d; ++j) xi[j] = w.tok_embed(j, id) + pi[j];
    }
    R eps = static_cast<R>(cfg.layernorm_eps);
    // The layer-norm statistics saved here are never used again; reuse one
    // shared scratch row pair.
    std::vector<R>& stats = s.row;
    if (stats.size() < static_cast<std::size_t>(2 * rows + v)) stats.resize(2 * rows + v);
    R* mean = stats.data() + v;
    R* inv_std = mean + rows;
    for (const auto& L : w.layers) {
        layer_norm_rows(s.x.data.data(), L.ln1_g.data.data(), L.ln1_b.data.data(), eps,
                        s.ln.data.data(), mean, inv_std, rows, d);
        gemm_nt(s.ln.data.data(), L.wq.data.data(), s.q.data.data(), rows, d, d);
        add_bias_rows(s.q.data.data(), L.bq.data.data(), rows, d);
        gemm_nt(s.ln.data.data(), L.wk.data.data(), s.k.data.data(), rows, d, d);
        add_bias_rows(s.k.data.data(), L.bk.data.data(), rows, d);
        gemm_nt(s.ln.data.data(), L.wv.data.data(), s.v.data.data(), rows, d, d);
        add_bias_rows(s.v.data.data(), L.bv.data.data(), rows, d);
        attention_rows(s.q.data.data(), s.k.data.data(), s.v.data.data(), s.att.data.data(),
                       s.probs.data.data(), rows, d, cfg.n_heads);
        gemm_nt(s.att.data.data(), L.wo.data.data(), s.ln.data.data(), rows, d, d);
        add_bias_rows(s.ln.data.data(), L.bo.data.data(), rows, d);
        for (std::size_t i = 0; i < s.x.numel(); ++i) s.x[i] = s.x[i] + s.ln[i];
        layer_norm_rows(s.x.data.data(), L.ln2_g.data.data(), L.ln2_b.data.data(), eps,
                        s.ln.data.data(), mean, inv_std, rows, d);
        gemm_nt(s.ln.data.data(), L.w1.data.data(), s.mlp_h.data.data(), rows, d, f);
        add_bias_rows(s.mlp_h.data.data(), L.b1.data.data(), rows, f);
        if (cfg.activation == ActKind::gelu)
            for (std::size_t i = 0; i < s.mlp_h.numel(); ++i) s.mlp_a[i] = gelu_tanh(s.mlp_h[i]);
        else
            for (std::size_t i = 0; i < s.mlp_h.numel(); ++i) s.mlp_a[i] = silu(s.mlp_h[i]);
        gemm_nt(s.mlp_a.data.data(), L.w2.data.data(), s.ln.data.data(), rows, f, d);
        add_bias_rows(s.ln.data.data(), L.b2.data.data(), rows, d);
        for (std::size_t i = 0; i < s.x.numel(); ++i) s.x[i] = s.x[i] + s.ln[i];
    }
    layer_norm_rows(s.x.data.data(), w.ln_f_g.data.data(), w.ln_f_b.data.data(), eps,
                    s.ln.data.data(), mean, inv_std, rows, d);
    if (cfg.tie_output)
        gemm_nn(s.ln.data.data(), w.tok_embed.data.data(), s.logits.data.data(), rows, d, v);
    else
        gemm_nt(s.ln.data.data(), w.head.data.data(), s.logits.data.data(), rows, d, v);
    return s.logits;
}

template <typename R>
TokenSequence generate_greedy(const ModelConfig& cfg, const ModelWeights<R>& w,
                              const TokenSequence& x, long m, Scratch<R>& s) {
    if (x.empty()) throw ContractError("generate_greedy: empty prompt");
    if (static_cast<long>(x.size()) + m > cfg.max_seq_len)
        throw CapacityError("prompt plus " + std::to_string(m) + " generated tokens exceeds " +
                            std::to_string(cfg.max_seq_len));
    TokenSequence seq = x;
    TokenSequence out;
    out.reserve(m);
    for (long i = 0; i < m; ++i) {
        const Tensor<R>& logits = forward_tokens(cfg, w, seq.data(), seq.size(), s);
        int next = argmax_row(logits.row(logits.rows() - 1), cfg.vocab_size);
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

template <typename R>
TokenSequence generate_greedy(const ModelConfig& cfg, const ModelWeights<R>& w,
                              const TokenSequence& x, long m) {
    Scratch<R> s;
    return generate_greedy(cfg, w, x, m, s);
}

namespace {

template <typename R>
int record_backbone(Tape<R>& tape, const ModelConfig& cfg, const ModelWeights<R>& w, int emb) {
    long rows = tape.value(emb).rows();
    if (rows > cfg.max_seq_len)
        throw CapacityError("sequence length " + std::to_string(rows) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
    R eps = static_cast<R>(cfg.layernorm_eps);
    int x = tape.add_rows(emb, &w.pos_embed);
    for (const auto& L : w.layers) {
        int a = tape.layer_norm(x, &L.ln1_g, &L.ln1_b, eps);
        int q = tape.add_bias(tape.matmul(a, tape.leaf(&L.wq, false), true), &L.bq);
        int k = tape.add_bias(tape.matmul(a, tape.leaf(&L.wk, false), true), &L.bk);
        int v = tape.add_bias(tape.matmul(a, tape.leaf(&L.wv, false), true), &L.bv);
        int att = tape.attention(q, k, v, cfg.n_heads);
        int o = tape.add_bias(tape.matmul(att, tape.leaf(&L.wo, false), true), &L.bo);
        x = tape.add(x, o);
        int b = tape.layer_norm(x, &L.ln2_g, &L.ln2_b, eps);
        int h = tape.add_bias(tape.matmul(b, tape.leaf(&L.w1, false), true), &L.b1);
        int ha = tape.activation(h, cfg.activation);
        int o2 = tape.add_bias(tape.matmul(ha, tape.leaf(&L.w2, false), true), &L.b2);
        x = tape.add(x, o2);
    }
    int u = tape.layer_norm(x, &w.ln_f_g, &w.ln_f_b, eps);
    if (cfg.tie_output) return tape.matmul(u, tape.leaf(&w.tok_embed, false), false);
    return tape.matmul(u, tape.leaf(&w.head, false), true);
}

}  // namespace

template <typename R>
GraphSlots record_from_scores(Tape<R>& tape, const ModelConfig& cfg, const ModelWeights<R>& w,
                              const Tensor<R>& z, R tau, const std::vector<int>& ctx) {
    GraphSlots g;
    g.input = tape.leaf(&z, true);
    g.hsoft = tape.row_softmax(g.input, tau);
    int full = tape.concat_one_hot(g.hsoft, &ctx, cfg.vocab_size);
    int emb = tape.matmul(full, tape.leaf(&w.tok_embed, false), true);
    g.logits = record_backbone(tape, cfg, w, emb);
    return g;
}

template <typename R>
GraphSlots record_from_dist(Tape<R>& tape, const ModelConfig& cfg, const ModelWeights<R>& w,
                            const Tensor<R>& h, const std::vector<int>& ctx) {
    GraphSlots g;
    g.input = tape.leaf(&h, true);
    g.hsoft = g.input;
    int full = tape.concat_one_hot(g.input, &ctx, cfg.vocab_size);
    int emb = tape.matmul(full, tape.leaf(&w.tok_embed, false), true);
    g.logits = record_backbone(tape, cfg, w, emb);
    return g;
}

template <typename R>
GraphSlots record_from_embeddings(Tape<R>& tape, const ModelConfig& cfg,
                                  const ModelWeights<R>& w, const Tensor<R>& e,
                                  const std::vector<int>& ctx) {
    GraphSlots g;
    g.input = tape.leaf(&e, true);
    int emb = tape.concat_emb(g.input, &ctx, &w.tok_embed);
    g.logits = record_backbone(tape, cfg, w, emb);
    return g;
}

#define SODA_INSTANTIATE(R)                                                                     \
    template ModelWeights<R> allocate_weights<R>(const ModelConfig&);                           \
    template ModelWeights<R> init_random<R>(const ModelConfig&, std::uint64_t);                 \
    template void validate_weights<R>(const ModelConfig&, ModelWeights<R>&);                    \
    template struct Scratch<R>;                                                                 \
    template const Tensor<R>& forward_tokens<R>(const ModelConfig&, const ModelWeights<R>&,     \
                                                const int*, long, Scratch<R>&);                 \
    template TokenSequence generate_greedy<R>(const ModelConfig&, const ModelWeights<R>&,       \
                                              const TokenSequence&, long, Scratch<R>&);         \
    template TokenSequence generate_greedy<R>(const ModelConfig&, const ModelWeights<R>&,       \
                                              const TokenSequence&, long);                      \
    template GraphSlots record_from_scores<R>(Tape<R>&, const ModelConfig&,                     \
                                              const ModelWeights<R>&, const Tensor<R>&, R,      \
                                              const std::vector<int>&);                         \
    template GraphSlots record_from_dist<R>(Tape<R>&, const ModelConfig&,                       \
                                            const ModelWeights<R>&, const Tensor<R>&,           \
                                            const std::vector<int>&);                           \
    template GraphSlots record_from_embeddings<R>(Tape<R>&, const ModelConfig&,                 \
                                                  const ModelWeights<R>&, const Tensor<R>&,     \
                                                  const std::vector<int>&);

SODA_INSTANTIATE(float)
SODA_INSTANTIATE(double)
#undef SODA_INSTANTIATE

}  // namespace soda
