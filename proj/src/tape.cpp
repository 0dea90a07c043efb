#include "soda/tape.hpp"

#include <cmath>
#include <cstring>

#include "soda/kernels.hpp"

namespace soda {

template <typename R>
int Tape<R>::new_slot(const std::vector<long>& shape, bool needs, const Tensor<R>* ext) {
    if (live_slots_ == slots_.size()) slots_.emplace_back();
    Slot& s = slots_[live_slots_];
    s.ext = ext;
    s.needs = needs;
    if (!ext) s.val.reset_shape_only(shape);
    return static_cast<int>(live_slots_++);
}

template <typename R>
typename Tape<R>::Node& Tape<R>::new_node() {
    if (live_nodes_ == nodes_.size()) nodes_.emplace_back();
    Node& n = nodes_[live_nodes_++];
    n = Node{};
    return n;
}

template <typename R>
int Tape<R>::leaf(const Tensor<R>* t, bool needs_grad) {
    return new_slot(t->shape, needs_grad, t);
}

template <typename R>
int Tape<R>::matmul(int a, int b, bool transpose_b) {
    const Tensor<R>& A = value(a);
    const Tensor<R>& B = value(b);
    long m = A.rows(), k = A.cols();
    long inner = transpose_b ? B.cols() : B.rows();
    long n = transpose_b ? B.rows() : B.cols();
    if (inner != k)
        throw ShapeError("matmul: inner extents disagree, " + shape_str(A.shape) + " vs " +
                         shape_str(B.shape) + (transpose_b ? " (transposed)" : ""));
    int out = new_slot({m, n}, slots_[a].needs || slots_[b].needs);
    if (transpose_b)
        gemm_nt(A.data.data(), B.data.data(), mut(out).data.data(), m, k, n);
    else
        gemm_nn(A.data.data(), B.data.data(), mut(out).data.data(), m, k, n);
    Node& nd = new_node();
    nd.op = Op::MatMul;
    nd.a = a;
    nd.b = b;
    nd.out = out;
    nd.p0 = transpose_b ? 1 : 0;
    return out;
}

template <typename R>
int Tape<R>::add_bias(int a, const Tensor<R>* bias) {
    const Tensor<R>& A = value(a);
    if (bias->numel() != static_cast<std::size_t>(A.cols()))
        throw ShapeError("add_bias: bias length " + std::to_string(bias->numel()) +
                         " vs cols " + std::to_string(A.cols()));
    int out = new_slot(A.shape, slots_[a].needs);
    Tensor<R>& O = mut(out);
    O.data = A.data;
    add_bias_rows(O.data.data(), bias->data.data(), A.rows(), A.cols());
    Node& nd = new_node();
    nd.op = Op::AddBias;
    nd.a = a;
    nd.out = out;
    nd.ext_a = bias;
    return out;
}

template <typename R>
int Tape<R>::add(int a, int b) {
    const Tensor<R>& A = value(a);
    const Tensor<R>& B = value(b);
    if (A.shape != B.shape)
        throw ShapeError("add: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    int out = new_slot(A.shape, slots_[a].needs || slots_[b].needs);
    Tensor<R>& O = mut(out);
    for (std::size_t i = 0; i < A.numel(); ++i) O[i] = A[i] + B[i];
    Node& nd = new_node();
    nd.op = Op::Add;
    nd.a = a;
    nd.b = b;
    nd.out = out;
    return out;
}

template <typename R>
int Tape<R>::add_rows(int a, const Tensor<R>* rows) {
    const Tensor<R>& A = value(a);
    if (rows->cols() != A.cols() || rows->rows() < A.rows())
        throw ShapeError("add_rows: " + shape_str(A.shape) + " vs " + shape_str(rows->shape));
    int out = new_slot(A.shape, slots_[a].needs);
    Tensor<R>& O = mut(out);
    for (std::size_t i = 0; i < A.numel(); ++i) O[i] = A[i] + rows->data[i];
    Node& nd = new_node();
    nd.op = Op::AddRows;
    nd.a = a;
    nd.out = out;
    nd.ext_a = rows;
    return out;
}

template <typename R>
int Tape<R>::row_softmax(int a, R tau) {
    if (!(tau > R(0))) throw ParamError("softmax temperature must be positive");
    const Tensor<R>& A = value(a);
    int out = new_slot(A.shape, slots_[a].needs);
    Tensor<R>& O = mut(out);
    O.data = A.data;
    R inv_tau = R(1) / tau;
    for (long i = 0; i < A.rows(); ++i) softmax_row(O.row(i), A.cols(), inv_tau);
    Node& nd = new_node();
    nd.op = Op::RowSoftmax;
    nd.a = a;
    nd.out = out;
    nd.s0 = inv_tau;
    return out;
}

template <typename R>
int Tape<R>::activation(int a, ActKind kind) {
    const Tensor<R>& A = value(a);
    int out = new_slot(A.shape, slots_[a].needs);
    Tensor<R>& O = mut(out);
    if (kind == ActKind::gelu)
        for (std::size_t i = 0; i < A.numel(); ++i) O[i] = gelu_tanh(A[i]);
    else
        for (std::size_t i = 0; i < A.numel(); ++i) O[i] = silu(A[i]);
    Node& nd = new_node();
    nd.op = Op::Act;
    nd.a = a;
    nd.out = out;
    nd.p0 = static_cast<long>(kind);
    return out;
}

template <typename R>
int Tape<R>::layer_norm(int a, const Tensor<R>* gain, const Tensor<R>* bias, R eps) {
    if (!(eps > R(0))) throw ParamError("layer_norm eps must be positive");
    const Tensor<R>& A = value(a);
    long d = A.cols();
    if (gain->numel() != static_cast<std::size_t>(d) || bias->numel() != static_cast<std::size_t>(d))
        throw ShapeError("layer_norm: affine params disagree with width " + std::to_string(d));
    int out = new_slot(A.shape, slots_[a].needs);
    int aux = new_slot({2, A.rows()}, false);
    layer_norm_rows(A.data.data(), gain->data.data(), bias->data.data(), eps, mut(out).data.data(),
                    mut(aux).row(0), mut(aux).row(1), A.rows(), d);
    Node& nd = new_node();
    nd.op = Op::LayerNorm;
    nd.a = a;
    nd.out = out;
    nd.aux = aux;
    nd.ext_a = gain;
    return out;
}

template <typename R>
int Tape<R>::attention(int q, int k, int v, long n_heads) {
    const Tensor<R>& Q = value(q);
    long rows = Q.rows(), d = Q.cols();
    if (value(k).shape != Q.shape || value(v).shape != Q.shape)
        throw ShapeError("attention: q/k/v shapes disagree");
    if (d % n_heads != 0) throw ShapeError("attention: width not divisible by head count");
    bool needs = slots_[q].needs || slots_[k].needs || slots_[v].needs;
    int out = new_slot(Q.shape, needs);
    int aux = new_slot({n_heads * rows, rows}, false);
    attention_rows(Q.data.data(), value(k).data.data(), value(v).data.data(),
                   mut(out).data.data(), mut(aux).data.data(), rows, d, n_heads);
    Node& nd = new_node();
    nd.op = Op::Attention;
    nd.a = q;
    nd.b = k;
    nd.c = v;
    nd.out = out;
    nd.aux = aux;
    nd.p0 = n_heads;
    return out;
}

template <typename R>
int Tape<R>::concat_one_hot(int a, const std::vector<int>* ids, long vocab) {
    const Tensor<R>& A = value(a);
    if (A.cols() != vocab) throw ShapeError("concat_one_hot: row width is not the vocab size");
    long n = A.rows(), c = static_cast<long>(ids->size());
    int out = new_slot({n + c, vocab}, slots_[a].needs);
    Tensor<R>& O = mut(out);
    std::memcpy(O.data.data(), A.data.data(), sizeof(R) * A.numel());
    for (long r = 0; r < c; ++r) {
        R* row = O.row(n + r);
        for (long j = 0; j < vocab; ++j) row[j] = R(0);
        row[(*ids)[r]] = R(1);
    }
    Node& nd = new_node();
    nd.op = Op::ConcatOneHot;
    nd.a = a;
    nd.out = out;
    nd.tok = ids;
    return out;
}

template <typename R>
int Tape<R>::concat_emb(int a, const std::vector<int>* ids, const Tensor<R>* tok_embed) {
    const Tensor<R>& A = value(a);
    long d = A.cols(), vocab = tok_embed->cols();
    if (tok_embed->rows() != d) throw ShapeError("concat_emb: embedding width disagrees");
    long n = A.rows(), c = static_cast<long>(ids->size());
    int out = new_slot({n + c, d}, slots_[a].needs);
    Tensor<R>& O = mut(out);
    std::memcpy(O.data.data(), A.data.data(), sizeof(R) * A.numel());
    for (long r = 0; r < c; ++r) {
        int id = (*ids)[r];
        if (id < 0 || id >= vocab) throw ContractError("concat_emb: token id out of range");
        R* row = O.row(n + r);
        for (long j = 0; j < d; ++j) row[j] = (*tok_embed)(j, id);
    }
    Node& nd = new_node();
    nd.op = Op::ConcatEmb;
    nd.a = a;
    nd.out = out;
    nd.tok = ids;
    nd.ext_a = tok_embed;
    return out;
}

template <typename R>
int Tape<R>::logit_loss(int logits, const Tensor<R>* weight, const Tensor<R>* target,
                        long first_row) {
    const Tensor<R>& L = value(logits);
    long m = weight->rows(), v = weight->cols();
    if (target->shape != weight->shape) throw ShapeError("logit_loss: weight/target disagree");
    if (v != L.cols() || first_row < 0 || first_row + m > L.rows())
        throw ContractError("logit_loss: target rows fall outside the logit range");
    int out = new_slot({1}, slots_[logits].needs);
    mut(out)[0] = masked_sq_err_rows(L.row(first_row), weight->data.data(), target->data.data(),
                                     m, v);
    Node& nd = new_node();
    nd.op = Op::LogitLoss;
    nd.a = logits;
    nd.out = out;
    nd.ext_a = weight;
    nd.ext_b = target;
    nd.p0 = first_row;
    return out;
}

template <typename R>
int Tape<R>::text_loss(int logits, const std::vector<int>* y, long first_row, R inv_tau) {
    const Tensor<R>& L = value(logits);
    long m = static_cast<long>(y->size()), v = L.cols();
    if (first_row < 0 || first_row + m > L.rows())
        throw ContractError("text_loss: target rows fall outside the logit range");
    if (scratch_.size() < static_cast<std::size_t>(2 * v)) scratch_.resize(2 * v);
    int out = new_slot({1}, slots_[logits].needs);
    mut(out)[0] = text_gap_rows(L.row(first_row), y->data(), m, v, inv_tau, scratch_.data());
    Node& nd = new_node();
    nd.op = Op::TextLoss;
    nd.a = logits;
    nd.out = out;
    nd.tok = y;
    nd.s0 = inv_tau;
    nd.p0 = first_row;
    return out;
}

template <typename R>
int Tape<R>::fluency_loss(int logits, int hsoft, long n_input) {
    const Tensor<R>& L = value(logits);
    const Tensor<R>& H = value(hsoft);
    long v = L.cols();
    if (H.cols() != v || H.rows() < n_input || L.rows() < n_input)
        throw ShapeError("fluency_loss: shapes disagree with the input length");
    if (scratch_.size() < static_cast<std::size_t>(2 * v)) scratch_.resize(2 * v);
    int out = new_slot({1}, slots_[logits].needs || slots_[hsoft].needs);
    R total = R(0);
    for (long i = 1; i < n_input; ++i) {
        log_softmax_row(L.row(i - 1), scratch_.data(), v);
        const R* h = H.row(i);
        R acc = R(0);
        for (long j = 0; j < v; ++j) acc += h[j] * scratch_[j];
        total -= acc;
    }
    mut(out)[0] = total;
    Node& nd = new_node();
    nd.op = Op::FluencyLoss;
    nd.a = logits;
    nd.b = hsoft;
    nd.out = out;
    nd.p0 = n_input;
    return out;
}

template <typename R>
int Tape<R>::combine(int a, int b, R ca, R cb) {
    if (value(a).numel() != 1 || value(b).numel() != 1)
        throw ContractError("combine expects scalar slots");
    int out = new_slot({1}, slots_[a].needs || slots_[b].needs);
    mut(out)[0] = ca * value(a)[0] + cb * value(b)[0];
    Node& nd = new_node();
    nd.op = Op::Combine;
    nd.a = a;
    nd.b = b;
    nd.out = out;
    nd.s0 = ca;
    nd.s1 = cb;
    return out;
}

template <typename R>
int Tape<R>::sum_all(int a) {
    const Tensor<R>& A = value(a);
    int out = new_slot({1}, slots_[a].needs);
    R s = R(0);
    for (std::size_t i = 0; i < A.numel(); ++i) s += A[i];
    mut(out)[0] = s;
    Node& nd = new_node();
    nd.op = Op::SumAll;
    nd.a = a;
    nd.out = out;
    return out;
}

template <typename R>
void Tape<R>::backward(int loss_slot) {
    if (value(loss_slot).numel() != 1) throw ContractError("backward: loss is not a scalar");
    for (std::size_t s = 0; s < live_slots_; ++s) {
        if (slots_[s].needs) slots_[s].grad.reset(value(static_cast<int>(s)).shape);
    }
    if (!slots_[loss_slot].needs) return;
    slots_[loss_slot].grad[0] = R(1);
    for (std::size_t i = live_nodes_; i-- > 0;) {
        const Node& n = nodes_[i];
        if (n.out >= 0 && slots_[n.out].needs) backward_node(n);
    }
}

template <typename R>
void Tape<R>::backward_node(const Node& n) {
    const Tensor<R>& go = slots_[n.out].grad;
    auto wants = [&](int s) { return s >= 0 && slots_[s].needs; };
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Tensor<R>& A = value(n.a);
            const Tensor<R>& B = value(n.b);
            long m = A.rows(), k = A.cols(), cols = go.cols();
            if (n.p0) {
                if (wants(n.a))
                    gemm_nn(go.data.data(), B.data.data(), slots_[n.a].grad.data.data(), m, cols,
                            k, true);
                if (wants(n.b))
                    gemm_tn(go.data.data(), A.data.data(), slots_[n.b].grad.data.data(), cols, m,
                            k, true);
            } else {
                if (wants(n.a))
                    gemm_nt(go.data.data(), B.data.data(), slots_[n.a].grad.data.data(), m, cols,
                            k, true);
                if (wants(n.b))
                    gemm_tn(A.data.data(), go.data.data(), slots_[n.b].grad.data.data(), k, m,
                            cols, true);
            }
            break;
        }
        case Op::AddBias:
        case Op::AddRows: {
            if (wants(n.a)) {
                Tensor<R>& ga = slots_[n.a].grad;
                for (std::size_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
            }
            break;
        }
        case Op::Add: {
            for (int s : {n.a, n.b}) {
                if (!wants(s)) continue;
                Tensor<R>& g = slots_[s].grad;
                for (std::size_t i = 0; i < go.numel(); ++i) g[i] += go[i];
            }
            break;
        }
        case Op::RowSoftmax: {
            if (!wants(n.a)) break;
            const Tensor<R>& S = value(n.out);
            Tensor<R>& ga = slots_[n.a].grad;
            for (long i = 0; i < S.rows(); ++i)
                softmax_row_backward(S.row(i), go.row(i), ga.row(i), S.cols(), n.s0, true);
            break;
        }
        case Op::Act: {
            if (!wants(n.a)) break;
            const Tensor<R>& A = value(n.a);
            Tensor<R>& ga = slots_[n.a].grad;
            if (static_cast<ActKind>(n.p0) == ActKind::gelu)
                for (std::size_t i = 0; i < A.numel(); ++i) ga[i] += go[i] * gelu_tanh_grad(A[i]);
            else
                for (std::size_t i = 0; i < A.numel(); ++i) ga[i] += go[i] * silu_grad(A[i]);
            break;
        }
        case Op::LayerNorm: {
            if (!wants(n.a)) break;
            const Tensor<R>& A = value(n.a);
            const Tensor<R>& aux = value(n.aux);
            layer_norm_rows_backward(A.data.data(), n.ext_a->data.data(), aux.row(0), aux.row(1),
                                     go.data.data(), slots_[n.a].grad.data.data(), A.rows(),
                                     A.cols(), true);
            break;
        }
        case Op::Attention: {
            const Tensor<R>& Q = value(n.a);
            long rows = Q.rows(), d = Q.cols();
            if (scratch_.size() < static_cast<std::size_t>(rows)) scratch_.resize(rows);
            attention_rows_backward(Q.data.data(), value(n.b).data.data(),
                                    value(n.c).data.data(), value(n.aux).data.data(),
                                    go.data.data(), slots_[n.a].grad.data.data(),
                                    slots_[n.b].grad.data.data(), slots_[n.c].grad.data.data(),
                                    scratch_.data(), rows, d, n.p0, true);
            break;
        }
        case Op::ConcatOneHot:
        case Op::ConcatEmb: {
            if (!wants(n.a)) break;
            Tensor<R>& ga = slots_[n.a].grad;
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go[i];
            break;
        }
        case Op::LogitLoss: {
            if (!wants(n.a)) break;
            const Tensor<R>& L = value(n.a);
            Tensor<R>& ga = slots_[n.a].grad;
            const Tensor<R>& W = *n.ext_a;
            const Tensor<R>& T = *n.ext_b;
            R g = go[0];
            for (long i = 0; i < W.rows(); ++i) {
                const R* li = L.row(n.p0 + i);
                R* gi = ga.row(n.p0 + i);
                const R* wi = W.row(i);
                const R* ti = T.row(i);
                for (long j = 0; j < W.cols(); ++j)
                    gi[j] += g * R(2) * wi[j] * (li[j] - ti[j]);
            }
            break;
        }
        case Op::TextLoss: {
            if (!wants(n.a)) break;
            const Tensor<R>& L = value(n.a);
            Tensor<R>& ga = slots_[n.a].grad;
            long v = L.cols();
            R* p = scratch_.data();
            R* dp = scratch_.data() + v;
            for (std::size_t i = 0; i < static_cast<std::size_t>(n.tok->size()); ++i) {
                const R* li = L.row(n.p0 + static_cast<long>(i));
                for (long j = 0; j < v; ++j) p[j] = li[j];
                softmax_row(p, v, n.s0);
                int amax = argmax_row(p, v);
                for (long j = 0; j < v; ++j) dp[j] = R(0);
                dp[amax] += go[0];
                dp[(*n.tok)[i]] -= go[0];
                softmax_row_backward(p, dp, ga.row(n.p0 + static_cast<long>(i)), v, n.s0, true);
            }
            break;
        }
        case Op::FluencyLoss: {
            const Tensor<R>& L = value(n.a);
            const Tensor<R>& H = value(n.b);
            long v = L.cols();
            R* lsm = scratch_.data();
            R* p = scratch_.data() + v;
            R g = go[0];
            for (long i = 1; i < n.p0; ++i) {
                log_softmax_row(L.row(i - 1), lsm, v);
                const R* h = H.row(i);
                if (wants(n.a)) {
                    R hsum = R(0);
                    for (long j = 0; j < v; ++j) hsum += h[j];
                    R* gl = slots_[n.a].grad.row(i - 1);
                    for (long j = 0; j < v; ++j) {
                        p[j] = std::exp(lsm[j]);
                        gl[j] += g * (hsum * p[j] - h[j]);
                    }
                }
                if (wants(n.b)) {
                    R* gh = slots_[n.b].grad.row(i);
                    for (long j = 0; j < v; ++j) gh[j] -= g * lsm[j];
                }
            }
            break;
        }
        case Op::Combine: {
            if (wants(n.a)) slots_[n.a].grad[0] += n.s0 * go[0];
            if (wants(n.b)) slots_[n.b].grad[0] += n.s1 * go[0];
            break;
        }
        case Op::SumAll: {
            if (!wants(n.a)) break;
            Tensor<R>& ga = slots_[n.a].grad;
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += go[0];
            break;
        }
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace soda
