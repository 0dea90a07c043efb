#pragma once

// Low-level numeric primitives shared by the tape ops and the plain token-id
// forward path. Keeping one implementation of each guarantees the two paths
// agree bit-for-bit on identical inputs, which the termination test relies on.

#include <cmath>
#include <cstddef>

namespace soda {

// C = A(m×k) · B(k×n), optionally accumulating into C.
template <typename R>
void gemm_nn(const R* a, const R* b, R* c, long m, long k, long n, bool acc = false) {
    for (long i = 0; i < m; ++i) {
        R* ci = c + i * n;
        if (!acc) {
            for (long j = 0; j < n; ++j) ci[j] = R(0);
        }
        const R* ai = a + i * k;
        for (long p = 0; p < k; ++p) {
            R av = ai[p];
            const R* bp = b + p * n;
            for (long j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C = A(m×k) · B(n×k)ᵀ
template <typename R>
void gemm_nt(const R* a, const R* b, R* c, long m, long k, long n, bool acc = false) {
    for (long i = 0; i < m; ++i) {
        const R* ai = a + i * k;
        R* ci = c + i * n;
        for (long j = 0; j < n; ++j) {
            const R* bj = b + j * k;
            R s = R(0);
            for (long p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// C = A(k×m)ᵀ · B(k×n)
template <typename R>
void gemm_tn(const R* a, const R* b, R* c, long m, long k, long n, bool acc = false) {
    if (!acc) {
        for (long i = 0; i < m * n; ++i) c[i] = R(0);
    }
    for (long p = 0; p < k; ++p) {
        const R* ap = a + p * m;
        const R* bp = b + p * n;
        for (long i = 0; i < m; ++i) {
            R av = ap[i];
            R* ci = c + i * n;
            for (long j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename R>
void add_bias_rows(R* x, const R* bias, long rows, long n) {
    for (long i = 0; i < rows; ++i) {
        R* xi = x + i * n;
        for (long j = 0; j < n; ++j) xi[j] += bias[j];
    }
}

// Stable softmax of x/tau, in place. Max subtraction keeps exp in range even
// at tau = 0.05 where raw scores get scaled by 20.
template <typename R>
void softmax_row(R* x, long n, R inv_tau) {
    R mx = x[0];
    for (long j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
    R sum = R(0);
    for (long j = 0; j < n; ++j) {
        x[j] = std::exp((x[j] - mx) * inv_tau);
        sum += x[j];
    }
    R inv = R(1) / sum;
    for (long j = 0; j < n; ++j) x[j] *= inv;
}

// dz = (1/tau) * s ⊙ (dy − <dy, s>), the softmax Jacobian applied to dy.
template <typename R>
void softmax_row_backward(const R* s, const R* dy, R* dz, long n, R inv_tau, bool acc) {
    R dot = R(0);
    for (long j = 0; j < n; ++j) dot += dy[j] * s[j];
    for (long j = 0; j < n; ++j) {
        R g = inv_tau * s[j] * (dy[j] - dot);
        dz[j] = acc ? dz[j] + g : g;
    }
}

// log-softmax at temperature 1 into out; returns nothing extra. Used by the
// fluency term and the text objective's probability rows.
template <typename R>
void log_softmax_row(const R* x, R* out, long n) {
    R mx = x[0];
    for (long j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
    R sum = R(0);
    for (long j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    R lse = mx + std::log(sum);
    for (long j = 0; j < n; ++j) out[j] = x[j] - lse;
}

// The three objective evaluations below are written once and called from both
// the tape loss nodes and the token-id replay path, so a candidate that
// reproduces the target yields a loss of exactly zero rather than merely a
// small one.

// Per-row mean squared error restricted to masked coordinates, summed over
// rows. w carries mask/row_count weights (1/k_i on known coords, 0 elsewhere);
// logits points at the first scored row, rows contiguous with stride v.
template <typename R>
R masked_sq_err_rows(const R* logits, const R* w, const R* t, long m, long v) {
    R total = R(0);
    for (long i = 0; i < m; ++i) {
        const R* li = logits + i * v;
        const R* wi = w + i * v;
        const R* ti = t + i * v;
        for (long j = 0; j < v; ++j) {
            R d = li[j] - ti[j];
            total += wi[j] * d * d;
        }
    }
    return total;
}

// Σ_i [max_a p(a) − p(y_i)] over softmax rows at the given inverse
// temperature. scratch must hold v values.
template <typename R>
R text_gap_rows(const R* logits, const int* y, long m, long v, R inv_tau, R* scratch) {
    R total = R(0);
    for (long i = 0; i < m; ++i) {
        const R* li = logits + i * v;
        for (long j = 0; j < v; ++j) scratch[j] = li[j];
        softmax_row(scratch, v, inv_tau);
        R mx = scratch[0];
        for (long j = 1; j < v; ++j) mx = scratch[j] > mx ? scratch[j] : mx;
        total += mx - scratch[y[i]];
    }
    return total;
}

// −Σ_{i=2..n} log p(ids_i | ids_{<i}): logits is the full sequence's logit
// matrix, row i−1 predicting position i. scratch must hold v values.
template <typename R>
R neg_log_likelihood_tokens(const R* logits, const int* ids, long n, long v, R* scratch) {
    R total = R(0);
    for (long i = 1; i < n; ++i) {
        log_softmax_row(logits + (i - 1) * v, scratch, v);
        total -= scratch[ids[i]];
    }
    return total;
}

template <typename R>
R gelu_tanh(R x) {
    const R c = R(0.7978845608028654);  // sqrt(2/pi)
    const R k = R(0.044715);
    R u = c * (x + k * x * x * x);
    return R(0.5) * x * (R(1) + std::tanh(u));
}

template <typename R>
R gelu_tanh_grad(R x) {
    const R c = R(0.7978845608028654);
    const R k = R(0.044715);
    R u = c * (x + k * x * x * x);
    R t = std::tanh(u);
    R du = c * (R(1) + R(3) * k * x * x);
    return R(0.5) * (R(1) + t) + R(0.5) * x * (R(1) - t * t) * du;
}

template <typename R>
R silu(R x) {
    R s = R(1) / (R(1) + std::exp(-x));
    return x * s;
}

template <typename R>
R silu_grad(R x) {
    R s = R(1) / (R(1) + std::exp(-x));
    return s * (R(1) + x * (R(1) - s));
}

// Per-row normalization; saves mean and 1/std for the backward pass.
template <typename R>
void layer_norm_rows(const R* x, const R* gain, const R* bias, R eps, R* out, R* mean, R* inv_std,
                     long rows, long d) {
    for (long i = 0; i < rows; ++i) {
        const R* xi = x + i * d;
        R mu = R(0);
        for (long j = 0; j < d; ++j) mu += xi[j];
        mu /= R(d);
        R var = R(0);
        for (long j = 0; j < d; ++j) {
            R t = xi[j] - mu;
            var += t * t;
        }
        var /= R(d);
        R is = R(1) / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        R* oi = out + i * d;
        for (long j = 0; j < d; ++j) oi[j] = (xi[j] - mu) * is * gain[j] + bias[j];
    }
}

// Gradient w.r.t. x only; the affine parameters are frozen weights here.
template <typename R>
void layer_norm_rows_backward(const R* x, const R* gain, const R* mean, const R* inv_std,
                              const R* dy, R* dx, long rows, long d, bool acc) {
    for (long i = 0; i < rows; ++i) {
        const R* xi = x + i * d;
        const R* dyi = dy + i * d;
        R* dxi = dx + i * d;
        R mu = mean[i], is = inv_std[i];
        R sum_dh = R(0), sum_dh_xhat = R(0);
        for (long j = 0; j < d; ++j) {
            R xhat = (xi[j] - mu) * is;
            R dh = dyi[j] * gain[j];
            sum_dh += dh;
            sum_dh_xhat += dh * xhat;
        }
        R inv_d = R(1) / R(d);
        for (long j = 0; j < d; ++j) {
            R xhat = (xi[j] - mu) * is;
            R dh = dyi[j] * gain[j];
            R g = is * (dh - inv_d * sum_dh - xhat * inv_d * sum_dh_xhat);
            dxi[j] = acc ? dxi[j] + g : g;
        }
    }
}

// Multi-head causal attention over already-projected q/k/v, each rows×d.
// probs must hold n_heads*rows*rows values and is kept for the backward pass.
template <typename R>
void attention_rows(const R* q, const R* k, const R* v, R* out, R* probs, long rows, long d,
                    long n_heads) {
    long hd = d / n_heads;
    R scale = R(1) / std::sqrt(R(hd));
    for (long h = 0; h < n_heads; ++h) {
        long off = h * hd;
        R* ph = probs + h * rows * rows;
        for (long i = 0; i < rows; ++i) {
            R* pi = ph + i * rows;
            const R* qi = q + i * d + off;
            for (long j = 0; j <= i; ++j) {
                const R* kj = k + j * d + off;
                R s = R(0);
                for (long t = 0; t < hd; ++t) s += qi[t] * kj[t];
                pi[j] = s * scale;
            }
            softmax_row(pi, i + 1, R(1));
            for (long j = i + 1; j < rows; ++j) pi[j] = R(0);
            R* oi = out + i * d + off;
            for (long t = 0; t < hd; ++t) oi[t] = R(0);
            for (long j = 0; j <= i; ++j) {
                const R* vj = v + j * d + off;
                R p = pi[j];
                for (long t = 0; t < hd; ++t) oi[t] += p * vj[t];
            }
        }
    }
}

// ds is caller scratch of at least `rows` elements (kept external so steady
// state inversion loops stay allocation-free).
template <typename R>
void attention_rows_backward(const R* q, const R* k, const R* v, const R* probs, const R* dout,
                             R* dq, R* dk, R* dv, R* ds, long rows, long d, long n_heads,
                             bool acc) {
    long hd = d / n_heads;
    R scale = R(1) / std::sqrt(R(hd));
    if (!acc) {
        for (long i = 0; i < rows * d; ++i) {
            dq[i] = R(0);
            dk[i] = R(0);
            dv[i] = R(0);
        }
    }
    for (long h = 0; h < n_heads; ++h) {
        long off = h * hd;
        const R* ph = probs + h * rows * rows;
        for (long i = 0; i < rows; ++i) {
            const R* pi = ph + i * rows;
            const R* doi = dout + i * d + off;
            // dp[j] = <dout_i, v_j>, then back through the row softmax.
            R dot = R(0);
            for (long j = 0; j <= i; ++j) {
                const R* vj = v + j * d + off;
                R dp = R(0);
                for (long t = 0; t < hd; ++t) dp += doi[t] * vj[t];
                ds[j] = dp;
                dot += dp * pi[j];
            }
            for (long j = 0; j <= i; ++j) ds[j] = pi[j] * (ds[j] - dot);
            const R* qi = q + i * d + off;
            R* dqi = dq + i * d + off;
            for (long j = 0; j <= i; ++j) {
                const R* kj = k + j * d + off;
                R* dkj = dk + j * d + off;
                R* dvj = dv + j * d + off;
                R dsij = ds[j] * scale;
                R p = pi[j];
                for (long t = 0; t < hd; ++t) {
                    dqi[t] += dsij * kj[t];
                    dkj[t] += dsij * qi[t];
                    dvj[t] += p * doi[t];
                }
            }
        }
    }
}

}  // namespace soda
