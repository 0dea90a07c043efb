#include "soda/optimize.hpp"

#include <algorithm>
#include <cmath>

#include "soda/kernels.hpp"

namespace soda {

void SodaParams::validate() const {
    if (t_max < 1) throw ParamError("t_max must be positive");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1))
        throw ParamError("betas must lie in (0, 1)");
    if (!(lambda > 0 && lambda <= 1)) throw ParamError("decay must lie in (0, 1]");
    if (!(tau > 0)) throw ParamError("relaxation temperature must be positive");
    if (t1 < 1 || t2 < 1 || t1 >= t2) throw ParamError("reset periods need 0 < t1 < t2");
    if (!(gamma > 0)) throw ParamError("learn rate must be positive");
    if (!(eps_adam > 0) || !(eps_term > 0)) throw ParamError("eps values must be positive");
    if (!(reinit_std > 0)) throw ParamError("reinit_std must be positive");
}

void GcgParams::validate() const {
    if (t_max < 1 || c_max < 1 || k_sub < 1) throw ParamError("gcg extents must be positive");
    if (!(eps_term > 0)) throw ParamError("eps_term must be positive");
}

template <typename R>
void adam_update(R* z, R* m, R* v, const R* g, std::size_t count, long t, R gamma, R beta1,
                 R beta2, R eps, bool bias_correction) {
    R c1 = R(1), c2 = R(1);
    if (bias_correction) {
        c1 = R(1) / (R(1) - std::pow(beta1, R(t)));
        c2 = R(1) / (R(1) - std::pow(beta2, R(t)));
    }
    for (std::size_t i = 0; i < count; ++i) {
        m[i] = beta1 * m[i] + (R(1) - beta1) * g[i];
        v[i] = beta2 * v[i] + (R(1) - beta2) * g[i] * g[i];
        R mh = bias_correction ? m[i] * c1 : m[i];
        R vh = bias_correction ? v[i] * c2 : v[i];
        z[i] -= gamma * mh / (std::sqrt(vh) + eps);
    }
}

namespace {

template <typename R>
bool all_finite(const Tensor<R>& t) {
    for (R x : t.data)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

inline bool matches(const TokenSequence& a, const TokenSequence& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace

template <typename R>
SodaStepper<R>::SodaStepper(const ModelConfig& cfg, const ModelWeights<R>& w,
                            const ObjectivePlan<R>& plan, const SodaParams& params)
    : cfg_(cfg),
      w_(w),
      plan_(plan),
      p_(params),
      rng_(RandomStream::from(params.seed, "soda-reinit", 0)) {
    p_.validate();
    st_.z.reset({plan.n, cfg.vocab_size});
    st_.m.reset({plan.n, cfg.vocab_size});
    st_.v.reset({plan.n, cfg.vocab_size});
    cand_.resize(plan.n);
}

template <typename R>
typename SodaStepper<R>::Outcome SodaStepper<R>::step() {
    ++st_.t;
    tape_.rewind();
    GraphSlots g = record_from_scores(tape_, cfg_, w_, st_.z, static_cast<R>(p_.tau), plan_.ctx);
    int loss_slot = plan_.record_loss(tape_, g);
    tape_.backward(loss_slot);
    const Tensor<R>& grad = tape_.grad(g.input);
    forwards_ += 2;
    if (!all_finite(grad))
        throw ContractError("non-finite gradient at iteration " + std::to_string(st_.t));

    // Bias correction must see the age of the moment EMAs, not the global
    // iteration count: after a reset zeroes m and v they are once again
    // biased toward zero, so the correction clock restarts with them.
    ++moment_age_;
    adam_update(st_.z.data.data(), st_.m.data.data(), st_.v.data.data(), grad.data.data(),
                st_.z.numel(), moment_age_, static_cast<R>(p_.gamma), static_cast<R>(p_.beta1),
                static_cast<R>(p_.beta2), static_cast<R>(p_.eps_adam), p_.bias_correction);
    if (p_.use_decay) {
        R lam = static_cast<R>(p_.lambda);
        for (auto& x : st_.z.data) x *= lam;
    }

    Outcome out;
    out.loss = tape_.scalar(loss_slot);
    for (long i = 0; i < plan_.n; ++i) cand_[i] = argmax_row(st_.z.row(i), cfg_.vocab_size);
    out.candidate_loss = plan_.replay_loss(cfg_, w_, cand_, scratch_);
    forwards_ += 1;
    if (out.candidate_loss < p_.eps_term) {
        out.terminated = true;
        return out;
    }

    if (p_.use_resets) {
        if (st_.t % p_.t1 == 0 || st_.t % p_.t2 == 0) {
            st_.m.fill(R(0));
            st_.v.fill(R(0));
            moment_age_ = 0;
        }
        if (st_.t % p_.t2 == 0) {
            for (auto& x : st_.z.data) x = static_cast<R>(rng_.normal(0.0, p_.reinit_std));
        }
    }
    return out;
}

template <typename R>
InversionResult soda_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                            const TargetOutput& target, const ObjectiveSpec& spec,
                            const SodaParams& params, const InvertOptions& opt) {
    ObjectivePlan<R> plan;
    plan.build(cfg, target, spec);
    SodaStepper<R> stepper(cfg, w, plan, params);
    InversionResult res;
    bool exact_seen = false;
    for (long t = 1; t <= params.t_max; ++t) {
        auto out = stepper.step();
        if (opt.truth && !exact_seen) exact_seen = matches(stepper.candidate(), *opt.truth);
        if (opt.trace && opt.trace_every > 0 &&
            (t % opt.trace_every == 0 || out.terminated || t == params.t_max))
            opt.trace->push_back(
                {t, out.loss, out.candidate_loss, opt.truth ? int(exact_seen) : -1});
        if (out.terminated) {
            res.x_star = stepper.candidate();
            res.success = true;
            res.iterations = t;
            res.final_loss = out.candidate_loss;
            res.forwards = stepper.forwards();
            return res;
        }
        if (opt.forward_budget > 0 && stepper.forwards() >= opt.forward_budget) {
            res.iterations = t;
            break;
        }
        res.iterations = t;
    }
    Scratch<R> s;
    const Tensor<R>& z = stepper.state().z;
    res.x_star.resize(plan.n);
    for (long i = 0; i < plan.n; ++i) res.x_star[i] = argmax_row(z.row(i), cfg.vocab_size);
    res.final_loss = plan.replay_loss(cfg, w, res.x_star, s);
    res.success = res.final_loss < params.eps_term;
    res.forwards = stepper.forwards() + 1;
    return res;
}

template <typename R>
int nearest_token(const ModelWeights<R>& w, const R* e, long d) {
    long vocab = w.tok_embed.cols();
    int best = 0;
    R best_d = R(0);
    for (long t = 0; t < vocab; ++t) {
        R dist = R(0);
        for (long j = 0; j < d; ++j) {
            R diff = e[j] - w.tok_embed(j, t);
            dist += diff * diff;
        }
        if (t == 0 || dist < best_d) {
            best = static_cast<int>(t);
            best_d = dist;
        }
    }
    return best;
}

template <typename R>
InversionResult embedding_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                                 const TargetOutput& target, const ObjectiveSpec& spec,
                                 const SodaParams& params, const InvertOptions& opt) {
    params.validate();
    ObjectivePlan<R> plan;
    plan.build(cfg, target, spec);
    long d = cfg.d_model;
    Tensor<R> e({plan.n, d}), m({plan.n, d}), v({plan.n, d});
    RandomStream rng = RandomStream::from(params.seed, "embed-init", 0);
    for (auto& x : e.data) x = static_cast<R>(rng.normal(0.0, 1.0));

    Tape<R> tape;
    Scratch<R> scratch;
    InversionResult res;
    bool exact_seen = false;
    auto project = [&](TokenSequence& out) {
        out.resize(plan.n);
        for (long i = 0; i < plan.n; ++i) out[i] = nearest_token(w, e.row(i), d);
    };
    TokenSequence probe;
    for (long t = 1; t <= params.t_max; ++t) {
        tape.rewind();
        GraphSlots g = record_from_embeddings(tape, cfg, w, e, plan.ctx);
        int loss_slot = plan.record_loss(tape, g);
        double loss = tape.scalar(loss_slot);
        res.forwards += 1;
        res.iterations = t;
        bool head_hit = loss < params.eps_term;
        bool tracing = opt.trace && opt.trace_every > 0 &&
                       (t % opt.trace_every == 0 || head_hit || t == params.t_max);
        if (tracing || (opt.truth && !exact_seen)) {
            project(probe);
            if (opt.truth && !exact_seen) exact_seen = matches(probe, *opt.truth);
            if (tracing) {
                double cand = plan.replay_loss(cfg, w, probe, scratch);
                res.forwards += 1;
                opt.trace->push_back({t, loss, cand, opt.truth ? int(exact_seen) : -1});
            }
        }
        if (head_hit) break;
        tape.backward(loss_slot);
        res.forwards += 1;
        const Tensor<R>& grad = tape.grad(g.input);
        if (!all_finite(grad))
            throw ContractError("non-finite gradient at iteration " + std::to_string(t));
        adam_update(e.data.data(), m.data.data(), v.data.data(), grad.data.data(), e.numel(), t,
                    static_cast<R>(params.gamma), static_cast<R>(params.beta1),
                    static_cast<R>(params.beta2), static_cast<R>(params.eps_adam), true);
        if (opt.forward_budget > 0 && res.forwards >= opt.forward_budget) break;
    }
    project(res.x_star);
    res.final_loss = plan.replay_loss(cfg, w, res.x_star, scratch);
    res.forwards += 1;
    // The continuous loss can cross the threshold without the projected
    // tokens matching; success is claimed only on an exact discrete replay.
    res.success = res.final_loss < params.eps_term;
    return res;
}

template <typename R>
InversionResult gcg_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                           const TargetOutput& target, const ObjectiveSpec& spec,
                           const GcgParams& params, const InvertOptions& opt) {
    params.validate();
    ObjectivePlan<R> plan;
    plan.build(cfg, target, spec);
    long n = plan.n, vocab = cfg.vocab_size;
    long k_sub = std::min(params.k_sub, vocab);
    RandomStream rng = RandomStream::from(params.seed, "gcg", 0);

    TokenSequence x(n);
    Tensor<R> h({n, vocab});
    for (long i = 0; i < n; ++i) {
        x[i] = static_cast<int>(rng.below(vocab));
        h(i, x[i]) = R(1);
    }

    Tape<R> tape;
    Scratch<R> scratch;
    InversionResult res;
    double cur = plan.replay_loss(cfg, w, x, scratch);
    res.forwards += 1;
    bool exact_seen = false;
    std::vector<int> pool(n * k_sub);
    std::vector<int> order(vocab);
    TokenSequence trial;

    for (long t = 1; t <= params.t_max; ++t) {
        if (cur < params.eps_term) break;
        if (opt.forward_budget > 0 && res.forwards >= opt.forward_budget) break;
        res.iterations = t;
        double head_loss = cur;

        tape.rewind();
        GraphSlots g = record_from_dist(tape, cfg, w, h, plan.ctx);
        int loss_slot = plan.record_loss(tape, g);
        tape.backward(loss_slot);
        res.forwards += 2;
        const Tensor<R>& grad = tape.grad(g.input);
        if (!all_finite(grad))
            throw ContractError("non-finite gradient at iteration " + std::to_string(t));

        // Most loss-decreasing substitutions first: ascending gradient.
        for (long i = 0; i < n; ++i) {
            const R* gi = grad.row(i);
            for (long j = 0; j < vocab; ++j) order[j] = static_cast<int>(j);
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (gi[a] != gi[b]) return gi[a] < gi[b];
                return a < b;
            });
            std::copy(order.begin(), order.begin() + k_sub, pool.begin() + i * k_sub);
        }

        double base = cur;
        long best_pos = -1;
        int best_tok = -1;
        double best_loss = base;
        for (long c = 0; c < params.c_max; ++c) {
            long i = static_cast<long>(rng.below(n));
            int tok = pool[i * k_sub + static_cast<long>(rng.below(k_sub))];
            trial = x;
            trial[i] = tok;
            double cand = plan.replay_loss(cfg, w, trial, scratch);
            res.forwards += 1;
            if (params.batched) {
                if (cand < best_loss) {
                    best_loss = cand;
                    best_pos = i;
                    best_tok = tok;
                }
            } else if (cand < cur) {
                for (long j = 0; j < vocab; ++j) h(i, j) = R(0);
                h(i, tok) = R(1);
                x[i] = tok;
                cur = cand;
                if (opt.truth && !exact_seen) exact_seen = matches(x, *opt.truth);
                if (cur < params.eps_term) break;
            }
            if (opt.forward_budget > 0 && res.forwards >= opt.forward_budget) break;
        }
        if (params.batched && best_pos >= 0) {
            for (long j = 0; j < vocab; ++j) h(best_pos, j) = R(0);
            h(best_pos, best_tok) = R(1);
            x[best_pos] = best_tok;
            cur = best_loss;
            if (opt.truth && !exact_seen) exact_seen = matches(x, *opt.truth);
        }
        if (opt.trace && opt.trace_every > 0 &&
            (t % opt.trace_every == 0 || cur < params.eps_term || t == params.t_max))
            opt.trace->push_back({t, head_loss, cur, opt.truth ? int(exact_seen) : -1});
    }

    res.x_star = x;
    res.final_loss = cur;
    res.success = cur < params.eps_term;
    return res;
}

#define SODA_INSTANTIATE(R)                                                                    \
    template void adam_update<R>(R*, R*, R*, const R*, std::size_t, long, R, R, R, R, bool);   \
    template class SodaStepper<R>;                                                             \
    template InversionResult soda_invert<R>(const ModelConfig&, const ModelWeights<R>&,        \
                                            const TargetOutput&, const ObjectiveSpec&,         \
                                            const SodaParams&, const InvertOptions&);          \
    template int nearest_token<R>(const ModelWeights<R>&, const R*, long);                     \
    template InversionResult embedding_invert<R>(const ModelConfig&, const ModelWeights<R>&,   \
                                                 const TargetOutput&, const ObjectiveSpec&,    \
                                                 const SodaParams&, const InvertOptions&);     \
    template InversionResult gcg_invert<R>(const ModelConfig&, const ModelWeights<R>&,         \
                                           const TargetOutput&, const ObjectiveSpec&,          \
                                           const GcgParams&, const InvertOptions&);

SODA_INSTANTIATE(float)
SODA_INSTANTIATE(double)
#undef SODA_INSTANTIATE

}  // namespace soda
