#pragma once

#include <cstdint>
#include <vector>

#include "soda/model.hpp"
#include "soda/objective.hpp"
#include "soda/rng.hpp"

namespace soda {

struct SodaParams {
    long t_max = 2000;
    double gamma = 0.065;
    double beta1 = 0.9;
    double beta2 = 0.995;
    double tau = 0.05;
    double lambda = 0.9;
    long t1 = 50;
    long t2 = 1500;
    double eps_adam = 1e-8;
    double eps_term = 1e-4;
    double reinit_std = 0.1;
    std::uint64_t seed = 0;
    // Ablation switches; the defaults are the full algorithm.
    bool use_decay = true;
    bool use_resets = true;
    bool bias_correction = false;

    void validate() const;
};

struct GcgParams {
    long t_max = 700;
    long c_max = 700;
    long k_sub = 128;
    std::uint64_t seed = 0;
    double eps_term = 1e-4;
    // Evaluate all candidates against the iteration-start loss and apply the
    // best improving one, instead of accepting sequentially. A documented
    // semantic variant, off by default.
    bool batched = false;

    void validate() const;
};

template <typename R>
struct OptimizerState {
    Tensor<R> z;
    Tensor<R> m;
    Tensor<R> v;
    long t = 0;
};

struct TracePoint {
    long t = 0;
    double loss = 0;
    double candidate_loss = 0;
    int exact_so_far = -1;  // -1 when the true input is unknown
};

struct InvertOptions {
    std::vector<TracePoint>* trace = nullptr;
    long trace_every = 0;
    const TokenSequence* truth = nullptr;  // enables exact_so_far in traces
    long forward_budget = 0;               // 0 = no cap
};

struct InversionResult {
    TokenSequence x_star;
    bool success = false;
    long iterations = 0;
    double final_loss = 0;
    long forwards = 0;
};

// The shared moment update. With bias_correction off this is the modified
// rule the relaxation search uses; with it on, textbook Adam.
template <typename R>
void adam_update(R* z, R* m, R* v, const R* g, std::size_t count, long t, R gamma, R beta1,
                 R beta2, R eps, bool bias_correction);

// One inversion iteration at a time, exposing the optimizer state so tests
// can pin the reset/decay/termination contracts directly.
template <typename R>
class SodaStepper {
public:
    struct Outcome {
        double loss = 0;
        double candidate_loss = 0;
        bool terminated = false;
    };

    SodaStepper(const ModelConfig& cfg, const ModelWeights<R>& w, const ObjectivePlan<R>& plan,
                const SodaParams& params);

    Outcome step();

    OptimizerState<R>& state() { return st_; }
    const TokenSequence& candidate() const { return cand_; }
    long forwards() const { return forwards_; }

private:
    const ModelConfig& cfg_;
    const ModelWeights<R>& w_;
    const ObjectivePlan<R>& plan_;
    SodaParams p_;
    OptimizerState<R> st_;
    Tape<R> tape_;
    Scratch<R> scratch_;
    RandomStream rng_;
    TokenSequence cand_;
    long forwards_ = 0;
    long moment_age_ = 0;
};

template <typename R>
InversionResult soda_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                            const TargetOutput& target, const ObjectiveSpec& spec,
                            const SodaParams& params, const InvertOptions& opt = {});

// Dense embedding-space search: textbook Adam on input embeddings, then a
// nearest-embedding projection. Uses the t_max/gamma/beta/eps fields of
// SodaParams; decay, temperature and resets do not apply.
template <typename R>
InversionResult embedding_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                                 const TargetOutput& target, const ObjectiveSpec& spec,
                                 const SodaParams& params, const InvertOptions& opt = {});

// Nearest tok_embed column under Euclidean distance, ties to the lowest id.
template <typename R>
int nearest_token(const ModelWeights<R>& w, const R* e, long d);

template <typename R>
InversionResult gcg_invert(const ModelConfig& cfg, const ModelWeights<R>& w,
                           const TargetOutput& target, const ObjectiveSpec& spec,
                           const GcgParams& params, const InvertOptions& opt = {});

}  // namespace soda
