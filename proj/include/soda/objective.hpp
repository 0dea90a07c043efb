#pragma once

#include <utility>
#include <vector>

#include <json.hpp>

#include "soda/model.hpp"

namespace soda {

// What the inverter is allowed to see about the original input: the greedy
// output tokens and, in logit mode, the values of the k largest logits per
// output position. k == 0 means text-only knowledge.
struct TargetOutput {
    TokenSequence y;
    long n_input = 0;
    long k = 0;
    std::vector<std::vector<std::pair<int, double>>> logits;

    bool has_logits() const { return !logits.empty(); }
};

// Sentinel accepted wherever a mask size is requested.
constexpr long k_all = -1;

enum class LossMode { text, logit };

struct ObjectiveSpec {
    LossMode mode = LossMode::logit;
    // Logit distance is squared error on the known coordinates; other
    // distances are out of scope.
    double fluency_weight = 0.0;
    double output_softmax_tau = 1.0;
};

nlohmann::ordered_json target_to_json(const TargetOutput& t);
TargetOutput target_from_json(const nlohmann::json& j);

// Greedy-decodes m tokens from x and captures the observation the inverter
// gets: k == k_all stores every logit coordinate, k == 0 stores none.
template <typename R>
TargetOutput make_target(const ModelConfig& cfg, const ModelWeights<R>& w,
                         const TokenSequence& x, long m, long k, Scratch<R>& s);

template <typename R>
TargetOutput make_target(const ModelConfig& cfg, const ModelWeights<R>& w,
                         const TokenSequence& x, long m, long k);

// Small standalone forms of the three loss terms, used directly by tests and
// by the plan below.
template <typename R>
R phi_text_probs(const Tensor<R>& probs, const TokenSequence& y);
template <typename R>
R phi_logit_masked(const Tensor<R>& cand_logits, const TargetOutput& t);
template <typename R>
R phi_fluent_probs(const Tensor<R>& probs_at_inputs, const TokenSequence& x);

// Everything an inversion loop needs per iteration, precomputed once: the
// teacher-forced context rows, the mask/value matrices of the logit loss, and
// the exact replay entry point that decides termination.
template <typename R>
struct ObjectivePlan {
    long n = 0;
    long m = 0;
    long rows = 0;
    long first_row = 0;
    long vocab = 0;
    LossMode mode = LossMode::logit;
    std::vector<int> y;
    std::vector<int> ctx;
    Tensor<R> wmask;
    Tensor<R> tvals;
    R fluency_weight = R(0);
    R inv_tau_out = R(1);
    // Replay buffer, kept warm across the inversion loop.
    mutable TokenSequence seq_buf;

    void build(const ModelConfig& cfg, const TargetOutput& target, const ObjectiveSpec& spec,
               long n_input_override = 0);

    // Appends the loss head to a recorded forward; fluency attaches only when
    // the graph exposes relaxed input rows.
    int record_loss(Tape<R>& tape, const GraphSlots& g) const;

    // Output-matching loss of a discrete candidate via the token-id path.
    // Deliberately excludes the fluency term: this is the termination test,
    // and the true input must score exactly zero.
    double replay_loss(const ModelConfig& cfg, const ModelWeights<R>& w, const TokenSequence& x,
                      Scratch<R>& s) const;
};

// argmax rows of z (ties to the lowest id), replayed exactly.
template <typename R>
std::pair<double, TokenSequence> discrete_candidate_loss(const ModelConfig& cfg,
                                                         const ModelWeights<R>& w,
                                                         const Tensor<R>& z,
                                                         const ObjectivePlan<R>& plan,
                                                         Scratch<R>& s);

}  // namespace soda
