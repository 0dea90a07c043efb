#include "soda/objective.hpp"

#include <algorithm>
#include <cmath>

#include "soda/kernels.hpp"

namespace soda {

nlohmann::ordered_json target_to_json(const TargetOutput& t) {
    nlohmann::ordered_json j;
    j["y"] = t.y;
    j["n_input"] = t.n_input;
    j["k"] = t.k;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& row : t.logits) {
        nlohmann::ordered_json pairs = nlohmann::ordered_json::array();
        for (const auto& [coord, value] : row) pairs.push_back({coord, value});
        rows.push_back(std::move(pairs));
    }
    j["logits"] = std::move(rows);
    return j;
}

TargetOutput target_from_json(const nlohmann::json& j) {
    TargetOutput t;
    try {
        t.y = j.at("y").get<TokenSequence>();
        t.n_input = j.at("n_input").get<long>();
        t.k = j.at("k").get<long>();
        for (const auto& row : j.at("logits")) {
            std::vector<std::pair<int, double>> pairs;
            for (const auto& p : row) {
                if (!p.is_array() || p.size() != 2)
                    throw ParseError("target logits entries must be [coord, value] pairs");
                pairs.emplace_back(p[0].get<int>(), p[1].get<double>());
            }
            t.logits.push_back(std::move(pairs));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("target record: ") + e.what());
    }
    if (t.y.empty()) throw ParseError("target record: empty output sequence");
    if (t.n_input < 1) throw ParseError("target record: n_input must be positive");
    if (!t.logits.empty() && t.logits.size() != t.y.size())
        throw ParseError("target record: logits row count disagrees with y");
    return t;
}

template <typename R>
TargetOutput make_target(const ModelConfig& cfg, const ModelWeights<R>& w,
                         const TokenSequence& x, long m, long k, Scratch<R>& s) {
    if (x.empty()) throw ContractError("make_target: empty input");
    if (m < 1) throw ContractError("make_target: need at least one output token");
    if (static_cast<long>(x.size()) + m > cfg.max_seq_len)
        throw CapacityError("make_target: input plus " + std::to_string(m) +
                            " outputs exceeds max_seq_len");
    long v = cfg.vocab_size;
    if (k == k_all) k = v;
    if (k < 0 || k > v) throw ParamError("make_target: k must be in [0, vocab] or ALL");

    TargetOutput t;
    t.n_input = static_cast<long>(x.size());
    t.k = k;
    TokenSequence seq = x;
    std::vector<int> order(v);
    for (long i = 0; i < m; ++i) {
        const Tensor<R>& logits = forward_tokens(cfg, w, seq.data(), seq.size(), s);
        const R* row = logits.row(logits.rows() - 1);
        int next = argmax_row(row, v);
        if (k > 0) {
            for (long j = 0; j < v; ++j) order[j] = static_cast<int>(j);
            if (k < v)
                std::partial_sort(order.begin(), order.begin() + k, order.end(),
                                  [&](int a, int b) {
                                      if (row[a] != row[b]) return row[a] > row[b];
                                      return a < b;
                                  });
            std::sort(order.begin(), order.begin() + k);
            std::vector<std::pair<int, double>> pairs;
            pairs.reserve(k);
            for (long j = 0; j < k; ++j)
                pairs.emplace_back(order[j], static_cast<double>(row[order[j]]));
            t.logits.push_back(std::move(pairs));
        }
        t.y.push_back(next);
        seq.push_back(next);
    }
    return t;
}

template <typename R>
TargetOutput make_target(const ModelConfig& cfg, const ModelWeights<R>& w,
                         const TokenSequence& x, long m, long k) {
    Scratch<R> s;
    return make_target(cfg, w, x, m, k, s);
}

template <typename R>
R phi_text_probs(const Tensor<R>& probs, const TokenSequence& y) {
    if (probs.rows() != static_cast<long>(y.size()))
        throw ContractError("phi_text: probability rows disagree with target length");
    R total = R(0);
    for (long i = 0; i < probs.rows(); ++i) {
        const R* p = probs.row(i);
        R mx = p[0];
        for (long j = 1; j < probs.cols(); ++j) mx = p[j] > mx ? p[j] : mx;
        total += mx - p[y[i]];
    }
    return total;
}

template <typename R>
R phi_logit_masked(const Tensor<R>& cand_logits, const TargetOutput& t) {
    if (!t.has_logits()) throw ContractError("phi_logit: target carries no logit values");
    if (cand_logits.rows() != static_cast<long>(t.logits.size()))
        throw ContractError("phi_logit: candidate rows disagree with target positions");
    R total = R(0);
    for (std::size_t i = 0; i < t.logits.size(); ++i) {
        const R* row = cand_logits.row(static_cast<long>(i));
        R inv_k = R(1) / R(t.logits[i].size());
        for (const auto& [coord, value] : t.logits[i]) {
            R d = row[coord] - static_cast<R>(value);
            total += inv_k * d * d;
        }
    }
    return total;
}

template <typename R>
R phi_fluent_probs(const Tensor<R>& probs_at_inputs, const TokenSequence& x) {
    R total = R(0);
    for (std::size_t i = 1; i < x.size(); ++i)
        total -= std::log(probs_at_inputs(static_cast<long>(i) - 1, x[i]));
    return total;
}

template <typename R>
void ObjectivePlan<R>::build(const ModelConfig& cfg, const TargetOutput& target,
                             const ObjectiveSpec& spec, long n_input_override) {
    n = n_input_override > 0 ? n_input_override : target.n_input;
    m = static_cast<long>(target.y.size());
    if (m < 1) throw ContractError("objective: target output is empty");
    rows = n + m - 1;
    first_row = n - 1;
    vocab = cfg.vocab_size;
    if (rows > cfg.max_seq_len)
        throw CapacityError("objective: scored sequence exceeds max_seq_len");
    mode = spec.mode;
    y.assign(target.y.begin(), target.y.end());
    ctx.assign(target.y.begin(), target.y.end() - 1);
    for (int id : y)
        if (id < 0 || id >= vocab) throw ContractError("objective: target token out of vocabulary");
    if (mode == LossMode::logit) {
        if (!target.has_logits())
            throw ContractError("objective: logit mode but the target carries no logit values");
        wmask.reset({m, vocab});
        tvals.reset({m, vocab});
        for (long i = 0; i < m; ++i) {
            const auto& pairs = target.logits[i];
            if (pairs.empty()) throw ContractError("objective: empty logit mask row");
            R inv_k = R(1) / R(pairs.size());
            for (const auto& [coord, value] : pairs) {
                if (coord < 0 || coord >= vocab)
                    throw ContractError("objective: logit coordinate out of vocabulary");
                wmask(i, coord) = inv_k;
                tvals(i, coord) = static_cast<R>(value);
            }
        }
    }
    fluency_weight = static_cast<R>(spec.fluency_weight);
    if (!(spec.output_softmax_tau > 0))
        throw ParamError("objective: output softmax temperature must be positive");
    inv_tau_out = static_cast<R>(1.0 / spec.output_softmax_tau);
}

template <typename R>
int ObjectivePlan<R>::record_loss(Tape<R>& tape, const GraphSlots& g) const {
    int match = mode == LossMode::logit
                    ? tape.logit_loss(g.logits, &wmask, &tvals, first_row)
                    : tape.text_loss(g.logits, &y, first_row, inv_tau_out);
    if (fluency_weight > R(0) && g.hsoft >= 0 && n >= 2) {
        int flu = tape.fluency_loss(g.logits, g.hsoft, n);
        return tape.combine(match, flu, R(1), fluency_weight);
    }
    return match;
}

template <typename R>
double ObjectivePlan<R>::replay_loss(const ModelConfig& cfg, const ModelWeights<R>& w,
                                     const TokenSequence& x, Scratch<R>& s) const {
    if (static_cast<long>(x.size()) != n)
        throw ContractError("replay: candidate length disagrees with the plan");
    seq_buf.assign(x.begin(), x.end());
    seq_buf.insert(seq_buf.end(), ctx.begin(), ctx.end());
    const Tensor<R>& logits = forward_tokens(cfg, w, seq_buf.data(), rows, s);
    if (mode == LossMode::logit)
        return static_cast<double>(masked_sq_err_rows(logits.row(first_row), wmask.data.data(),
                                                      tvals.data.data(), m, vocab));
    return static_cast<double>(
        text_gap_rows(logits.row(first_row), y.data(), m, vocab, inv_tau_out, s.row.data()));
}

template <typename R>
std::pair<double, TokenSequence> discrete_candidate_loss(const ModelConfig& cfg,
                                                         const ModelWeights<R>& w,
                                                         const Tensor<R>& z,
                                                         const ObjectivePlan<R>& plan,
                                                         Scratch<R>& s) {
    TokenSequence x(z.rows());
    for (long i = 0; i < z.rows(); ++i) x[i] = argmax_row(z.row(i), z.cols());
    double loss = plan.replay_loss(cfg, w, x, s);
    return {loss, std::move(x)};
}

#define SODA_INSTANTIATE(R)                                                                   \
    template TargetOutput make_target<R>(const ModelConfig&, const ModelWeights<R>&,          \
                                         const TokenSequence&, long, long, Scratch<R>&);      \
    template TargetOutput make_target<R>(const ModelConfig&, const ModelWeights<R>&,          \
                                         const TokenSequence&, long, long);                   \
    template R phi_text_probs<R>(const Tensor<R>&, const TokenSequence&);                     \
    template R phi_logit_masked<R>(const Tensor<R>&, const TargetOutput&);                    \
    template R phi_fluent_probs<R>(const Tensor<R>&, const TokenSequence&);                   \
    template struct ObjectivePlan<R>;                                                         \
    template std::pair<double, TokenSequence> discrete_candidate_loss<R>(                     \
        const ModelConfig&, const ModelWeights<R>&, const Tensor<R>&, const ObjectivePlan<R>&, \
        Scratch<R>&);

SODA_INSTANTIATE(float)
SODA_INSTANTIATE(double)
#undef SODA_INSTANTIATE

}  // namespace soda
