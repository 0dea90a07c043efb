#pragma once

// Reverse-mode tape over the fixed op set this project needs. Ops execute
// eagerly at record time; backward() replays the records in reverse. Only
// input-side gradients exist: model weights enter as external leaves with no
// gradient storage. rewind() keeps every buffer, so re-recording the same
// graph every optimizer iteration allocates nothing once warm.

#include <cstdint>
#include <deque>
#include <vector>

#include "soda/common.hpp"
#include "soda/tensor.hpp"

namespace soda {

enum class ActKind : std::uint8_t { gelu, silu };

template <typename R>
class Tape {
public:
    const Tensor<R>& value(int s) const {
        const Slot& sl = slots_[s];
        return sl.ext ? *sl.ext : sl.val;
    }
    const Tensor<R>& grad(int s) const { return slots_[s].grad; }
    bool needs_grad(int s) const { return slots_[s].needs; }
    double scalar(int s) const { return static_cast<double>(value(s)[0]); }

    // Drops all records but keeps slot/node capacity for reuse.
    void rewind() {
        live_slots_ = 0;
        live_nodes_ = 0;
    }

    // `t` must outlive the tape's use of this graph.
    int leaf(const Tensor<R>* t, bool needs_grad);

    int matmul(int a, int b, bool transpose_b);
    int add_bias(int a, const Tensor<R>* bias);
    int add(int a, int b);
    int add_rows(int a, const Tensor<R>* rows);
    int row_softmax(int a, R tau);
    int activation(int a, ActKind kind);
    int layer_norm(int a, const Tensor<R>* gain, const Tensor<R>* bias, R eps);
    int attention(int q, int k, int v, long n_heads);
    int concat_one_hot(int a, const std::vector<int>* ids, long vocab);
    int concat_emb(int a, const std::vector<int>* ids, const Tensor<R>* tok_embed);
    int logit_loss(int logits, const Tensor<R>* weight, const Tensor<R>* target, long first_row);
    int text_loss(int logits, const std::vector<int>* y, long first_row, R inv_tau);
    int fluency_loss(int logits, int hsoft, long n_input);
    int combine(int a, int b, R ca, R cb);
    int sum_all(int a);

    // Seeds d(loss)/d(loss) = 1 and accumulates into every needs_grad slot.
    void backward(int loss_slot);

private:
    enum class Op : std::uint8_t {
        Leaf,
        MatMul,
        AddBias,
        Add,
        AddRows,
        RowSoftmax,
        Act,
        LayerNorm,
        Attention,
        ConcatOneHot,
        ConcatEmb,
        LogitLoss,
        TextLoss,
        FluencyLoss,
        Combine,
        SumAll,
    };

    struct Slot {
        Tensor<R> val;
        Tensor<R> grad;
        const Tensor<R>* ext = nullptr;
        bool needs = false;
    };

    struct Node {
        Op op = Op::Leaf;
        int a = -1, b = -1, c = -1;
        int out = -1;
        int aux = -1;
        R s0 = R(0), s1 = R(0);
        long p0 = 0;
        const Tensor<R>* ext_a = nullptr;
        const Tensor<R>* ext_b = nullptr;
        const std::vector<int>* tok = nullptr;
    };

    int new_slot(const std::vector<long>& shape, bool needs, const Tensor<R>* ext = nullptr);
    Node& new_node();
    Tensor<R>& mut(int s) { return slots_[s].val; }
    void backward_node(const Node& n);

    // A deque so growing the tape never moves a Slot: ops hold references to
    // operand tensors across new_slot calls.
    std::deque<Slot> slots_;
    std::vector<Node> nodes_;
    std::size_t live_slots_ = 0;
    std::size_t live_nodes_ = 0;
    std::vector<R> scratch_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace soda
