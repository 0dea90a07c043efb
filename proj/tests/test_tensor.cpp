#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "soda/kernels.hpp"
#include "soda/rng.hpp"
#include "soda/tape.hpp"
#include "soda/tensor.hpp"

using namespace soda;

namespace {

Tensor<double> random_tensor(std::vector<long> shape, RandomStream& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& x : t.data) x = rng.normal(0.0, scale);
    return t;
}

// Relative comparison with an absolute fallback for near-zero entries, the
// standard finite-difference acceptance rule used throughout.
void check_grads(const std::vector<double>& analytic, const std::vector<double>& fd,
                 double rel_tol = 1e-4, double abs_floor = 1e-8) {
    REQUIRE(analytic.size() == fd.size());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        double a = analytic[i], o = fd[i];
        if (std::abs(a) < abs_floor && std::abs(o) < abs_floor) continue;
        double rel = std::abs(a - o) / std::max(std::abs(o), 1e-12);
        if (rel >= rel_tol) CAPTURE(i);
        CHECK(rel < rel_tol);
    }
}

}  // namespace

TEST_CASE("matmul identity and one-hot row selection") {
    Tensor<double> eye({2, 2});
    eye(0, 0) = 1;
    eye(1, 1) = 1;
    Tensor<double> a({2, 2});
    a.data = {1, 2, 3, 4};
    Tape<double> tape;
    int sa = tape.leaf(&eye, false);
    int sb = tape.leaf(&a, false);
    int out = tape.matmul(sa, sb, false);
    CHECK(tape.value(out).data == std::vector<double>{1, 2, 3, 4});

    Tensor<double> onehot({1, 2});
    onehot.data = {1, 0};
    Tensor<double> b({2, 1});
    b.data = {5, 7};
    tape.rewind();
    int s1 = tape.leaf(&onehot, false);
    int s2 = tape.leaf(&b, false);
    int sel = tape.matmul(s1, s2, false);
    CHECK(tape.value(sel)[0] == 5.0);
}

TEST_CASE("matmul against the naive oracle, both orientations") {
    RandomStream rng = RandomStream::from(11, "test", 0);
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({4, 2}, rng);
    Tensor<double> bt = random_tensor({2, 4}, rng);

    Tape<double> tape;
    int oa = tape.matmul(tape.leaf(&a, false), tape.leaf(&b, false), false);
    auto want = oracle::matmul(a.data, b.data, 3, 4, 2, false);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(tape.value(oa)[i] == doctest::Approx(want[i]).epsilon(1e-6));

    int ob = tape.matmul(tape.leaf(&a, false), tape.leaf(&bt, false), true);
    auto want_t = oracle::matmul(a.data, bt.data, 3, 4, 2, true);
    for (std::size_t i = 0; i < want_t.size(); ++i)
        CHECK(tape.value(ob)[i] == doctest::Approx(want_t[i]).epsilon(1e-6));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor<double> a({2, 3});
    Tensor<double> b({2, 2});
    Tape<double> tape;
    int sa = tape.leaf(&a, false);
    int sb = tape.leaf(&b, false);
    CHECK_THROWS_WITH_AS(tape.matmul(sa, sb, false),
                         doctest::Contains("[2, 3]"), ShapeError);
}

TEST_CASE("softmax fixed points and hardmax limit") {
    double row[2] = {0, 0};
    softmax_row(row, 2, 1.0);
    CHECK(row[0] == doctest::Approx(0.5));
    CHECK(row[1] == doctest::Approx(0.5));

    double row2[2] = {std::log(2.0), 0};
    softmax_row(row2, 2, 1.0);
    CHECK(row2[0] == doctest::Approx(2.0 / 3.0));
    CHECK(row2[1] == doctest::Approx(1.0 / 3.0));

    double row3[2] = {1, 0};
    softmax_row(row3, 2, 1.0 / 0.05);
    CHECK(row3[0] >= 1.0 - 1e-8);
}

TEST_CASE("softmax rows sum to one and never change the ranking") {
    RandomStream rng = RandomStream::from(5, "test", 1);
    for (double tau : {0.05, 0.3, 1.0, 7.0}) {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> z(16);
            for (auto& x : z) x = rng.normal(0.0, 3.0);
            std::vector<double> s = z;
            softmax_row(s.data(), 16, 1.0 / tau);
            double sum = 0;
            for (double p : s) {
                CHECK(p > 0.0);
                // Mathematically p < 1, but at low temperature the dominant
                // entry rounds to exactly 1.0 in finite precision.
                CHECK(p <= 1.0);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            CHECK(argmax_row(s.data(), 16) == argmax_row(z.data(), 16));
        }
    }
}

TEST_CASE("activation fixed points") {
    CHECK(gelu_tanh(0.0) == 0.0);
    CHECK(silu(0.0) == 0.0);
    CHECK(gelu_tanh(10.0) == doctest::Approx(10.0).epsilon(1e-4));
    RandomStream rng = RandomStream::from(5, "test", 2);
    for (int i = 0; i < 50; ++i) {
        double x = rng.normal(0.0, 2.0);
        CHECK(gelu_tanh(x) == doctest::Approx(oracle::gelu(x)).epsilon(1e-10));
        CHECK(silu(x) == doctest::Approx(oracle::silu(x)).epsilon(1e-12));
    }
}

TEST_CASE("layer norm edge rows and the two-pass oracle") {
    Tensor<double> gain({4}, 1.0);
    Tensor<double> bias({4});
    Tensor<double> x({1, 4}, 3.5);  // constant row: zero variance
    Tensor<double> out({1, 4}), mean({1}), inv({1});
    layer_norm_rows(x.data.data(), gain.data.data(), bias.data.data(), 1e-5, out.data.data(),
                    mean.data.data(), inv.data.data(), 1, 4);
    for (double v : out.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

    Tensor<double> pm({1, 2});
    pm.data = {1, -1};
    Tensor<double> g2({2}, 1.0), b2({2}), o2({1, 2}), m2({1}), i2({1});
    layer_norm_rows(pm.data.data(), g2.data.data(), b2.data.data(), 1e-12, o2.data.data(),
                    m2.data.data(), i2.data.data(), 1, 2);
    CHECK(o2[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(o2[1] == doctest::Approx(-1.0).epsilon(1e-6));

    RandomStream rng = RandomStream::from(5, "test", 3);
    Tensor<double> xr = random_tensor({3, 8}, rng);
    Tensor<double> gr = random_tensor({8}, rng);
    Tensor<double> br = random_tensor({8}, rng);
    Tensor<double> outr({3, 8}), mr({3}), ir({3});
    layer_norm_rows(xr.data.data(), gr.data.data(), br.data.data(), 1e-5, outr.data.data(),
                    mr.data.data(), ir.data.data(), 3, 8);
    auto want = oracle::layer_norm(xr.data, gr.data, br.data, 1e-5, 3, 8);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(outr[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("attention single row is the value row") {
    RandomStream rng = RandomStream::from(5, "test", 4);
    Tensor<double> q = random_tensor({1, 8}, rng);
    Tensor<double> k = random_tensor({1, 8}, rng);
    Tensor<double> v = random_tensor({1, 8}, rng);
    Tensor<double> out({1, 8}), probs({2, 1});
    attention_rows(q.data.data(), k.data.data(), v.data.data(), out.data.data(),
                   probs.data.data(), 1, 8, 2);
    for (long j = 0; j < 8; ++j) CHECK(out[j] == doctest::Approx(v[j]).epsilon(1e-12));
}

TEST_CASE("attention matches the per-head oracle") {
    RandomStream rng = RandomStream::from(5, "test", 5);
    long rows = 3, d = 8, heads = 2;
    Tensor<double> q = random_tensor({rows, d}, rng);
    Tensor<double> k = random_tensor({rows, d}, rng);
    Tensor<double> v = random_tensor({rows, d}, rng);
    Tensor<double> out({rows, d}), probs({heads * rows, rows});
    attention_rows(q.data.data(), k.data.data(), v.data.data(), out.data.data(),
                   probs.data.data(), rows, d, heads);
    auto want = oracle::attention(q.data, k.data, v.data, rows, d, heads);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(out[i] == doctest::Approx(want[i]).epsilon(1e-5));
}

TEST_CASE("causal mask: later rows cannot touch earlier outputs, bitwise") {
    RandomStream rng = RandomStream::from(5, "test", 6);
    long rows = 4, d = 8, heads = 2;
    Tensor<double> q = random_tensor({rows, d}, rng);
    Tensor<double> k = random_tensor({rows, d}, rng);
    Tensor<double> v = random_tensor({rows, d}, rng);
    Tensor<double> out1({rows, d}), probs({heads * rows, rows});
    attention_rows(q.data.data(), k.data.data(), v.data.data(), out1.data.data(),
                   probs.data.data(), rows, d, heads);

    // Perturb everything at position 2; outputs at 0 and 1 must not move.
    for (long j = 0; j < d; ++j) {
        q(2, j) += 11.0;
        k(2, j) -= 7.0;
        v(2, j) += 3.0;
    }
    Tensor<double> out2({rows, d});
    attention_rows(q.data.data(), k.data.data(), v.data.data(), out2.data.data(),
                   probs.data.data(), rows, d, heads);
    for (long i = 0; i < 2; ++i)
        for (long j = 0; j < d; ++j) CHECK(out1(i, j) == out2(i, j));
}

TEST_CASE("degenerate graph: d(sum Z)/dZ is all ones") {
    Tensor<double> z({3, 5}, 0.25);
    Tape<double> tape;
    int s = tape.leaf(&z, true);
    int loss = tape.sum_all(s);
    tape.backward(loss);
    CHECK(tape.grad(s).numel() == 15);
    for (double g : tape.grad(s).data) CHECK(g == 1.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tensor<double> z({2, 2}, 1.0);
    Tape<double> tape;
    int s = tape.leaf(&z, true);
    int m = tape.matmul(s, s, false);
    CHECK_THROWS_AS(tape.backward(m), ContractError);
}

// Finite differences against each primitive through a small composite graph.
// Rebuilding the tape per probe keeps the check honest: the analytic gradient
// of a fresh recording must match the numeric slope of fresh evaluations.
TEST_CASE("tape gradients match finite differences per primitive") {
    RandomStream rng = RandomStream::from(77, "test", 7);
    long rows = 3, d = 6;
    Tensor<double> w = random_tensor({d, d}, rng, 0.5);
    Tensor<double> bias = random_tensor({d}, rng, 0.5);
    Tensor<double> gain = random_tensor({d}, rng, 0.3);
    for (auto& g : gain.data) g += 1.0;
    Tensor<double> x0 = random_tensor({rows, d}, rng, 0.8);

    enum Kind { MatMulT, Bias, Softmax, Gelu, Silu, Ln, Attn };
    for (Kind kind : {MatMulT, Bias, Softmax, Gelu, Silu, Ln, Attn}) {
        auto eval = [&](const Tensor<double>& x, Tape<double>* keep, int* slot) -> double {
            Tape<double> local;
            Tape<double>& tape = keep ? *keep : local;
            tape.rewind();
            int in = tape.leaf(&x, true);
            int mid;
            switch (kind) {
                case MatMulT: mid = tape.matmul(in, tape.leaf(&w, false), true); break;
                case Bias: mid = tape.add_bias(in, &bias); break;
                case Softmax: mid = tape.row_softmax(in, 0.7); break;
                case Gelu: mid = tape.activation(in, ActKind::gelu); break;
                case Silu: mid = tape.activation(in, ActKind::silu); break;
                case Ln: mid = tape.layer_norm(in, &gain, &bias, 1e-5); break;
                case Attn: {
                    int q = tape.matmul(in, tape.leaf(&w, false), true);
                    mid = tape.attention(q, in, in, 2);
                    break;
                }
            }
            // Square before summing so the gradient depends on every value.
            int sq = tape.add(mid, mid);
            int prod = tape.matmul(sq, mid, true);
            int loss = tape.sum_all(prod);
            if (slot) *slot = in;
            if (keep) tape.backward(loss);
            return tape.scalar(loss);
        };

        Tape<double> tape;
        int slot = -1;
        eval(x0, &tape, &slot);
        std::vector<double> analytic = tape.grad(slot).data;
        auto fd = oracle::fd_gradient(
            [&](const std::vector<double>& flat) {
                Tensor<double> xp = x0;
                xp.data = flat;
                return eval(xp, nullptr, nullptr);
            },
            x0.data, 1e-5);
        CAPTURE(static_cast<int>(kind));
        check_grads(analytic, fd, 1e-4, 1e-8);
    }
}

TEST_CASE("recording the same graph twice gives bit-identical gradients") {
    RandomStream rng = RandomStream::from(13, "test", 8);
    Tensor<double> x = random_tensor({2, 4}, rng);
    Tensor<double> w = random_tensor({4, 4}, rng);

    auto run = [&](Tape<double>& tape) {
        tape.rewind();
        int in = tape.leaf(&x, true);
        int h = tape.matmul(in, tape.leaf(&w, false), false);
        int s = tape.row_softmax(h, 0.5);
        int a = tape.activation(s, ActKind::gelu);
        int loss = tape.sum_all(tape.matmul(a, a, true));
        tape.backward(loss);
        return std::make_pair(tape.scalar(loss), tape.grad(in).data);
    };

    Tape<double> tape;
    auto [l1, g1] = run(tape);
    auto [l2, g2] = run(tape);  // reuses the warm buffers
    Tape<double> fresh;
    auto [l3, g3] = run(fresh);
    CHECK(l1 == l2);
    CHECK(l1 == l3);
    CHECK(g1 == g2);
    CHECK(g1 == g3);
}

TEST_CASE("weight leaves get no gradient storage") {
    Tensor<double> x({2, 3}, 1.0);
    Tensor<double> w({3, 3}, 0.5);
    Tape<double> tape;
    int in = tape.leaf(&x, true);
    int wslot = tape.leaf(&w, false);
    int loss = tape.sum_all(tape.matmul(in, wslot, false));
    tape.backward(loss);
    CHECK(tape.grad(in).numel() == 6);
    CHECK(tape.grad(wslot).numel() == 0);
}
