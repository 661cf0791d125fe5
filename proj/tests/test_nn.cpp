#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "grad_check.hpp"
#include "mdtk/nn.hpp"

using namespace mdtk;
using namespace mdtk::nn;
using mdtk::testing::check_grads;

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    ParamStore ps;
    Param& a = ps.make("a", rng.normal_tensor({3, 4}));
    Param& b = ps.make("b", rng.normal_tensor({3, 4}));
    auto loss = [&] {
        Var x = mul(add(leaf(a), leaf(b)), sigmoid(leaf(a)));
        x = add(x, square(tanh_op(leaf(b))));
        x = add(x, gelu(scale(leaf(a), 0.7)));
        x = add(x, relu(add_scalar(leaf(b), 0.05)));
        return mean_all(x);
    };
    check_grads(ps, loss);
}

TEST_CASE("sqrt and broadcast gradients") {
    Rng rng(2);
    ParamStore ps;
    Param& a = ps.make("a", rng.uniform_tensor({4, 3}, 0.5, 2.0));
    Param& s = ps.make("s", rng.uniform_tensor({1}, 0.5, 1.5));
    auto loss = [&] {
        Var x = sqrt_op(leaf(a));
        x = div_bcast(mul_bcast(x, leaf(s)), add_scalar(leaf(s), 1.0));
        x = sub_bcast(x, leaf(s));
        return mse(x, constant(Tensor::full({4, 3}, 0.2)));
    };
    check_grads(ps, loss);
}

TEST_CASE("matrix op gradients") {
    Rng rng(3);
    ParamStore ps;
    Param& W = ps.make("W", rng.normal_tensor({4, 5}));
    Param& U = ps.make("U", rng.normal_tensor({5, 3}));
    Param& v = ps.make("v", rng.normal_tensor({3}));
    auto loss = [&] {
        Var x = matmul(leaf(W), leaf(U));
        x = add_rowvec(x, leaf(v));
        x = mul_rowvec(x, leaf(v));
        x = softmax_rows(x);
        x = matmul(transpose2d(x), x);
        return sum_all(x);
    };
    check_grads(ps, loss);
}

TEST_CASE("layernorm and attention gradients") {
    Rng rng(4);
    ParamStore ps;
    Param& x0 = ps.make("x0", rng.normal_tensor({5, 8}));
    MultiHeadAttention attn(ps, "attn", 8, 2, rng);
    LayerNormGain ln(ps, "ln", 8);
    auto loss = [&] {
        Var x = ln(leaf(x0));
        Var y = attn(x, x);
        return mse(y, constant(Tensor::full({5, 8}, 0.1)));
    };
    check_grads(ps, loss, 1e-5, 4);
}

TEST_CASE("structural op gradients") {
    Rng rng(5);
    ParamStore ps;
    Param& a = ps.make("a", rng.normal_tensor({4, 6}));
    auto loss = [&] {
        Var x = leaf(a);
        Var joined = concat({narrow(x, 1, 0, 3), narrow(x, 1, 3, 3)}, 0);
        joined = concat({joined, narrow(row_diff(x), 1, 0, 3)}, 0);
        Var picked = select_cols(x, {0, 2, 5, 1});
        Var spread = scatter_cols(picked, {5, 0, 3, 1}, 6);
        Var rep = repeat_rows(narrow(x, 0, 1, 1), 4);
        return add(add(mean_all(square(spread)), mean_all(mul(rep, rep))),
                   mean_all(square(joined)));
    };
    check_grads(ps, loss);
}

TEST_CASE("reshape and row_diff gradients") {
    Rng rng(6);
    ParamStore ps;
    Param& a = ps.make("a", rng.normal_tensor({3, 4}));
    auto loss = [&] {
        Var x = reshape(leaf(a), {4, 3});
        x = row_diff(x);
        return mean_all(square(x));
    };
    check_grads(ps, loss);
}

TEST_CASE("conv2d gradients") {
    Rng rng(7);
    ParamStore ps;
    Param& x = ps.make("x", rng.normal_tensor({2, 2, 5, 5}));
    Param& w = ps.make("w", rng.normal_tensor({3, 2, 3, 3}, 0.4));
    Param& b = ps.make("b", rng.normal_tensor({3}));
    SUBCASE("stride 1") {
        auto loss = [&] {
            return mean_all(square(conv2d(leaf(x), leaf(w), leaf(b), 1, 1)));
        };
        check_grads(ps, loss, 1e-5);
    }
    SUBCASE("stride 2") {
        auto loss = [&] {
            return mean_all(square(conv2d(leaf(x), leaf(w), leaf(b), 2, 1)));
        };
        check_grads(ps, loss, 1e-5);
    }
}

TEST_CASE("pooling, upsampling and crop gradients") {
    Rng rng(8);
    ParamStore ps;
    Param& x = ps.make("x", rng.normal_tensor({2, 3, 4, 4}));
    auto loss = [&] {
        Var u = upsample2x(leaf(x));
        u = crop2d(u, 7, 6);
        Var p = avgpool2x(crop2d(upsample2x(leaf(x)), 8, 8));
        return add(mean_all(square(u)), mean_all(square(p)));
    };
    check_grads(ps, loss);
}

TEST_CASE("norm and film gradients") {
    Rng rng(9);
    ParamStore ps;
    Param& x = ps.make("x", rng.normal_tensor({2, 3, 4, 4}));
    Param& g = ps.make("g", rng.normal_tensor({3}, 0.3));
    Param& b = ps.make("b", rng.normal_tensor({3}, 0.3));
    auto loss = [&] {
        Var h = instance_norm(leaf(x));
        h = channel_scale_shift(h, leaf(g), leaf(b));
        h = film(h, leaf(b), leaf(g));
        return mean_all(square(h));
    };
    check_grads(ps, loss, 1e-5);
}

TEST_CASE("frame and plane reduction gradients") {
    Rng rng(10);
    ParamStore ps;
    Param& x = ps.make("x", rng.normal_tensor({4, 2, 3, 3}));
    Param& v = ps.make("v", rng.normal_tensor({2}));
    auto loss = [&] {
        Var f = avgpool_frames(leaf(x), 2);
        Var parts = concat_frames({narrow_frames(f, 0, 1), narrow_frames(f, 1, 1)});
        Var hw = plane_hw(parts);
        Var hs = plane_hs(parts);
        Var ws = plane_ws(parts);
        Var bh = broadcast_col_hs(hs, 1, 3);
        Var bw = broadcast_col_ws(ws, 0, 3);
        Var vm = vec_to_map(leaf(v), 3, 3);
        Var all = concat_ch({hw, bh, bw, vm});
        return mean_all(square(all));
    };
    check_grads(ps, loss);
}

TEST_CASE("token conversion gradients") {
    Rng rng(11);
    ParamStore ps;
    Param& x = ps.make("x", rng.normal_tensor({1, 4, 3, 2}));
    auto loss = [&] {
        Var t = chw_to_tokens(leaf(x));
        Var back = tokens_to_chw(softmax_rows(t), 3, 2);
        return mean_all(square(back));
    };
    check_grads(ps, loss);
}

TEST_CASE("token round trip is exact") {
    Rng rng(12);
    Tensor x = rng.normal_tensor({1, 5, 2, 3});
    NoGrad ng;
    Var back = tokens_to_chw(chw_to_tokens(constant(x)), 2, 3);
    CHECK(back->val.vec() == x.vec());
}

TEST_CASE("adam determinism and progress") {
    auto run = [] {
        Rng rng(13);
        ParamStore ps;
        Param& w = ps.make("w", rng.normal_tensor({4, 4}));
        Adam opt;
        opt.lr = 0.1;
        double first = 0.0, last = 0.0;
        for (int i = 0; i < 200; ++i) {
            w.zero_grad();
            Var loss = mse(leaf(w), constant(Tensor::full({4, 4}, 1.0)));
            if (i == 0) first = loss->val[0];
            last = loss->val[0];
            backward(loss);
            opt.step(ps.all());
        }
        CHECK(last < 0.05 * first);
        return w.value.vec();
    };
    CHECK(run() == run());
}

TEST_CASE("no-grad leaves build constant nodes") {
    Rng rng(14);
    ParamStore ps;
    Param& w = ps.make("w", rng.normal_tensor({2, 2}));
    NoGrad ng;
    Var x = square(leaf(w));
    CHECK_FALSE(x->requires_grad);
}

TEST_CASE("timestep features are bounded and distinct") {
    Tensor a = timestep_features(10, 16), b = timestep_features(11, 16);
    CHECK(a.numel() == 16);
    for (double v : a.vec()) CHECK(std::abs(v) <= 1.0);
    CHECK(a.vec() != b.vec());
}

TEST_CASE("param store round trip and digest") {
    Rng rng(15);
    ParamStore ps;
    ps.make("w1", rng.normal_tensor({3, 3}));
    ps.make("w2", rng.normal_tensor({2}));
    std::string d1 = ps.digest();
    NamedTensors t = ps.to_tensors("m.");

    ParamStore ps2;
    ps2.make("w1", Tensor({3, 3}));
    ps2.make("w2", Tensor({2}));
    CHECK(ps2.digest() != d1);
    ps2.load(t, "m.");
    CHECK(ps2.digest() == d1);
    CHECK(ps.count_scalars() == 11);
}
