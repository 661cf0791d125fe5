#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mdtk/io.hpp"
#include "mdtk/rng.hpp"
#include "mdtk/tensor.hpp"

namespace mdtk::nn {

// Reverse-mode autodiff over Tensor. Ops build a DAG of shared nodes;
// backward() walks reachable nodes in reverse creation order. Everything
// runs in f64 so analytic gradients can be checked against central
// finite differences directly.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on demand during backward
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;
    long long topo_id = 0;

    Tensor& ensure_grad();
};

// Trainable parameter with Adam state.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m, adam_v;

    explicit Param(std::string n, Tensor init);
    void zero_grad();
};

// Owns parameters in registration order; the order defines checkpoint
// layout and optimizer iteration.
struct ParamStore {
    std::vector<std::unique_ptr<Param>> owned;

    Param& make(const std::string& name, Tensor init);
    std::vector<Param*> all() const;
    std::int64_t count_scalars() const;
    NamedTensors to_tensors(const std::string& prefix = "") const;
    void load(const NamedTensors& t, const std::string& prefix = "");
    std::string digest(const std::string& prefix = "") const;
};

struct Adam {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    void step(const std::vector<Param*>& params);
};

double grad_norm(const std::vector<Param*>& params);

// --- graph construction ---
Var constant(Tensor v);
Var leaf(Param& p);
void backward(const Var& loss);

// While alive, leaf() returns constants so forward passes skip graph
// bookkeeping (sampling / evaluation).
struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

// elementwise / scalar
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var square(const Var& a);
Var sqrt_op(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_op(const Var& a);

// scalar-node broadcast (s has shape [1])
Var sub_bcast(const Var& a, const Var& s);
Var mul_bcast(const Var& a, const Var& s);
Var div_bcast(const Var& a, const Var& s);

// reductions
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mse(const Var& a, const Var& b);
Var l1(const Var& a, const Var& b);

// 2-D matrix ops (token matrices [T,D])
Var matmul(const Var& a, const Var& b);
Var transpose2d(const Var& a);
Var add_rowvec(const Var& a, const Var& v);  // v: [D], broadcast over rows
Var mul_rowvec(const Var& a, const Var& v);
Var softmax_rows(const Var& a);
Var layernorm_rows(const Var& a, double eps = 1e-5);
Var narrow(const Var& a, int axis, int start, int len);  // 2-D
Var concat(const std::vector<Var>& parts, int axis);     // 2-D
Var select_cols(const Var& a, const std::vector<int>& idx);
Var scatter_cols(const Var& a, const std::vector<int>& idx, int width);
Var reshape(const Var& a, std::vector<int> shape);
Var row_diff(const Var& a);      // a[1:] - a[:-1]
Var repeat_rows(const Var& row, int times);  // [1,D] -> [times,D]

// 4-D image ops (N,C,H,W)
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x(const Var& x);
Var avgpool2x(const Var& x);                 // 2x2 mean pooling
Var crop2d(const Var& x, int H, int W);      // keep top-left HxW
Var chw_to_tokens(const Var& x);             // [1,C,H,W] -> [H*W,C]
Var tokens_to_chw(const Var& t, int H, int W);  // [H*W,C] -> [1,C,H,W]
Var instance_norm(const Var& x, double eps = 1e-5);  // per item over C,H,W
Var channel_scale_shift(const Var& x, const Var& gamma, const Var& beta);
Var film(const Var& x, const Var& scale, const Var& shift);  // x*(1+scale)+shift per channel
Var concat_ch(const std::vector<Var>& parts);
Var narrow_frames(const Var& x, int start, int len);
Var concat_frames(const std::vector<Var>& parts);
Var avgpool_frames(const Var& x, int factor);
Var plane_hw(const Var& x);  // [S,F,h,w] -> [1,F,h,w], mean over S
Var plane_hs(const Var& x);  // [S,F,h,w] -> [1,F,h,S], mean over w
Var plane_ws(const Var& x);  // [S,F,h,w] -> [1,F,w,S], mean over h
Var broadcast_col_hs(const Var& plane, int s_idx, int w);  // [1,c,h,s] -> [1,c,h,w]
Var broadcast_col_ws(const Var& plane, int s_idx, int h);  // [1,c,w,s] -> [1,c,h,w]
Var vec_to_map(const Var& v, int h, int w);  // [C] -> [1,C,h,w]

// --- layers ---
struct Linear {
    Param *W = nullptr, *b = nullptr;
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int d_in, int d_out, Rng& rng);
    Var operator()(const Var& x) const;  // x: [T,d_in]
};

// Pre-norm multi-head attention over token matrices.
struct MultiHeadAttention {
    Linear q, k, v, o;
    int n_heads = 1;
    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& ps, const std::string& name, int dim, int heads,
                       Rng& rng);
    Var operator()(const Var& queries, const Var& memory) const;
};

struct FeedForward {
    Linear fc1, fc2;
    FeedForward() = default;
    FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden, Rng& rng);
    Var operator()(const Var& x) const;
};

struct LayerNormGain {
    Param *gamma = nullptr, *beta = nullptr;
    LayerNormGain() = default;
    LayerNormGain(ParamStore& ps, const std::string& name, int dim);
    Var operator()(const Var& x) const;
};

// Sinusoidal timestep features (constant w.r.t. parameters).
Tensor timestep_features(int t, int dim);

Tensor xavier_init(int fan_in, int fan_out, std::vector<int> shape, Rng& rng);

// Central finite-difference derivative of f w.r.t. one scalar of p.
double finite_diff(Param& p, std::int64_t index, const std::function<double()>& f,
                   double h = 1e-5);

}  // namespace mdtk::nn
