#include "mdtk/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace mdtk::nn {

namespace {

std::atomic<long long> g_topo{0};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t) { return MapMat(t.data(), t.dim(0), t.dim(1)); }
CMapMat as_mat(const Tensor& t) { return CMapMat(t.data(), t.dim(0), t.dim(1)); }

Var make_node(Tensor val, std::vector<Var> parents,
              std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    for (const auto& p : parents) n->requires_grad |= p->requires_grad;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
    }
    n->topo_id = ++g_topo;
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    a->val.shape_str() + " vs " + b->val.shape_str());
}

Var unary(const Var& a, Tensor out,
          const std::function<double(double /*x*/, double /*y*/)>& dfn) {
    return make_node(std::move(out), {a}, [a, dfn](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (std::int64_t i = 0; i < n.val.numel(); ++i)
            ga[i] += n.grad[i] * dfn(a->val[i], n.val[i]);
    });
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.numel() == 0) grad = Tensor(val.shape());
    return grad;
}

Param::Param(std::string n, Tensor init)
    : name(std::move(n)),
      value(std::move(init)),
      grad(value.shape()),
      adam_m(value.shape()),
      adam_v(value.shape()) {}

void Param::zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), 0.0); }

Param& ParamStore::make(const std::string& name, Tensor init) {
    owned.push_back(std::make_unique<Param>(name, std::move(init)));
    return *owned.back();
}

std::vector<Param*> ParamStore::all() const {
    std::vector<Param*> out;
    out.reserve(owned.size());
    for (const auto& p : owned) out.push_back(p.get());
    return out;
}

std::int64_t ParamStore::count_scalars() const {
    std::int64_t n = 0;
    for (const auto& p : owned) n += p->value.numel();
    return n;
}

NamedTensors ParamStore::to_tensors(const std::string& prefix) const {
    NamedTensors t;
    for (const auto& p : owned) t.add(prefix + p->name, p->value);
    return t;
}

void ParamStore::load(const NamedTensors& t, const std::string& prefix) {
    for (const auto& p : owned) {
        const Tensor& src = t.get(prefix + p->name);
        if (!src.same_shape(p->value))
            throw std::runtime_error("ParamStore::load: shape mismatch for " + p->name);
        p->value = src;
    }
}

std::string ParamStore::digest(const std::string& prefix) const {
    std::string bytes = serialize_tensors(to_tensors(prefix));
    return sha256_hex(bytes.data(), bytes.size());
}

void Adam::step(const std::vector<Param*>& params) {
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (Param* p : params) {
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            double g = p->grad[i];
            p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
            p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
            double mh = p->adam_m[i] / c1;
            double vh = p->adam_v[i] / c2;
            p->value[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

double grad_norm(const std::vector<Param*>& params) {
    double acc = 0.0;
    for (const Param* p : params)
        for (std::int64_t i = 0; i < p->grad.numel(); ++i) acc += p->grad[i] * p->grad[i];
    return std::sqrt(acc);
}

Var constant(Tensor v) { return make_node(std::move(v), {}, nullptr); }

namespace {
thread_local bool g_no_grad = false;
}

NoGrad::NoGrad() : prev_(g_no_grad) { g_no_grad = true; }
NoGrad::~NoGrad() { g_no_grad = prev_; }

Var leaf(Param& p) {
    if (g_no_grad) return constant(p.value);
    auto n = std::make_shared<Node>();
    n->val = p.value;
    n->requires_grad = true;
    Param* pp = &p;
    n->backfn = [pp](Node& node) {
        for (std::int64_t i = 0; i < node.grad.numel(); ++i) pp->grad[i] += node.grad[i];
    };
    n->topo_id = ++g_topo;
    return n;
}

void backward(const Var& loss) {
    if (loss->val.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](Node* a, Node* b) { return a->topo_id > b->topo_id; });
    loss->ensure_grad()[0] = 1.0;
    for (Node* n : order) {
        if (!n->backfn || n->grad.numel() == 0) continue;
        n->backfn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * a->val[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = c * a->val[i];
    return make_node(std::move(out), {a}, [a, c](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += c * n.grad[i];
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + c;
    return make_node(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
    });
}

Var square(const Var& a) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * a->val[i];
    return unary(a, std::move(out), [](double x, double) { return 2.0 * x; });
}

Var sqrt_op(const Var& a) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(a->val[i]);
    return unary(a, std::move(out), [](double, double y) { return 0.5 / y; });
}

Var relu(const Var& a) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, a->val[i]);
    return unary(a, std::move(out), [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = a->val[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    return unary(a, std::move(out), [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
    });
}

Var sigmoid(const Var& a) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-a->val[i]));
    return unary(a, std::move(out), [](double, double y) { return y * (1.0 - y); });
}

Var tanh_op(const Var& a) {
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(a->val[i]);
    return unary(a, std::move(out), [](double, double y) { return 1.0 - y * y; });
}

Var sub_bcast(const Var& a, const Var& s) {
    Tensor out(a->val.shape());
    double sv = s->val[0];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - sv;
    return make_node(std::move(out), {a, s}, [a, s](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (s->requires_grad) {
            Tensor& g = s->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[0] -= n.grad[i];
        }
    });
}

Var mul_bcast(const Var& a, const Var& s) {
    Tensor out(a->val.shape());
    double sv = s->val[0];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * sv;
    return make_node(std::move(out), {a, s}, [a, s](Node& n) {
        double sv = s->val[0];
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * sv;
        }
        if (s->requires_grad) {
            Tensor& g = s->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[0] += n.grad[i] * a->val[i];
        }
    });
}

Var div_bcast(const Var& a, const Var& s) {
    Tensor out(a->val.shape());
    double sv = s->val[0];
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] / sv;
    return make_node(std::move(out), {a, s}, [a, s](Node& n) {
        double sv = s->val[0];
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] / sv;
        }
        if (s->requires_grad) {
            Tensor& g = s->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                g[0] -= n.grad[i] * a->val[i] / (sv * sv);
        }
    });
}

Var sum_all(const Var& a) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < a->val.numel(); ++i) acc += a->val[i];
    return make_node(Tensor::scalar(acc), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel()));
}

Var mse(const Var& a, const Var& b) { return mean_all(square(sub(a, b))); }

Var l1(const Var& a, const Var& b) {
    check_same_shape(a, b, "l1");
    Tensor out(a->val.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    auto diff = make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] -= n.grad[i];
        }
    });
    Tensor av(diff->val.shape());
    for (std::int64_t i = 0; i < av.numel(); ++i) av[i] = std::abs(diff->val[i]);
    auto absn = unary(diff, std::move(av),
                      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
    return mean_all(absn);
}

Var matmul(const Var& a, const Var& b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + a->val.shape_str() +
                                    " x " + b->val.shape_str());
    Tensor out({a->val.dim(0), b->val.dim(1)});
    as_mat(out) = as_mat(a->val) * as_mat(b->val);
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            as_mat(g) += as_mat(n.grad) * as_mat(b->val).transpose();
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            as_mat(g) += as_mat(a->val).transpose() * as_mat(n.grad);
        }
    });
}

Var transpose2d(const Var& a) {
    Tensor out({a->val.dim(1), a->val.dim(0)});
    as_mat(out) = as_mat(a->val).transpose();
    return make_node(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        as_mat(g) += as_mat(n.grad).transpose();
    });
}

Var add_rowvec(const Var& a, const Var& v) {
    const int M = a->val.dim(0), N = a->val.dim(1);
    if (v->val.numel() != N) throw std::invalid_argument("add_rowvec: width mismatch");
    Tensor out(a->val.shape());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) out.at(i, j) = a->val.at(i, j) + v->val[j];
    return make_node(std::move(out), {a, v}, [a, v, M, N](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
        }
        if (v->requires_grad) {
            Tensor& g = v->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j);
        }
    });
}

Var mul_rowvec(const Var& a, const Var& v) {
    const int M = a->val.dim(0), N = a->val.dim(1);
    if (v->val.numel() != N) throw std::invalid_argument("mul_rowvec: width mismatch");
    Tensor out(a->val.shape());
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) out.at(i, j) = a->val.at(i, j) * v->val[j];
    return make_node(std::move(out), {a, v}, [a, v, M, N](Node& n) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) g.at(i, j) += n.grad.at(i, j) * v->val[j];
        }
        if (v->requires_grad) {
            Tensor& g = v->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j) g[j] += n.grad.at(i, j) * a->val.at(i, j);
        }
    });
}

Var softmax_rows(const Var& a) {
    const int M = a->val.dim(0), N = a->val.dim(1);
    Tensor out(a->val.shape());
    for (int i = 0; i < M; ++i) {
        double mx = -1e300;
        for (int j = 0; j < N; ++j) mx = std::max(mx, a->val.at(i, j));
        double z = 0.0;
        for (int j = 0; j < N; ++j) {
            out.at(i, j) = std::exp(a->val.at(i, j) - mx);
            z += out.at(i, j);
        }
        for (int j = 0; j < N; ++j) out.at(i, j) /= z;
    }
    return make_node(std::move(out), {a}, [a, M, N](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < M; ++i) {
            double dot = 0.0;
            for (int j = 0; j < N; ++j) dot += n.grad.at(i, j) * n.val.at(i, j);
            for (int j = 0; j < N; ++j)
                g.at(i, j) += n.val.at(i, j) * (n.grad.at(i, j) - dot);
        }
    });
}

Var layernorm_rows(const Var& a, double eps) {
    const int M = a->val.dim(0), N = a->val.dim(1);
    Tensor out(a->val.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
        double mu = 0.0;
        for (int j = 0; j < N; ++j) mu += a->val.at(i, j);
        mu /= N;
        double var = 0.0;
        for (int j = 0; j < N; ++j) {
            double d = a->val.at(i, j) - mu;
            var += d * d;
        }
        var /= N;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < N; ++j) out.at(i, j) = (a->val.at(i, j) - mu) * is;
    }
    return make_node(std::move(out), {a}, [a, M, N, inv_sigma](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < M; ++i) {
            double mg = 0.0, mgy = 0.0;
            for (int j = 0; j < N; ++j) {
                mg += n.grad.at(i, j);
                mgy += n.grad.at(i, j) * n.val.at(i, j);
            }
            mg /= N;
            mgy /= N;
            double is = (*inv_sigma)[static_cast<std::size_t>(i)];
            for (int j = 0; j < N; ++j)
                g.at(i, j) += is * (n.grad.at(i, j) - mg - n.val.at(i, j) * mgy);
        }
    });
}

Var narrow(const Var& a, int axis, int start, int len) {
    if (a->val.ndim() != 2 || axis < 0 || axis > 1)
        throw std::invalid_argument("narrow: expects 2-D tensor, axis 0/1");
    const int M = a->val.dim(0), N = a->val.dim(1);
    if (start < 0 || start + len > a->val.dim(axis))
        throw std::invalid_argument("narrow: out of range");
    Tensor out(axis == 0 ? std::vector<int>{len, N} : std::vector<int>{M, len});
    if (axis == 0) {
        for (int i = 0; i < len; ++i)
            for (int j = 0; j < N; ++j) out.at(i, j) = a->val.at(start + i, j);
    } else {
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < len; ++j) out.at(i, j) = a->val.at(i, start + j);
    }
    return make_node(std::move(out), {a}, [a, axis, start, len, M, N](Node& n) {
        Tensor& g = a->ensure_grad();
        if (axis == 0) {
            for (int i = 0; i < len; ++i)
                for (int j = 0; j < N; ++j) g.at(start + i, j) += n.grad.at(i, j);
        } else {
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < len; ++j) g.at(i, start + j) += n.grad.at(i, j);
        }
    });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty");
    if (axis < 0 || axis > 1) throw std::invalid_argument("concat: axis 0/1");
    int other = 1 - axis;
    int total = 0;
    for (const auto& p : parts) {
        if (p->val.ndim() != 2 || p->val.dim(other) != parts[0]->val.dim(other))
            throw std::invalid_argument("concat: incompatible shapes");
        total += p->val.dim(axis);
    }
    Tensor out(axis == 0 ? std::vector<int>{total, parts[0]->val.dim(1)}
                         : std::vector<int>{parts[0]->val.dim(0), total});
    int off = 0;
    for (const auto& p : parts) {
        int len = p->val.dim(axis);
        if (axis == 0) {
            for (int i = 0; i < len; ++i)
                for (int j = 0; j < out.dim(1); ++j) out.at(off + i, j) = p->val.at(i, j);
        } else {
            for (int i = 0; i < out.dim(0); ++i)
                for (int j = 0; j < len; ++j) out.at(i, off + j) = p->val.at(i, j);
        }
        off += len;
    }
    auto parts_copy = parts;
    return make_node(std::move(out), parts, [parts_copy, axis](Node& n) {
        int off = 0;
        for (const auto& p : parts_copy) {
            int len = p->val.dim(axis);
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                if (axis == 0) {
                    for (int i = 0; i < len; ++i)
                        for (int j = 0; j < n.val.dim(1); ++j)
                            g.at(i, j) += n.grad.at(off + i, j);
                } else {
                    for (int i = 0; i < n.val.dim(0); ++i)
                        for (int j = 0; j < len; ++j) g.at(i, j) += n.grad.at(i, off + j);
                }
            }
            off += len;
        }
    });
}

Var select_cols(const Var& a, const std::vector<int>& idx) {
    const int M = a->val.dim(0);
    Tensor out({M, static_cast<int>(idx.size())});
    for (int i = 0; i < M; ++i)
        for (std::size_t j = 0; j < idx.size(); ++j)
            out.at(i, static_cast<int>(j)) = a->val.at(i, idx[j]);
    return make_node(std::move(out), {a}, [a, idx, M](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < M; ++i)
            for (std::size_t j = 0; j < idx.size(); ++j)
                g.at(i, idx[j]) += n.grad.at(i, static_cast<int>(j));
    });
}

Var scatter_cols(const Var& a, const std::vector<int>& idx, int width) {
    const int M = a->val.dim(0);
    if (a->val.dim(1) != static_cast<int>(idx.size()))
        throw std::invalid_argument("scatter_cols: index count mismatch");
    Tensor out({M, width});
    for (int i = 0; i < M; ++i)
        for (std::size_t j = 0; j < idx.size(); ++j)
            out.at(i, idx[j]) = a->val.at(i, static_cast<int>(j));
    return make_node(std::move(out), {a}, [a, idx, M](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i < M; ++i)
            for (std::size_t j = 0; j < idx.size(); ++j)
                g.at(i, static_cast<int>(j)) += n.grad.at(i, idx[j]);
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a->val.reshaped(std::move(shape));
    return make_node(std::move(out), {a}, [a](Node& n) {
        Tensor& g = a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
    });
}

Var row_diff(const Var& a) {
    const int M = a->val.dim(0), N = a->val.dim(1);
    if (M < 2) throw std::invalid_argument("row_diff: need at least 2 rows");
    Tensor out({M - 1, N});
    for (int i = 0; i + 1 < M; ++i)
        for (int j = 0; j < N; ++j) out.at(i, j) = a->val.at(i + 1, j) - a->val.at(i, j);
    return make_node(std::move(out), {a}, [a, M, N](Node& n) {
        Tensor& g = a->ensure_grad();
        for (int i = 0; i + 1 < M; ++i)
            for (int j = 0; j < N; ++j) {
                g.at(i + 1, j) += n.grad.at(i, j);
                g.at(i, j) -= n.grad.at(i, j);
            }
    });
}

Var repeat_rows(const Var& row, int times) {
    if (row->val.ndim() != 2 || row->val.dim(0) != 1)
        throw std::invalid_argument("repeat_rows: expects [1,D]");
    const int D = row->val.dim(1);
    Tensor out({times, D});
    for (int i = 0; i < times; ++i)
        for (int j = 0; j < D; ++j) out.at(i, j) = row->val.at(0, j);
    return make_node(std::move(out), {row}, [row, times, D](Node& n) {
        Tensor& g = row->ensure_grad();
        for (int i = 0; i < times; ++i)
            for (int j = 0; j < D; ++j) g.at(0, j) += n.grad.at(i, j);
    });
}

// --- 4-D ops ---

namespace {

void conv_shapes(const Tensor& x, const Tensor& w, int stride, int pad, int& OH,
                 int& OW) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw std::invalid_argument("conv2d: expects 4-D input and weight");
    if (x.dim(1) != w.dim(1))
        throw std::invalid_argument("conv2d: channel mismatch: input " + x.shape_str() +
                                    " weight " + w.shape_str());
    OH = (x.dim(2) + 2 * pad - w.dim(2)) / stride + 1;
    OW = (x.dim(3) + 2 * pad - w.dim(3)) / stride + 1;
    if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output too small");
}

void im2col(const Tensor& x, int n, int kh, int kw, int stride, int pad, int OH, int OW,
            RowMat& col) {
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    col.resize(C * kh * kw, OH * OW);
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int row = (c * kh + ki) * kw + kj;
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + ki;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride - pad + kj;
                        col(row, oh * OW + ow) =
                            (ih >= 0 && ih < H && iw >= 0 && iw < W) ? x.at(n, c, ih, iw)
                                                                     : 0.0;
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    int OH, OW;
    conv_shapes(x->val, w->val, stride, pad, OH, OW);
    const int N = x->val.dim(0), OC = w->val.dim(0);
    const int kh = w->val.dim(2), kw = w->val.dim(3);
    if (b->val.numel() != OC) throw std::invalid_argument("conv2d: bias size mismatch");

    Tensor out({N, OC, OH, OW});
    CMapMat wmat(w->val.data(), OC, w->val.dim(1) * kh * kw);
    RowMat col;
    for (int n = 0; n < N; ++n) {
        im2col(x->val, n, kh, kw, stride, pad, OH, OW, col);
        MapMat omat(out.data() + static_cast<std::size_t>(n) * OC * OH * OW, OC, OH * OW);
        omat = wmat * col;
        for (int oc = 0; oc < OC; ++oc) omat.row(oc).array() += b->val[oc];
    }
    return make_node(std::move(out), {x, w, b}, [x, w, b, stride, pad, OH, OW](Node& n) {
        const int N = x->val.dim(0), OC = w->val.dim(0);
        const int C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
        const int kh = w->val.dim(2), kw = w->val.dim(3);
        RowMat col;
        CMapMat wmat(w->val.data(), OC, C * kh * kw);
        for (int item = 0; item < N; ++item) {
            CMapMat gout(n.grad.data() + static_cast<std::size_t>(item) * OC * OH * OW,
                         OC, OH * OW);
            if (b->requires_grad) {
                // Plain sequential sum: Eigen's vectorized reduction orders
                // the additions by buffer alignment, which varies run to run.
                Tensor& gb = b->ensure_grad();
                const double* g = n.grad.data() +
                                  static_cast<std::size_t>(item) * OC * OH * OW;
                for (int oc = 0; oc < OC; ++oc) {
                    double acc = 0.0;
                    for (int i = 0; i < OH * OW; ++i) acc += g[oc * OH * OW + i];
                    gb[oc] += acc;
                }
            }
            if (w->requires_grad || x->requires_grad)
                im2col(x->val, item, kh, kw, stride, pad, OH, OW, col);
            if (w->requires_grad) {
                Tensor& gw = w->ensure_grad();
                MapMat gwmat(gw.data(), OC, C * kh * kw);
                gwmat += gout * col.transpose();
            }
            if (x->requires_grad) {
                RowMat gcol = wmat.transpose() * gout;
                Tensor& gx = x->ensure_grad();
                for (int c = 0; c < C; ++c)
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                            int row = (c * kh + ki) * kw + kj;
                            for (int oh = 0; oh < OH; ++oh) {
                                int ih = oh * stride - pad + ki;
                                if (ih < 0 || ih >= H) continue;
                                for (int ow = 0; ow < OW; ++ow) {
                                    int iw = ow * stride - pad + kj;
                                    if (iw < 0 || iw >= W) continue;
                                    gx.at(item, c, ih, iw) += gcol(row, oh * OW + ow);
                                }
                            }
                        }
            }
        }
    });
}

Var upsample2x(const Var& x) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h)
                for (int w = 0; w < 2 * W; ++w)
                    out.at(n, c, h, w) = x->val.at(n, c, h / 2, w / 2);
    return make_node(std::move(out), {x}, [x, N, C, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int item = 0; item < N; ++item)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < 2 * H; ++h)
                    for (int w = 0; w < 2 * W; ++w)
                        g.at(item, c, h / 2, w / 2) += n.grad.at(item, c, h, w);
    });
}

Var avgpool2x(const Var& x) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H % 2 != 0 || W % 2 != 0) throw std::invalid_argument("avgpool2x: odd extent");
    Tensor out({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H / 2; ++h)
                for (int w = 0; w < W / 2; ++w)
                    out.at(n, c, h, w) =
                        0.25 * (x->val.at(n, c, 2 * h, 2 * w) +
                                x->val.at(n, c, 2 * h, 2 * w + 1) +
                                x->val.at(n, c, 2 * h + 1, 2 * w) +
                                x->val.at(n, c, 2 * h + 1, 2 * w + 1));
    return make_node(std::move(out), {x}, [x, N, C, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int item = 0; item < N; ++item)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H / 2; ++h)
                    for (int w = 0; w < W / 2; ++w) {
                        double v = 0.25 * n.grad.at(item, c, h, w);
                        g.at(item, c, 2 * h, 2 * w) += v;
                        g.at(item, c, 2 * h, 2 * w + 1) += v;
                        g.at(item, c, 2 * h + 1, 2 * w) += v;
                        g.at(item, c, 2 * h + 1, 2 * w + 1) += v;
                    }
    });
}

Var crop2d(const Var& x, int H, int W) {
    const int N = x->val.dim(0), C = x->val.dim(1);
    const int XH = x->val.dim(2), XW = x->val.dim(3);
    if (H > XH || W > XW) throw std::invalid_argument("crop2d: target larger than input");
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) out.at(n, c, h, w) = x->val.at(n, c, h, w);
    return make_node(std::move(out), {x}, [x, N, C, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int item = 0; item < N; ++item)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w < W; ++w)
                        g.at(item, c, h, w) += n.grad.at(item, c, h, w);
    });
}

Var chw_to_tokens(const Var& x) {
    if (x->val.ndim() != 4 || x->val.dim(0) != 1)
        throw std::invalid_argument("chw_to_tokens: expects [1,C,H,W]");
    const int C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({H * W, C});
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) out.at(h * W + w, c) = x->val.at(0, c, h, w);
    return make_node(std::move(out), {x}, [x, C, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) g.at(0, c, h, w) += n.grad.at(h * W + w, c);
    });
}

Var tokens_to_chw(const Var& t, int H, int W) {
    const int C = t->val.dim(1);
    if (t->val.dim(0) != H * W)
        throw std::invalid_argument("tokens_to_chw: token count mismatch");
    Tensor out({1, C, H, W});
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) out.at(0, c, h, w) = t->val.at(h * W + w, c);
    return make_node(std::move(out), {t}, [t, C, H, W](Node& n) {
        Tensor& g = t->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) g.at(h * W + w, c) += n.grad.at(0, c, h, w);
    });
}

Var instance_norm(const Var& x, double eps) {
    const int N = x->val.dim(0);
    const std::int64_t M = x->val.numel() / N;
    Tensor out(x->val.shape());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const double* src = x->val.data() + n * M;
        double* dst = out.data() + n * M;
        double mu = 0.0;
        for (std::int64_t i = 0; i < M; ++i) mu += src[i];
        mu /= static_cast<double>(M);
        double var = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
            double d = src[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(M);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(n)] = is;
        for (std::int64_t i = 0; i < M; ++i) dst[i] = (src[i] - mu) * is;
    }
    return make_node(std::move(out), {x}, [x, N, M, inv_sigma](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int item = 0; item < N; ++item) {
            const double* y = n.val.data() + item * M;
            const double* gy = n.grad.data() + item * M;
            double* gx = g.data() + item * M;
            double mg = 0.0, mgy = 0.0;
            for (std::int64_t i = 0; i < M; ++i) {
                mg += gy[i];
                mgy += gy[i] * y[i];
            }
            mg /= static_cast<double>(M);
            mgy /= static_cast<double>(M);
            double is = (*inv_sigma)[static_cast<std::size_t>(item)];
            for (std::int64_t i = 0; i < M; ++i)
                gx[i] += is * (gy[i] - mg - y[i] * mgy);
        }
    });
}

namespace {

Var channel_affine(const Var& x, const Var& a_ch, const Var& b_ch, bool plus_one) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (a_ch->val.numel() != C || b_ch->val.numel() != C)
        throw std::invalid_argument("channel affine: channel count mismatch");
    Tensor out(x->val.shape());
    const double base = plus_one ? 1.0 : 0.0;
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = base + a_ch->val[c], b = b_ch->val[c];
            const double* src = x->val.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            double* dst = out.data() + (static_cast<std::int64_t>(n) * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * s + b;
        }
    return make_node(std::move(out), {x, a_ch, b_ch},
                     [x, a_ch, b_ch, N, C, HW, base](Node& n) {
                         for (int item = 0; item < N; ++item)
                             for (int c = 0; c < C; ++c) {
                                 std::int64_t off =
                                     (static_cast<std::int64_t>(item) * C + c) * HW;
                                 const double* gy = n.grad.data() + off;
                                 const double* xs = x->val.data() + off;
                                 if (x->requires_grad) {
                                     double s = base + a_ch->val[c];
                                     double* gx = x->ensure_grad().data() + off;
                                     for (std::int64_t i = 0; i < HW; ++i)
                                         gx[i] += gy[i] * s;
                                 }
                                 if (a_ch->requires_grad) {
                                     double acc = 0.0;
                                     for (std::int64_t i = 0; i < HW; ++i)
                                         acc += gy[i] * xs[i];
                                     a_ch->ensure_grad()[c] += acc;
                                 }
                                 if (b_ch->requires_grad) {
                                     double acc = 0.0;
                                     for (std::int64_t i = 0; i < HW; ++i) acc += gy[i];
                                     b_ch->ensure_grad()[c] += acc;
                                 }
                             }
                     });
}

}  // namespace

Var channel_scale_shift(const Var& x, const Var& gamma, const Var& beta) {
    return channel_affine(x, gamma, beta, false);
}

Var film(const Var& x, const Var& scale_ch, const Var& shift_ch) {
    return channel_affine(x, scale_ch, shift_ch, true);
}

Var concat_ch(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_ch: empty");
    const int N = parts[0]->val.dim(0), H = parts[0]->val.dim(2), W = parts[0]->val.dim(3);
    int C = 0;
    for (const auto& p : parts) {
        if (p->val.ndim() != 4 || p->val.dim(0) != N || p->val.dim(2) != H ||
            p->val.dim(3) != W)
            throw std::invalid_argument("concat_ch: incompatible shapes");
        C += p->val.dim(1);
    }
    Tensor out({N, C, H, W});
    const std::int64_t HW = static_cast<std::int64_t>(H) * W;
    int coff = 0;
    for (const auto& p : parts) {
        int pc = p->val.dim(1);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < pc; ++c)
                std::copy_n(p->val.data() + (static_cast<std::int64_t>(n) * pc + c) * HW,
                            HW,
                            out.data() +
                                (static_cast<std::int64_t>(n) * C + coff + c) * HW);
        coff += pc;
    }
    auto parts_copy = parts;
    return make_node(std::move(out), parts, [parts_copy, N, C, HW](Node& n) {
        int coff = 0;
        for (const auto& p : parts_copy) {
            int pc = p->val.dim(1);
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (int item = 0; item < N; ++item)
                    for (int c = 0; c < pc; ++c) {
                        const double* gy =
                            n.grad.data() +
                            (static_cast<std::int64_t>(item) * C + coff + c) * HW;
                        double* gx =
                            g.data() + (static_cast<std::int64_t>(item) * pc + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) gx[i] += gy[i];
                    }
            }
            coff += pc;
        }
    });
}

Var narrow_frames(const Var& x, int start, int len) {
    const int N = x->val.dim(0);
    if (start < 0 || start + len > N) throw std::invalid_argument("narrow_frames: range");
    const std::int64_t M = x->val.numel() / N;
    std::vector<int> shape = x->val.shape();
    shape[0] = len;
    Tensor out(shape);
    std::copy_n(x->val.data() + start * M, len * M, out.data());
    return make_node(std::move(out), {x}, [x, start, len, M](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t i = 0; i < len * M; ++i) g[start * M + i] += n.grad[i];
    });
}

Var concat_frames(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_frames: empty");
    std::vector<int> shape = parts[0]->val.shape();
    int N = 0;
    for (const auto& p : parts) N += p->val.dim(0);
    shape[0] = N;
    Tensor out(shape);
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p->val.data(), p->val.numel(), out.data() + off);
        off += p->val.numel();
    }
    auto parts_copy = parts;
    return make_node(std::move(out), parts, [parts_copy](Node& n) {
        std::int64_t off = 0;
        for (const auto& p : parts_copy) {
            if (p->requires_grad) {
                Tensor& g = p->ensure_grad();
                for (std::int64_t i = 0; i < p->val.numel(); ++i)
                    g[i] += n.grad[off + i];
            }
            off += p->val.numel();
        }
    });
}

Var avgpool_frames(const Var& x, int factor) {
    const int N = x->val.dim(0);
    if (factor < 1 || N % factor != 0)
        throw std::invalid_argument("avgpool_frames: frame count not divisible");
    const std::int64_t M = x->val.numel() / N;
    std::vector<int> shape = x->val.shape();
    shape[0] = N / factor;
    Tensor out(shape);
    for (int g = 0; g < N / factor; ++g)
        for (std::int64_t i = 0; i < M; ++i) {
            double acc = 0.0;
            for (int k = 0; k < factor; ++k) acc += x->val[(g * factor + k) * M + i];
            out[g * M + i] = acc / factor;
        }
    return make_node(std::move(out), {x}, [x, factor, M](Node& n) {
        Tensor& g = x->ensure_grad();
        const int G = n.val.dim(0);
        for (int b = 0; b < G; ++b)
            for (std::int64_t i = 0; i < M; ++i) {
                double v = n.grad[b * M + i] / factor;
                for (int k = 0; k < factor; ++k) g[(b * factor + k) * M + i] += v;
            }
    });
}

Var plane_hw(const Var& x) {
    const int S = x->val.dim(0), F = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({1, F, H, W});
    const std::int64_t M = static_cast<std::int64_t>(F) * H * W;
    for (std::int64_t i = 0; i < M; ++i) {
        double acc = 0.0;
        for (int s = 0; s < S; ++s) acc += x->val[s * M + i];
        out[i] = acc / S;
    }
    return make_node(std::move(out), {x}, [x, S, M](Node& n) {
        Tensor& g = x->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i) {
            double v = n.grad[i] / S;
            for (int s = 0; s < S; ++s) g[s * M + i] += v;
        }
    });
}

Var plane_hs(const Var& x) {
    const int S = x->val.dim(0), F = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({1, F, H, S});
    for (int f = 0; f < F; ++f)
        for (int h = 0; h < H; ++h)
            for (int s = 0; s < S; ++s) {
                double acc = 0.0;
                for (int w = 0; w < W; ++w) acc += x->val.at(s, f, h, w);
                out.at(0, f, h, s) = acc / W;
            }
    return make_node(std::move(out), {x}, [x, S, F, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int f = 0; f < F; ++f)
            for (int h = 0; h < H; ++h)
                for (int s = 0; s < S; ++s) {
                    double v = n.grad.at(0, f, h, s) / W;
                    for (int w = 0; w < W; ++w) g.at(s, f, h, w) += v;
                }
    });
}

Var plane_ws(const Var& x) {
    const int S = x->val.dim(0), F = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({1, F, W, S});
    for (int f = 0; f < F; ++f)
        for (int w = 0; w < W; ++w)
            for (int s = 0; s < S; ++s) {
                double acc = 0.0;
                for (int h = 0; h < H; ++h) acc += x->val.at(s, f, h, w);
                out.at(0, f, w, s) = acc / H;
            }
    return make_node(std::move(out), {x}, [x, S, F, H, W](Node& n) {
        Tensor& g = x->ensure_grad();
        for (int f = 0; f < F; ++f)
            for (int w = 0; w < W; ++w)
                for (int s = 0; s < S; ++s) {
                    double v = n.grad.at(0, f, w, s) / H;
                    for (int h = 0; h < H; ++h) g.at(s, f, h, w) += v;
                }
    });
}

Var broadcast_col_hs(const Var& plane, int s_idx, int w) {
    const int C = plane->val.dim(1), H = plane->val.dim(2);
    Tensor out({1, C, H, w});
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h) {
            double v = plane->val.at(0, c, h, s_idx);
            for (int j = 0; j < w; ++j) out.at(0, c, h, j) = v;
        }
    return make_node(std::move(out), {plane}, [plane, s_idx, C, H, w](Node& n) {
        Tensor& g = plane->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h) {
                double acc = 0.0;
                for (int j = 0; j < w; ++j) acc += n.grad.at(0, c, h, j);
                g.at(0, c, h, s_idx) += acc;
            }
    });
}

Var broadcast_col_ws(const Var& plane, int s_idx, int h) {
    const int C = plane->val.dim(1), W = plane->val.dim(2);
    Tensor out({1, C, h, W});
    for (int c = 0; c < C; ++c)
        for (int j = 0; j < W; ++j) {
            double v = plane->val.at(0, c, j, s_idx);
            for (int i = 0; i < h; ++i) out.at(0, c, i, j) = v;
        }
    return make_node(std::move(out), {plane}, [plane, s_idx, C, W, h](Node& n) {
        Tensor& g = plane->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int i = 0; i < h; ++i) acc += n.grad.at(0, c, i, j);
                g.at(0, c, j, s_idx) += acc;
            }
    });
}

Var vec_to_map(const Var& v, int h, int w) {
    const int C = static_cast<int>(v->val.numel());
    Tensor out({1, C, h, w});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) out.at(0, c, i, j) = v->val[c];
    return make_node(std::move(out), {v}, [v, C, h, w](Node& n) {
        Tensor& g = v->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j) acc += n.grad.at(0, c, i, j);
            g[c] += acc;
        }
    });
}

// --- layers ---

Tensor xavier_init(int fan_in, int fan_out, std::vector<int> shape, Rng& rng) {
    double std = std::sqrt(2.0 / (fan_in + fan_out));
    return rng.normal_tensor(std::move(shape), std);
}

Linear::Linear(ParamStore& ps, const std::string& name, int d_in, int d_out, Rng& rng) {
    W = &ps.make(name + ".W", xavier_init(d_in, d_out, {d_in, d_out}, rng));
    b = &ps.make(name + ".b", Tensor({d_out}));
}

Var Linear::operator()(const Var& x) const {
    return add_rowvec(matmul(x, leaf(*W)), leaf(*b));
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, int dim,
                                       int heads, Rng& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", dim, dim, rng),
      v(ps, name + ".v", dim, dim, rng),
      o(ps, name + ".o", dim, dim, rng),
      n_heads(heads) {
    if (dim % heads != 0)
        throw std::invalid_argument("MultiHeadAttention: dim not divisible by heads");
}

Var MultiHeadAttention::operator()(const Var& queries, const Var& memory) const {
    const int dim = queries->val.dim(1);
    const int dh = dim / n_heads;
    Var Q = q(queries), K = k(memory), V = v(memory);
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Var Qh = narrow(Q, 1, h * dh, dh);
        Var Kh = narrow(K, 1, h * dh, dh);
        Var Vh = narrow(V, 1, h * dh, dh);
        Var A = softmax_rows(scale(matmul(Qh, transpose2d(Kh)), 1.0 / std::sqrt(dh)));
        heads.push_back(matmul(A, Vh));
    }
    return o(concat(heads, 1));
}

FeedForward::FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden,
                         Rng& rng)
    : fc1(ps, name + ".fc1", dim, hidden, rng), fc2(ps, name + ".fc2", hidden, dim, rng) {}

Var FeedForward::operator()(const Var& x) const { return fc2(gelu(fc1(x))); }

LayerNormGain::LayerNormGain(ParamStore& ps, const std::string& name, int dim) {
    gamma = &ps.make(name + ".gamma", Tensor::full({dim}, 1.0));
    beta = &ps.make(name + ".beta", Tensor({dim}));
}

Var LayerNormGain::operator()(const Var& x) const {
    return add_rowvec(mul_rowvec(layernorm_rows(x), leaf(*gamma)), leaf(*beta));
}

Tensor timestep_features(int t, int dim) {
    if (dim % 2 != 0) throw std::invalid_argument("timestep_features: dim must be even");
    Tensor f({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
        f[i] = std::sin(t * freq);
        f[half + i] = std::cos(t * freq);
    }
    return f;
}

double finite_diff(Param& p, std::int64_t index, const std::function<double()>& f,
                   double h) {
    double saved = p.value[index];
    p.value[index] = saved + h;
    double fp = f();
    p.value[index] = saved - h;
    double fm = f();
    p.value[index] = saved;
    return (fp - fm) / (2.0 * h);
}

}  // namespace mdtk::nn
