#pragma once

// Small reverse-mode autodiff over dense double tensors. Covers exactly the
// ops the encoders and task heads need: dense/conv layers, layernorm,
// attention building blocks, bilinear resizing, and the loss primitives.
// Single-threaded and deterministic; all math in 64-bit.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "mammolab/common.hpp"

namespace mammolab::ag {

// ------------------------------------------------------------------ Tensor

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
        v.assign(count(shape), fill);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {
        assert(v.size() == count(shape));
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    std::size_t size() const { return v.size(); }
    std::size_t dim(std::size_t i) const { return shape[i]; }
    std::size_t ndim() const { return shape.size(); }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    bool finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

// -------------------------------------------------------------------- Node

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor val;
    Tensor grad;  // same shape as val, zero-initialized
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;  // scatter this->grad into parents

    explicit Node(Tensor value, bool req = false)
        : val(std::move(value)), requires_grad(req) {
        grad = Tensor(val.shape);
    }

    void zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t), false); }
inline Var parameter(Tensor t) { return std::make_shared<Node>(std::move(t), true); }

inline Var make(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backfn) {
    bool req = false;
    for (const auto& p : parents) req = req || p->requires_grad;
    auto n = std::make_shared<Node>(std::move(val), req);
    if (req) {
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
    }
    return n;
}

inline Var detach(const Var& x) { return constant(x->val); }

// Backprop from a scalar root through the graph in reverse topological order.
inline void backward(const Var& root) {
    assert(root->val.size() == 1);
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // iterative DFS, children before parents in `order`
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->grad.v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backfn) (*it)->backfn(**it);
}

// ------------------------------------------------------------ elementwise

inline Var add(const Var& a, const Var& b) {
    assert(a->val.size() == b->val.size());
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->val[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            a->grad[i] += n.grad[i];
            b->grad[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    assert(a->val.size() == b->val.size());
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->val[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            a->grad[i] += n.grad[i];
            b->grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    assert(a->val.size() == b->val.size());
    Tensor out = a->val;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->val[i];
    return make(std::move(out), {a, b}, [a, b](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            a->grad[i] += n.grad[i] * b->val[i];
            b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->val;
    for (auto& x : out.v) x *= s;
    return make(std::move(out), {a}, [a, s](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += s * n.grad[i];
    });
}

inline Var gelu(const Var& a) {
    // tanh approximation; smooth everywhere, which keeps finite-difference
    // gradient checks clean
    static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    Tensor out = a->val;
    for (auto& x : out.v) {
        const double t = std::tanh(k * (x + 0.044715 * x * x * x));
        x = 0.5 * x * (1.0 + t);
    }
    return make(std::move(out), {a}, [a](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double x = a->val[i];
            const double u = k * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
            const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            a->grad[i] += n.grad[i] * d;
        }
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    auto s = std::make_shared<Tensor>(out);
    return make(std::move(out), {a}, [a, s](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            const double y = (*s)[i];
            a->grad[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

// --------------------------------------------------------------- reshaping

inline Var reshape(const Var& a, std::vector<std::size_t> shape) {
    assert(Tensor::count(shape) == a->val.size());
    Tensor out(std::move(shape), a->val.v);
    return make(std::move(out), {a}, [a](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    });
}

inline Var transpose(const Var& a) {
    const std::size_t m = a->val.dim(0), k = a->val.dim(1);
    Tensor out({k, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) out[j * m + i] = a->val[i * k + j];
    return make(std::move(out), {a}, [a, m, k](Node& n) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) a->grad[i * k + j] += n.grad[j * m + i];
    });
}

inline Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
    const std::size_t m = a->val.dim(0), k = a->val.dim(1), w = c1 - c0;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a->val[i * k + c0 + j];
    return make(std::move(out), {a}, [a, m, k, w, c0](Node& n) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) a->grad[i * k + c0 + j] += n.grad[i * w + j];
    });
}

inline Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
    const std::size_t k = a->val.dim(1), h = r1 - r0;
    Tensor out({h, k});
    std::copy(a->val.v.begin() + r0 * k, a->val.v.begin() + r1 * k, out.v.begin());
    return make(std::move(out), {a}, [a, k, r0, h](Node& n) {
        for (std::size_t i = 0; i < h * k; ++i) a->grad[r0 * k + i] += n.grad[i];
    });
}

inline Var row(const Var& a, std::size_t r) {
    const std::size_t k = a->val.dim(1);
    Tensor out({k});
    std::copy(a->val.v.begin() + r * k, a->val.v.begin() + (r + 1) * k, out.v.begin());
    return make(std::move(out), {a}, [a, k, r](Node& n) {
        for (std::size_t i = 0; i < k; ++i) a->grad[r * k + i] += n.grad[i];
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    const std::size_t m = a->val.dim(0), ka = a->val.dim(1), kb = b->val.dim(1);
    assert(b->val.dim(0) == m);
    Tensor out({m, ka + kb});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < ka; ++j) out[i * (ka + kb) + j] = a->val[i * ka + j];
        for (std::size_t j = 0; j < kb; ++j) out[i * (ka + kb) + ka + j] = b->val[i * kb + j];
    }
    return make(std::move(out), {a, b}, [a, b, m, ka, kb](Node& n) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < ka; ++j) a->grad[i * ka + j] += n.grad[i * (ka + kb) + j];
            for (std::size_t j = 0; j < kb; ++j)
                b->grad[i * kb + j] += n.grad[i * (ka + kb) + ka + j];
        }
    });
}

// Row-wise concatenation of two matrices with equal column counts.
inline Var concat_rows(const Var& a, const Var& b) {
    const std::size_t d = a->val.dim(1), na = a->val.dim(0), nb = b->val.dim(0);
    assert(b->val.dim(1) == d);
    Tensor out({na + nb, d});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + na * d);
    return make(std::move(out), {a, b}, [a, b, na, nb, d](Node& n) {
        for (std::size_t i = 0; i < na * d; ++i) a->grad[i] += n.grad[i];
        for (std::size_t i = 0; i < nb * d; ++i) b->grad[i] += n.grad[na * d + i];
    });
}

// Stack 1-D vars of equal length into a matrix [n, d].
inline Var stack_rows(const std::vector<Var>& rows) {
    assert(!rows.empty());
    const std::size_t d = rows[0]->val.size();
    Tensor out({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i]->val.v.begin(), rows[i]->val.v.end(), out.v.begin() + i * d);
    return make(std::move(out), rows, [rows, d](Node& n) {
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) rows[i]->grad[j] += n.grad[i * d + j];
    });
}

inline Var concat_vec(const Var& a, const Var& b) {
    const std::size_t na = a->val.size(), nb = b->val.size();
    Tensor out({na + nb});
    std::copy(a->val.v.begin(), a->val.v.end(), out.v.begin());
    std::copy(b->val.v.begin(), b->val.v.end(), out.v.begin() + na);
    return make(std::move(out), {a, b}, [a, b, na, nb](Node& n) {
        for (std::size_t i = 0; i < na; ++i) a->grad[i] += n.grad[i];
        for (std::size_t i = 0; i < nb; ++i) b->grad[i] += n.grad[na + i];
    });
}

// ------------------------------------------------------------------ linear

inline Var matmul(const Var& a, const Var& b) {
    const std::size_t m = a->val.dim(0), k = a->val.dim(1), n2 = b->val.dim(1);
    assert(b->val.dim(0) == k);
    Tensor out({m, n2});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a->val[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b->val.v[p * n2];
            double* orow = &out.v[i * n2];
            for (std::size_t j = 0; j < n2; ++j) orow[j] += av * brow[j];
        }
    return make(std::move(out), {a, b}, [a, b, m, k, n2](Node& n) {
        // dA = dY B^T ; dB = A^T dY
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n2; ++j) {
                const double g = n.grad[i * n2 + j];
                if (g == 0.0) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    a->grad[i * k + p] += g * b->val[p * n2 + j];
                    b->grad[p * n2 + j] += g * a->val[i * k + p];
                }
            }
    });
}

// x [n, in] (or [in]) times W^T [out, in] plus bias [out].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const bool vec = x->val.ndim() == 1;
    const std::size_t n = vec ? 1 : x->val.dim(0);
    const std::size_t in = vec ? x->val.dim(0) : x->val.dim(1);
    const std::size_t out_dim = w->val.dim(0);
    assert(w->val.dim(1) == in && b->val.size() == out_dim);
    Tensor out(vec ? std::vector<std::size_t>{out_dim}
                   : std::vector<std::size_t>{n, out_dim});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) {
            double acc = b->val[o];
            const double* xr = &x->val.v[i * in];
            const double* wr = &w->val.v[o * in];
            for (std::size_t p = 0; p < in; ++p) acc += xr[p] * wr[p];
            out[i * out_dim + o] = acc;
        }
    return make(std::move(out), {x, w, b}, [x, w, b, n, in, out_dim](Node& nd) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_dim; ++o) {
                const double g = nd.grad[i * out_dim + o];
                if (g == 0.0) continue;
                b->grad[o] += g;
                double* xg = &x->grad.v[i * in];
                const double* xr = &x->val.v[i * in];
                const double* wr = &w->val.v[o * in];
                double* wg = &w->grad.v[o * in];
                for (std::size_t p = 0; p < in; ++p) {
                    xg[p] += g * wr[p];
                    wg[p] += g * xr[p];
                }
            }
    });
}

// ------------------------------------------------------------- reductions

inline Var sum_all(const Var& a) {
    double s = 0;
    for (double x : a->val.v) s += x;
    return make(Tensor({1}, {s}), {a}, [a](Node& n) {
        for (auto& g : a->grad.v) g += n.grad[0];
    });
}

inline Var mean_all(const Var& a) {
    const double inv = 1.0 / double(a->val.size());
    double s = 0;
    for (double x : a->val.v) s += x;
    return make(Tensor({1}, {s * inv}), {a}, [a, inv](Node& n) {
        for (auto& g : a->grad.v) g += n.grad[0] * inv;
    });
}

inline Var add_scalar(const Var& a, double c) {
    Tensor out = a->val;
    for (auto& x : out.v) x += c;
    return make(std::move(out), {a}, [a](Node& n) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    });
}

inline Var mse(const Var& a, const Var& b) {
    assert(a->val.size() == b->val.size());
    const double inv = 1.0 / double(a->val.size());
    double s = 0;
    for (std::size_t i = 0; i < a->val.size(); ++i) {
        const double d = a->val[i] - b->val[i];
        s += d * d;
    }
    return make(Tensor({1}, {s * inv}), {a, b}, [a, b, inv](Node& n) {
        const double g = 2.0 * inv * n.grad[0];
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double d = a->val[i] - b->val[i];
            a->grad[i] += g * d;
            b->grad[i] -= g * d;
        }
    });
}

// Huber / smooth-L1 against a fixed target, mean over elements.
inline Var smooth_l1(const Var& a, const Tensor& target, double beta = 1.0) {
    assert(a->val.size() == target.size());
    const double inv = 1.0 / double(a->val.size());
    double s = 0;
    for (std::size_t i = 0; i < a->val.size(); ++i) {
        const double d = a->val[i] - target[i];
        s += std::abs(d) < beta ? 0.5 * d * d / beta : std::abs(d) - 0.5 * beta;
    }
    return make(Tensor({1}, {s * inv}), {a}, [a, target, beta, inv](Node& n) {
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double d = a->val[i] - target[i];
            const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
            a->grad[i] += n.grad[0] * inv * dd;
        }
    });
}

// Flat-index gather into a 1-D output; gradient scatters back.
inline Var gather(const Var& a, std::vector<std::size_t> indices) {
    Tensor out({indices.size()});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        assert(indices[i] < a->val.size());
        out[i] = a->val[indices[i]];
    }
    return make(std::move(out), {a}, [a, indices = std::move(indices)](Node& n) {
        for (std::size_t i = 0; i < indices.size(); ++i) a->grad[indices[i]] += n.grad[i];
    });
}

inline Var reciprocal(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = 1.0 / x;
    return make(std::move(out), {a}, [a](Node& n) {
        for (std::size_t i = 0; i < a->val.size(); ++i) {
            const double inv = 1.0 / a->val[i];
            a->grad[i] -= n.grad[i] * inv * inv;
        }
    });
}

// ------------------------------------------------------------ activations+

inline Var softmax_rows(const Var& a) {
    const std::size_t n = a->val.ndim() == 1 ? 1 : a->val.dim(0);
    const std::size_t c = a->val.ndim() == 1 ? a->val.dim(0) : a->val.dim(1);
    Tensor out = a->val;
    for (std::size_t i = 0; i < n; ++i) {
        double* r = &out.v[i * c];
        double mx = r[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, r[j]);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += (r[j] = std::exp(r[j] - mx));
        for (std::size_t j = 0; j < c; ++j) r[j] /= s;
    }
    auto y = std::make_shared<Tensor>(out);
    return make(std::move(out), {a}, [a, y, n, c](Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* yr = &y->v[i * c];
            const double* gr = &nd.grad.v[i * c];
            double dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < c; ++j) a->grad[i * c + j] += yr[j] * (gr[j] - dot);
        }
    });
}

// Mean cross-entropy of row logits vs integer labels; label -1 skips a row.
inline Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const std::size_t n = logits->val.ndim() == 1 ? 1 : logits->val.dim(0);
    const std::size_t c = logits->val.ndim() == 1 ? logits->val.dim(0) : logits->val.dim(1);
    assert(labels.size() == n);
    std::size_t active = 0;
    for (int l : labels)
        if (l >= 0) ++active;
    auto probs = std::make_shared<Tensor>(std::vector<std::size_t>{n, c});
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* r = &logits->val.v[i * c];
        double mx = r[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, r[j]);
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(r[j] - mx);
        const double logz = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(r[j] - logz);
        if (labels[i] >= 0) loss += logz - r[labels[i]];
    }
    const double inv = active > 0 ? 1.0 / double(active) : 0.0;
    return make(Tensor({1}, {loss * inv}), {logits}, [logits, labels, probs, n, c, inv](Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
            if (labels[i] < 0) continue;
            for (std::size_t j = 0; j < c; ++j) {
                double g = (*probs)[i * c + j];
                if (int(j) == labels[i]) g -= 1.0;
                logits->grad[i * c + j] += nd.grad[0] * inv * g;
            }
        }
    });
}

// Mean binary cross-entropy of logits vs fixed 0/1 targets.
inline Var bce_with_logits(const Var& logits, const Tensor& target) {
    assert(logits->val.size() == target.size());
    const double inv = 1.0 / double(logits->val.size());
    double loss = 0;
    for (std::size_t i = 0; i < logits->val.size(); ++i) {
        const double x = logits->val[i], t = target[i];
        // log(1+e^x) computed stably
        const double softplus = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        loss += softplus - t * x;
    }
    return make(Tensor({1}, {loss * inv}), {logits}, [logits, target, inv](Node& n) {
        for (std::size_t i = 0; i < logits->val.size(); ++i) {
            const double p = 1.0 / (1.0 + std::exp(-logits->val[i]));
            logits->grad[i] += n.grad[0] * inv * (p - target[i]);
        }
    });
}

inline Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta,
                          double eps = 1e-5) {
    const std::size_t n = x->val.ndim() == 1 ? 1 : x->val.dim(0);
    const std::size_t d = x->val.ndim() == 1 ? x->val.dim(0) : x->val.dim(1);
    assert(gamma->val.size() == d && beta->val.size() == d);
    Tensor out = x->val;
    auto stats = std::make_shared<std::vector<double>>(2 * n);  // mean, inv-std per row
    for (std::size_t i = 0; i < n; ++i) {
        double* r = &out.v[i * d];
        double mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += r[j];
        mu /= double(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= double(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * i] = mu;
        (*stats)[2 * i + 1] = istd;
        for (std::size_t j = 0; j < d; ++j)
            r[j] = gamma->val[j] * (r[j] - mu) * istd + beta->val[j];
    }
    return make(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats, n, d](Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
            const double mu = (*stats)[2 * i], istd = (*stats)[2 * i + 1];
            const double* xr = &x->val.v[i * d];
            const double* gr = &nd.grad.v[i * d];
            double sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (xr[j] - mu) * istd;
                const double dxh = gr[j] * gamma->val[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
                gamma->grad[j] += gr[j] * xh;
                beta->grad[j] += gr[j];
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (xr[j] - mu) * istd;
                const double dxh = gr[j] * gamma->val[j];
                x->grad[i * d + j] +=
                    istd * (dxh - sum_dxh / double(d) - xh * sum_dxh_xh / double(d));
            }
        }
    });
}

// Row-wise L2 normalization (used before cosine similarities).
inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
    const std::size_t n = x->val.ndim() == 1 ? 1 : x->val.dim(0);
    const std::size_t d = x->val.ndim() == 1 ? x->val.dim(0) : x->val.dim(1);
    Tensor out = x->val;
    auto norms = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += out[i * d + j] * out[i * d + j];
        const double nv = std::sqrt(s) + eps;
        (*norms)[i] = nv;
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= nv;
    }
    return make(std::move(out), {x}, [x, norms, n, d](Node& nd) {
        for (std::size_t i = 0; i < n; ++i) {
            const double nv = (*norms)[i];
            const double* xr = &x->val.v[i * d];
            const double* gr = &nd.grad.v[i * d];
            double dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * xr[j];
            for (std::size_t j = 0; j < d; ++j)
                x->grad[i * d + j] += gr[j] / nv - xr[j] * dot / (nv * nv * nv);
        }
    });
}

// ------------------------------------------------------------ convolution

// x [C,H,W], w [O,C,k,k], b [O]; zero padding.
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride,
                  std::size_t pad) {
    const std::size_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    const std::size_t O = w->val.dim(0), K = w->val.dim(2);
    assert(w->val.dim(1) == C && w->val.dim(3) == K);
    const std::size_t OH = (H + 2 * pad - K) / stride + 1;
    const std::size_t OW = (W + 2 * pad - K) / stride + 1;
    Tensor out({O, OH, OW});
    for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                double acc = b->val[o];
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t kh = 0; kh < K; ++kh) {
                        const long ih = long(oh * stride + kh) - long(pad);
                        if (ih < 0 || ih >= long(H)) continue;
                        const double* xrow = &x->val.v[(c * H + std::size_t(ih)) * W];
                        const double* wrow = &w->val.v[((o * C + c) * K + kh) * K];
                        for (std::size_t kw = 0; kw < K; ++kw) {
                            const long iw = long(ow * stride + kw) - long(pad);
                            if (iw < 0 || iw >= long(W)) continue;
                            acc += xrow[iw] * wrow[kw];
                        }
                    }
                out[(o * OH + oh) * OW + ow] = acc;
            }
    }
    return make(std::move(out), {x, w, b}, [x, w, b, C, H, W, O, K, OH, OW, stride, pad](Node& n) {
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    const double g = n.grad[(o * OH + oh) * OW + ow];
                    if (g == 0.0) continue;
                    b->grad[o] += g;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t kh = 0; kh < K; ++kh) {
                            const long ih = long(oh * stride + kh) - long(pad);
                            if (ih < 0 || ih >= long(H)) continue;
                            const std::size_t xbase = (c * H + std::size_t(ih)) * W;
                            const std::size_t wbase = ((o * C + c) * K + kh) * K;
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const long iw = long(ow * stride + kw) - long(pad);
                                if (iw < 0 || iw >= long(W)) continue;
                                x->grad[xbase + std::size_t(iw)] += g * w->val[wbase + kw];
                                w->grad[wbase + kw] += g * x->val[xbase + std::size_t(iw)];
                            }
                        }
                }
    });
}

inline Var global_avg_pool(const Var& x) {
    const std::size_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    const double inv = 1.0 / double(H * W);
    Tensor out({C});
    for (std::size_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::size_t i = 0; i < H * W; ++i) s += x->val[c * H * W + i];
        out[c] = s * inv;
    }
    return make(std::move(out), {x}, [x, C, H, W, inv](Node& n) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H * W; ++i) x->grad[c * H * W + i] += n.grad[c] * inv;
    });
}

namespace detail {

struct BilinearTap {
    std::size_t lo, hi;
    double w_hi;  // weight on hi; (1 - w_hi) on lo
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<BilinearTap> taps(out);
    const double s = out > 1 ? double(in - 1) / double(out - 1) : 0.0;
    for (std::size_t i = 0; i < out; ++i) {
        const double f = out > 1 ? double(i) * s : double(in - 1) * 0.5;
        const std::size_t lo = static_cast<std::size_t>(f);
        taps[i] = {lo, std::min(lo + 1, in - 1), f - double(lo)};
    }
    return taps;
}

}  // namespace detail

// Align-corners bilinear resize of [C,H,W] feature maps; differentiable.
inline Var bilinear_resize(const Var& x, std::size_t oh, std::size_t ow) {
    const std::size_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    if (oh == H && ow == W) return x;
    auto rt = std::make_shared<std::vector<detail::BilinearTap>>(detail::bilinear_taps(H, oh));
    auto ct = std::make_shared<std::vector<detail::BilinearTap>>(detail::bilinear_taps(W, ow));
    Tensor out({C, oh, ow});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < oh; ++i) {
            const auto& tr = (*rt)[i];
            for (std::size_t j = 0; j < ow; ++j) {
                const auto& tc = (*ct)[j];
                const auto px = [&](std::size_t r, std::size_t cc) {
                    return x->val[(c * H + r) * W + cc];
                };
                out[(c * oh + i) * ow + j] =
                    (1 - tr.w_hi) * ((1 - tc.w_hi) * px(tr.lo, tc.lo) + tc.w_hi * px(tr.lo, tc.hi)) +
                    tr.w_hi * ((1 - tc.w_hi) * px(tr.hi, tc.lo) + tc.w_hi * px(tr.hi, tc.hi));
            }
        }
    return make(std::move(out), {x}, [x, rt, ct, C, H, W, oh, ow](Node& n) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < oh; ++i) {
                const auto& tr = (*rt)[i];
                for (std::size_t j = 0; j < ow; ++j) {
                    const auto& tc = (*ct)[j];
                    const double g = n.grad[(c * oh + i) * ow + j];
                    if (g == 0.0) continue;
                    x->grad[(c * H + tr.lo) * W + tc.lo] += g * (1 - tr.w_hi) * (1 - tc.w_hi);
                    x->grad[(c * H + tr.lo) * W + tc.hi] += g * (1 - tr.w_hi) * tc.w_hi;
                    x->grad[(c * H + tr.hi) * W + tc.lo] += g * tr.w_hi * (1 - tc.w_hi);
                    x->grad[(c * H + tr.hi) * W + tc.hi] += g * tr.w_hi * tc.w_hi;
                }
            }
    });
}

// Crop-and-resize RoI pooling: samples an out×out grid bilinearly over the
// box (continuous feature-map coordinates y1,x1,y2,x2).
inline Var crop_resize(const Var& x, double y1, double x1, double y2, double x2,
                       std::size_t out_side) {
    const std::size_t C = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2);
    struct Tap {
        std::size_t lo, hi;
        double w_hi;
    };
    auto make_taps = [](double a, double b, std::size_t n, std::size_t limit) {
        std::vector<Tap> taps(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double f = n > 1 ? a + (b - a) * double(i) / double(n - 1) : 0.5 * (a + b);
            const double fc = std::clamp(f, 0.0, double(limit - 1));
            const std::size_t lo = static_cast<std::size_t>(fc);
            taps[i] = {lo, std::min(lo + 1, limit - 1), fc - double(lo)};
        }
        return taps;
    };
    auto rt = std::make_shared<std::vector<Tap>>(make_taps(y1, y2, out_side, H));
    auto ct = std::make_shared<std::vector<Tap>>(make_taps(x1, x2, out_side, W));
    Tensor out({C, out_side, out_side});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < out_side; ++i)
            for (std::size_t j = 0; j < out_side; ++j) {
                const auto& a = (*rt)[i];
                const auto& b = (*ct)[j];
                const auto px = [&](std::size_t r, std::size_t cc) {
                    return x->val[(c * H + r) * W + cc];
                };
                out[(c * out_side + i) * out_side + j] =
                    (1 - a.w_hi) * ((1 - b.w_hi) * px(a.lo, b.lo) + b.w_hi * px(a.lo, b.hi)) +
                    a.w_hi * ((1 - b.w_hi) * px(a.hi, b.lo) + b.w_hi * px(a.hi, b.hi));
            }
    return make(std::move(out), {x}, [x, rt, ct, C, H, W, out_side](Node& n) {
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < out_side; ++i)
                for (std::size_t j = 0; j < out_side; ++j) {
                    const auto& a = (*rt)[i];
                    const auto& b = (*ct)[j];
                    const double g = n.grad[(c * out_side + i) * out_side + j];
                    if (g == 0.0) continue;
                    x->grad[(c * H + a.lo) * W + b.lo] += g * (1 - a.w_hi) * (1 - b.w_hi);
                    x->grad[(c * H + a.lo) * W + b.hi] += g * (1 - a.w_hi) * b.w_hi;
                    x->grad[(c * H + a.hi) * W + b.lo] += g * a.w_hi * (1 - b.w_hi);
                    x->grad[(c * H + a.hi) * W + b.hi] += g * a.w_hi * b.w_hi;
                }
    });
}

}  // namespace mammolab::ag
