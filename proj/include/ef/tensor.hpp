#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a shared handle to a value buffer plus an optional backward
// rule linking it to its inputs. Calling backward() on a scalar root walks
// the recorded graph once in reverse topological order; a tensor consumed at
// several sites accumulates the sum of all path gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ef/errors.hpp"

namespace ef {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Thread-local switch: ops record backward rules only while grads are enabled.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw config_error("tensor: data length " + std::to_string(data.size()) +
                               " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_node(Shape shape) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    n->shape = std::move(shape);
    return n;
}

// Attaches a backward rule when grads are on and any input needs them.
template <typename T, typename Fn>
void record(const std::shared_ptr<TensorNode<T>>& out,
            std::vector<std::shared_ptr<TensorNode<T>>> parents, Fn&& fn) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (!grad_mode() || !any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::forward<Fn>(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul kernels (accumulating). Row i of the output is produced by one
// sequential sweep over k, so results are independent of any outer-loop
// scheduling and identical between full-sequence and per-row execution.
// ---------------------------------------------------------------------------
namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            T* crow = c + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw config_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = detail::make_node<T>({m, n});
    kernels::gemm_nn(a.data().data(), b.data().data(), out->value.data(), m, k, n);
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node(), m, k, n](TensorNode<T>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            kernels::gemm_nt(o.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            kernels::gemm_tn(an->value.data(), o.grad.data(), bn->grad.data(), m, k, n);
        }
    });
    return Tensor<T>(out);
}

// a[m,k] * b[n,k]^T -> [m,n]; avoids materializing the transpose of b.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw config_error("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()) + "^T");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = detail::make_node<T>({m, n});
    kernels::gemm_nt(a.data().data(), b.data().data(), out->value.data(), m, k, n);
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node(), m, k, n](TensorNode<T>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            kernels::gemm_nn(o.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            kernels::gemm_tn(o.grad.data(), an->value.data(), bn->grad.data(), m, n, k);
        }
    });
    return Tensor<T>(out);
}

// Batched matmul over equal leading dims: [..., m, k] x [..., k, n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 3 || a.rank() != b.rank())
        throw config_error("bmm: expects equal ranks >= 3");
    for (int i = 0; i + 2 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw config_error("bmm: leading dims differ");
    const int r = a.rank();
    const int64_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
    if (b.dim(r - 2) != k)
        throw config_error("bmm: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t batch = 1;
    for (int i = 0; i + 2 < r; ++i) batch *= a.dim(i);
    Shape oshape(a.shape());
    oshape[static_cast<size_t>(r - 1)] = n;
    auto out = detail::make_node<T>(oshape);
    for (int64_t p = 0; p < batch; ++p)
        kernels::gemm_nn(a.data().data() + p * m * k, b.data().data() + p * k * n,
                         out->value.data() + p * m * n, m, k, n);
    detail::record(out, {a.node(), b.node()},
                   [an = a.node(), bn = b.node(), batch, m, k, n](TensorNode<T>& o) {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (int64_t p = 0; p < batch; ++p)
                               kernels::gemm_nt(o.grad.data() + p * m * n, bn->value.data() + p * k * n,
                                                an->grad.data() + p * m * k, m, n, k);
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (int64_t p = 0; p < batch; ++p)
                               kernels::gemm_tn(an->value.data() + p * m * k, o.grad.data() + p * m * n,
                                                bn->grad.data() + p * k * n, m, k, n);
                       }
                   });
    return Tensor<T>(out);
}

// Batched a[..., m, k] x b[..., n, k]^T -> [..., m, n].
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 3 || a.rank() != b.rank())
        throw config_error("bmm_nt: expects equal ranks >= 3");
    for (int i = 0; i + 2 < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw config_error("bmm_nt: leading dims differ");
    const int r = a.rank();
    const int64_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 2);
    if (b.dim(r - 1) != k) throw config_error("bmm_nt: inner dims differ");
    int64_t batch = 1;
    for (int i = 0; i + 2 < r; ++i) batch *= a.dim(i);
    Shape oshape(a.shape());
    oshape[static_cast<size_t>(r - 1)] = n;
    auto out = detail::make_node<T>(oshape);
    for (int64_t p = 0; p < batch; ++p)
        kernels::gemm_nt(a.data().data() + p * m * k, b.data().data() + p * n * k,
                         out->value.data() + p * m * n, m, k, n);
    detail::record(out, {a.node(), b.node()},
                   [an = a.node(), bn = b.node(), batch, m, k, n](TensorNode<T>& o) {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           for (int64_t p = 0; p < batch; ++p)
                               kernels::gemm_nn(o.grad.data() + p * m * n, bn->value.data() + p * n * k,
                                                an->grad.data() + p * m * k, m, n, k);
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (int64_t p = 0; p < batch; ++p)
                               kernels::gemm_tn(o.grad.data() + p * m * n, an->value.data() + p * m * k,
                                                bn->grad.data() + p * n * k, m, n, k);
                       }
                   });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw config_error("reshape: numel mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto out = detail::make_node<T>(std::move(shape));
    out->value = x.data();
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r) throw config_error("permute: rank mismatch");
    Shape oshape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) oshape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
    auto out = detail::make_node<T>(oshape);

    std::vector<int64_t> xstrides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        xstrides[static_cast<size_t>(i)] = xstrides[static_cast<size_t>(i + 1)] * x.dim(i + 1);
    std::vector<int64_t> src_stride(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) src_stride[static_cast<size_t>(i)] = xstrides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    const int64_t total = x.numel();
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    const T* src = x.data().data();
    T* dst = out->value.data();
    for (int64_t flat = 0; flat < total; ++flat) {
        int64_t off = 0;
        for (int i = 0; i < r; ++i) off += idx[static_cast<size_t>(i)] * src_stride[static_cast<size_t>(i)];
        dst[flat] = src[off];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    detail::record(out, {x.node()}, [xn = x.node(), oshape, src_stride, r](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const int64_t total = o.numel();
        std::vector<int64_t> idx(static_cast<size_t>(r), 0);
        for (int64_t flat = 0; flat < total; ++flat) {
            int64_t off = 0;
            for (int i = 0; i < r; ++i) off += idx[static_cast<size_t>(i)] * src_stride[static_cast<size_t>(i)];
            xn->grad[off] += o.grad[flat];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[static_cast<size_t>(i)] < oshape[static_cast<size_t>(i)]) break;
                idx[static_cast<size_t>(i)] = 0;
            }
        }
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw config_error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_node<T>(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node()](TensorNode<T>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
        }
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw config_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = detail::make_node<T>(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node()](TensorNode<T>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
        }
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    auto out = detail::make_node<T>(x.shape());
    const auto& xv = x.data();
    for (size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * c;
    detail::record(out, {x.node()}, [xn = x.node(), c](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i] * c;
    });
    return Tensor<T>(out);
}

// x[..., d] + b[d]
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
        throw config_error("add_bias: bias shape " + shape_str(b.shape()) + " does not match " +
                           shape_str(x.shape()));
    const int64_t d = b.dim(0);
    const int64_t rows = x.numel() / d;
    auto out = detail::make_node<T>(x.shape());
    const T* xv = x.data().data();
    const T* bv = b.data().data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out->value[static_cast<size_t>(r * d + j)] = xv[r * d + j] + bv[j];
    detail::record(out, {x.node(), b.node()}, [xn = x.node(), bn = b.node(), rows, d](TensorNode<T>& o) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) bn->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(r * d + j)];
        }
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    auto out = detail::make_node<T>(x.shape());
    const auto& xv = x.data();
    for (size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] > T(0) ? xv[i] : T(0);
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            if (xn->value[i] > T(0)) xn->grad[i] += o.grad[i];
    });
    return Tensor<T>(out);
}

// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw config_error("softmax: axis out of range");
    const int64_t n = x.dim(axis);
    int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);

    auto out = detail::make_node<T>(x.shape());
    const T* xv = x.data().data();
    T* ov = out->value.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            T mx = xv[base];
            for (int64_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            T sum = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T e = std::exp(xv[base + i * inner] - mx);
                ov[base + i * inner] = e;
                sum += e;
            }
            for (int64_t i = 0; i < n; ++i) ov[base + i * inner] /= sum;
        }
    }
    detail::record(out, {x.node()}, [xn = x.node(), outer, inner, n](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t ou = 0; ou < outer; ++ou) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = ou * n * inner + in;
                T dot = T(0);
                for (int64_t i = 0; i < n; ++i) dot += o.grad[base + i * inner] * o.value[base + i * inner];
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t p = base + i * inner;
                    xn->grad[p] += o.value[p] * (o.grad[p] - dot);
                }
            }
        }
    });
    return Tensor<T>(out);
}

// Per-position normalization over the last axis, then affine: g * xhat + b.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const int64_t d = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw config_error("layer_norm: affine params must be [d]");
    const int64_t rows = x.numel() / d;
    auto out = detail::make_node<T>(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const T* xv = x.data().data();
    const T* gv = gain.data().data();
    const T* bv = bias.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T istd = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = istd;
        for (int64_t j = 0; j < d; ++j) {
            const T h = (row[j] - mean) * istd;
            (*xhat)[static_cast<size_t>(r * d + j)] = h;
            out->value[static_cast<size_t>(r * d + j)] = gv[j] * h + bv[j];
        }
    }
    detail::record(out, {x.node(), gain.node(), bias.node()},
                   [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat, inv_std, rows, d](TensorNode<T>& o) {
                       if (gn->requires_grad) {
                           gn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r)
                               for (int64_t j = 0; j < d; ++j)
                                   gn->grad[static_cast<size_t>(j)] +=
                                       o.grad[static_cast<size_t>(r * d + j)] * (*xhat)[static_cast<size_t>(r * d + j)];
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r)
                               for (int64_t j = 0; j < d; ++j)
                                   bn->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(r * d + j)];
                       }
                       if (xn->requires_grad) {
                           xn->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                               // dxhat = g * dy; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) * istd
                               T m1 = T(0), m2 = T(0);
                               for (int64_t j = 0; j < d; ++j) {
                                   const T dh = gn->value[static_cast<size_t>(j)] * o.grad[static_cast<size_t>(r * d + j)];
                                   m1 += dh;
                                   m2 += dh * (*xhat)[static_cast<size_t>(r * d + j)];
                               }
                               m1 /= T(d);
                               m2 /= T(d);
                               const T istd = (*inv_std)[static_cast<size_t>(r)];
                               for (int64_t j = 0; j < d; ++j) {
                                   const size_t p = static_cast<size_t>(r * d + j);
                                   const T dh = gn->value[static_cast<size_t>(j)] * o.grad[p];
                                   xn->grad[p] += (dh - m1 - (*xhat)[p] * m2) * istd;
                               }
                           }
                       }
                   });
    return Tensor<T>(out);
}

// Deterministic uniform bits -> [0,1) double; portable across libstdc++ versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}
    double u01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    // uniform in (-s, s)
    double uniform_pm(double s) { return (2.0 * u01() - 1.0) * s; }
    uint64_t bits() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

// Inverted dropout; identity when not training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw config_error("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    auto keep = std::make_shared<std::vector<uint8_t>>(x.data().size());
    const T inv = T(1.0 / (1.0 - p));
    auto out = detail::make_node<T>(x.shape());
    const auto& xv = x.data();
    for (size_t i = 0; i < xv.size(); ++i) {
        const bool k = rng.u01() >= p;
        (*keep)[i] = k;
        out->value[i] = k ? xv[i] * inv : T(0);
    }
    detail::record(out, {x.node()}, [xn = x.node(), keep, inv](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            if ((*keep)[i]) xn->grad[i] += o.grad[i] * inv;
    });
    return Tensor<T>(out);
}

// table[V, e] gathered by ids -> [ids_shape..., e]; backward scatter-adds.
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, const std::vector<int32_t>& ids, Shape ids_shape) {
    if (table.rank() != 2) throw config_error("embedding_gather: table must be 2-D");
    if (shape_numel(ids_shape) != static_cast<int64_t>(ids.size()))
        throw config_error("embedding_gather: ids length does not match shape");
    const int64_t v = table.dim(0), e = table.dim(1);
    for (int32_t id : ids)
        if (id < 0 || id >= v)
            throw config_error("embedding_gather: token id " + std::to_string(id) + " out of range [0," +
                               std::to_string(v) + ")");
    Shape oshape = ids_shape;
    oshape.push_back(e);
    auto out = detail::make_node<T>(oshape);
    const T* tv = table.data().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(tv + static_cast<int64_t>(ids[i]) * e, tv + (static_cast<int64_t>(ids[i]) + 1) * e,
                  out->value.data() + static_cast<int64_t>(i) * e);
    auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
    detail::record(out, {table.node()}, [tn = table.node(), ids_copy, e](TensorNode<T>& o) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (size_t i = 0; i < ids_copy->size(); ++i) {
            T* dst = tn->grad.data() + static_cast<int64_t>((*ids_copy)[i]) * e;
            const T* src = o.grad.data() + static_cast<int64_t>(i) * e;
            for (int64_t j = 0; j < e; ++j) dst[j] += src[j];
        }
    });
    return Tensor<T>(out);
}

// Broadcast p[L,d] across a batch -> [B,L,d]; backward sums over the batch.
template <typename T>
Tensor<T> expand_batch(const Tensor<T>& p, int64_t batch) {
    if (p.rank() != 2) throw config_error("expand_batch: expects [L,d]");
    const int64_t l = p.dim(0), d = p.dim(1);
    auto out = detail::make_node<T>({batch, l, d});
    for (int64_t b = 0; b < batch; ++b)
        std::copy(p.data().begin(), p.data().end(), out->value.begin() + b * l * d);
    detail::record(out, {p.node()}, [pn = p.node(), batch, l, d](TensorNode<T>& o) {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        for (int64_t b = 0; b < batch; ++b)
            for (int64_t i = 0; i < l * d; ++i)
                pn->grad[static_cast<size_t>(i)] += o.grad[static_cast<size_t>(b * l * d + i)];
    });
    return Tensor<T>(out);
}

// Concatenate along axis 1 of rank-3 tensors: [B,n1,d] ++ [B,n2,d].
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw config_error("concat_rows: incompatible shapes");
    const int64_t bs = a.dim(0), n1 = a.dim(1), n2 = b.dim(1), d = a.dim(2);
    auto out = detail::make_node<T>({bs, n1 + n2, d});
    for (int64_t p = 0; p < bs; ++p) {
        std::copy(a.data().begin() + p * n1 * d, a.data().begin() + (p + 1) * n1 * d,
                  out->value.begin() + p * (n1 + n2) * d);
        std::copy(b.data().begin() + p * n2 * d, b.data().begin() + (p + 1) * n2 * d,
                  out->value.begin() + p * (n1 + n2) * d + n1 * d);
    }
    detail::record(out, {a.node(), b.node()}, [an = a.node(), bn = b.node(), bs, n1, n2, d](TensorNode<T>& o) {
        for (int64_t p = 0; p < bs; ++p) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n1 * d; ++i)
                    an->grad[static_cast<size_t>(p * n1 * d + i)] += o.grad[static_cast<size_t>(p * (n1 + n2) * d + i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n2 * d; ++i)
                    bn->grad[static_cast<size_t>(p * n2 * d + i)] +=
                        o.grad[static_cast<size_t>(p * (n1 + n2) * d + n1 * d + i)];
            }
        }
    });
    return Tensor<T>(out);
}

// Replaces masked-out scores with a large negative constant. mask is [B,nq,nk]
// with 1 = attend, broadcast over heads of scores [B,h,nq,nk].
template <typename T>
Tensor<T> mask_scores(const Tensor<T>& scores, const std::shared_ptr<std::vector<uint8_t>>& mask) {
    if (scores.rank() != 4) throw config_error("mask_scores: expects [B,h,nq,nk]");
    const int64_t b = scores.dim(0), h = scores.dim(1), nq = scores.dim(2), nk = scores.dim(3);
    if (static_cast<int64_t>(mask->size()) != b * nq * nk)
        throw config_error("mask_scores: mask size mismatch");
    constexpr T kNegInf = T(-1e30);
    auto out = detail::make_node<T>(scores.shape());
    const T* sv = scores.data().data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t q = 0; q < nq; ++q) {
                const uint8_t* mrow = mask->data() + (bi * nq + q) * nk;
                const int64_t base = ((bi * h + hi) * nq + q) * nk;
                for (int64_t k = 0; k < nk; ++k)
                    out->value[static_cast<size_t>(base + k)] = mrow[k] ? sv[base + k] : kNegInf;
            }
    detail::record(out, {scores.node()}, [sn = scores.node(), mask, b, h, nq, nk](TensorNode<T>& o) {
        if (!sn->requires_grad) return;
        sn->ensure_grad();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t hi = 0; hi < h; ++hi)
                for (int64_t q = 0; q < nq; ++q) {
                    const uint8_t* mrow = mask->data() + (bi * nq + q) * nk;
                    const int64_t base = ((bi * h + hi) * nq + q) * nk;
                    for (int64_t k = 0; k < nk; ++k)
                        if (mrow[k]) sn->grad[static_cast<size_t>(base + k)] += o.grad[static_cast<size_t>(base + k)];
                }
    });
    return Tensor<T>(out);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = detail::make_node<T>({1});
    T s = T(0);
    for (T v : x.data()) s += v;
    out->value[0] = s;
    detail::record(out, {x.node()}, [xn = x.node()](TensorNode<T>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += o.grad[0];
    });
    return Tensor<T>(out);
}

// Mean label-smoothed cross entropy over non-ignored targets.
// Smoothing mass is spread uniformly over the V-1 non-target entries.
template <typename T>
Tensor<T> cross_entropy_label_smoothing(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                                        double smoothing, int32_t ignore_index = -1) {
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw config_error("cross_entropy: smoothing must be in [0,1)");
    const int64_t v = logits.dim(logits.rank() - 1);
    const int64_t rows = logits.numel() / v;
    if (static_cast<int64_t>(targets.size()) != rows)
        throw config_error("cross_entropy: target count mismatch");
    if (v < 2) throw config_error("cross_entropy: vocabulary must have at least 2 entries");
    for (int32_t t : targets)
        if (t != ignore_index && (t < 0 || t >= v))
            throw config_error("cross_entropy: target id out of range");

    int64_t active = 0;
    for (int32_t t : targets) active += (t != ignore_index);
    if (active == 0) throw config_error("cross_entropy: no non-ignored targets");

    const T eps = T(smoothing);
    const T off = eps / T(v - 1);
    const T on = T(1) - eps;

    auto probs = std::make_shared<std::vector<T>>(logits.data().size());
    auto out = detail::make_node<T>({1});
    const T* lv = logits.data().data();
    T loss = T(0);
    for (int64_t r = 0; r < rows; ++r) {
        if (targets[static_cast<size_t>(r)] == ignore_index) continue;
        const T* row = lv + r * v;
        T mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const T lse = mx + std::log(sum);
        // loss_r = lse - sum_j q_j z_j, with q = smoothed one-hot
        T zq = T(0);
        for (int64_t j = 0; j < v; ++j) {
            (*probs)[static_cast<size_t>(r * v + j)] = std::exp(row[j] - mx) / sum;
            zq += (j == targets[static_cast<size_t>(r)] ? on : off) * row[j];
        }
        loss += lse - zq;
    }
    out->value[0] = loss / T(active);

    auto tgt = std::make_shared<std::vector<int32_t>>(targets);
    detail::record(out, {logits.node()},
                   [ln = logits.node(), probs, tgt, rows, v, on, off, active, ignore_index](TensorNode<T>& o) {
                       if (!ln->requires_grad) return;
                       ln->ensure_grad();
                       const T g = o.grad[0] / T(active);
                       for (int64_t r = 0; r < rows; ++r) {
                           const int32_t t = (*tgt)[static_cast<size_t>(r)];
                           if (t == ignore_index) continue;
                           for (int64_t j = 0; j < v; ++j) {
                               const size_t p = static_cast<size_t>(r * v + j);
                               const T q = (j == t) ? on : off;
                               ln->grad[p] += g * ((*probs)[p] - q);
                           }
                       }
                   });
    return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// Backward pass: reverse topological traversal from a scalar root.
// ---------------------------------------------------------------------------
template <typename T>
void backward(const Tensor<T>& root) {
    if (root.numel() != 1) throw config_error("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->ensure_grad();
    root.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ef
