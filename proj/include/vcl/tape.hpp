#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "vcl/tensor.hpp"

namespace vcl {

enum class Pad { valid, same };

// Shared across all tape instantiations; lets tests assert that the
// gradient-free CAM path really issues no backward passes.
struct TapeStats {
    inline static std::atomic<long> backward_calls{0};
};

template <class T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad; // allocated iff requires_grad
    bool requires_grad = false;
    std::function<void()> backprop;
};

// Records differentiable operations in execution order. backward() walks
// the record strictly in reverse insertion order, so gradients are
// bit-reproducible for a given op sequence. Gradients accumulate across
// backward() calls; the caller zeroes them between steps.
template <class T>
class TapeT {
public:
    using Node = NodeT<T>;
    using Var = Node*;

    Var leaf(TensorT<T> value, bool requires_grad) {
        return make(std::move(value), requires_grad);
    }

    void backward(Var loss) {
        if (loss->value.size() != 1)
            throw ContractError("backward expects a scalar loss, got shape " +
                                shape_str(loss->value.shape));
        TapeStats::backward_calls.fetch_add(1, std::memory_order_relaxed);
        if (!loss->requires_grad) return; // detached: grads stay zero
        // Propagate on clean adjoints so repeated calls accumulate instead of
        // compounding previously stored gradients.
        std::vector<std::vector<T>> saved(nodes_.size());
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node* n = nodes_[i].get();
            if (!n->requires_grad) continue;
            saved[i] = std::move(n->grad.data);
            n->grad.data.assign(saved[i].size(), T(0));
        }
        loss->grad.data[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node* n = it->get();
            if (n->requires_grad && n->backprop) n->backprop();
        }
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node* n = nodes_[i].get();
            if (!n->requires_grad) continue;
            for (size_t j = 0; j < saved[i].size(); ++j) n->grad.data[j] += saved[i][j];
        }
    }

    void zero_grad() {
        for (auto& n : nodes_)
            if (n->requires_grad) std::fill(n->grad.data.begin(), n->grad.data.end(), T(0));
    }

    size_t num_nodes() const { return nodes_.size(); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        require_same(a, b, "add");
        TensorT<T> out = a->value;
        for (size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
        Var o = make(std::move(out), a->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [a, b, o] {
            for (size_t i = 0; i < o->grad.size(); ++i) {
                if (a->requires_grad) a->grad.data[i] += o->grad.data[i];
                if (b->requires_grad) b->grad.data[i] += o->grad.data[i];
            }
        };
        return o;
    }

    Var sub(Var a, Var b) {
        require_same(a, b, "sub");
        TensorT<T> out = a->value;
        for (size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
        Var o = make(std::move(out), a->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [a, b, o] {
            for (size_t i = 0; i < o->grad.size(); ++i) {
                if (a->requires_grad) a->grad.data[i] += o->grad.data[i];
                if (b->requires_grad) b->grad.data[i] -= o->grad.data[i];
            }
        };
        return o;
    }

    Var mul(Var a, Var b) {
        require_same(a, b, "mul");
        TensorT<T> out = a->value;
        for (size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
        Var o = make(std::move(out), a->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [a, b, o] {
            for (size_t i = 0; i < o->grad.size(); ++i) {
                if (a->requires_grad) a->grad.data[i] += o->grad.data[i] * b->value.data[i];
                if (b->requires_grad) b->grad.data[i] += o->grad.data[i] * a->value.data[i];
            }
        };
        return o;
    }

    Var scale(Var a, T c) {
        TensorT<T> out = a->value;
        for (auto& v : out.data) v *= c;
        Var o = make(std::move(out), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o, c] {
            for (size_t i = 0; i < o->grad.size(); ++i) a->grad.data[i] += c * o->grad.data[i];
        };
        return o;
    }

    Var relu(Var a) {
        TensorT<T> out = a->value;
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        Var o = make(std::move(out), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o] {
            for (size_t i = 0; i < o->grad.size(); ++i)
                if (a->value.data[i] > T(0)) a->grad.data[i] += o->grad.data[i];
        };
        return o;
    }

    // GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))
    Var gelu(Var a) {
        const T c = static_cast<T>(std::sqrt(2.0 / 3.14159265358979323846));
        const T k = static_cast<T>(0.044715);
        TensorT<T> out = a->value;
        for (auto& v : out.data) {
            T u = c * (v + k * v * v * v);
            v = T(0.5) * v * (T(1) + std::tanh(u));
        }
        Var o = make(std::move(out), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o, c, k] {
            for (size_t i = 0; i < o->grad.size(); ++i) {
                T x = a->value.data[i];
                T u = c * (x + k * x * x * x);
                T th = std::tanh(u);
                T du = c * (T(1) + T(3) * k * x * x);
                T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
                a->grad.data[i] += o->grad.data[i] * d;
            }
        };
        return o;
    }

    // Inverted dropout; p == 0 is an exact identity so train/eval agree.
    Var dropout(Var a, double p, std::mt19937_64& rng) {
        if (p <= 0.0) return a;
        if (p >= 1.0) throw ContractError("dropout probability must be < 1");
        std::uniform_real_distribution<double> u(0.0, 1.0);
        auto mask = std::make_shared<std::vector<T>>(a->value.size());
        T keep_scale = static_cast<T>(1.0 / (1.0 - p));
        for (auto& m : *mask) m = (u(rng) < p) ? T(0) : keep_scale;
        TensorT<T> out = a->value;
        for (size_t i = 0; i < out.size(); ++i) out.data[i] *= (*mask)[i];
        Var o = make(std::move(out), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o, mask] {
            for (size_t i = 0; i < o->grad.size(); ++i)
                a->grad.data[i] += o->grad.data[i] * (*mask)[i];
        };
        return o;
    }

    // ---- shape ----

    Var reshape(Var a, Shape s) {
        if (numel(s) != static_cast<long long>(a->value.size()))
            throw DimensionError("reshape " + shape_str(a->value.shape) + " -> " + shape_str(s) +
                                 " changes element count");
        TensorT<T> out(std::move(s), a->value.data);
        Var o = make(std::move(out), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o] {
            for (size_t i = 0; i < o->grad.size(); ++i) a->grad.data[i] += o->grad.data[i];
        };
        return o;
    }

    Var sum(Var a) {
        T s = 0;
        for (T v : a->value.data) s += v;
        Var o = make(TensorT<T>::scalar(s), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o] {
            T g = o->grad.data[0];
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad.data[i] += g;
        };
        return o;
    }

    Var select_scalar(Var a, size_t flat_index) {
        if (flat_index >= a->value.size())
            throw DimensionError("select_scalar index out of range");
        Var o = make(TensorT<T>::scalar(a->value.data[flat_index]), a->requires_grad);
        if (o->requires_grad) o->backprop = [a, o, flat_index] {
            a->grad.data[flat_index] += o->grad.data[0];
        };
        return o;
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
            throw DimensionError("matmul shape mismatch: " + shape_str(a->value.shape) + " x " +
                                 shape_str(b->value.shape));
        int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
        TensorT<T> out = TensorT<T>::zeros({m, n});
        mm(a->value.data.data(), b->value.data.data(), out.data.data(), m, k, n);
        Var o = make(std::move(out), a->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [a, b, o, m, k, n] {
            const T* g = o->grad.data.data();
            if (a->requires_grad) { // dA = G B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < k; ++j) {
                        T s = 0;
                        for (int c = 0; c < n; ++c) s += g[i * n + c] * b->value.data[j * n + c];
                        a->grad.data[i * k + j] += s;
                    }
            }
            if (b->requires_grad) { // dB = A^T G
                for (int i = 0; i < k; ++i)
                    for (int j = 0; j < n; ++j) {
                        T s = 0;
                        for (int c = 0; c < m; ++c) s += a->value.data[c * k + i] * g[c * n + j];
                        b->grad.data[i * n + j] += s;
                    }
            }
        };
        return o;
    }

    // a: [B,m,k]; b: [B,k,n], or [B,n,k] when trans_b (result = A B^T).
    Var batch_matmul(Var a, Var b, bool trans_b = false) {
        const Shape& sa = a->value.shape;
        const Shape& sb = b->value.shape;
        if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] ||
            sa[2] != (trans_b ? sb[2] : sb[1]))
            throw DimensionError("batch_matmul shape mismatch: " + shape_str(sa) + " x " +
                                 shape_str(sb) + (trans_b ? " (trans_b)" : ""));
        int B = sa[0], m = sa[1], k = sa[2];
        int n = trans_b ? sb[1] : sb[2];
        TensorT<T> out = TensorT<T>::zeros({B, m, n});
        for (int bb = 0; bb < B; ++bb) {
            const T* A = a->value.data.data() + static_cast<size_t>(bb) * m * k;
            const T* Bp = b->value.data.data() + static_cast<size_t>(bb) * k * n;
            T* C = out.data.data() + static_cast<size_t>(bb) * m * n;
            if (!trans_b)
                mm(A, Bp, C, m, k, n);
            else
                mm_nt(A, Bp, C, m, k, n);
        }
        Var o = make(std::move(out), a->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [a, b, o, B, m, k, n, trans_b] {
            for (int bb = 0; bb < B; ++bb) {
                const T* A = a->value.data.data() + static_cast<size_t>(bb) * m * k;
                const T* Bp = b->value.data.data() + static_cast<size_t>(bb) * k * n;
                const T* G = o->grad.data.data() + static_cast<size_t>(bb) * m * n;
                T* dA = a->requires_grad ? a->grad.data.data() + static_cast<size_t>(bb) * m * k : nullptr;
                T* dB = b->requires_grad ? b->grad.data.data() + static_cast<size_t>(bb) * k * n : nullptr;
                if (!trans_b) {
                    // C = A B: dA += G B^T, dB += A^T G
                    if (dA)
                        for (int i = 0; i < m; ++i)
                            for (int j = 0; j < k; ++j) {
                                T s = 0;
                                for (int c = 0; c < n; ++c) s += G[i * n + c] * Bp[j * n + c];
                                dA[i * k + j] += s;
                            }
                    if (dB)
                        for (int i = 0; i < k; ++i)
                            for (int j = 0; j < n; ++j) {
                                T s = 0;
                                for (int c = 0; c < m; ++c) s += A[c * k + i] * G[c * n + j];
                                dB[i * n + j] += s;
                            }
                } else {
                    // C = A B^T with B stored [n,k]: dA += G B, dB += G^T A
                    if (dA)
                        for (int i = 0; i < m; ++i)
                            for (int j = 0; j < k; ++j) {
                                T s = 0;
                                for (int c = 0; c < n; ++c) s += G[i * n + c] * Bp[c * k + j];
                                dA[i * k + j] += s;
                            }
                    if (dB)
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < k; ++j) {
                                T s = 0;
                                for (int c = 0; c < m; ++c) s += G[c * n + i] * A[c * k + j];
                                dB[i * k + j] += s;
                            }
                }
            }
        };
        return o;
    }

    // x: [..., d] + bias[d], broadcast over leading axes.
    Var add_bias(Var x, Var b) {
        if (b->value.rank() != 1 || x->value.shape.back() != b->value.dim(0))
            throw DimensionError("add_bias: bias " + shape_str(b->value.shape) +
                                 " does not match " + shape_str(x->value.shape));
        int d = b->value.dim(0);
        TensorT<T> out = x->value;
        size_t rows = out.size() / static_cast<size_t>(d);
        for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) out.data[r * d + j] += b->value.data[j];
        Var o = make(std::move(out), x->requires_grad || b->requires_grad);
        if (o->requires_grad) o->backprop = [x, b, o, d, rows] {
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) {
                    T g = o->grad.data[r * d + j];
                    if (x->requires_grad) x->grad.data[r * d + j] += g;
                    if (b->requires_grad) b->grad.data[j] += g;
                }
        };
        return o;
    }

    // Dense layer over the last axis; accepts rank-2 or rank-3 input.
    Var dense(Var x, Var w, Var b) {
        Shape orig = x->value.shape;
        int din = orig.back();
        long long rows = numel(orig) / din;
        Var flat = reshape(x, {static_cast<int>(rows), din});
        Var y = add_bias(matmul(flat, w), b);
        Shape out_shape = orig;
        out_shape.back() = w->value.dim(1);
        return reshape(y, out_shape);
    }

    // ---- normalization & attention pieces ----

    Var softmax_last(Var x) {
        int n = x->value.shape.back();
        if (n < 1) throw DimensionError("softmax on empty axis");
        TensorT<T> out = x->value;
        size_t rows = out.size() / static_cast<size_t>(n);
        for (size_t r = 0; r < rows; ++r) {
            T* row = out.data.data() + r * n;
            T mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            T s = 0;
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                s += row[j];
            }
            for (int j = 0; j < n; ++j) row[j] /= s;
        }
        Var o = make(std::move(out), x->requires_grad);
        if (o->requires_grad) o->backprop = [x, o, n, rows] {
            for (size_t r = 0; r < rows; ++r) {
                const T* y = o->value.data.data() + r * n;
                const T* g = o->grad.data.data() + r * n;
                T dot = 0;
                for (int j = 0; j < n; ++j) dot += g[j] * y[j];
                for (int j = 0; j < n; ++j) x->grad.data[r * n + j] += y[j] * (g[j] - dot);
            }
        };
        return o;
    }

    Var layernorm(Var x, Var gamma, Var beta, T eps) {
        int d = x->value.shape.back();
        if (gamma->value.rank() != 1 || gamma->value.dim(0) != d || beta->value.dim(0) != d)
            throw DimensionError("layernorm affine params do not match feature dim " +
                                 std::to_string(d));
        size_t rows = x->value.size() / static_cast<size_t>(d);
        TensorT<T> out = TensorT<T>::zeros(x->value.shape);
        auto xhat = std::make_shared<std::vector<T>>(x->value.size());
        auto inv_std = std::make_shared<std::vector<T>>(rows);
        for (size_t r = 0; r < rows; ++r) {
            const T* row = x->value.data.data() + r * d;
            T mu = 0;
            for (int j = 0; j < d; ++j) mu += row[j];
            mu /= T(d);
            T var = 0;
            for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= T(d);
            T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (int j = 0; j < d; ++j) {
                T xh = (row[j] - mu) * is;
                (*xhat)[r * d + j] = xh;
                out.data[r * d + j] = gamma->value.data[j] * xh + beta->value.data[j];
            }
        }
        Var o = make(std::move(out),
                     x->requires_grad || gamma->requires_grad || beta->requires_grad);
        if (o->requires_grad) o->backprop = [x, gamma, beta, o, d, rows, xhat, inv_std] {
            for (size_t r = 0; r < rows; ++r) {
                const T* g = o->grad.data.data() + r * d;
                const T* xh = xhat->data() + r * d;
                if (gamma->requires_grad || beta->requires_grad)
                    for (int j = 0; j < d; ++j) {
                        if (gamma->requires_grad) gamma->grad.data[j] += g[j] * xh[j];
                        if (beta->requires_grad) beta->grad.data[j] += g[j];
                    }
                if (x->requires_grad) {
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int j = 0; j < d; ++j) {
                        T dxh = g[j] * gamma->value.data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= T(d);
                    mean_dxhat_xhat /= T(d);
                    T is = (*inv_std)[r];
                    for (int j = 0; j < d; ++j) {
                        T dxh = g[j] * gamma->value.data[j];
                        x->grad.data[r * d + j] +=
                            is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        };
        return o;
    }

    // [B,T,D] -> [B*heads, T, D/heads]
    Var split_heads(Var x, int heads) {
        const Shape& s = x->value.shape;
        if (s.size() != 3 || s[2] % heads != 0)
            throw DimensionError("split_heads: " + shape_str(s) + " with " +
                                 std::to_string(heads) + " heads");
        int B = s[0], Tk = s[1], D = s[2], dh = D / heads;
        TensorT<T> out = TensorT<T>::zeros({B * heads, Tk, dh});
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < Tk; ++t)
                for (int h = 0; h < heads; ++h)
                    for (int j = 0; j < dh; ++j)
                        out.data[(((static_cast<size_t>(b) * heads + h) * Tk + t) * dh) + j] =
                            x->value.data[((static_cast<size_t>(b) * Tk + t) * D) + h * dh + j];
        Var o = make(std::move(out), x->requires_grad);
        if (o->requires_grad) o->backprop = [x, o, B, Tk, D, heads, dh] {
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < Tk; ++t)
                    for (int h = 0; h < heads; ++h)
                        for (int j = 0; j < dh; ++j)
                            x->grad.data[((static_cast<size_t>(b) * Tk + t) * D) + h * dh + j] +=
                                o->grad.data[(((static_cast<size_t>(b) * heads + h) * Tk + t) * dh) + j];
        };
        return o;
    }

    // [B*heads, T, dh] -> [B,T,D]
    Var merge_heads(Var x, int heads) {
        const Shape& s = x->value.shape;
        if (s.size() != 3 || s[0] % heads != 0)
            throw DimensionError("merge_heads: " + shape_str(s));
        int B = s[0] / heads, Tk = s[1], dh = s[2], D = dh * heads;
        TensorT<T> out = TensorT<T>::zeros({B, Tk, D});
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < Tk; ++t)
                for (int h = 0; h < heads; ++h)
                    for (int j = 0; j < dh; ++j)
                        out.data[((static_cast<size_t>(b) * Tk + t) * D) + h * dh + j] =
                            x->value.data[(((static_cast<size_t>(b) * heads + h) * Tk + t) * dh) + j];
        Var o = make(std::move(out), x->requires_grad);
        if (o->requires_grad) o->backprop = [x, o, B, Tk, D, heads, dh] {
            for (int b = 0; b < B; ++b)
                for (int t = 0; t < Tk; ++t)
                    for (int h = 0; h < heads; ++h)
                        for (int j = 0; j < dh; ++j)
                            x->grad.data[(((static_cast<size_t>(b) * heads + h) * Tk + t) * dh) + j] +=
                                o->grad.data[((static_cast<size_t>(b) * Tk + t) * D) + h * dh + j];
        };
        return o;
    }

    // Prepend a learned token (shape [1,D]) to every sequence in the batch.
    Var prepend_token(Var x, Var tok) {
        const Shape& s = x->value.shape;
        if (s.size() != 3 || numel(tok->value.shape) != s[2])
            throw DimensionError("prepend_token: " + shape_str(s) + " with token " +
                                 shape_str(tok->value.shape));
        int B = s[0], Tk = s[1], D = s[2];
        TensorT<T> out = TensorT<T>::zeros({B, Tk + 1, D});
        for (int b = 0; b < B; ++b) {
            for (int j = 0; j < D; ++j)
                out.data[(static_cast<size_t>(b) * (Tk + 1)) * D + j] = tok->value.data[j];
            for (int t = 0; t < Tk; ++t)
                for (int j = 0; j < D; ++j)
                    out.data[(static_cast<size_t>(b) * (Tk + 1) + t + 1) * D + j] =
                        x->value.data[(static_cast<size_t>(b) * Tk + t) * D + j];
        }
        Var o = make(std::move(out), x->requires_grad || tok->requires_grad);
        if (o->requires_grad) o->backprop = [x, tok, o, B, Tk, D] {
            for (int b = 0; b < B; ++b) {
                if (tok->requires_grad)
                    for (int j = 0; j < D; ++j)
                        tok->grad.data[j] += o->grad.data[(static_cast<size_t>(b) * (Tk + 1)) * D + j];
                if (x->requires_grad)
                    for (int t = 0; t < Tk; ++t)
                        for (int j = 0; j < D; ++j)
                            x->grad.data[(static_cast<size_t>(b) * Tk + t) * D + j] +=
                                o->grad.data[(static_cast<size_t>(b) * (Tk + 1) + t + 1) * D + j];
            }
        };
        return o;
    }

    // x: [B,T,D] + pos: [T,D], broadcast over batch.
    Var add_pos(Var x, Var pos) {
        const Shape& s = x->value.shape;
        if (s.size() != 3 || pos->value.rank() != 2 || pos->value.dim(0) != s[1] ||
            pos->value.dim(1) != s[2])
            throw DimensionError("add_pos: " + shape_str(s) + " with " +
                                 shape_str(pos->value.shape));
        int B = s[0];
        size_t td = pos->value.size();
        TensorT<T> out = x->value;
        for (int b = 0; b < B; ++b)
            for (size_t i = 0; i < td; ++i)
                out.data[static_cast<size_t>(b) * td + i] += pos->value.data[i];
        Var o = make(std::move(out), x->requires_grad || pos->requires_grad);
        if (o->requires_grad) o->backprop = [x, pos, o, B, td] {
            for (int b = 0; b < B; ++b)
                for (size_t i = 0; i < td; ++i) {
                    T g = o->grad.data[static_cast<size_t>(b) * td + i];
                    if (x->requires_grad) x->grad.data[static_cast<size_t>(b) * td + i] += g;
                    if (pos->requires_grad) pos->grad.data[i] += g;
                }
        };
        return o;
    }

    // [B,T,D] -> [B,D], the t-th token of each sequence.
    Var select_token(Var x, int t) {
        const Shape& s = x->value.shape;
        if (s.size() != 3 || t < 0 || t >= s[1])
            throw DimensionError("select_token index " + std::to_string(t) + " in " +
                                 shape_str(s));
        int B = s[0], Tk = s[1], D = s[2];
        TensorT<T> out = TensorT<T>::zeros({B, D});
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < D; ++j)
                out.data[static_cast<size_t>(b) * D + j] =
                    x->value.data[(static_cast<size_t>(b) * Tk + t) * D + j];
        Var o = make(std::move(out), x->requires_grad);
        if (o->requires_grad) o->backprop = [x, o, B, Tk, D, t] {
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < D; ++j)
                    x->grad.data[(static_cast<size_t>(b) * Tk + t) * D + j] +=
                        o->grad.data[static_cast<size_t>(b) * D + j];
        };
        return o;
    }

    // ---- convolution ----

    // x: [n,h,w,cin], k: [kh,kw,cin,cout]. Cross-correlation convention.
    Var conv2d(Var x, Var kern, int stride, Pad padding) {
        const Shape& xs = x->value.shape;
        const Shape& ks = kern->value.shape;
        if (xs.size() != 4 || ks.size() != 4 || xs[3] != ks[2])
            throw DimensionError("conv2d: input " + shape_str(xs) + " kernel " + shape_str(ks));
        if (stride < 1) throw ContractError("conv2d stride must be positive");
        int n = xs[0], h = xs[1], w = xs[2], cin = xs[3];
        int kh = ks[0], kw = ks[1], cout = ks[3];
        int ph0 = 0, pw0 = 0, oh = 0, ow = 0;
        if (padding == Pad::valid) {
            if (kh > h || kw > w)
                throw DimensionError("conv2d: kernel " + shape_str(ks) +
                                     " larger than input " + shape_str(xs));
            oh = (h - kh) / stride + 1;
            ow = (w - kw) / stride + 1;
        } else {
            oh = (h + stride - 1) / stride;
            ow = (w + stride - 1) / stride;
            int pad_h = std::max(0, (oh - 1) * stride + kh - h);
            int pad_w = std::max(0, (ow - 1) * stride + kw - w);
            ph0 = pad_h / 2;
            pw0 = pad_w / 2;
        }
        TensorT<T> out = TensorT<T>::zeros({n, oh, ow, cout});
        auto x_at = [&](const std::vector<T>& d, int b, int i, int j, int c) -> T {
            if (i < 0 || i >= h || j < 0 || j >= w) return T(0);
            return d[((static_cast<size_t>(b) * h + i) * w + j) * cin + c];
        };
        for (int b = 0; b < n; ++b)
            for (int oi = 0; oi < oh; ++oi)
                for (int oj = 0; oj < ow; ++oj)
                    for (int co = 0; co < cout; ++co) {
                        T s = 0;
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj)
                                for (int ci = 0; ci < cin; ++ci)
                                    s += x_at(x->value.data, b, oi * stride - ph0 + ki,
                                              oj * stride - pw0 + kj, ci) *
                                         kern->value.data[((static_cast<size_t>(ki) * kw + kj) * cin + ci) * cout + co];
                        out.data[((static_cast<size_t>(b) * oh + oi) * ow + oj) * cout + co] = s;
                    }
        Var o = make(std::move(out), x->requires_grad || kern->requires_grad);
        if (o->requires_grad)
            o->backprop = [x, kern, o, n, h, w, cin, kh, kw, cout, oh, ow, ph0, pw0, stride] {
                for (int b = 0; b < n; ++b)
                    for (int oi = 0; oi < oh; ++oi)
                        for (int oj = 0; oj < ow; ++oj)
                            for (int co = 0; co < cout; ++co) {
                                T g = o->grad.data[((static_cast<size_t>(b) * oh + oi) * ow + oj) * cout + co];
                                if (g == T(0)) continue;
                                for (int ki = 0; ki < kh; ++ki) {
                                    int i = oi * stride - ph0 + ki;
                                    if (i < 0 || i >= h) continue;
                                    for (int kj = 0; kj < kw; ++kj) {
                                        int j = oj * stride - pw0 + kj;
                                        if (j < 0 || j >= w) continue;
                                        for (int ci = 0; ci < cin; ++ci) {
                                            size_t xi = ((static_cast<size_t>(b) * h + i) * w + j) * cin + ci;
                                            size_t kidx = ((static_cast<size_t>(ki) * kw + kj) * cin + ci) * cout + co;
                                            if (x->requires_grad)
                                                x->grad.data[xi] += g * kern->value.data[kidx];
                                            if (kern->requires_grad)
                                                kern->grad.data[kidx] += g * x->value.data[xi];
                                        }
                                    }
                                }
                            }
            };
        return o;
    }

    // ---- loss ----

    // Mean over the batch of -log softmax(logits)[label].
    Var sparse_ce(Var logits, const std::vector<int>& labels) {
        const Shape& s = logits->value.shape;
        if (s.size() != 2 || static_cast<size_t>(s[0]) != labels.size())
            throw DimensionError("sparse_ce: logits " + shape_str(s) + " vs " +
                                 std::to_string(labels.size()) + " labels");
        int N = s[0], K = s[1];
        for (int i = 0; i < N; ++i)
            if (labels[i] < 0 || labels[i] >= K)
                throw ContractError("sparse_ce: label " + std::to_string(labels[i]) +
                                    " at index " + std::to_string(i) + " outside [0," +
                                    std::to_string(K) + ")");
        auto probs = std::make_shared<std::vector<T>>(logits->value.size());
        T loss = 0;
        for (int i = 0; i < N; ++i) {
            const T* row = logits->value.data.data() + static_cast<size_t>(i) * K;
            T mx = row[0];
            for (int j = 1; j < K; ++j) mx = std::max(mx, row[j]);
            T lse = 0;
            for (int j = 0; j < K; ++j) lse += std::exp(row[j] - mx);
            lse = std::log(lse) + mx;
            for (int j = 0; j < K; ++j) (*probs)[static_cast<size_t>(i) * K + j] = std::exp(row[j] - lse);
            loss += lse - row[labels[i]];
        }
        loss /= T(N);
        Var o = make(TensorT<T>::scalar(loss), logits->requires_grad);
        if (o->requires_grad) o->backprop = [logits, o, probs, labels, N, K] {
            T g = o->grad.data[0] / T(N);
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < K; ++j) {
                    T p = (*probs)[static_cast<size_t>(i) * K + j];
                    logits->grad.data[static_cast<size_t>(i) * K + j] +=
                        g * (p - (j == labels[i] ? T(1) : T(0)));
                }
        };
        return o;
    }

    // ---- patch extraction ----

    // [N,H,W,C] -> [N, HW/P^2, P*P*C], patches row-major, each flattened row-major.
    Var patchify(Var x, int P) {
        Var o = make(patchify_t(x->value, P), x->requires_grad);
        if (o->requires_grad) o->backprop = [x, o, P] {
            TensorT<T> g = unpatchify_t(o->grad, P, x->value.shape);
            for (size_t i = 0; i < g.size(); ++i) x->grad.data[i] += g.data[i];
        };
        return o;
    }

    static TensorT<T> patchify_t(const TensorT<T>& x, int P) {
        const Shape& s = x.shape;
        if (s.size() != 4 || P <= 0 || s[1] % P != 0 || s[2] % P != 0)
            throw DimensionError("patchify: H=" + std::to_string(s.size() == 4 ? s[1] : -1) +
                                 " W=" + std::to_string(s.size() == 4 ? s[2] : -1) +
                                 " not divisible by P=" + std::to_string(P));
        int n = s[0], h = s[1], w = s[2], c = s[3];
        int gh = h / P, gw = w / P;
        TensorT<T> out = TensorT<T>::zeros({n, gh * gw, P * P * c});
        size_t plen = static_cast<size_t>(P) * P * c;
        for (int b = 0; b < n; ++b)
            for (int pi = 0; pi < gh; ++pi)
                for (int pj = 0; pj < gw; ++pj) {
                    size_t patch = static_cast<size_t>(pi) * gw + pj;
                    T* dst = out.data.data() + (static_cast<size_t>(b) * gh * gw + patch) * plen;
                    for (int i = 0; i < P; ++i)
                        for (int j = 0; j < P; ++j)
                            for (int ch = 0; ch < c; ++ch)
                                dst[(static_cast<size_t>(i) * P + j) * c + ch] =
                                    x.data[((static_cast<size_t>(b) * h + pi * P + i) * w + pj * P + j) * c + ch];
                }
        return out;
    }

    static TensorT<T> unpatchify_t(const TensorT<T>& p, int P, const Shape& image_shape) {
        int n = image_shape[0], h = image_shape[1], w = image_shape[2], c = image_shape[3];
        int gh = h / P, gw = w / P;
        if (p.rank() != 3 || p.dim(0) != n || p.dim(1) != gh * gw || p.dim(2) != P * P * c)
            throw DimensionError("unpatchify: patches " + shape_str(p.shape) +
                                 " do not match image " + shape_str(image_shape));
        TensorT<T> out = TensorT<T>::zeros(image_shape);
        size_t plen = static_cast<size_t>(P) * P * c;
        for (int b = 0; b < n; ++b)
            for (int pi = 0; pi < gh; ++pi)
                for (int pj = 0; pj < gw; ++pj) {
                    size_t patch = static_cast<size_t>(pi) * gw + pj;
                    const T* src = p.data.data() + (static_cast<size_t>(b) * gh * gw + patch) * plen;
                    for (int i = 0; i < P; ++i)
                        for (int j = 0; j < P; ++j)
                            for (int ch = 0; ch < c; ++ch)
                                out.data[((static_cast<size_t>(b) * h + pi * P + i) * w + pj * P + j) * c + ch] =
                                    src[(static_cast<size_t>(i) * P + j) * c + ch];
                }
        return out;
    }

private:
    std::vector<std::unique_ptr<Node>> nodes_;

    Var make(TensorT<T> v, bool rg) {
        nodes_.push_back(std::make_unique<Node>());
        Node* n = nodes_.back().get();
        n->value = std::move(v);
        n->requires_grad = rg;
        if (rg) n->grad = TensorT<T>::zeros(n->value.shape);
        return n;
    }

    static void require_same(Var a, Var b, const char* op) {
        if (!a->value.same_shape(b->value))
            throw DimensionError(std::string(op) + ": shapes " + shape_str(a->value.shape) +
                                 " and " + shape_str(b->value.shape) + " differ");
    }

    static void mm(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i)
            for (int c = 0; c < k; ++c) {
                T a = A[static_cast<size_t>(i) * k + c];
                if (a == T(0)) continue;
                const T* brow = B + static_cast<size_t>(c) * n;
                T* crow = C + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
    }

    // C = A (m,k) * B^T with B stored (n,k)
    static void mm_nt(const T* A, const T* B, T* C, int m, int k, int n) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                T s = 0;
                const T* arow = A + static_cast<size_t>(i) * k;
                const T* brow = B + static_cast<size_t>(j) * k;
                for (int c = 0; c < k; ++c) s += arow[c] * brow[c];
                C[static_cast<size_t>(i) * n + j] = s;
            }
    }
};

using Tape = TapeT<float>;

} // namespace vcl
