#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "vsm/tensor.hpp"

namespace vsm {

// Named parameter set. Insertion order is fixed and doubles as the
// checkpoint order, so identical seeds give identical files.
template <typename T>
struct Param {
    Tensor<T> value;
    bool trainable = false;
};

template <typename T>
class ParamStore {
public:
    size_t add(const std::string& name, Tensor<T> value, bool trainable) {
        if (index_.count(name)) throw ConfigError("param '" + name + "' registered twice");
        index_[name] = params_.size();
        names_.push_back(name);
        params_.push_back(Param<T>{std::move(value), trainable});
        return params_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown param '" + name + "'");
        return it->second;
    }

    Param<T>& at(size_t i) { return params_[i]; }
    const Param<T>& at(size_t i) const { return params_[i]; }
    Param<T>& operator[](const std::string& name) { return params_[index_of(name)]; }
    const Param<T>& operator[](const std::string& name) const { return params_[index_of(name)]; }

    size_t count() const { return params_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }

    size_t scalar_count(bool trainable_only) const {
        size_t n = 0;
        for (const auto& p : params_)
            if (!trainable_only || p.trainable) n += p.value.size();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Param<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Reverse-mode tape. Nodes are created in topological order; backward walks
// them once in reverse. Frozen parameters never allocate gradient storage.
template <typename T>
class Graph {
public:
    struct Var {
        uint32_t id = UINT32_MAX;
        bool ok() const { return id != UINT32_MAX; }
    };

    explicit Graph(ParamStore<T>* params = nullptr, bool record = true)
        : params_(params), record_(record) {}

    const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
    size_t node_count() const { return nodes_.size(); }

    Var input(Tensor<T> t) { return push(std::move(t), false, nullptr); }

    Var param(const std::string& name) {
        if (!params_) throw ContractError("graph has no parameter store");
        const size_t pi = params_->index_of(name);
        auto it = param_nodes_.find(pi);
        if (it != param_nodes_.end()) return Var{it->second};
        const bool ng = record_ && params_->at(pi).trainable;
        Var v = push(params_->at(pi).value, ng, nullptr);
        param_nodes_[pi] = v.id;
        node_param_.emplace_back(v.id, pi);
        return v;
    }

    // --- elementwise / structural ops -------------------------------------

    Var add(Var a, Var b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (!A.same_shape(B))
            throw ShapeError("add: shapes differ " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
        Tensor<T> y(A.shape());
        for (size_t i = 0; i < y.size(); ++i) y.at(i) = A.at(i) + B.at(i);
        return push(std::move(y), grad_any({a, b}), [a, b](Graph& g, const Tensor<T>& go) {
            g.accum(a, go);
            g.accum(b, go);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (!A.same_shape(B))
            throw ShapeError("mul: shapes differ " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
        Tensor<T> y(A.shape());
        for (size_t i = 0; i < y.size(); ++i) y.at(i) = A.at(i) * B.at(i);
        return push(std::move(y), grad_any({a, b}), [a, b, A, B](Graph& g, const Tensor<T>& go) {
            if (g.wants(a)) {
                Tensor<T> d(A.shape());
                for (size_t i = 0; i < d.size(); ++i) d.at(i) = go.at(i) * B.at(i);
                g.accum_move(a, std::move(d));
            }
            if (g.wants(b)) {
                Tensor<T> d(B.shape());
                for (size_t i = 0; i < d.size(); ++i) d.at(i) = go.at(i) * A.at(i);
                g.accum_move(b, std::move(d));
            }
        });
    }

    Var scale(Var a, T c) {
        const Tensor<T>& A = val(a);
        Tensor<T> y(A.shape());
        for (size_t i = 0; i < y.size(); ++i) y.at(i) = A.at(i) * c;
        return push(std::move(y), grad_any({a}), [a, c](Graph& g, const Tensor<T>& go) {
            Tensor<T> d(go.shape());
            for (size_t i = 0; i < d.size(); ++i) d.at(i) = go.at(i) * c;
            g.accum_move(a, std::move(d));
        });
    }

    // y = x + c for a fixed tensor (attention masks, position terms).
    Var add_const(Var a, const Tensor<T>& c) {
        const Tensor<T>& A = val(a);
        if (!A.same_shape(c))
            throw ShapeError("add_const: shapes differ " + shape_str(A.shape()) + " vs " + shape_str(c.shape()));
        Tensor<T> y(A.shape());
        for (size_t i = 0; i < y.size(); ++i) y.at(i) = A.at(i) + c.at(i);
        return push(std::move(y), grad_any({a}), [a](Graph& g, const Tensor<T>& go) { g.accum(a, go); });
    }

    // rows of x plus a length-n vector.
    Var add_rowvec(Var x, Var v) {
        const Tensor<T>&X = val(x), &V = val(v);
        if (V.size() != X.cols())
            throw ShapeError("add_rowvec: vector " + shape_str(V.shape()) + " vs matrix " + shape_str(X.shape()));
        Tensor<T> y(X.shape());
        const size_t m = X.rows(), n = X.cols();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) y.at(i, j) = X.at(i, j) + V.at(j);
        return push(std::move(y), grad_any({x, v}), [x, v, m, n](Graph& g, const Tensor<T>& go) {
            g.accum(x, go);
            if (g.wants(v)) {
                Tensor<T> d({n});
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) d.at(j) += go.at(i * n + j);
                g.accum_move(v, std::move(d));
            }
        });
    }

    // rows of x scaled by a per-row scalar g[m×1]; broadcast over channels.
    Var mul_colvec(Var x, Var s) {
        const Tensor<T>&X = val(x), &S = val(s);
        if (S.rows() != X.rows() || S.cols() != 1)
            throw ShapeError("mul_colvec: gate " + shape_str(S.shape()) + " vs matrix " + shape_str(X.shape()));
        const size_t m = X.rows(), n = X.cols();
        Tensor<T> y(X.shape());
        for (size_t i = 0; i < m; ++i) {
            const T si = S.at(i, 0);
            for (size_t j = 0; j < n; ++j) y.at(i, j) = X.at(i, j) * si;
        }
        return push(std::move(y), grad_any({x, s}), [x, s, X, S, m, n](Graph& g, const Tensor<T>& go) {
            if (g.wants(x)) {
                Tensor<T> d(X.shape());
                for (size_t i = 0; i < m; ++i) {
                    const T si = S.at(i, 0);
                    for (size_t j = 0; j < n; ++j) d.at(i * n + j) = go.at(i * n + j) * si;
                }
                g.accum_move(x, std::move(d));
            }
            if (g.wants(s)) {
                Tensor<T> d({m, 1});
                for (size_t i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (size_t j = 0; j < n; ++j) acc += go.at(i * n + j) * X.at(i * n + j);
                    d.at(i, 0) = acc;
                }
                g.accum_move(s, std::move(d));
            }
        });
    }

    // --- dense algebra -----------------------------------------------------

    Var matmul(Var a, Var b) {
        const Tensor<T>&A = val(a), &B = val(b);
        Tensor<T> y = vsm::matmul(A, B);
        return push(std::move(y), grad_any({a, b}), [a, b, A, B](Graph& g, const Tensor<T>& go) {
            if (g.wants(a)) g.accum_move(a, matmul_nt(go, B));
            if (g.wants(b)) g.accum_move(b, matmul_tn(A, go));
        });
    }

    Var transpose(Var a) {
        Tensor<T> y = vsm::transpose(val(a));
        return push(std::move(y), grad_any({a}), [a](Graph& g, const Tensor<T>& go) {
            g.accum_move(a, vsm::transpose(go));
        });
    }

    Var slice_cols(Var a, size_t c0, size_t c1) {
        const Tensor<T>& A = val(a);
        if (c1 > A.cols() || c0 >= c1)
            throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                             shape_str(A.shape()));
        const size_t m = A.rows(), n = A.cols(), w = c1 - c0;
        Tensor<T> y({m, w});
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < w; ++j) y.at(i, j) = A.at(i, c0 + j);
        return push(std::move(y), grad_any({a}), [a, m, n, c0, w](Graph& g, const Tensor<T>& go) {
            Tensor<T> d({m, n});
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < w; ++j) d.at(i, c0 + j) = go.at(i, j);
            g.accum_move(a, std::move(d));
        });
    }

    Var slice_rows(Var a, size_t r0, size_t r1) {
        const Tensor<T>& A = val(a);
        if (r1 > A.rows() || r0 >= r1)
            throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                             shape_str(A.shape()));
        const size_t n = A.cols(), h = r1 - r0;
        Tensor<T> y({h, n});
        for (size_t i = 0; i < h; ++i)
            for (size_t j = 0; j < n; ++j) y.at(i, j) = A.at(r0 + i, j);
        return push(std::move(y), grad_any({a}), [a, r0, h, n, rows = A.rows()](Graph& g, const Tensor<T>& go) {
            Tensor<T> d({rows, n});
            for (size_t i = 0; i < h; ++i)
                for (size_t j = 0; j < n; ++j) d.at(r0 + i, j) = go.at(i, j);
            g.accum_move(a, std::move(d));
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: no parts");
        const size_t m = val(parts[0]).rows();
        size_t n = 0;
        for (Var p : parts) {
            if (val(p).rows() != m) throw ShapeError("concat_cols: row mismatch");
            n += val(p).cols();
        }
        Tensor<T> y({m, n});
        size_t off = 0;
        for (Var p : parts) {
            const Tensor<T>& P = val(p);
            for (size_t i = 0; i < m; ++i)
                for (size_t j = 0; j < P.cols(); ++j) y.at(i, off + j) = P.at(i, j);
            off += P.cols();
        }
        std::vector<size_t> widths;
        for (Var p : parts) widths.push_back(val(p).cols());
        return push(std::move(y), grad_any(parts), [parts, widths, m](Graph& g, const Tensor<T>& go) {
            size_t off = 0;
            for (size_t k = 0; k < parts.size(); ++k) {
                if (g.wants(parts[k])) {
                    Tensor<T> d({m, widths[k]});
                    for (size_t i = 0; i < m; ++i)
                        for (size_t j = 0; j < widths[k]; ++j) d.at(i, j) = go.at(i, off + j);
                    g.accum_move(parts[k], std::move(d));
                }
                off += widths[k];
            }
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw ContractError("concat_rows: no parts");
        const size_t n = val(parts[0]).cols();
        size_t m = 0;
        for (Var p : parts) {
            if (val(p).cols() != n) throw ShapeError("concat_rows: column mismatch");
            m += val(p).rows();
        }
        Tensor<T> y({m, n});
        size_t off = 0;
        for (Var p : parts) {
            const Tensor<T>& P = val(p);
            for (size_t i = 0; i < P.rows(); ++i)
                for (size_t j = 0; j < n; ++j) y.at(off + i, j) = P.at(i, j);
            off += P.rows();
        }
        std::vector<size_t> heights;
        for (Var p : parts) heights.push_back(val(p).rows());
        return push(std::move(y), grad_any(parts), [parts, heights, n](Graph& g, const Tensor<T>& go) {
            size_t off = 0;
            for (size_t k = 0; k < parts.size(); ++k) {
                if (g.wants(parts[k])) {
                    Tensor<T> d({heights[k], n});
                    for (size_t i = 0; i < heights[k]; ++i)
                        for (size_t j = 0; j < n; ++j) d.at(i, j) = go.at(off + i, j);
                    g.accum_move(parts[k], std::move(d));
                }
                off += heights[k];
            }
        });
    }

    // --- nonlinearities ------------------------------------------------------

    Var sigmoid(Var a) {
        Tensor<T> y = vsm::sigmoid(val(a));
        return push(Tensor<T>(y), grad_any({a}), [a, y](Graph& g, const Tensor<T>& go) {
            Tensor<T> d(y.shape());
            for (size_t i = 0; i < d.size(); ++i) d.at(i) = go.at(i) * y.at(i) * (T(1) - y.at(i));
            g.accum_move(a, std::move(d));
        });
    }

    Var relu(Var a) {
        const Tensor<T>& A = val(a);
        Tensor<T> y = vsm::relu(A);
        return push(std::move(y), grad_any({a}), [a, A](Graph& g, const Tensor<T>& go) {
            Tensor<T> d(A.shape());
            for (size_t i = 0; i < d.size(); ++i) d.at(i) = A.at(i) > T(0) ? go.at(i) : T(0);
            g.accum_move(a, std::move(d));
        });
    }

    Var gelu(Var a) {
        const Tensor<T>& A = val(a);
        Tensor<T> y = vsm::gelu(A);
        return push(std::move(y), grad_any({a}), [a, A](Graph& g, const Tensor<T>& go) {
            Tensor<T> d(A.shape());
            for (size_t i = 0; i < d.size(); ++i) {
                const T v = A.at(i);
                const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
                const T pdf = std::exp(-T(0.5) * v * v) * T(0.39894228040143267794);
                d.at(i) = go.at(i) * (cdf + v * pdf);
            }
            g.accum_move(a, std::move(d));
        });
    }

    // --- normalization / attention pieces ------------------------------------

    Var rms_norm(Var x, Var scale, T eps) {
        const Tensor<T>&X = val(x), &S = val(scale);
        Tensor<T> y = vsm::rms_norm(X, S, eps);
        return push(std::move(y), grad_any({x, scale}), [x, scale, X, S, eps](Graph& g, const Tensor<T>& go) {
            const size_t m = X.rows(), d = X.cols();
            Tensor<T> dx, ds;
            if (g.wants(x)) dx = Tensor<T>(X.shape());
            if (g.wants(scale)) ds = Tensor<T>({d});
            for (size_t i = 0; i < m; ++i) {
                const T* xi = X.data() + i * d;
                const T* gi = go.data() + i * d;
                T ms = T(0);
                for (size_t j = 0; j < d; ++j) ms += xi[j] * xi[j];
                const T inv = T(1) / std::sqrt(ms / T(d) + eps);
                if (ds.defined())
                    for (size_t j = 0; j < d; ++j) ds.at(j) += gi[j] * xi[j] * inv;
                if (dx.defined()) {
                    // u = x * inv; dL/du = go * s; dx = inv*(gu - u*(gu.u)/d)
                    T gu_dot_u = T(0);
                    for (size_t j = 0; j < d; ++j) gu_dot_u += gi[j] * S.at(j) * xi[j] * inv;
                    for (size_t j = 0; j < d; ++j)
                        dx.at(i * d + j) = inv * (gi[j] * S.at(j) - xi[j] * inv * gu_dot_u / T(d));
                }
            }
            if (dx.defined()) g.accum_move(x, std::move(dx));
            if (ds.defined()) g.accum_move(scale, std::move(ds));
        });
    }

    Var softmax_rows(Var a) {
        Tensor<T> y = vsm::softmax_rows(val(a));
        return push(Tensor<T>(y), grad_any({a}), [a, y](Graph& g, const Tensor<T>& go) {
            const size_t m = y.rows(), n = y.cols();
            Tensor<T> d(y.shape());
            for (size_t i = 0; i < m; ++i) {
                T dot = T(0);
                for (size_t j = 0; j < n; ++j) dot += go.at(i * n + j) * y.at(i * n + j);
                for (size_t j = 0; j < n; ++j)
                    d.at(i * n + j) = y.at(i * n + j) * (go.at(i * n + j) - dot);
            }
            g.accum_move(a, std::move(d));
        });
    }

    Var rope(Var x, size_t n_heads, size_t pos0, T base) {
        Tensor<T> y = val(x).clone();
        rope_rows_inplace(y, n_heads, pos0, base, false);
        return push(std::move(y), grad_any({x}), [x, n_heads, pos0, base](Graph& g, const Tensor<T>& go) {
            Tensor<T> d = go.clone();
            rope_rows_inplace(d, n_heads, pos0, base, true);
            g.accum_move(x, std::move(d));
        });
    }

    // --- reductions / loss ----------------------------------------------------

    Var sum_all(Var a) {
        const Tensor<T>& A = val(a);
        T s = T(0);
        for (size_t i = 0; i < A.size(); ++i) s += A.at(i);
        return push(Tensor<T>::scalar(s), grad_any({a}), [a, shape = A.shape()](Graph& g, const Tensor<T>& go) {
            g.accum_move(a, Tensor<T>::full(shape, go.at(0)));
        });
    }

    Var cross_entropy(Var logits, std::vector<int> targets, std::vector<uint8_t> mask) {
        const Tensor<T>& L = val(logits);
        const T loss = cross_entropy_value(L, targets, mask);
        return push(Tensor<T>::scalar(loss), grad_any({logits}),
                    [logits, L, targets, mask](Graph& g, const Tensor<T>& go) {
                        const size_t m = L.rows(), n = L.cols();
                        size_t count = 0;
                        for (uint8_t b : mask) count += b ? 1 : 0;
                        Tensor<T> d({m, n});
                        if (count) {
                            const T w = go.at(0) / T(count);
                            std::vector<T> sm(n);
                            for (size_t i = 0; i < m; ++i) {
                                if (!mask[i]) continue;
                                softmax_row_into(L.data() + i * n, sm.data(), n);
                                for (size_t j = 0; j < n; ++j) d.at(i * n + j) = sm[j] * w;
                                d.at(i * n + size_t(targets[i])) -= w;
                            }
                        }
                        g.accum_move(logits, std::move(d));
                    });
    }

    // --- embedding -------------------------------------------------------------

    Var embed_rows(Var table, std::vector<int> ids) {
        const Tensor<T>& W = val(table);
        const size_t v = W.rows(), d = W.cols();
        Tensor<T> y({ids.size(), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || size_t(ids[i]) >= v)
                throw IndexError("embed_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(v));
            const T* src = W.data() + size_t(ids[i]) * d;
            T* dst = y.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        return push(std::move(y), grad_any({table}), [table, ids, v, d](Graph& g, const Tensor<T>& go) {
            Tensor<T> dw({v, d});
            for (size_t i = 0; i < ids.size(); ++i) {
                T* dst = dw.data() + size_t(ids[i]) * d;
                const T* src = go.data() + i * d;
                for (size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            g.accum_move(table, std::move(dw));
        });
    }

    // --- backward -------------------------------------------------------------

    void backward(Var loss) {
        if (val(loss).size() != 1)
            throw ContractError("backward: loss node has shape " + shape_str(val(loss).shape()) +
                                ", expected scalar");
        grads_.assign(nodes_.size(), Tensor<T>());
        if (!nodes_[loss.id].needs_grad) return;
        grads_[loss.id] = Tensor<T>::scalar(T(1));
        for (size_t i = loss.id + 1; i-- > 0;) {
            if (grads_[i].defined() && nodes_[i].backward) nodes_[i].backward(*this, grads_[i]);
        }
    }

    // Gradients of trainable parameters reached by the last backward() call.
    GradMap<T> grads() const {
        GradMap<T> out;
        for (const auto& [nid, pi] : node_param_) {
            if (nid < grads_.size() && grads_[nid].defined()) out[params_->name(pi)] = grads_[nid];
        }
        return out;
    }

    bool wants(Var v) const { return nodes_[v.id].needs_grad; }

    void accum(Var v, const Tensor<T>& delta) {
        if (!wants(v)) return;
        Tensor<T>& g = grads_[v.id];
        if (!g.defined()) {
            g = delta.clone();
        } else {
            for (size_t i = 0; i < g.size(); ++i) g.at(i) += delta.at(i);
        }
    }

    void accum_move(Var v, Tensor<T>&& delta) {
        if (!wants(v)) return;
        Tensor<T>& g = grads_[v.id];
        if (!g.defined()) {
            g = std::move(delta);
        } else {
            for (size_t i = 0; i < g.size(); ++i) g.at(i) += delta.at(i);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        bool needs_grad = false;
        std::function<void(Graph&, const Tensor<T>&)> backward;
    };

    const Tensor<T>& val(Var v) const { return nodes_[v.id].value; }

    bool grad_any(const std::vector<Var>& vs) const {
        if (!record_) return false;
        for (Var v : vs)
            if (nodes_[v.id].needs_grad) return true;
        return false;
    }

    Var push(Tensor<T> value, bool needs_grad, std::function<void(Graph&, const Tensor<T>&)> bwd) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad && record_;
        if (n.needs_grad) n.backward = std::move(bwd);
        nodes_.push_back(std::move(n));
        return Var{uint32_t(nodes_.size() - 1)};
    }

    ParamStore<T>* params_;
    bool record_;
    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    std::unordered_map<size_t, uint32_t> param_nodes_;
    std::vector<std::pair<uint32_t, size_t>> node_param_;
};

}  // namespace vsm
