#include "moelab/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace moelab::ops {

namespace {

using moelab::detail::accumulate_grad;
using moelab::detail::check_same_dtype;
using moelab::detail::dispatch_dtype;

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<EMat<S>>;
template <typename S>
using CMapM = Eigen::Map<const EMat<S>>;
template <typename S>
using StridedMap = Eigen::Map<EMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using CStridedMap = Eigen::Map<const EMat<S>, 0, Eigen::OuterStride<>>;

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void attach(Tensor& out, std::vector<std::shared_ptr<TensorImpl>> inputs,
            std::function<void(TensorImpl&)> backward) {
    out.set_requires_grad(true);
    out.raw().node = std::make_unique<Node>();
    out.raw().node->inputs = std::move(inputs);
    out.raw().node->backward = std::move(backward);
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " +
                             shape_str(t.shape()));
    }
}

// Shared skeleton for unary elementwise ops: fwd(x) -> y, dfdx(x, y) -> local
// derivative, evaluated in the tensor's own precision.
template <typename Fwd, typename Dfdx>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Dfdx dfdx) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto y = out.raw().values<S>();
        for (size_t i = 0; i < y.size(); ++i) y[i] = static_cast<S>(fwd(static_cast<double>(x[i])));
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai, dfdx](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                auto g = o.grad_values<S>();
                auto x = ai->values<S>();
                auto y = o.values<S>();
                auto gx = ai->grad_values<S>();
                for (size_t i = 0; i < g.size(); ++i) {
                    gx[i] += static_cast<S>(static_cast<double>(g[i]) *
                                            dfdx(static_cast<double>(x[i]),
                                                 static_cast<double>(y[i])));
                }
            });
        });
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "add");
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto y = b.raw().values<S>();
        auto z = out.raw().values<S>();
        for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
    });
    if (wants_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        attach(out, {ai, bi}, [ai, bi](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                accumulate_grad<S>(*ai, g);
                accumulate_grad<S>(*bi, g);
            });
        });
    }
    return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    check_same_dtype(a, v, "add_rowvec");
    require_rank2(a, "add_rowvec");
    if (v.rank() != 1 || v.dim(0) != a.dim(1)) {
        throw DimensionError("add_rowvec: vector " + shape_str(v.shape()) +
                             " does not match row width of " + shape_str(a.shape()));
    }
    const int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto b = v.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) z[r * cols + c] = x[r * cols + c] + b[c];
    });
    if (wants_grad({&a, &v})) {
        auto ai = a.impl();
        auto vi = v.impl();
        attach(out, {ai, vi}, [ai, vi, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                accumulate_grad<S>(*ai, g);
                if (vi->requires_grad) {
                    vi->alloc_grad();
                    auto gv = vi->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                }
            });
        });
    }
    return out;
}

Tensor sub_colvec(const Tensor& a, const Tensor& v) {
    check_same_dtype(a, v, "sub_colvec");
    require_rank2(a, "sub_colvec");
    if (v.rank() != 1 || v.dim(0) != a.dim(0)) {
        throw DimensionError("sub_colvec: vector " + shape_str(v.shape()) +
                             " does not match row count of " + shape_str(a.shape()));
    }
    const int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto c0 = v.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) z[r * cols + c] = x[r * cols + c] - c0[r];
    });
    if (wants_grad({&a, &v})) {
        auto ai = a.impl();
        auto vi = v.impl();
        attach(out, {ai, vi}, [ai, vi, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                accumulate_grad<S>(*ai, g);
                if (vi->requires_grad) {
                    vi->alloc_grad();
                    auto gv = vi->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r) {
                        S acc = 0;
                        for (int64_t c = 0; c < cols; ++c) acc += g[r * cols + c];
                        gv[r] -= acc;
                    }
                }
            });
        });
    }
    return out;
}

Tensor div_colvec(const Tensor& a, const Tensor& v) {
    check_same_dtype(a, v, "div_colvec");
    require_rank2(a, "div_colvec");
    if (v.rank() != 1 || v.dim(0) != a.dim(0)) {
        throw DimensionError("div_colvec: vector " + shape_str(v.shape()) +
                             " does not match row count of " + shape_str(a.shape()));
    }
    const int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto dv = v.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) z[r * cols + c] = x[r * cols + c] / dv[r];
    });
    if (wants_grad({&a, &v})) {
        auto ai = a.impl();
        auto vi = v.impl();
        attach(out, {ai, vi}, [ai, vi, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                auto x = ai->values<S>();
                auto dv = vi->values<S>();
                if (ai->requires_grad) {
                    ai->alloc_grad();
                    auto ga = ai->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c)
                            ga[r * cols + c] += g[r * cols + c] / dv[r];
                }
                if (vi->requires_grad) {
                    vi->alloc_grad();
                    auto gv = vi->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r) {
                        S acc = 0;
                        for (int64_t c = 0; c < cols; ++c) acc += g[r * cols + c] * x[r * cols + c];
                        gv[r] -= acc / (dv[r] * dv[r]);
                    }
                }
            });
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "mul");
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto y = b.raw().values<S>();
        auto z = out.raw().values<S>();
        for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
    });
    if (wants_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        attach(out, {ai, bi}, [ai, bi](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                auto x = ai->values<S>();
                auto y = bi->values<S>();
                if (ai->requires_grad) {
                    ai->alloc_grad();
                    auto ga = ai->grad_values<S>();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                }
                if (bi->requires_grad) {
                    bi->alloc_grad();
                    auto gb = bi->grad_values<S>();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
                }
            });
        });
    }
    return out;
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "div");
    if (a.shape() != b.shape()) {
        throw DimensionError("div: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto y = b.raw().values<S>();
        auto z = out.raw().values<S>();
        for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] / y[i];
    });
    if (wants_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        attach(out, {ai, bi}, [ai, bi](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                auto x = ai->values<S>();
                auto y = bi->values<S>();
                if (ai->requires_grad) {
                    ai->alloc_grad();
                    auto ga = ai->grad_values<S>();
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / y[i];
                }
                if (bi->requires_grad) {
                    bi->alloc_grad();
                    auto gb = bi->grad_values<S>();
                    for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
                }
            });
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    return unary_elementwise(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_const(const Tensor& a, double c) {
    return unary_elementwise(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor sub_from_const(double c, const Tensor& a) {
    return unary_elementwise(
        a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

Tensor silu(const Tensor& a) {
    return unary_elementwise(
        a,
        [](double x) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return x * s;
        },
        [](double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor sqrt(const Tensor& a) {
    return unary_elementwise(
        a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor sum(const Tensor& a) {
    Tensor out = Tensor::zeros({}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        S acc = 0;
        for (S v : x) acc += v;
        out.raw().values<S>()[0] = acc;
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                S g = o.grad_values<S>()[0];
                auto ga = ai->grad_values<S>();
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
            });
        });
    }
    return out;
}

Tensor row_mean(const Tensor& a) {
    require_rank2(a, "row_mean");
    const int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros({rows}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r) {
            S acc = 0;
            for (int64_t c = 0; c < cols; ++c) acc += x[r * cols + c];
            z[r] = acc / static_cast<S>(cols);
        }
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                auto g = o.grad_values<S>();
                auto ga = ai->grad_values<S>();
                for (int64_t r = 0; r < rows; ++r) {
                    S gr = g[r] / static_cast<S>(cols);
                    for (int64_t c = 0; c < cols; ++c) ga[r * cols + c] += gr;
                }
            });
        });
    }
    return out;
}

Tensor col_mean(const Tensor& a) {
    require_rank2(a, "col_mean");
    const int64_t rows = a.dim(0), cols = a.dim(1);
    Tensor out = Tensor::zeros({cols}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < cols; ++c) z[c] += x[r * cols + c];
        for (int64_t c = 0; c < cols; ++c) z[c] /= static_cast<S>(rows);
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                auto g = o.grad_values<S>();
                auto ga = ai->grad_values<S>();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < cols; ++c)
                        ga[r * cols + c] += g[c] / static_cast<S>(rows);
            });
        });
    }
    return out;
}

Tensor sum_groups(const Tensor& v, int64_t group) {
    if (v.rank() != 1 || group < 1 || v.dim(0) % group != 0) {
        throw DimensionError("sum_groups: need rank-1 length divisible by group, got " +
                             shape_str(v.shape()) + " group " + std::to_string(group));
    }
    const int64_t groups = v.dim(0) / group;
    Tensor out = Tensor::zeros({groups}, v.dtype());
    dispatch_dtype(v.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = v.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t gidx = 0; gidx < groups; ++gidx) {
            S acc = 0;
            for (int64_t j = 0; j < group; ++j) acc += x[gidx * group + j];
            z[gidx] = acc;
        }
    });
    if (wants_grad({&v})) {
        auto vi = v.impl();
        attach(out, {vi}, [vi, groups, group](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!vi->requires_grad) return;
                vi->alloc_grad();
                auto g = o.grad_values<S>();
                auto gv = vi->grad_values<S>();
                for (int64_t gidx = 0; gidx < groups; ++gidx)
                    for (int64_t j = 0; j < group; ++j) gv[gidx * group + j] += g[gidx];
            });
        });
    }
    return out;
}

Tensor repeat_interleave(const Tensor& v, int64_t times) {
    if (v.rank() != 1 || times < 1) {
        throw DimensionError("repeat_interleave: need a rank-1 tensor and times >= 1");
    }
    const int64_t n = v.dim(0);
    Tensor out = Tensor::zeros({n * times}, v.dtype());
    dispatch_dtype(v.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = v.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < times; ++j) z[i * times + j] = x[i];
    });
    if (wants_grad({&v})) {
        auto vi = v.impl();
        attach(out, {vi}, [vi, n, times](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!vi->requires_grad) return;
                vi->alloc_grad();
                auto g = o.grad_values<S>();
                auto gv = vi->grad_values<S>();
                for (int64_t i = 0; i < n; ++i) {
                    S acc = 0;
                    for (int64_t j = 0; j < times; ++j) acc += g[i * times + j];
                    gv[i] += acc;
                }
            });
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_same_dtype(a, b, "matmul");
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " @ " + shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        CMapM<S> am(a.raw().values<S>().data(), m, k);
        CMapM<S> bm(b.raw().values<S>().data(), k, n);
        MapM<S> cm(out.raw().values<S>().data(), m, n);
        cm.noalias() = am * bm;
    });
    if (wants_grad({&a, &b})) {
        auto ai = a.impl();
        auto bi = b.impl();
        attach(out, {ai, bi}, [ai, bi, m, k, n](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                CMapM<S> g(o.grad_values<S>().data(), m, n);
                if (ai->requires_grad) {
                    ai->alloc_grad();
                    MapM<S> ga(ai->grad_values<S>().data(), m, k);
                    CMapM<S> bm(bi->values<S>().data(), k, n);
                    ga.noalias() += g * bm.transpose();
                }
                if (bi->requires_grad) {
                    bi->alloc_grad();
                    MapM<S> gb(bi->grad_values<S>().data(), k, n);
                    CMapM<S> am(ai->values<S>().data(), m, k);
                    gb.noalias() += am.transpose() * g;
                }
            });
        });
    }
    return out;
}

Tensor softmax(const Tensor& z, int axis) {
    const int rank = static_cast<int>(z.rank());
    if (rank != 1 && rank != 2) {
        throw DimensionError("softmax: supports rank-1 and rank-2 tensors, got " +
                             shape_str(z.shape()));
    }
    if (!(axis == -1 || axis == rank - 1)) {
        throw ParameterError("softmax: only the last axis is supported");
    }
    const int64_t cols = z.dim(static_cast<size_t>(rank - 1));
    const int64_t rows = z.numel() / cols;
    Tensor out = Tensor::zeros(z.shape(), z.dtype());
    dispatch_dtype(z.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = z.raw().values<S>();
        auto y = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = x.data() + r * cols;
            S* yr = y.data() + r * cols;
            S mx = xr[0];
            for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
            S denom = 0;
            for (int64_t c = 0; c < cols; ++c) {
                yr[c] = std::exp(xr[c] - mx);
                denom += yr[c];
            }
            for (int64_t c = 0; c < cols; ++c) yr[c] /= denom;
        }
    });
    if (wants_grad({&z})) {
        auto zi = z.impl();
        attach(out, {zi}, [zi, rows, cols](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!zi->requires_grad) return;
                zi->alloc_grad();
                auto g = o.grad_values<S>();
                auto y = o.values<S>();
                auto gz = zi->grad_values<S>();
                for (int64_t r = 0; r < rows; ++r) {
                    const S* yr = y.data() + r * cols;
                    const S* gr = g.data() + r * cols;
                    S dot = 0;
                    for (int64_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                    for (int64_t c = 0; c < cols; ++c)
                        gz[r * cols + c] += yr[c] * (gr[c] - dot);
                }
            });
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
    require_rank2(logits, "cross_entropy");
    const int64_t rows = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " rows");
    }
    for (int64_t t : targets) {
        if (t < 0 || t >= vocab) {
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " outside vocabulary of size " + std::to_string(vocab));
        }
    }
    Tensor out = Tensor::zeros({}, logits.dtype());
    dispatch_dtype(logits.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = logits.raw().values<S>();
        double acc = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = x.data() + r * vocab;
            S mx = xr[0];
            for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, xr[c]);
            double denom = 0.0;
            for (int64_t c = 0; c < vocab; ++c) denom += std::exp(static_cast<double>(xr[c] - mx));
            acc += std::log(denom) + static_cast<double>(mx) -
                   static_cast<double>(xr[targets[static_cast<size_t>(r)]]);
        }
        out.raw().values<S>()[0] = static_cast<S>(acc / static_cast<double>(rows));
    });
    if (wants_grad({&logits})) {
        auto li = logits.impl();
        attach(out, {li}, [li, rows, vocab, targets](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!li->requires_grad) return;
                li->alloc_grad();
                S g = o.grad_values<S>()[0];
                auto x = li->values<S>();
                auto gx = li->grad_values<S>();
                for (int64_t r = 0; r < rows; ++r) {
                    const S* xr = x.data() + r * vocab;
                    S mx = xr[0];
                    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, xr[c]);
                    S denom = 0;
                    for (int64_t c = 0; c < vocab; ++c) denom += std::exp(xr[c] - mx);
                    const S inv_rows = S(1) / static_cast<S>(rows);
                    for (int64_t c = 0; c < vocab; ++c) {
                        S p = std::exp(xr[c] - mx) / denom;
                        S delta = (c == targets[static_cast<size_t>(r)]) ? S(1) : S(0);
                        gx[r * vocab + c] += g * (p - delta) * inv_rows;
                    }
                }
            });
        });
    }
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
    check_same_dtype(x, weight, "rmsnorm");
    require_rank2(x, "rmsnorm");
    if (weight.rank() != 1 || weight.dim(0) != x.dim(1)) {
        throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) +
                             " does not match feature width of " + shape_str(x.shape()));
    }
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    // inv_rms per row is saved for the backward pass.
    std::vector<double> inv_rms(static_cast<size_t>(rows));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto xv = x.raw().values<S>();
        auto wv = weight.raw().values<S>();
        auto yv = out.raw().values<S>();
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = xv.data() + r * cols;
            double ms = 0.0;
            for (int64_t c = 0; c < cols; ++c)
                ms += static_cast<double>(xr[c]) * static_cast<double>(xr[c]);
            ms = ms / static_cast<double>(cols) + eps;
            const double ir = 1.0 / std::sqrt(ms);
            inv_rms[static_cast<size_t>(r)] = ir;
            for (int64_t c = 0; c < cols; ++c)
                yv[r * cols + c] = static_cast<S>(static_cast<double>(xr[c]) * ir *
                                                  static_cast<double>(wv[c]));
        }
    });
    if (wants_grad({&x, &weight})) {
        auto xi = x.impl();
        auto wi = weight.impl();
        attach(out, {xi, wi}, [xi, wi, rows, cols, inv_rms](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                auto xv = xi->values<S>();
                auto wv = wi->values<S>();
                if (wi->requires_grad) {
                    wi->alloc_grad();
                    auto gw = wi->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r) {
                        const double ir = inv_rms[static_cast<size_t>(r)];
                        for (int64_t c = 0; c < cols; ++c)
                            gw[c] += static_cast<S>(static_cast<double>(g[r * cols + c]) *
                                                    static_cast<double>(xv[r * cols + c]) * ir);
                    }
                }
                if (xi->requires_grad) {
                    xi->alloc_grad();
                    auto gx = xi->grad_values<S>();
                    for (int64_t r = 0; r < rows; ++r) {
                        const double ir = inv_rms[static_cast<size_t>(r)];
                        double dot = 0.0;
                        for (int64_t c = 0; c < cols; ++c)
                            dot += static_cast<double>(g[r * cols + c]) *
                                   static_cast<double>(wv[c]) *
                                   static_cast<double>(xv[r * cols + c]);
                        const double k = ir * ir * ir * dot / static_cast<double>(cols);
                        for (int64_t c = 0; c < cols; ++c) {
                            double d = static_cast<double>(g[r * cols + c]) *
                                           static_cast<double>(wv[c]) * ir -
                                       static_cast<double>(xv[r * cols + c]) * k;
                            gx[r * cols + c] += static_cast<S>(d);
                        }
                    }
                }
            });
        });
    }
    return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int64_t batch,
                        int64_t seq, int64_t heads) {
    check_same_dtype(q, k, "causal_attention");
    check_same_dtype(q, v, "causal_attention");
    require_rank2(q, "causal_attention");
    if (q.shape() != k.shape() || q.shape() != v.shape()) {
        throw DimensionError("causal_attention: q/k/v shapes must match");
    }
    const int64_t tokens = q.dim(0), dim = q.dim(1);
    if (tokens != batch * seq) {
        throw DimensionError("causal_attention: token count " + std::to_string(tokens) +
                             " != batch*seq " + std::to_string(batch * seq));
    }
    if (heads < 1 || dim % heads != 0) {
        throw DimensionError("causal_attention: dim " + std::to_string(dim) +
                             " not divisible by heads " + std::to_string(heads));
    }
    const int64_t hd = dim / heads;
    Tensor out = Tensor::zeros(q.shape(), q.dtype());

    // Per (batch, head) attention matrices, saved row-major for backward.
    auto run = [&](auto tag, auto& saved) {
        using S = decltype(tag);
        const S tau = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        auto qv = q.raw().values<S>();
        auto kv = k.raw().values<S>();
        auto vv = v.raw().values<S>();
        auto ov = out.raw().values<S>();
        saved.resize(static_cast<size_t>(batch * heads * seq * seq));
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
                const S* qp = qv.data() + b * seq * dim + h * hd;
                const S* kp = kv.data() + b * seq * dim + h * hd;
                const S* vp = vv.data() + b * seq * dim + h * hd;
                S* op = ov.data() + b * seq * dim + h * hd;
                CStridedMap<S> Q(qp, seq, hd, Eigen::OuterStride<>(dim));
                CStridedMap<S> K(kp, seq, hd, Eigen::OuterStride<>(dim));
                CStridedMap<S> V(vp, seq, hd, Eigen::OuterStride<>(dim));
                StridedMap<S> O(op, seq, hd, Eigen::OuterStride<>(dim));
                MapM<S> A(saved.data() + (b * heads + h) * seq * seq, seq, seq);
                A.noalias() = Q * K.transpose();
                A *= tau;
                // causal mask + row softmax
                for (int64_t i = 0; i < seq; ++i) {
                    S mx = A(i, 0);
                    for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, A(i, j));
                    S denom = 0;
                    for (int64_t j = 0; j <= i; ++j) {
                        A(i, j) = std::exp(A(i, j) - mx);
                        denom += A(i, j);
                    }
                    for (int64_t j = 0; j <= i; ++j) A(i, j) /= denom;
                    for (int64_t j = i + 1; j < seq; ++j) A(i, j) = S(0);
                }
                O.noalias() = A * V;
            }
        }
    };

    std::vector<float> saved_f;
    std::vector<double> saved_d;
    if (q.dtype() == DType::f32) {
        run(float{}, saved_f);
    } else {
        run(double{}, saved_d);
    }

    if (wants_grad({&q, &k, &v})) {
        auto qi = q.impl();
        auto ki = k.impl();
        auto vi = v.impl();
        attach(out, {qi, ki, vi},
               [qi, ki, vi, batch, seq, heads, dim, hd, saved_f = std::move(saved_f),
                saved_d = std::move(saved_d)](TensorImpl& o) {
                   dispatch_dtype(o.dtype, [&](auto tag) {
                       using S = decltype(tag);
                       const S tau = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
                       const S* saved;
                       if constexpr (std::is_same_v<S, float>) {
                           saved = saved_f.data();
                       } else {
                           saved = saved_d.data();
                       }
                       qi->alloc_grad();
                       ki->alloc_grad();
                       vi->alloc_grad();
                       auto g = o.grad_values<S>();
                       for (int64_t b = 0; b < batch; ++b) {
                           for (int64_t h = 0; h < heads; ++h) {
                               const int64_t off = b * seq * dim + h * hd;
                               CStridedMap<S> Q(qi->values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               CStridedMap<S> K(ki->values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               CStridedMap<S> V(vi->values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               CStridedMap<S> Go(g.data() + off, seq, hd,
                                                 Eigen::OuterStride<>(dim));
                               CMapM<S> A(saved + (b * heads + h) * seq * seq, seq, seq);
                               StridedMap<S> dQ(qi->grad_values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               StridedMap<S> dK(ki->grad_values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               StridedMap<S> dV(vi->grad_values<S>().data() + off, seq, hd,
                                                Eigen::OuterStride<>(dim));
                               dV.noalias() += A.transpose() * Go;
                               EMat<S> dA = Go * V.transpose();
                               // softmax backward per row; masked entries have A == 0.
                               EMat<S> dS(seq, seq);
                               for (int64_t i = 0; i < seq; ++i) {
                                   S dot = 0;
                                   for (int64_t j = 0; j <= i; ++j) dot += dA(i, j) * A(i, j);
                                   for (int64_t j = 0; j < seq; ++j)
                                       dS(i, j) = A(i, j) * (dA(i, j) - dot);
                               }
                               dQ.noalias() += tau * (dS * K);
                               dK.noalias() += tau * (dS.transpose() * Q);
                           }
                       }
                   });
               });
    }
    return out;
}

Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down) {
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& rows) {
    require_rank2(a, "gather_rows");
    const int64_t n = a.dim(0), d = a.dim(1);
    for (int64_t r : rows) {
        if (r < 0 || r >= n) {
            throw IndexError("gather_rows: row " + std::to_string(r) + " out of range [0," +
                             std::to_string(n) + ")");
        }
    }
    const int64_t count = static_cast<int64_t>(rows.size());
    Tensor out = Tensor::zeros({count, d}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < count; ++r)
            std::copy_n(x.data() + rows[static_cast<size_t>(r)] * d, d, z.data() + r * d);
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai, rows, count, d](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                auto g = o.grad_values<S>();
                auto ga = ai->grad_values<S>();
                for (int64_t r = 0; r < count; ++r) {
                    S* dst = ga.data() + rows[static_cast<size_t>(r)] * d;
                    const S* src = g.data() + r * d;
                    for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
                }
            });
        });
    }
    return out;
}

Tensor gather_elems(const Tensor& a, const std::vector<int64_t>& flat) {
    const int64_t n = a.numel();
    for (int64_t i : flat) {
        if (i < 0 || i >= n) {
            throw IndexError("gather_elems: index " + std::to_string(i) + " out of range [0," +
                             std::to_string(n) + ")");
        }
    }
    const int64_t count = static_cast<int64_t>(flat.size());
    Tensor out = Tensor::zeros({count}, a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = a.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t i = 0; i < count; ++i) z[i] = x[flat[static_cast<size_t>(i)]];
    });
    if (wants_grad({&a})) {
        auto ai = a.impl();
        attach(out, {ai}, [ai, flat, count](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                if (!ai->requires_grad) return;
                ai->alloc_grad();
                auto g = o.grad_values<S>();
                auto ga = ai->grad_values<S>();
                for (int64_t i = 0; i < count; ++i) ga[flat[static_cast<size_t>(i)]] += g[i];
            });
        });
    }
    return out;
}

Tensor scatter_rows_scaled(const Tensor& rows, const std::vector<int64_t>& row_index,
                           const Tensor& weights, int64_t out_rows) {
    check_same_dtype(rows, weights, "scatter_rows_scaled");
    require_rank2(rows, "scatter_rows_scaled");
    const int64_t count = rows.dim(0), d = rows.dim(1);
    if (static_cast<int64_t>(row_index.size()) != count || weights.numel() != count) {
        throw DimensionError("scatter_rows_scaled: rows/index/weights length mismatch");
    }
    for (int64_t r : row_index) {
        if (r < 0 || r >= out_rows) {
            throw IndexError("scatter_rows_scaled: target row " + std::to_string(r) +
                             " out of range [0," + std::to_string(out_rows) + ")");
        }
    }
    Tensor out = Tensor::zeros({out_rows, d}, rows.dtype());
    dispatch_dtype(rows.dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto x = rows.raw().values<S>();
        auto w = weights.raw().values<S>();
        auto z = out.raw().values<S>();
        for (int64_t r = 0; r < count; ++r) {
            S* dst = z.data() + row_index[static_cast<size_t>(r)] * d;
            const S* src = x.data() + r * d;
            const S wr = w[r];
            for (int64_t c = 0; c < d; ++c) dst[c] += wr * src[c];
        }
    });
    if (wants_grad({&rows, &weights})) {
        auto ri = rows.impl();
        auto wi = weights.impl();
        attach(out, {ri, wi}, [ri, wi, row_index, count, d](TensorImpl& o) {
            dispatch_dtype(o.dtype, [&](auto tag) {
                using S = decltype(tag);
                auto g = o.grad_values<S>();
                auto x = ri->values<S>();
                auto w = wi->values<S>();
                if (ri->requires_grad) {
                    ri->alloc_grad();
                    auto gr = ri->grad_values<S>();
                    for (int64_t r = 0; r < count; ++r) {
                        const S* src = g.data() + row_index[static_cast<size_t>(r)] * d;
                        S* dst = gr.data() + r * d;
                        const S wr = w[r];
                        for (int64_t c = 0; c < d; ++c) dst[c] += wr * src[c];
                    }
                }
                if (wi->requires_grad) {
                    wi->alloc_grad();
                    auto gw = wi->grad_values<S>();
                    for (int64_t r = 0; r < count; ++r) {
                        const S* src = g.data() + row_index[static_cast<size_t>(r)] * d;
                        const S* xr = x.data() + r * d;
                        S acc = 0;
                        for (int64_t c = 0; c < d; ++c) acc += src[c] * xr[c];
                        gw[r] += acc;
                    }
                }
            });
        });
    }
    return out;
}

}  // namespace moelab::ops
