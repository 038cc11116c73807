#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

// Numeric precision is a construction-time property of each tensor. All tensors
// participating in one graph must share it: f64 for gradient checks and
// oracles, f32 for faster training runs.
enum class DType { f32, f64 };

inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// One recorded operation: the inputs it consumed and a closure that pushes the
// output's gradient back into them. Owned by the output tensor, so the graph
// reachable from a loss is exactly the tape to replay.
struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f64;
    std::variant<std::vector<float>, std::vector<double>> data;
    bool requires_grad = false;
    // Same dtype and length as data; allocated lazily by backward().
    std::variant<std::vector<float>, std::vector<double>> grad;
    bool grad_allocated = false;
    std::unique_ptr<Node> node;

    int64_t numel() const { return shape_numel(shape); }

    template <typename S>
    std::span<S> values() {
        return std::span<S>(std::get<std::vector<S>>(data));
    }
    template <typename S>
    std::span<const S> values() const {
        return std::span<const S>(std::get<std::vector<S>>(data));
    }
    template <typename S>
    std::span<S> grad_values() {
        return std::span<S>(std::get<std::vector<S>>(grad));
    }
    template <typename S>
    std::span<const S> grad_values() const {
        return std::span<const S>(std::get<std::vector<S>>(grad));
    }

    void alloc_grad();
};

// Value-semantics handle over a shared heap tensor, mirroring how the graph
// nodes reference each other.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dt = DType::f64, bool requires_grad = false);
    static Tensor full(Shape shape, double value, DType dt = DType::f64, bool requires_grad = false);
    static Tensor from_doubles(Shape shape, const std::vector<double>& values,
                               DType dt = DType::f64, bool requires_grad = false);
    static Tensor scalar(double value, DType dt = DType::f64, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    size_t rank() const { return impl_->shape.size(); }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    int64_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }
    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Converting element access (row-major flat index). Convenient for tests
    // and small tensors; kernels use typed spans on the impl.
    double at(int64_t flat) const;
    void set(int64_t flat, double v);

    std::vector<double> to_doubles() const;
    std::vector<double> grad_to_doubles() const;
    bool has_grad() const { return impl_->grad_allocated; }
    void zero_grad();

    // True if every value (and every gradient value, when present) is finite.
    bool all_finite() const;

    double item() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    TensorImpl& raw() const { return *impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss: gather the recorded operations
// reachable from it, then run their backward closures in reverse topological
// order, each exactly once.
void backward(const Tensor& loss);

// Graph recording switch (thread-local). Inside a NoGradGuard ops compute
// values only, which is what evaluation and metrics want.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

namespace detail {

void set_grad_enabled(bool enabled);

// Calls fn with a value of the scalar type matching dt.
template <typename Fn>
decltype(auto) dispatch_dtype(DType dt, Fn&& fn) {
    if (dt == DType::f64) {
        return fn(double{});
    }
    return fn(float{});
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

// Accumulates `contribution` (same dtype, same numel) into t's gradient.
template <typename S>
void accumulate_grad(TensorImpl& t, std::span<const S> contribution) {
    if (!t.requires_grad) return;
    t.alloc_grad();
    auto g = t.grad_values<S>();
    for (size_t i = 0; i < g.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

}  // namespace moelab
