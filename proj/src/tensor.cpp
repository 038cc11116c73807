#include "moelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace moelab {

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void TensorImpl::alloc_grad() {
    if (grad_allocated) return;
    detail::dispatch_dtype(dtype, [&](auto tag) {
        using S = decltype(tag);
        grad = std::vector<S>(static_cast<size_t>(numel()), S(0));
    });
    grad_allocated = true;
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dt, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dt;
    impl->requires_grad = requires_grad;
    detail::dispatch_dtype(dt, [&](auto tag) {
        using S = decltype(tag);
        impl->data = std::vector<S>(static_cast<size_t>(impl->numel()), S(0));
    });
    return impl;
}

thread_local bool g_grad_enabled = true;

}  // namespace

Tensor Tensor::zeros(Shape shape, DType dt, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), dt, requires_grad));
}

Tensor Tensor::full(Shape shape, double value, DType dt, bool requires_grad) {
    Tensor t(make_impl(std::move(shape), dt, requires_grad));
    detail::dispatch_dtype(dt, [&](auto tag) {
        using S = decltype(tag);
        auto v = t.raw().values<S>();
        std::fill(v.begin(), v.end(), static_cast<S>(value));
    });
    return t;
}

Tensor Tensor::from_doubles(Shape shape, const std::vector<double>& values, DType dt,
                            bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
        throw DimensionError("from_doubles: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    Tensor t(make_impl(std::move(shape), dt, requires_grad));
    detail::dispatch_dtype(dt, [&](auto tag) {
        using S = decltype(tag);
        auto v = t.raw().values<S>();
        for (size_t i = 0; i < values.size(); ++i) v[i] = static_cast<S>(values[i]);
    });
    return t;
}

Tensor Tensor::scalar(double value, DType dt, bool requires_grad) {
    return from_doubles({}, {value}, dt, requires_grad);
}

double Tensor::at(int64_t flat) const {
    if (flat < 0 || flat >= numel()) {
        throw IndexError("tensor index " + std::to_string(flat) + " out of range for " +
                         shape_str(shape()));
    }
    return detail::dispatch_dtype(dtype(), [&](auto tag) -> double {
        using S = decltype(tag);
        return static_cast<double>(impl_->values<S>()[static_cast<size_t>(flat)]);
    });
}

void Tensor::set(int64_t flat, double v) {
    if (flat < 0 || flat >= numel()) {
        throw IndexError("tensor index " + std::to_string(flat) + " out of range for " +
                         shape_str(shape()));
    }
    detail::dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        impl_->values<S>()[static_cast<size_t>(flat)] = static_cast<S>(v);
    });
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    detail::dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto v = impl_->values<S>();
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]);
    });
    return out;
}

std::vector<double> Tensor::grad_to_doubles() const {
    if (!impl_->grad_allocated) {
        throw ParameterError("tensor has no gradient (backward not run or not on loss path)");
    }
    std::vector<double> out(static_cast<size_t>(numel()));
    detail::dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto v = impl_->grad_values<S>();
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]);
    });
    return out;
}

void Tensor::zero_grad() {
    if (!impl_->grad_allocated) return;
    detail::dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        auto g = impl_->grad_values<S>();
        std::fill(g.begin(), g.end(), S(0));
    });
}

bool Tensor::all_finite() const {
    bool ok = true;
    detail::dispatch_dtype(dtype(), [&](auto tag) {
        using S = decltype(tag);
        for (S x : impl_->values<S>()) {
            if (!std::isfinite(static_cast<double>(x))) ok = false;
        }
        if (impl_->grad_allocated) {
            for (S x : impl_->grad_values<S>()) {
                if (!std::isfinite(static_cast<double>(x))) ok = false;
            }
        }
    });
    return ok;
}

double Tensor::item() const {
    if (numel() != 1) {
        throw DimensionError("item() requires a single-element tensor, got " + shape_str(shape()));
    }
    return at(0);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw ParameterError(std::string(op) + ": mixed precision operands (" +
                             dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) + ")");
    }
}

}  // namespace detail

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw ParameterError("backward() requires a defined scalar loss");
    }
    if (!loss.requires_grad()) {
        throw ParameterError("backward() called on a tensor with no gradient path");
    }

    // Iterative post-order DFS over the producing nodes; the reversed order is
    // a topological order from the loss, so every gradient is complete before
    // its producer consumes it.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* impl;
        size_t next_input;
    };
    std::vector<Frame> stack;
    TensorImpl* root = loss.impl().get();
    visited.insert(root);
    stack.push_back({root, 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.impl->node && f.next_input < f.impl->node->inputs.size()) {
            TensorImpl* child = f.impl->node->inputs[f.next_input++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.impl);
            stack.pop_back();
        }
    }

    for (TensorImpl* impl : order) impl->alloc_grad();
    detail::dispatch_dtype(loss.dtype(), [&](auto tag) {
        using S = decltype(tag);
        root->grad_values<S>()[0] = S(1);
    });

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (impl->node && impl->node->backward) impl->node->backward(*impl);
    }
}

}  // namespace moelab
