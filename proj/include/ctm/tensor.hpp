#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctm {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void throw_shape(const std::string& op, const std::string& msg) {
    throw ShapeError(op + ": " + msg);
}

template <class T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized iff requires_grad
    bool requires_grad = false;
};

// Dense N-d array with value semantics over a shared node. The grad buffer
// exists only while a tensor participates in differentiation.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : impl_(std::make_shared<TensorImpl<T>>()) {
        impl_->shape = std::move(shape);
        validate_shape();
        impl_->data.assign(static_cast<size_t>(numel_of(impl_->shape)), T(0));
    }

    Tensor(Shape shape, T fill) : Tensor(std::move(shape)) {
        for (auto& v : impl_->data) v = fill;
    }

    static Tensor from_data(Shape shape, std::vector<T> values) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.validate_shape();
        if (static_cast<std::int64_t>(values.size()) != numel_of(t.impl_->shape))
            throw_shape("from_data", "got " + std::to_string(values.size()) +
                                         " values for shape " + shape_str(t.impl_->shape));
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<T> data() { return {impl_->data.data(), impl_->data.size()}; }
    std::span<const T> data() const { return {impl_->data.data(), impl_->data.size()}; }

    std::span<T> grad() { return {impl_->grad.data(), impl_->grad.size()}; }
    std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }

    Tensor& set_requires_grad(bool rg) {
        impl_->requires_grad = rg;
        if (rg)
            impl_->grad.assign(impl_->data.size(), T(0));
        else
            impl_->grad.clear();
        return *this;
    }

    void zero_grad() {
        for (auto& g : impl_->grad) g = T(0);
    }

    void fill(T v) {
        for (auto& x : impl_->data) x = v;
    }

    T item() const {
        if (numel() != 1) throw_shape("item", "tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    T at(std::initializer_list<std::int64_t> idx) const {
        return impl_->data[static_cast<size_t>(flat_index(idx))];
    }

    T& at_mut(std::initializer_list<std::int64_t> idx) {
        return impl_->data[static_cast<size_t>(flat_index(idx))];
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(impl_->shape);
        auto d = out.data();
        for (size_t i = 0; i < impl_->data.size(); ++i) d[i] = static_cast<U>(impl_->data[i]);
        return out;
    }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>(*impl_);
        return t;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    void validate_shape() const {
        for (auto e : impl_->shape)
            if (e <= 0) throw_shape("tensor", "non-positive extent in " + shape_str(impl_->shape));
    }

    std::int64_t flat_index(std::initializer_list<std::int64_t> idx) const {
        if (static_cast<int>(idx.size()) != rank())
            throw_shape("at", "index rank mismatch");
        std::int64_t flat = 0;
        int a = 0;
        for (auto i : idx) {
            flat = flat * impl_->shape[static_cast<size_t>(a)] + i;
            ++a;
        }
        return flat;
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

// Ordered record of executed primitives; replaying in reverse propagates
// adjoints. One tape per unit of work, single-threaded by contract.
template <class T>
class Tape {
public:
    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    size_t size() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every recorded op exactly once.
    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss does not require grad");
        if (consumed_)
            throw std::logic_error("backward: tape already replayed");
        consumed_ = true;
        loss.grad()[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    void clear() {
        ops_.clear();
        consumed_ = false;
    }

private:
    std::vector<std::function<void()>> ops_;
    bool consumed_ = false;
};

namespace detail {
template <class T>
inline thread_local Tape<T>* g_active_tape = nullptr;
}

template <class T>
Tape<T>* active_tape() {
    return detail::g_active_tape<T>;
}

// RAII binding of a tape to the current thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& t) : prev_(detail::g_active_tape<T>) {
        detail::g_active_tape<T> = &t;
    }
    ~TapeScope() { detail::g_active_tape<T> = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

template <class T>
inline bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// Forward ops on finite inputs must produce finite outputs; checked in
// debug builds only.
template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
    if (!all_finite(t))
        throw std::runtime_error(std::string(op) + ": non-finite value in output");
#else
    (void)t;
    (void)op;
#endif
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ctm
