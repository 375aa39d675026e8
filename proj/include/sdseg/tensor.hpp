#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdseg/rng.hpp"

namespace sdseg {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Reverse-mode autodiff node. Tensors are immutable once created; grad is the
// only buffer mutated after construction (accumulated during backward).
template <class R>
struct Node {
    Shape shape;
    std::vector<R> value;
    std::vector<R> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<R>>> parents;
    std::function<void(Node<R>&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
};

bool grad_enabled();

// Disables graph construction in scope (inference / frozen submodules).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class R>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, R v);
    static Tensor from_data(const Shape& shape, std::vector<R> data);
    static Tensor scalar(R v) { return from_data({1}, {v}); }
    // i.i.d. standard normal draws, row-major fill order
    static Tensor randn(const Shape& shape, Rng& rng);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }

    const std::vector<R>& data() const { return n_->value; }
    std::vector<R>& mutable_data() { return n_->value; }
    R item() const;

    Tensor& set_requires_grad(bool b = true);
    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<R>& grad() const { return n_->grad; }
    void zero_grad() { n_->grad.clear(); }

    // value copy with no graph attachment
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    // reverse-mode sweep from a scalar; visits each node exactly once
    void backward() const;

    std::shared_ptr<Node<R>>& node() { return n_; }
    const std::shared_ptr<Node<R>>& node() const { return n_; }

private:
    std::shared_ptr<Node<R>> n_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// ---- elementwise ----
template <class R> Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b);
template <class R> Tensor<R> add(const Tensor<R>& a, R b);
template <class R> Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b);
template <class R> Tensor<R> sub(const Tensor<R>& a, R b);
template <class R> Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b);
template <class R> Tensor<R> scale(const Tensor<R>& a, R s);
template <class R> Tensor<R> silu(const Tensor<R>& a);
template <class R> Tensor<R> exp(const Tensor<R>& a);
template <class R> Tensor<R> log(const Tensor<R>& a);
template <class R> Tensor<R> clamp(const Tensor<R>& a, R lo, R hi);
template <class R> Tensor<R> pow2(const Tensor<R>& a);

// ---- reductions ----
template <class R> Tensor<R> sum_all(const Tensor<R>& a);
template <class R> Tensor<R> mean_all(const Tensor<R>& a);
// mean(|a - b|), scalar
template <class R> Tensor<R> l1_distance(const Tensor<R>& a, const Tensor<R>& b);

// ---- structural ----
template <class R> Tensor<R> concat_channels(const std::vector<Tensor<R>>& parts);
template <class R> std::vector<Tensor<R>> chunk_channels(const Tensor<R>& x, int chunks);
template <class R> Tensor<R> nearest_upsample2x(const Tensor<R>& x);

// per-sample affine mix: out[b] = a[b]*x[b] + c[b]*y[b]; a, c are constants
template <class R>
Tensor<R> batch_affine(const Tensor<R>& x, const Tensor<R>& y,
                       const std::vector<R>& a, const std::vector<R>& c);

template <class R> bool all_finite(const Tensor<R>& t);

template <class R>
Tensor<R> operator+(const Tensor<R>& a, const Tensor<R>& b) { return add(a, b); }
template <class R>
Tensor<R> operator-(const Tensor<R>& a, const Tensor<R>& b) { return sub(a, b); }
template <class R>
Tensor<R> operator*(const Tensor<R>& a, const Tensor<R>& b) { return mul(a, b); }

}  // namespace sdseg
