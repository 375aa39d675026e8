#include "sdseg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <unordered_set>

namespace sdseg {

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape_valid(const Shape& s, const char* op) {
    if (s.empty()) throw std::invalid_argument(std::string(op) + ": empty shape");
    for (int d : s)
        if (d <= 0) throw std::invalid_argument(std::string(op) + ": nonpositive dim in " + shape_str(s));
}

template <class R>
void check_same_shape(const char* op, const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

template <class R>
std::shared_ptr<Node<R>> alloc_node(const Shape& shape) {
    auto n = std::make_shared<Node<R>>();
    n->shape = shape;
    n->value.resize(static_cast<size_t>(shape_numel(shape)));
    return n;
}

// Accumulate g into p->grad if p participates in the graph.
template <class R>
void accum(const std::shared_ptr<Node<R>>& p, const std::vector<R>& g) {
    if (!p->requires_grad) return;
    if (p->grad.empty()) p->grad.assign(p->value.size(), R(0));
    const size_t n = g.size();
    for (size_t i = 0; i < n; ++i) p->grad[i] += g[i];
}

template <class R>
std::vector<R>& ensure_grad(const std::shared_ptr<Node<R>>& p) {
    if (p->grad.empty()) p->grad.assign(p->value.size(), R(0));
    return p->grad;
}

// Attach graph edges when grad mode is on and any parent participates.
template <class R>
void attach(Tensor<R>& out, std::vector<std::shared_ptr<Node<R>>> parents,
            std::function<void(Node<R>&)> bw) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (auto& p : parents)
        if (p->requires_grad) { any = true; break; }
    if (!any) return;
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backward_fn = std::move(bw);
}

template <class R>
Tensor<R> wrap(std::shared_ptr<Node<R>> n) {
    Tensor<R> t;
    t.node() = std::move(n);
    return t;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <class R>
Tensor<R> Tensor<R>::zeros(const Shape& shape) {
    check_shape_valid(shape, "zeros");
    return wrap(alloc_node<R>(shape));
}

template <class R>
Tensor<R> Tensor<R>::full(const Shape& shape, R v) {
    check_shape_valid(shape, "full");
    auto n = alloc_node<R>(shape);
    std::fill(n->value.begin(), n->value.end(), v);
    return wrap(std::move(n));
}

template <class R>
Tensor<R> Tensor<R>::from_data(const Shape& shape, std::vector<R> data) {
    check_shape_valid(shape, "from_data");
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
        throw std::invalid_argument("from_data: size mismatch for " + shape_str(shape));
    auto n = std::make_shared<Node<R>>();
    n->shape = shape;
    n->value = std::move(data);
    return wrap(std::move(n));
}

template <class R>
Tensor<R> Tensor<R>::randn(const Shape& shape, Rng& rng) {
    check_shape_valid(shape, "randn");
    auto n = alloc_node<R>(shape);
    for (auto& v : n->value) v = static_cast<R>(rng.next_normal());
    return wrap(std::move(n));
}

template <class R>
R Tensor<R>::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->value[0];
}

template <class R>
Tensor<R>& Tensor<R>::set_requires_grad(bool b) {
    if (b && !n_->is_leaf())
        throw std::invalid_argument("set_requires_grad: only valid on leaf tensors");
    n_->requires_grad = b;
    return *this;
}

template <class R>
Tensor<R> Tensor<R>::detach() const {
    auto n = std::make_shared<Node<R>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return wrap(std::move(n));
}

template <class R>
void Tensor<R>::backward() const {
    if (numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!n_->requires_grad) throw std::invalid_argument("backward: tensor does not require grad");

    // postorder DFS: parents land before children, so the reverse walk below
    // processes every node after all of its consumers
    std::vector<Node<R>*> order;
    std::unordered_set<Node<R>*> seen;
    std::vector<std::pair<Node<R>*, size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<R>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    n_->grad.assign(1, R(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<R>* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

// ---- elementwise ----

namespace {

template <class R, class F, class B>
Tensor<R> unary_op(const char* name, const Tensor<R>& a, F fwd, B bwd) {
    (void)name;
    auto n = alloc_node<R>(a.shape());
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = fwd(av[i]);
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node()}, [bwd](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        const auto& pv = p->value;
        const auto& ov = nd.value;
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += bwd(pv[i], ov[i]) * nd.grad[i];
    });
    return out;
}

}  // namespace

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape("add", a, b);
    auto n = alloc_node<R>(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node(), b.node()}, [](Node<R>& nd) {
        accum(nd.parents[0], nd.grad);
        accum(nd.parents[1], nd.grad);
    });
    return out;
}

template <class R>
Tensor<R> add(const Tensor<R>& a, R b) {
    return unary_op("add_scalar", a, [b](R x) { return x + b; }, [](R, R) { return R(1); });
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape("sub", a, b);
    auto n = alloc_node<R>(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] - bv[i];
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node(), b.node()}, [](Node<R>& nd) {
        accum(nd.parents[0], nd.grad);
        const auto& p = nd.parents[1];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        for (size_t i = 0; i < pg.size(); ++i) pg[i] -= nd.grad[i];
    });
    return out;
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, R b) {
    return add(a, -b);
}

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape("mul", a, b);
    auto n = alloc_node<R>(a.shape());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node(), b.node()}, [](Node<R>& nd) {
        const auto& pa = nd.parents[0];
        const auto& pb = nd.parents[1];
        if (pa->requires_grad) {
            auto& ga = ensure_grad(pa);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += pb->value[i] * nd.grad[i];
        }
        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            for (size_t i = 0; i < gb.size(); ++i) gb[i] += pa->value[i] * nd.grad[i];
        }
    });
    return out;
}

template <class R>
Tensor<R> scale(const Tensor<R>& a, R s) {
    return unary_op("scale", a, [s](R x) { return x * s; }, [s](R, R) { return s; });
}

template <class R>
Tensor<R> silu(const Tensor<R>& a) {
    auto n = alloc_node<R>(a.shape());
    const R* av = a.data().data();
    R* ov = n->value.data();
    const std::int64_t cnt = a.numel();
#pragma omp simd
    for (std::int64_t i = 0; i < cnt; ++i) ov[i] = av[i] / (R(1) + std::exp(-av[i]));
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node()}, [cnt](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        R* pg = ensure_grad(p).data();
        const R* pv = p->value.data();
        const R* g = nd.grad.data();
#pragma omp simd
        for (std::int64_t i = 0; i < cnt; ++i) {
            const R sg = R(1) / (R(1) + std::exp(-pv[i]));
            pg[i] += sg * (R(1) + pv[i] * (R(1) - sg)) * g[i];
        }
    });
    return out;
}

template <class R>
Tensor<R> exp(const Tensor<R>& a) {
    auto n = alloc_node<R>(a.shape());
    const R* av = a.data().data();
    R* ov = n->value.data();
    const std::int64_t cnt = a.numel();
#pragma omp simd
    for (std::int64_t i = 0; i < cnt; ++i) ov[i] = std::exp(av[i]);
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node()}, [](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        for (size_t i = 0; i < pg.size(); ++i) pg[i] += nd.value[i] * nd.grad[i];
    });
    return out;
}

template <class R>
Tensor<R> log(const Tensor<R>& a) {
    for (R v : a.data())
        if (!(v > R(0))) throw std::domain_error("log: nonpositive input");
    return unary_op("log", a, [](R x) { return std::log(x); }, [](R x, R) { return R(1) / x; });
}

template <class R>
Tensor<R> clamp(const Tensor<R>& a, R lo, R hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    return unary_op(
        "clamp", a, [lo, hi](R x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](R x, R) { return (x < lo || x > hi) ? R(0) : R(1); });
}

template <class R>
Tensor<R> pow2(const Tensor<R>& a) {
    return unary_op("pow2", a, [](R x) { return x * x; }, [](R x, R) { return R(2) * x; });
}

// ---- reductions ----

template <class R>
Tensor<R> sum_all(const Tensor<R>& a) {
    auto n = alloc_node<R>(Shape{1});
    R s = 0;
    for (R v : a.data()) s += v;
    n->value[0] = s;
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node()}, [](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        const R g = nd.grad[0];
        for (auto& v : pg) v += g;
    });
    return out;
}

template <class R>
Tensor<R> mean_all(const Tensor<R>& a) {
    auto n = alloc_node<R>(Shape{1});
    R s = 0;
    for (R v : a.data()) s += v;
    const R inv = R(1) / static_cast<R>(a.numel());
    n->value[0] = s * inv;
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node()}, [inv](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        const R g = nd.grad[0] * inv;
        for (auto& v : pg) v += g;
    });
    return out;
}

template <class R>
Tensor<R> l1_distance(const Tensor<R>& a, const Tensor<R>& b) {
    check_same_shape("l1_distance", a, b);
    auto n = alloc_node<R>(Shape{1});
    const auto& av = a.data();
    const auto& bv = b.data();
    R s = 0;
    for (size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    const R inv = R(1) / static_cast<R>(a.numel());
    n->value[0] = s * inv;
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {a.node(), b.node()}, [inv](Node<R>& nd) {
        const auto& pa = nd.parents[0];
        const auto& pb = nd.parents[1];
        const R g = nd.grad[0] * inv;
        const auto& av = pa->value;
        const auto& bv = pb->value;
        if (pa->requires_grad) {
            auto& ga = ensure_grad(pa);
            for (size_t i = 0; i < ga.size(); ++i) {
                const R d = av[i] - bv[i];
                ga[i] += g * (d > R(0) ? R(1) : (d < R(0) ? R(-1) : R(0)));
            }
        }
        if (pb->requires_grad) {
            auto& gb = ensure_grad(pb);
            for (size_t i = 0; i < gb.size(); ++i) {
                const R d = av[i] - bv[i];
                gb[i] -= g * (d > R(0) ? R(1) : (d < R(0) ? R(-1) : R(0)));
            }
        }
    });
    return out;
}

// ---- structural ----

template <class R>
Tensor<R> concat_channels(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const Shape& s0 = parts[0].shape();
    if (s0.size() != 4) throw std::invalid_argument("concat_channels: expected [B,C,H,W]");
    int ctotal = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw std::invalid_argument("concat_channels: non-channel dims mismatch " +
                                        shape_str(s0) + " vs " + shape_str(s));
        ctotal += s[1];
    }
    const int B = s0[0], H = s0[2], W = s0[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    auto n = alloc_node<R>(Shape{B, ctotal, H, W});
    std::vector<int> coff(parts.size());
    {
        int off = 0;
        for (size_t p = 0; p < parts.size(); ++p) {
            coff[p] = off;
            off += parts[p].shape()[1];
        }
    }
    for (int b = 0; b < B; ++b) {
        for (size_t p = 0; p < parts.size(); ++p) {
            const int cp = parts[p].shape()[1];
            const R* src = parts[p].data().data() + static_cast<std::int64_t>(b) * cp * hw;
            R* dst = n->value.data() + (static_cast<std::int64_t>(b) * ctotal + coff[p]) * hw;
            std::memcpy(dst, src, sizeof(R) * static_cast<size_t>(cp * hw));
        }
    }
    Tensor<R> out = wrap(std::move(n));
    std::vector<std::shared_ptr<Node<R>>> parents;
    for (const auto& p : parts) parents.push_back(p.node());
    attach<R>(out, std::move(parents), [coff, ctotal, hw, B](Node<R>& nd) {
        for (size_t p = 0; p < nd.parents.size(); ++p) {
            const auto& par = nd.parents[p];
            if (!par->requires_grad) continue;
            auto& pg = ensure_grad(par);
            const int cp = par->shape[1];
            for (int b = 0; b < B; ++b) {
                const R* src = nd.grad.data() + (static_cast<std::int64_t>(b) * ctotal + coff[p]) * hw;
                R* dst = pg.data() + static_cast<std::int64_t>(b) * cp * hw;
                for (std::int64_t i = 0; i < cp * hw; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <class R>
std::vector<Tensor<R>> chunk_channels(const Tensor<R>& x, int chunks) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("chunk_channels: expected [B,C,H,W]");
    if (chunks <= 0 || s[1] % chunks != 0)
        throw std::invalid_argument("chunk_channels: channels " + std::to_string(s[1]) +
                                    " not divisible into " + std::to_string(chunks));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    const int cp = C / chunks;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<Tensor<R>> outs;
    for (int k = 0; k < chunks; ++k) {
        auto n = alloc_node<R>(Shape{B, cp, H, W});
        for (int b = 0; b < B; ++b) {
            const R* src = x.data().data() + (static_cast<std::int64_t>(b) * C + k * cp) * hw;
            R* dst = n->value.data() + static_cast<std::int64_t>(b) * cp * hw;
            std::memcpy(dst, src, sizeof(R) * static_cast<size_t>(cp * hw));
        }
        Tensor<R> out = wrap(std::move(n));
        const int c0 = k * cp;
        attach<R>(out, {x.node()}, [c0, cp, C, hw, B](Node<R>& nd) {
            const auto& p = nd.parents[0];
            if (!p->requires_grad) return;
            auto& pg = ensure_grad(p);
            for (int b = 0; b < B; ++b) {
                const R* src = nd.grad.data() + static_cast<std::int64_t>(b) * cp * hw;
                R* dst = pg.data() + (static_cast<std::int64_t>(b) * C + c0) * hw;
                for (std::int64_t i = 0; i < cp * hw; ++i) dst[i] += src[i];
            }
        });
        outs.push_back(std::move(out));
    }
    return outs;
}

template <class R>
Tensor<R> nearest_upsample2x(const Tensor<R>& x) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw std::invalid_argument("nearest_upsample2x: expected [B,C,H,W]");
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    auto n = alloc_node<R>(Shape{B, C, 2 * H, 2 * W});
    const R* src = x.data().data();
    R* dst = n->value.data();
    for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
        const R* sp = src + bc * H * W;
        R* dp = dst + bc * 4 * H * W;
        for (int h = 0; h < H; ++h) {
            R* row0 = dp + static_cast<std::int64_t>(2 * h) * 2 * W;
            R* row1 = row0 + 2 * W;
            for (int w = 0; w < W; ++w) {
                const R v = sp[h * W + w];
                row0[2 * w] = v;
                row0[2 * w + 1] = v;
                row1[2 * w] = v;
                row1[2 * w + 1] = v;
            }
        }
    }
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {x.node()}, [B, C, H, W](Node<R>& nd) {
        const auto& p = nd.parents[0];
        if (!p->requires_grad) return;
        auto& pg = ensure_grad(p);
        for (std::int64_t bc = 0; bc < static_cast<std::int64_t>(B) * C; ++bc) {
            const R* gp = nd.grad.data() + bc * 4 * H * W;
            R* dp = pg.data() + bc * H * W;
            for (int h = 0; h < H; ++h) {
                const R* row0 = gp + static_cast<std::int64_t>(2 * h) * 2 * W;
                const R* row1 = row0 + 2 * W;
                for (int w = 0; w < W; ++w)
                    dp[h * W + w] += row0[2 * w] + row0[2 * w + 1] + row1[2 * w] + row1[2 * w + 1];
            }
        }
    });
    return out;
}

template <class R>
Tensor<R> batch_affine(const Tensor<R>& x, const Tensor<R>& y,
                       const std::vector<R>& a, const std::vector<R>& c) {
    check_same_shape("batch_affine", x, y);
    const int B = x.shape()[0];
    if (a.size() != static_cast<size_t>(B) || c.size() != static_cast<size_t>(B))
        throw std::invalid_argument("batch_affine: coefficient count != batch");
    const std::int64_t per = x.numel() / B;
    auto n = alloc_node<R>(x.shape());
    const R* xv = x.data().data();
    const R* yv = y.data().data();
    for (int b = 0; b < B; ++b) {
        const R ab = a[b], cb = c[b];
        R* o = n->value.data() + b * per;
        const R* xb = xv + b * per;
        const R* yb = yv + b * per;
        for (std::int64_t i = 0; i < per; ++i) o[i] = ab * xb[i] + cb * yb[i];
    }
    Tensor<R> out = wrap(std::move(n));
    attach<R>(out, {x.node(), y.node()}, [a, c, per, B](Node<R>& nd) {
        for (int pi = 0; pi < 2; ++pi) {
            const auto& p = nd.parents[pi];
            if (!p->requires_grad) continue;
            auto& pg = ensure_grad(p);
            const std::vector<R>& coef = pi == 0 ? a : c;
            for (int b = 0; b < B; ++b) {
                const R cb = coef[b];
                R* dst = pg.data() + b * per;
                const R* src = nd.grad.data() + b * per;
                for (std::int64_t i = 0; i < per; ++i) dst[i] += cb * src[i];
            }
        }
    });
    return out;
}

template <class R>
bool all_finite(const Tensor<R>& t) {
    for (R v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- explicit instantiation ----

#define SDSEG_INSTANTIATE_TENSOR(R)                                                            \
    template class Tensor<R>;                                                                  \
    template Tensor<R> add<R>(const Tensor<R>&, const Tensor<R>&);                             \
    template Tensor<R> add<R>(const Tensor<R>&, R);                                            \
    template Tensor<R> sub<R>(const Tensor<R>&, const Tensor<R>&);                             \
    template Tensor<R> sub<R>(const Tensor<R>&, R);                                            \
    template Tensor<R> mul<R>(const Tensor<R>&, const Tensor<R>&);                             \
    template Tensor<R> scale<R>(const Tensor<R>&, R);                                          \
    template Tensor<R> silu<R>(const Tensor<R>&);                                              \
    template Tensor<R> exp<R>(const Tensor<R>&);                                               \
    template Tensor<R> log<R>(const Tensor<R>&);                                               \
    template Tensor<R> clamp<R>(const Tensor<R>&, R, R);                                       \
    template Tensor<R> pow2<R>(const Tensor<R>&);                                              \
    template Tensor<R> sum_all<R>(const Tensor<R>&);                                           \
    template Tensor<R> mean_all<R>(const Tensor<R>&);                                          \
    template Tensor<R> l1_distance<R>(const Tensor<R>&, const Tensor<R>&);                     \
    template Tensor<R> concat_channels<R>(const std::vector<Tensor<R>>&);                      \
    template std::vector<Tensor<R>> chunk_channels<R>(const Tensor<R>&, int);                  \
    template Tensor<R> nearest_upsample2x<R>(const Tensor<R>&);                                \
    template Tensor<R> batch_affine<R>(const Tensor<R>&, const Tensor<R>&,                     \
                                       const std::vector<R>&, const std::vector<R>&);          \
    template bool all_finite<R>(const Tensor<R>&);

SDSEG_INSTANTIATE_TENSOR(float)
SDSEG_INSTANTIATE_TENSOR(double)

}  // namespace sdseg
