#pragma once

#include "csd/errors.hpp"
#include "csd/rational.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <unordered_map>
#include <vector>

namespace csd {

using Vec = std::vector<double>;
using MultiIndex = std::vector<int>;

namespace detail {
inline uint64_t pack_exps(const int* e, int n) {
    uint64_t k = 0;
    for (int v = 0; v < n; ++v) k = (k << 8) | static_cast<uint64_t>(e[v] & 0xff);
    return k;
}
} // namespace detail

/// Dense table of all multi-indices with |alpha| <= order in `nvars` variables,
/// graded-lexicographic, with precomputed product and shift maps. Tables are
/// built once per (nvars, order) pair and shared by every jet that uses them.
class MultiIndexTable {
public:
    int nvars = 0;
    int order = 0;
    int count = 0;
    std::vector<int> exps;       // count * nvars
    std::vector<int> deg;        // |alpha|
    std::vector<int> parent;     // index of alpha - e_{parent_var}; -1 for alpha = 0
    std::vector<int> parent_var;
    std::vector<double> factorial; // alpha!
    std::vector<int> down;       // [i*nvars+v] index of alpha - e_v, or -1
    // prod[i] holds (j, k) for every j with deg_i + deg_j <= order, alpha_k = alpha_i + alpha_j
    std::vector<std::vector<std::pair<int, int>>> prod;

    const int* exp_at(int i) const { return exps.data() + static_cast<size_t>(i) * nvars; }

    int index_of(const int* e) const {
        auto it = lookup_.find(detail::pack_exps(e, nvars));
        return it == lookup_.end() ? -1 : it->second;
    }
    int index_of(const MultiIndex& a) const {
        assert(static_cast<int>(a.size()) == nvars);
        return index_of(a.data());
    }

    static const MultiIndexTable* get(int nvars, int order);

private:
    std::unordered_map<uint64_t, int> lookup_;

    void build(int n, int k);
};

inline void MultiIndexTable::build(int n, int k) {
    nvars = n;
    order = k;
    // enumerate graded-lex: by total degree, lexicographic within a grade
    std::vector<int> cur(n, 0);
    auto emit = [&](const std::vector<int>& a) {
        int idx = count++;
        exps.insert(exps.end(), a.begin(), a.end());
        int d = 0;
        double f = 1.0;
        for (int v = 0; v < n; ++v) {
            d += a[v];
            for (int t = 2; t <= a[v]; ++t) f *= t;
        }
        deg.push_back(d);
        factorial.push_back(f);
        lookup_.emplace(detail::pack_exps(a.data(), n), idx);
    };
    std::function<void(int, int, std::vector<int>&)> rec = [&](int v, int rem, std::vector<int>& a) {
        if (v == n - 1) {
            a[v] = rem;
            emit(a);
            return;
        }
        for (int t = rem; t >= 0; --t) { // lex order: larger leading exponent first
            a[v] = t;
            rec(v + 1, rem - t, a);
        }
        a[v] = 0;
    };
    for (int d = 0; d <= k; ++d) rec(0, d, cur);

    parent.assign(count, -1);
    parent_var.assign(count, -1);
    down.assign(static_cast<size_t>(count) * n, -1);
    std::vector<int> tmp(n);
    for (int i = 0; i < count; ++i) {
        const int* e = exp_at(i);
        for (int v = 0; v < n; ++v) {
            if (e[v] == 0) continue;
            std::copy(e, e + n, tmp.begin());
            tmp[v] -= 1;
            int j = index_of(tmp.data());
            down[static_cast<size_t>(i) * n + v] = j;
            if (parent[i] < 0) {
                parent[i] = j;
                parent_var[i] = v;
            }
        }
    }

    prod.resize(count);
    for (int i = 0; i < count; ++i) {
        for (int j = 0; j < count; ++j) {
            if (deg[i] + deg[j] > k) continue;
            for (int v = 0; v < n; ++v) tmp[v] = exp_at(i)[v] + exp_at(j)[v];
            prod[i].emplace_back(j, index_of(tmp.data()));
        }
    }
}

inline const MultiIndexTable* MultiIndexTable::get(int nvars, int order) {
    if (nvars < 1 || nvars > 8) throw DimensionError("jet dimension out of range: " + std::to_string(nvars));
    if (order < 0 || order > 24) throw OrderBudgetError("jet order out of range: " + std::to_string(order), order);
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::unique_ptr<MultiIndexTable>> registry;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(nvars, order);
    auto it = registry.find(key);
    if (it == registry.end()) {
        auto t = std::make_unique<MultiIndexTable>();
        t->build(nvars, order);
        it = registry.emplace(key, std::move(t)).first;
    }
    return it->second.get();
}

/// Truncated multivariate Taylor expansion at a base point. Coefficients are
/// Taylor-normalized: c_alpha = (d^alpha f)(base) / alpha!.
class Jet {
public:
    Jet() = default;
    Jet(int nvars, int order, Vec base)
        : tab_(MultiIndexTable::get(nvars, order)), base_(std::move(base)),
          c_(static_cast<size_t>(tab_->count), 0.0) {
        if (static_cast<int>(base_.size()) != nvars)
            throw DimensionError("jet base point dimension mismatch");
    }

    static Jet constant(int nvars, int order, Vec base, double v) {
        Jet j(nvars, order, std::move(base));
        j.c_[0] = v;
        return j;
    }

    /// The coordinate function x^{var}: value base[var], unit gradient entry.
    static Jet coordinate(int nvars, int order, Vec base, int var) {
        Jet j(nvars, order, std::move(base));
        j.c_[0] = j.base_[var];
        if (order >= 1) {
            MultiIndex a(nvars, 0);
            a[var] = 1;
            j.c_[j.tab_->index_of(a)] = 1.0;
        }
        return j;
    }

    int nvars() const { return tab_->nvars; }
    int order() const { return tab_->order; }
    const Vec& base() const { return base_; }
    const MultiIndexTable& table() const { return *tab_; }
    int size() const { return tab_->count; }
    double value() const { return c_[0]; }

    double operator[](int i) const { return c_[i]; }
    double& operator[](int i) { return c_[i]; }

    double coeff(const MultiIndex& a) const {
        int i = tab_->index_of(a);
        if (i < 0)
            throw OrderBudgetError("multi-index beyond jet order " + std::to_string(order()),
                                   order() + 1);
        return c_[i];
    }

    /// d^alpha at the base point, i.e. alpha! * c_alpha.
    double derivative(const MultiIndex& a) const {
        int total = 0;
        for (int v : a) total += v;
        if (total > order())
            throw OrderBudgetError("requested derivative order " + std::to_string(total) +
                                       " exceeds jet order " + std::to_string(order()),
                                   total);
        int i = tab_->index_of(a);
        return c_[i] * tab_->factorial[i];
    }

    Jet truncated(int m) const {
        if (m == order()) return *this;
        if (m > order())
            throw OrderBudgetError("cannot extend a jet from order " + std::to_string(order()) +
                                       " to " + std::to_string(m),
                                   m);
        Jet r(nvars(), m, base_);
        for (int i = 0; i < r.size(); ++i) r.c_[i] = c_[tab_->index_of(r.tab_->exp_at(i))];
        return r;
    }

    /// Partial derivative d/dx^var as a jet of one lower order.
    Jet partial(int var) const {
        if (order() == 0)
            throw OrderBudgetError("cannot differentiate an order-0 jet", 1);
        Jet r(nvars(), order() - 1, base_);
        MultiIndex a(nvars());
        for (int i = 0; i < r.size(); ++i) {
            const int* e = r.tab_->exp_at(i);
            std::copy(e, e + nvars(), a.begin());
            a[var] += 1;
            int src = tab_->index_of(a);
            r.c_[i] = c_[src] * (e[var] + 1);
        }
        return r;
    }

    bool finite() const {
        for (double v : c_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// First offending multi-index if any coefficient is non-finite.
    MultiIndex first_nonfinite() const {
        for (int i = 0; i < size(); ++i)
            if (!std::isfinite(c_[i])) {
                const int* e = tab_->exp_at(i);
                return MultiIndex(e, e + nvars());
            }
        return {};
    }

    Jet operator-() const {
        Jet r = *this;
        for (double& v : r.c_) v = -v;
        return r;
    }

    Jet& operator+=(double s) {
        c_[0] += s;
        return *this;
    }
    Jet& operator-=(double s) {
        c_[0] -= s;
        return *this;
    }
    Jet& operator*=(double s) {
        for (double& v : c_) v *= s;
        return *this;
    }
    Jet& operator/=(double s) { return *this *= 1.0 / s; }

    friend Jet operator+(Jet a, double s) { return a += s; }
    friend Jet operator+(double s, Jet a) { return a += s; }
    friend Jet operator-(Jet a, double s) { return a -= s; }
    friend Jet operator-(double s, const Jet& a) { return (-a) += s; }
    friend Jet operator*(Jet a, double s) { return a *= s; }
    friend Jet operator*(double s, Jet a) { return a *= s; }
    friend Jet operator/(Jet a, double s) { return a /= s; }
    friend Jet operator/(double s, const Jet& a) { return a.reciprocal() *= s; }

    friend Jet operator+(const Jet& a, const Jet& b) {
        auto [x, y] = aligned(a, b);
        for (int i = 0; i < x.size(); ++i) x.c_[i] += y.c_[i];
        return x;
    }
    friend Jet operator-(const Jet& a, const Jet& b) {
        auto [x, y] = aligned(a, b);
        for (int i = 0; i < x.size(); ++i) x.c_[i] -= y.c_[i];
        return x;
    }
    friend Jet operator*(const Jet& a, const Jet& b) {
        auto [x, y] = aligned(a, b);
        Jet r(x.nvars(), x.order(), x.base_);
        const auto& tab = *x.tab_;
        for (int i = 0; i < x.size(); ++i) {
            double ai = x.c_[i];
            if (ai == 0.0) continue;
            for (auto [j, k] : tab.prod[i]) r.c_[k] += ai * y.c_[j];
        }
        return r;
    }
    friend Jet operator/(const Jet& a, const Jet& b) { return a * b.reciprocal(); }

    Jet& operator+=(const Jet& b) { return *this = *this + b; }
    Jet& operator-=(const Jet& b) { return *this = *this - b; }
    Jet& operator*=(const Jet& b) { return *this = *this * b; }
    Jet& operator/=(const Jet& b) { return *this = *this / b; }

    /// 1/f as a power series; requires a nonzero value part.
    Jet reciprocal() const {
        double u0 = value();
        if (u0 == 0.0 || !std::isfinite(1.0 / u0))
            throw DomainError("jet reciprocal of zero value");
        std::vector<double> a(order() + 1);
        double p = 1.0 / u0;
        for (int m = 0; m <= order(); ++m) {
            a[m] = p;
            p *= -1.0 / u0;
        }
        return apply_series(a);
    }

    /// Composes a univariate analytic function given by its Taylor coefficients
    /// at this jet's value: result = sum_m a[m] (f - f0)^m.
    Jet apply_series(std::span<const double> a) const {
        assert(static_cast<int>(a.size()) >= order() + 1);
        Jet du = *this;
        du.c_[0] = 0.0;
        Jet r = Jet::constant(nvars(), order(), base_, a[order()]);
        for (int m = order() - 1; m >= 0; --m) {
            r *= du;
            r.c_[0] += a[m];
        }
        return r;
    }

private:
    // Aligns two operands: same table or truncates the deeper one. The result
    // order is min(orders) so no coefficient beyond validity is ever produced.
    static std::pair<Jet, Jet> aligned(const Jet& a, const Jet& b) {
        if (a.nvars() != b.nvars()) throw DimensionError("jet arity mismatch");
        for (int v = 0; v < a.nvars(); ++v)
            if (std::abs(a.base_[v] - b.base_[v]) > 1e-9)
                throw CompositionError("jet base points disagree");
        if (a.order() == b.order()) return {a, b};
        int m = std::min(a.order(), b.order());
        return {a.truncated(m), b.truncated(m)};
    }

    const MultiIndexTable* tab_ = nullptr;
    Vec base_;
    std::vector<double> c_;
};

// ---------------------------------------------------------------------------
// analytic functions on jets
// ---------------------------------------------------------------------------

inline Jet exp(const Jet& u) {
    std::vector<double> a(u.order() + 1);
    double t = std::exp(u.value());
    for (int m = 0; m <= u.order(); ++m) {
        a[m] = t;
        t /= (m + 1);
    }
    return u.apply_series(a);
}

inline Jet log(const Jet& u) {
    double u0 = u.value();
    if (u0 <= 0.0) throw DomainError("log of non-positive value");
    std::vector<double> a(u.order() + 1);
    a[0] = std::log(u0);
    double p = 1.0 / u0;
    for (int m = 1; m <= u.order(); ++m) {
        a[m] = (m % 2 ? p : -p) / m;
        p /= u0;
    }
    return u.apply_series(a);
}

inline Jet sin(const Jet& u) {
    std::vector<double> a(u.order() + 1);
    double s = std::sin(u.value()), c = std::cos(u.value());
    double fact = 1.0;
    for (int m = 0; m <= u.order(); ++m) {
        if (m > 0) fact *= m;
        switch (m % 4) {
        case 0: a[m] = s / fact; break;
        case 1: a[m] = c / fact; break;
        case 2: a[m] = -s / fact; break;
        default: a[m] = -c / fact; break;
        }
    }
    return u.apply_series(a);
}

inline Jet cos(const Jet& u) {
    std::vector<double> a(u.order() + 1);
    double s = std::sin(u.value()), c = std::cos(u.value());
    double fact = 1.0;
    for (int m = 0; m <= u.order(); ++m) {
        if (m > 0) fact *= m;
        switch (m % 4) {
        case 0: a[m] = c / fact; break;
        case 1: a[m] = -s / fact; break;
        case 2: a[m] = -c / fact; break;
        default: a[m] = s / fact; break;
        }
    }
    return u.apply_series(a);
}

inline Jet sinh(const Jet& u) {
    std::vector<double> a(u.order() + 1);
    double s = std::sinh(u.value()), c = std::cosh(u.value());
    double fact = 1.0;
    for (int m = 0; m <= u.order(); ++m) {
        if (m > 0) fact *= m;
        a[m] = (m % 2 ? c : s) / fact;
    }
    return u.apply_series(a);
}

inline Jet cosh(const Jet& u) {
    std::vector<double> a(u.order() + 1);
    double s = std::sinh(u.value()), c = std::cosh(u.value());
    double fact = 1.0;
    for (int m = 0; m <= u.order(); ++m) {
        if (m > 0) fact *= m;
        a[m] = (m % 2 ? s : c) / fact;
    }
    return u.apply_series(a);
}

inline Jet pow(const Jet& u, long long e) {
    if (e == 0) return Jet::constant(u.nvars(), u.order(), u.base(), 1.0);
    if (e < 0) return pow(u.reciprocal(), -e);
    Jet r = u;
    for (long long i = 1; i < e; ++i) r *= u;
    return r;
}

/// Real (generally fractional) power; requires a positive value part.
inline Jet pow_real(const Jet& u, double p) {
    double u0 = u.value();
    if (u0 <= 0.0) throw DomainError("fractional power of non-positive value");
    std::vector<double> a(u.order() + 1);
    double coef = std::pow(u0, p);
    for (int m = 0; m <= u.order(); ++m) {
        a[m] = coef;
        coef *= (p - m) / (m + 1) / u0;
    }
    return u.apply_series(a);
}

inline Jet pow(const Jet& u, const Rational& r) {
    if (r.is_integer()) return pow(u, r.num());
    return pow_real(u, r.to_double());
}

inline Jet sqrt(const Jet& u) {
    if (u.value() <= 0.0) throw DomainError("sqrt of non-positive value");
    return pow_real(u, 0.5);
}

// ---------------------------------------------------------------------------
// jet maps (R^n -> R^m expanded at a point)
// ---------------------------------------------------------------------------

/// A map expanded at a point: one jet per output component, all sharing the
/// base point and order. The value part is the image point.
struct JetMap {
    std::vector<Jet> comps;

    JetMap() = default;
    explicit JetMap(std::vector<Jet> c) : comps(std::move(c)) {
        for (const auto& j : comps) {
            if (j.nvars() != comps[0].nvars() || j.order() != comps[0].order())
                throw DimensionError("jet map components must share arity and order");
        }
    }

    int in_dim() const { return comps.empty() ? 0 : comps[0].nvars(); }
    int out_dim() const { return static_cast<int>(comps.size()); }
    int order() const { return comps[0].order(); }
    const Vec& base() const { return comps[0].base(); }

    Vec value() const {
        Vec v(comps.size());
        for (size_t i = 0; i < comps.size(); ++i) v[i] = comps[i].value();
        return v;
    }

    static JetMap identity(const Vec& x, int order) {
        int n = static_cast<int>(x.size());
        std::vector<Jet> c;
        c.reserve(n);
        for (int i = 0; i < n; ++i) c.push_back(Jet::coordinate(n, order, x, i));
        return JetMap(std::move(c));
    }

    /// Jacobian entries as jets of one lower order; (i,j) holds d comps[i] / dx^j.
    std::vector<Jet> jacobian() const {
        std::vector<Jet> J;
        J.reserve(static_cast<size_t>(out_dim()) * in_dim());
        for (int i = 0; i < out_dim(); ++i)
            for (int j = 0; j < in_dim(); ++j) J.push_back(comps[i].partial(j));
        return J;
    }

    /// Value-level Jacobian matrix, row-major.
    std::vector<double> jacobian_values() const {
        std::vector<double> J(static_cast<size_t>(out_dim()) * in_dim());
        MultiIndex a(in_dim(), 0);
        for (int i = 0; i < out_dim(); ++i)
            for (int j = 0; j < in_dim(); ++j) {
                std::fill(a.begin(), a.end(), 0);
                a[j] = 1;
                J[static_cast<size_t>(i) * in_dim() + j] = comps[i].coeff(a);
            }
        return J;
    }
};

/// Taylor expansion of outer∘inner at inner's base point, exact to the common
/// order. The outer jet must be expanded at the inner map's value point.
inline Jet jet_compose(const Jet& outer, const JetMap& inner) {
    if (outer.nvars() != inner.out_dim())
        throw DimensionError("composition arity mismatch");
    Vec iv = inner.value();
    for (int i = 0; i < outer.nvars(); ++i)
        if (std::abs(iv[i] - outer.base()[i]) > 1e-12)
            throw CompositionError("outer base point does not match inner value");

    int m = std::min(outer.order(), inner.order());
    Jet out = outer.truncated(m);
    // displacements with the value part zeroed exactly
    std::vector<Jet> d;
    d.reserve(inner.comps.size());
    for (const auto& c : inner.comps) {
        Jet t = c.truncated(m);
        t[0] = 0.0;
        d.push_back(std::move(t));
    }
    const auto& tab = out.table();
    // monomial ladder: each product of displacements costs one jet multiply
    std::vector<Jet> mono(tab.count);
    mono[0] = Jet::constant(inner.in_dim(), m, inner.base(), 1.0);
    Jet acc = Jet::constant(inner.in_dim(), m, inner.base(), out[0]);
    for (int i = 1; i < tab.count; ++i) {
        mono[i] = mono[tab.parent[i]] * d[tab.parent_var[i]];
        if (out[i] != 0.0) acc += mono[i] * out[i];
    }
    return acc;
}

inline JetMap jet_compose(const JetMap& outer, const JetMap& inner) {
    std::vector<Jet> comps;
    comps.reserve(outer.comps.size());
    for (const auto& c : outer.comps) comps.push_back(jet_compose(c, inner));
    return JetMap(std::move(comps));
}

// ---------------------------------------------------------------------------
// small dense linear algebra over jets (Gauss-Jordan with value pivoting)
// ---------------------------------------------------------------------------

inline std::vector<Jet> jet_mat_inverse(std::vector<Jet> a, int n) {
    assert(static_cast<int>(a.size()) == n * n);
    std::vector<Jet> inv(a.size());
    const Jet zero(a[0].nvars(), a[0].order(), a[0].base());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) inv[i * n + j] = (i == j) ? zero + 1.0 : zero;
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col].value()) > std::abs(a[piv * n + col].value())) piv = r;
        if (std::abs(a[piv * n + col].value()) < 1e-13)
            throw InversionError("singular jet matrix");
        if (piv != col)
            for (int j = 0; j < n; ++j) {
                std::swap(a[piv * n + j], a[col * n + j]);
                std::swap(inv[piv * n + j], inv[col * n + j]);
            }
        Jet d = a[col * n + col].reciprocal();
        for (int j = 0; j < n; ++j) {
            a[col * n + j] *= d;
            inv[col * n + j] *= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            Jet f = a[r * n + col];
            if (f.value() == 0.0 && f.finite()) {
                bool all0 = true;
                for (int i = 0; i < f.size(); ++i)
                    if (f[i] != 0.0) { all0 = false; break; }
                if (all0) continue;
            }
            for (int j = 0; j < n; ++j) {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    return inv;
}

inline Jet jet_det(std::vector<Jet> a, int n) {
    assert(static_cast<int>(a.size()) == n * n);
    Jet det = Jet::constant(a[0].nvars(), a[0].order(), a[0].base(), 1.0);
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col].value()) > std::abs(a[piv * n + col].value())) piv = r;
        if (std::abs(a[piv * n + col].value()) < 1e-300) return det * 0.0;
        if (piv != col) {
            for (int j = 0; j < n; ++j) std::swap(a[piv * n + j], a[col * n + j]);
            det = -det;
        }
        det *= a[col * n + col];
        Jet d = a[col * n + col].reciprocal();
        for (int r = col + 1; r < n; ++r) {
            Jet f = a[r * n + col] * d;
            for (int j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
        }
    }
    return det;
}

// ---------------------------------------------------------------------------
// map inversion
// ---------------------------------------------------------------------------

/// Degree-K jet of the local inverse of m at m's value point. Newton iteration
/// in the jet algebra; gains at least one correct order per sweep.
inline JetMap jet_invert_map(const JetMap& m) {
    int n = m.out_dim();
    if (n != m.in_dim()) throw InversionError("only square maps can be inverted");
    int K = m.order();
    Vec x0 = m.base();
    Vec y0 = m.value();

    std::vector<double> J = m.jacobian_values();
    // invert the value-level Jacobian and estimate its condition
    std::vector<double> A = J, Ainv(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) Ainv[i * n + i] = 1.0;
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A[r * n + col]) > std::abs(A[piv * n + col])) piv = r;
        if (std::abs(A[piv * n + col]) < 1e-14) throw InversionError("singular Jacobian");
        if (piv != col)
            for (int j = 0; j < n; ++j) {
                std::swap(A[piv * n + j], A[col * n + j]);
                std::swap(Ainv[piv * n + j], Ainv[col * n + j]);
            }
        double d = 1.0 / A[col * n + col];
        for (int j = 0; j < n; ++j) {
            A[col * n + j] *= d;
            Ainv[col * n + j] *= d;
        }
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = A[r * n + col];
            for (int j = 0; j < n; ++j) {
                A[r * n + j] -= f * A[col * n + j];
                Ainv[r * n + j] -= f * Ainv[col * n + j];
            }
        }
    }
    double n1 = 0, n2 = 0;
    for (int i = 0; i < n * n; ++i) {
        n1 = std::max(n1, std::abs(J[i]));
        n2 = std::max(n2, std::abs(Ainv[i]));
    }
    if (n1 * n2 > 1e8) throw InversionError("Jacobian condition number exceeds 1e8");

    // initial guess: first-order inverse
    std::vector<Jet> N;
    N.reserve(n);
    for (int i = 0; i < n; ++i) {
        Jet c = Jet::constant(n, K, y0, x0[i]);
        for (int j = 0; j < n; ++j)
            c += Ainv[i * n + j] * (Jet::coordinate(n, K, y0, j) - y0[j]);
        N.push_back(std::move(c));
    }
    JetMap inv(std::move(N));
    if (K == 0) return inv;

    for (int sweep = 0; sweep < K; ++sweep) {
        JetMap e = jet_compose(m, inv); // should be identity in y
        bool clean = true;
        std::vector<Jet> err(n);
        for (int i = 0; i < n; ++i) {
            err[i] = e.comps[i] - Jet::coordinate(n, K, y0, i);
            for (int t = 0; t < err[i].size(); ++t)
                if (std::abs(err[i][t]) > 1e-14) clean = false;
        }
        if (clean) break;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) inv.comps[i] -= Ainv[i * n + j] * err[j];
    }
    return inv;
}

// ---------------------------------------------------------------------------
// spec-level helpers
// ---------------------------------------------------------------------------

/// d^alpha of the jet at its base point (alpha! times the stored coefficient).
inline double jet_derivative(const Jet& j, const MultiIndex& alpha) {
    return j.derivative(alpha);
}

} // namespace csd
