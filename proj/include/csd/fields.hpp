#pragma once

#include "csd/jet.hpp"

#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <utility>

namespace csd {

/// A smooth scalar field known through its jets: any callable that expands the
/// field at a point to a requested order. All composite geometric quantities in
/// the library are carried this way.
class ScalarField {
public:
    using Fn = std::function<Jet(const Vec&, int)>;

    ScalarField() = default;
    ScalarField(int nvars, Fn fn) : n_(nvars), fn_(std::move(fn)) {}

    int nvars() const { return n_; }
    bool valid() const { return static_cast<bool>(fn_); }

    Jet jets(const Vec& x, int order) const {
        Jet j = fn_(x, order);
        if (!j.finite())
            throw EvalError("non-finite coefficient while expanding field", j.first_nonfinite());
        return j;
    }

    double value(const Vec& x) const { return jets(x, 0).value(); }

    static ScalarField constant(int n, double v) {
        return {n, [v](const Vec& x, int k) { return Jet::constant(x.size(), k, x, v); }};
    }

    static ScalarField coordinate(int n, int var) {
        return {n, [var](const Vec& x, int k) { return Jet::coordinate(x.size(), k, x, var); }};
    }

    /// sum of coeff * x^alpha terms
    static ScalarField polynomial(int n, std::vector<std::pair<MultiIndex, double>> terms) {
        return {n, [terms = std::move(terms)](const Vec& x, int k) {
                    int n2 = static_cast<int>(x.size());
                    Jet acc(n2, k, x);
                    for (const auto& [a, c] : terms) {
                        Jet t = Jet::constant(n2, k, x, c);
                        for (int v = 0; v < n2; ++v)
                            for (int e = 0; e < a[v]; ++e) t *= Jet::coordinate(n2, k, x, v);
                        acc += t;
                    }
                    return acc;
                }};
    }

    friend ScalarField operator+(const ScalarField& a, const ScalarField& b) {
        return {a.n_, [a, b](const Vec& x, int k) { return a.jets(x, k) + b.jets(x, k); }};
    }
    friend ScalarField operator-(const ScalarField& a, const ScalarField& b) {
        return {a.n_, [a, b](const Vec& x, int k) { return a.jets(x, k) - b.jets(x, k); }};
    }
    friend ScalarField operator*(const ScalarField& a, const ScalarField& b) {
        return {a.n_, [a, b](const Vec& x, int k) { return a.jets(x, k) * b.jets(x, k); }};
    }
    friend ScalarField operator/(const ScalarField& a, const ScalarField& b) {
        return {a.n_, [a, b](const Vec& x, int k) { return a.jets(x, k) / b.jets(x, k); }};
    }
    friend ScalarField operator*(double s, const ScalarField& a) {
        return {a.n_, [s, a](const Vec& x, int k) { return s * a.jets(x, k); }};
    }
    friend ScalarField operator+(const ScalarField& a, double s) {
        return {a.n_, [s, a](const Vec& x, int k) { return a.jets(x, k) + s; }};
    }

private:
    int n_ = 0;
    Fn fn_;
};

/// Degree-K Taylor expansion of a field at a point.
inline Jet jet_lift(const ScalarField& field, const Vec& x, int order) {
    return field.jets(x, order);
}

struct VectorField {
    std::vector<ScalarField> comps;
    int nvars() const { return static_cast<int>(comps.size()); }
};

// ---------------------------------------------------------------------------
// deterministic RNG (identical streams on every platform)
// ---------------------------------------------------------------------------

/// splitmix64; used instead of <random> distributions so that seeded scenario
/// runs are byte-identical everywhere.
class Rng {
public:
    explicit Rng(uint64_t seed) : s_(seed) {}

    uint64_t next() {
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// uniform in [-half, half]
    double sym(double half = 0.5) { return (2.0 * uniform() - 1.0) * half; }

private:
    uint64_t s_;
};

// ---------------------------------------------------------------------------
// per-point memo used by metrics and diffeomorphisms
// ---------------------------------------------------------------------------

template <class V>
class PointCache {
public:
    std::shared_ptr<const V> get(const Vec& x, int order, const std::function<V()>& make) const {
        Key key{x, order};
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = map_.find(key);
            if (it != map_.end()) return it->second;
        }
        auto v = std::make_shared<const V>(make());
        std::lock_guard<std::mutex> lock(mu_);
        return map_.emplace(key, std::move(v)).first->second;
    }

private:
    struct Key {
        Vec x;
        int order;
        bool operator==(const Key& o) const { return order == o.order && x == o.x; }
    };
    struct Hash {
        size_t operator()(const Key& k) const {
            uint64_t h = 0xcbf29ce484222325ull ^ static_cast<uint64_t>(k.order);
            for (double v : k.x) {
                uint64_t bits;
                std::memcpy(&bits, &v, sizeof bits);
                h = (h ^ bits) * 0x100000001b3ull;
            }
            return static_cast<size_t>(h);
        }
    };
    mutable std::mutex mu_;
    mutable std::unordered_map<Key, std::shared_ptr<const V>, Hash> map_;
};

// ---------------------------------------------------------------------------
// seeded random inputs (low-degree polynomials keep jets well conditioned)
// ---------------------------------------------------------------------------

inline ScalarField random_poly_field(Rng& rng, int n, int deg, double half_width = 0.5) {
    const MultiIndexTable* tab = MultiIndexTable::get(n, deg);
    std::vector<std::pair<MultiIndex, double>> terms;
    for (int i = 0; i < tab->count; ++i) {
        const int* e = tab->exp_at(i);
        terms.emplace_back(MultiIndex(e, e + n), rng.sym(half_width));
    }
    return ScalarField::polynomial(n, std::move(terms));
}

/// Strictly positive random field, exp of a small polynomial.
inline ScalarField random_positive_field(Rng& rng, int n, int deg = 2, double half_width = 0.25) {
    ScalarField p = random_poly_field(rng, n, deg, half_width);
    return {n, [p](const Vec& x, int k) { return exp(p.jets(x, k)); }};
}

inline VectorField random_poly_vector_field(Rng& rng, int n, int deg, double half_width = 0.5) {
    VectorField X;
    for (int i = 0; i < n; ++i) X.comps.push_back(random_poly_field(rng, n, deg, half_width));
    return X;
}

inline Vec random_point(Rng& rng, int n, double box = 0.4) {
    Vec x(n);
    for (auto& v : x) v = rng.sym(box);
    return x;
}

} // namespace csd
