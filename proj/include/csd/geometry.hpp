#pragma once

#include "csd/fields.hpp"
#include "csd/jet.hpp"
#include "csd/rational.hpp"

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace csd {

// ---------------------------------------------------------------------------
// small dense tensors with jet entries
// ---------------------------------------------------------------------------

/// Rank-r array of jets over an n-dimensional index range (r <= 5 in practice).
struct JTensor {
    int n = 0;
    int rank = 0;
    std::vector<Jet> v;

    JTensor() = default;
    JTensor(int n_, int rank_, const Jet& proto) : n(n_), rank(rank_) {
        size_t sz = 1;
        for (int i = 0; i < rank_; ++i) sz *= n_;
        v.assign(sz, proto);
    }

    size_t flat(std::initializer_list<int> is) const {
        size_t f = 0;
        for (int i : is) f = f * n + i;
        return f;
    }
    template <class... I>
    Jet& at(I... is) {
        return v[flat({is...})];
    }
    template <class... I>
    const Jet& at(I... is) const {
        return v[flat({is...})];
    }

    void digits(size_t flat_idx, int* out) const {
        for (int r = rank - 1; r >= 0; --r) {
            out[r] = static_cast<int>(flat_idx % n);
            flat_idx /= n;
        }
    }

    JTensor truncated(int m) const {
        JTensor r = *this;
        for (auto& j : r.v) j = j.truncated(m);
        return r;
    }

    double max_abs_value() const {
        double m = 0;
        for (const auto& j : v) m = std::max(m, std::abs(j.value()));
        return m;
    }
};

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// Scalar density of weight lambda.
struct DensityField {
    Rational weight;
    ScalarField value;
};

/// Symmetric contravariant tensor density: degree k in {0,1,2}, weight delta.
class SymbolField {
public:
    SymbolField() = default;
    SymbolField(int n, int degree, Rational weight, std::vector<ScalarField> comps)
        : n_(n), deg_(degree), w_(weight), comp_(std::move(comps)) {
        size_t expect = 1;
        for (int i = 0; i < degree; ++i) expect *= n;
        if (comp_.size() != expect) throw DimensionError("symbol component count mismatch");
    }

    int dim() const { return n_; }
    int degree() const { return deg_; }
    const Rational& weight() const { return w_; }
    const ScalarField& comp(size_t flat) const { return comp_[flat]; }
    const ScalarField& comp(int i, int j) const { return comp_[static_cast<size_t>(i) * n_ + j]; }

    JTensor jets(const Vec& x, int order) const {
        JTensor t(n_, deg_, Jet(n_, order, x));
        for (size_t f = 0; f < comp_.size(); ++f) t.v[f] = comp_[f].jets(x, order);
        return t;
    }

    /// Symmetric random symbol with low-degree polynomial components.
    static SymbolField random(Rng& rng, int n, int degree, Rational weight, int poly_deg = 2) {
        size_t sz = 1;
        for (int i = 0; i < degree; ++i) sz *= n;
        std::vector<ScalarField> comps(sz);
        if (degree == 0) {
            comps[0] = random_poly_field(rng, n, poly_deg);
        } else if (degree == 1) {
            for (int i = 0; i < n; ++i) comps[i] = random_poly_field(rng, n, poly_deg);
        } else {
            for (int i = 0; i < n; ++i)
                for (int j = i; j < n; ++j) {
                    ScalarField f = random_poly_field(rng, n, poly_deg);
                    comps[static_cast<size_t>(i) * n + j] = f;
                    comps[static_cast<size_t>(j) * n + i] = f;
                }
        }
        return SymbolField(n, degree, weight, std::move(comps));
    }

private:
    int n_ = 0;
    int deg_ = 0;
    Rational w_;
    std::vector<ScalarField> comp_;
};

struct MetricJets {
    JTensor g;    // g_ij
    JTensor ginv; // g^ij
    Jet det;
};

struct ConnJets {
    JTensor gamma;           // Gamma^k_ij, indexed (k,i,j)
    std::vector<Jet> trace;  // Gamma_i = Gamma^t_{ti}
};

struct CurvJets {
    JTensor ricci; // R_ij
    Jet scalar;    // R = g^{ij} R_ij
};

/// Connection data at a point (spec-facing view of ConnJets).
struct Connection {
    Vec x;
    int order = 0;
    JTensor gamma;
    std::vector<Jet> trace;
};

/// Ricci tensor and scalar curvature values at a point.
struct CurvatureData {
    Vec x;
    std::vector<double> ricci; // n*n
    double scalar = 0;
};

// ---------------------------------------------------------------------------
// MetricField
// ---------------------------------------------------------------------------

/// Pseudo-Riemannian metric with jet-evaluable components and per-point memo
/// of metric, connection and curvature jets. Copies share state, so caches are
/// reused across the lazily composed fields built on top of a metric.
class MetricField {
public:
    MetricField() = default;

    MetricField(int p, int q, std::vector<ScalarField> comps)
        : s_(std::make_shared<State>()) {
        s_->n = p + q;
        s_->p = p;
        s_->q = q;
        if (comps.size() != static_cast<size_t>(s_->n) * s_->n)
            throw DimensionError("metric component count mismatch");
        s_->comp = std::move(comps);
    }

    static MetricField from_constant(int p, int q, const std::vector<double>& entries) {
        int n = p + q;
        std::vector<ScalarField> comps(static_cast<size_t>(n) * n);
        for (int i = 0; i < n * n; ++i) comps[i] = ScalarField::constant(n, entries[i]);
        return MetricField(p, q, std::move(comps));
    }

    int dim() const { return s_->n; }
    int sig_p() const { return s_->p; }
    int sig_q() const { return s_->q; }
    const ScalarField& comp(int i, int j) const { return s_->comp[static_cast<size_t>(i) * s_->n + j]; }

    std::shared_ptr<const MetricJets> at(const Vec& x, int order) const {
        return s_->mcache.get(x, order, [&] { return compute_metric(x, order); });
    }

    /// Christoffel jets to the given order (metric jets one order deeper).
    std::shared_ptr<const ConnJets> christoffel_at(const Vec& x, int order) const {
        return s_->ccache.get(x, order, [&] { return compute_conn(x, order); });
    }

    /// Ricci and scalar curvature jets.
    std::shared_ptr<const CurvJets> curvature_at(const Vec& x, int order) const {
        return s_->rcache.get(x, order, [&] { return compute_curv(x, order); });
    }

private:
    struct State {
        int n = 0, p = 0, q = 0;
        std::vector<ScalarField> comp;
        PointCache<MetricJets> mcache;
        PointCache<ConnJets> ccache;
        PointCache<CurvJets> rcache;
    };

    MetricJets compute_metric(const Vec& x, int order) const {
        int n = s_->n;
        MetricJets m;
        m.g = JTensor(n, 2, Jet(n, order, x));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m.g.at(i, j) = comp(i, j).jets(x, order);
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                if (std::abs(m.g.at(i, j).value() - m.g.at(j, i).value()) > 1e-12)
                    throw SingularMetricError("metric components are not symmetric");
        m.det = jet_det(m.g.v, n);
        if (std::abs(m.det.value()) < 1e-12)
            throw SingularMetricError("metric is singular at the evaluation point");
        check_signature(m.g);
        m.ginv = JTensor(n, 2, Jet(n, order, x));
        m.ginv.v = jet_mat_inverse(m.g.v, n);
        return m;
    }

    // Sylvester inertia from symmetric elimination pivots.
    void check_signature(const JTensor& g) const {
        int n = s_->n;
        std::vector<double> a(static_cast<size_t>(n) * n);
        for (int i = 0; i < n * n; ++i) a[i] = g.v[i].value();
        int plus = 0, minus = 0;
        std::vector<int> left(n);
        for (int i = 0; i < n; ++i) left[i] = i;
        for (int step = 0; step < n; ++step) {
            // pick the remaining index with the largest |diagonal|
            int best = -1;
            double bv = -1;
            for (int idx : left)
                if (idx >= 0 && std::abs(a[idx * n + idx]) > bv) {
                    bv = std::abs(a[idx * n + idx]);
                    best = idx;
                }
            if (best < 0 || bv < 1e-12) throw SingularMetricError("degenerate metric pivot");
            double piv = a[best * n + best];
            (piv > 0 ? plus : minus)++;
            for (int& idx : left)
                if (idx == best) idx = -1;
            for (int r : left)
                if (r >= 0) {
                    double f = a[r * n + best] / piv;
                    for (int c : left)
                        if (c >= 0) a[r * n + c] -= f * a[best * n + c];
                    a[r * n + best] = 0;
                }
        }
        if (plus != s_->p || minus != s_->q)
            throw SingularMetricError("metric signature does not match declared (p,q)");
    }

    ConnJets compute_conn(const Vec& x, int order) const {
        int n = s_->n;
        auto m = at(x, order + 1);
        ConnJets c;
        c.gamma = JTensor(n, 3, Jet(n, order, x));
        // dg[l](i,j) = d_l g_ij
        std::vector<JTensor> dg(n, JTensor(n, 2, Jet(n, order, x)));
        for (int l = 0; l < n; ++l)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) dg[l].at(i, j) = m->g.at(i, j).partial(l);
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = i; j < n; ++j) {
                    Jet acc(n, order, x);
                    for (int l = 0; l < n; ++l)
                        acc += m->ginv.at(k, l).truncated(order) *
                               (dg[i].at(j, l) + dg[j].at(i, l) - dg[l].at(i, j));
                    acc *= 0.5;
                    c.gamma.at(k, i, j) = acc;
                    c.gamma.at(k, j, i) = acc;
                }
        c.trace.assign(n, Jet(n, order, x));
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < n; ++t) c.trace[i] += c.gamma.at(t, t, i);
        return c;
    }

    CurvJets compute_curv(const Vec& x, int order) const {
        int n = s_->n;
        auto conn = christoffel_at(x, order + 1);
        auto m = at(x, order);
        const JTensor& G = conn->gamma;
        CurvJets r;
        r.ricci = JTensor(n, 2, Jet(n, order, x));
        // Ricci_ij = d_k G^k_ij - d_j G^k_ik + G^k_kt G^t_ij - G^k_jt G^t_ik
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                Jet acc(n, order, x);
                for (int k = 0; k < n; ++k) {
                    acc += G.at(k, i, j).partial(k) - G.at(k, i, k).partial(j);
                    for (int t = 0; t < n; ++t)
                        acc += G.at(k, k, t).truncated(order) * G.at(t, i, j).truncated(order) -
                               G.at(k, j, t).truncated(order) * G.at(t, i, k).truncated(order);
                }
                r.ricci.at(i, j) = acc;
                r.ricci.at(j, i) = acc;
            }
        r.scalar = Jet(n, order, x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) r.scalar += m->ginv.at(i, j) * r.ricci.at(i, j);
        return r;
    }

    std::shared_ptr<State> s_;
};

/// F-scaled metric g~ = F * g, sharing nothing with g's caches.
inline MetricField conformally_scaled(const MetricField& g, const ScalarField& F) {
    int n = g.dim();
    std::vector<ScalarField> comps;
    comps.reserve(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) comps.push_back(F * g.comp(i, j));
    return MetricField(g.sig_p(), g.sig_q(), std::move(comps));
}

// ---------------------------------------------------------------------------
// spec-level operations
// ---------------------------------------------------------------------------

inline Connection christoffel(const MetricField& g, const Vec& x, int order) {
    auto c = g.christoffel_at(x, order);
    return Connection{x, order, c->gamma, c->trace};
}

inline CurvatureData curvature(const MetricField& g, const Vec& x) {
    auto c = g.curvature_at(x, 0);
    int n = g.dim();
    CurvatureData d;
    d.x = x;
    d.ricci.resize(static_cast<size_t>(n) * n);
    for (int i = 0; i < n * n; ++i) d.ricci[i] = c->ricci.v[i].value();
    d.scalar = c->scalar.value();
    return d;
}

inline ScalarField scalar_curvature_field(const MetricField& g) {
    return {g.dim(), [g](const Vec& x, int k) { return g.curvature_at(x, k)->scalar; }};
}

// ---------------------------------------------------------------------------
// covariant derivatives
// ---------------------------------------------------------------------------

/// Covariant derivative of a tensor density: first `u` indices contravariant,
/// the remaining `l` covariant, density weight `w`. The new covariant index
/// comes first in the result; the order drops by one.
inline JTensor covderiv_tensor(const JTensor& T, int u, int l, double w, const ConnJets& G) {
    int n = T.n;
    int order = T.v[0].order() - 1;
    if (order < 0) throw OrderBudgetError("covariant derivative needs jets of order >= 1", 1);
    JTensor R(n, T.rank + 1, Jet(n, order, T.v[0].base()));
    std::array<int, 8> id{};
    for (size_t f = 0; f < R.v.size(); ++f) {
        R.digits(f, id.data());
        int k = id[0];
        int* a = id.data() + 1;
        // source flat index for T
        size_t src = 0;
        for (int r = 0; r < T.rank; ++r) src = src * n + a[r];
        Jet acc = T.v[src].partial(k);
        for (int r = 0; r < u; ++r) {
            int keep = a[r];
            for (int t = 0; t < n; ++t) {
                a[r] = t;
                size_t s2 = 0;
                for (int rr = 0; rr < T.rank; ++rr) s2 = s2 * n + a[rr];
                acc += G.gamma.at(keep, k, t) * T.v[s2];
            }
            a[r] = keep;
        }
        for (int r = u; r < u + l; ++r) {
            int keep = a[r];
            for (int t = 0; t < n; ++t) {
                a[r] = t;
                size_t s2 = 0;
                for (int rr = 0; rr < T.rank; ++rr) s2 = s2 * n + a[rr];
                acc -= G.gamma.at(t, k, keep) * T.v[s2];
            }
            a[r] = keep;
        }
        if (w != 0.0) acc -= w * (G.trace[k] * T.v[src]);
        R.v[f] = acc;
    }
    return R;
}

/// nabla P for a symbol of weight delta; resulting jets at the given order.
inline JTensor covderiv_symbol_jets(const MetricField& g, const SymbolField& P, const Vec& x,
                                    int order) {
    auto conn = g.christoffel_at(x, order);
    return covderiv_tensor(P.jets(x, order + 1), P.degree(), 0, P.weight().to_double(), *conn);
}

/// nabla nabla P: second derivative through the induced connection on the
/// mixed bundle (the first-derivative index is covariant).
inline JTensor covderiv2_symbol_jets(const MetricField& g, const SymbolField& P, const Vec& x,
                                     int order) {
    auto conn1 = g.christoffel_at(x, order + 1);
    auto conn0 = g.christoffel_at(x, order);
    JTensor d1 = covderiv_tensor(P.jets(x, order + 2), P.degree(), 0, P.weight().to_double(), *conn1);
    // d1 has the covariant index first; move it last so covderiv_tensor sees (up..., low)
    int n = g.dim();
    JTensor perm(n, d1.rank, Jet(n, order + 1, x));
    std::array<int, 8> id{};
    for (size_t f = 0; f < perm.v.size(); ++f) {
        perm.digits(f, id.data());
        // perm(a..., k) = d1(k, a...)
        std::array<int, 8> src{};
        src[0] = id[d1.rank - 1];
        for (int r = 0; r + 1 < d1.rank; ++r) src[r + 1] = id[r];
        size_t sf = 0;
        for (int r = 0; r < d1.rank; ++r) sf = sf * n + src[r];
        perm.v[f] = d1.v[sf];
    }
    JTensor d2 = covderiv_tensor(perm, P.degree(), 1, P.weight().to_double(), *conn0);
    // d2 indices: (l, a..., k) meaning nabla_l nabla_k P^{a...}; reorder to (l, k, a...)
    JTensor out(n, d2.rank, Jet(n, order, x));
    for (size_t f = 0; f < out.v.size(); ++f) {
        out.digits(f, id.data());
        std::array<int, 8> src{};
        src[0] = id[0];
        src[d2.rank - 1] = id[1];
        for (int r = 2; r < d2.rank; ++r) src[r - 1] = id[r];
        size_t sf = 0;
        for (int r = 0; r < d2.rank; ++r) sf = sf * n + src[r];
        out.v[f] = d2.v[sf];
    }
    return out;
}

inline JTensor covderiv_density_jets(const MetricField& g, const DensityField& phi, const Vec& x,
                                     int order) {
    auto conn = g.christoffel_at(x, order);
    JTensor T(g.dim(), 0, phi.value.jets(x, order + 1));
    return covderiv_tensor(T, 0, 0, phi.weight.to_double(), *conn);
}

inline JTensor covderiv2_density_jets(const MetricField& g, const DensityField& phi, const Vec& x,
                                      int order) {
    auto conn1 = g.christoffel_at(x, order + 1);
    auto conn0 = g.christoffel_at(x, order);
    JTensor T(g.dim(), 0, phi.value.jets(x, order + 2));
    JTensor d1 = covderiv_tensor(T, 0, 0, phi.weight.to_double(), *conn1);
    JTensor d2 = covderiv_tensor(d1, 0, 1, phi.weight.to_double(), *conn0);
    // d2(j,i) = nabla_j nabla_i phi
    return d2;
}

/// Spec-facing wrappers returning plain value arrays.
struct CovDerivResult {
    JTensor first;
    JTensor second;
};

inline CovDerivResult covderiv_density(const MetricField& g, const DensityField& phi, const Vec& x,
                                       int r) {
    if (r < 1 || r > 2) throw DomainError("covderiv_density supports r in {1,2}");
    CovDerivResult out;
    out.first = covderiv_density_jets(g, phi, x, 0);
    if (r == 2) out.second = covderiv2_density_jets(g, phi, x, 0);
    return out;
}

inline CovDerivResult covderiv_symbol(const MetricField& g, const SymbolField& P, const Vec& x,
                                      int r) {
    if (r < 1 || r > 2) throw DomainError("covderiv_symbol supports r in {1,2}");
    if (P.degree() > 2) throw DomainError("covderiv_symbol supports degree <= 2");
    CovDerivResult out;
    out.first = covderiv_symbol_jets(g, P, x, 0);
    if (r == 2) out.second = covderiv2_symbol_jets(g, P, x, 0);
    return out;
}

} // namespace csd
