#pragma once

#include "csd/actions.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace csd {

/// diag(1,...,1,-1,...,-1) with p plus-ones and q minus-ones.
inline MetricField flat_metric(int p, int q) {
    int n = p + q;
    if (n < 1) throw DimensionError("flat metric needs p+q >= 1");
    std::vector<double> e(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) e[static_cast<size_t>(i) * n + i] = i < p ? 1.0 : -1.0;
    return MetricField::from_constant(p, q, e);
}

inline std::vector<double> eta_diag(int p, int q) {
    std::vector<double> e(p + q);
    for (int i = 0; i < p + q; ++i) e[i] = i < p ? 1.0 : -1.0;
    return e;
}

namespace detail {

inline Jet eta_quad(const std::vector<Jet>& x, const std::vector<double>& eta) {
    Jet q = x[0] * x[0] * eta[0];
    for (size_t i = 1; i < x.size(); ++i) q += x[i] * x[i] * eta[i];
    return q;
}

inline Jet eta_pair(const std::vector<Jet>& x, const Vec& b, const std::vector<double>& eta) {
    Jet q = x[0] * (b[0] * eta[0]);
    for (size_t i = 1; i < x.size(); ++i) q += x[i] * (b[i] * eta[i]);
    return q;
}

inline std::vector<Jet> coords(const Vec& x, int order) {
    int n = static_cast<int>(x.size());
    std::vector<Jet> c;
    c.reserve(n);
    for (int i = 0; i < n; ++i) c.push_back(Jet::coordinate(n, order, x, i));
    return c;
}

} // namespace detail

// ---------------------------------------------------------------------------
// O(p+1,q+1) transformation catalog
// ---------------------------------------------------------------------------

enum class ConformalKind { Translation, LinearOrthogonal, Dilation, SpecialConformal };

/// A cataloged conformal transformation of flat R^{p,q} realized as a Diffeo.
struct FlatConformalMap {
    ConformalKind kind;
    Diffeo map;
};

inline Diffeo translation_map(const Vec& a) {
    int n = static_cast<int>(a.size());
    auto mk = [n](Vec shift) -> Diffeo::Provider {
        return [n, shift = std::move(shift)](const Vec& x, int k) {
            std::vector<Jet> c;
            c.reserve(n);
            for (int i = 0; i < n; ++i) c.push_back(Jet::coordinate(n, k, x, i) + shift[i]);
            return JetMap(std::move(c));
        };
    };
    Vec neg(a.size());
    for (size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
    return Diffeo::from_maps(n, mk(a), mk(neg), "translation");
}

/// General invertible linear map; the O(p,q) validation lives in conformal_map.
inline Diffeo linear_map(const std::vector<double>& A, int n, const std::string& label = "linear") {
    std::vector<double> Ainv(A);
    std::vector<double> I(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) I[static_cast<size_t>(i) * n + i] = 1.0;
    // invert numerically
    {
        std::vector<double> M = A;
        for (int c = 0; c < n; ++c) {
            int piv = c;
            for (int r = c + 1; r < n; ++r)
                if (std::abs(M[r * n + c]) > std::abs(M[piv * n + c])) piv = r;
            if (std::abs(M[piv * n + c]) < 1e-14) throw InversionError("singular linear map");
            if (piv != c)
                for (int j = 0; j < n; ++j) {
                    std::swap(M[piv * n + j], M[c * n + j]);
                    std::swap(I[piv * n + j], I[c * n + j]);
                }
            double d = 1.0 / M[c * n + c];
            for (int j = 0; j < n; ++j) {
                M[c * n + j] *= d;
                I[c * n + j] *= d;
            }
            for (int r = 0; r < n; ++r) {
                if (r == c) continue;
                double f = M[r * n + c];
                for (int j = 0; j < n; ++j) {
                    M[r * n + j] -= f * M[c * n + j];
                    I[r * n + j] -= f * I[c * n + j];
                }
            }
        }
        Ainv = I;
    }
    auto mk = [n](std::vector<double> M) -> Diffeo::Provider {
        return [n, M = std::move(M)](const Vec& x, int k) {
            auto xs = detail::coords(x, k);
            std::vector<Jet> c;
            c.reserve(n);
            for (int i = 0; i < n; ++i) {
                Jet acc = xs[0] * M[static_cast<size_t>(i) * n];
                for (int j = 1; j < n; ++j) acc += xs[j] * M[static_cast<size_t>(i) * n + j];
                c.push_back(std::move(acc));
            }
            return JetMap(std::move(c));
        };
    };
    return Diffeo::from_maps(n, mk(A), mk(Ainv), label);
}

inline Diffeo dilation_map(int n, double a) {
    if (a == 0.0) throw DomainError("dilation factor must be nonzero");
    std::vector<double> A(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) A[static_cast<size_t>(i) * n + i] = a;
    return linear_map(A, n, "dilation(" + std::to_string(a) + ")");
}

/// x -> (x - b<x,x>) / (1 - 2<b,x> + <b,b><x,x>), with <,> the (p,q) form.
/// The inverse is the same formula with -b. Throws when a probe sits too close
/// to the singular locus.
inline Diffeo special_conformal_map(const Vec& b, int p, int q) {
    int n = p + q;
    std::vector<double> eta = eta_diag(p, q);
    auto mk = [n, eta](Vec bb) -> Diffeo::Provider {
        return [n, eta, bb = std::move(bb)](const Vec& x, int k) {
            auto xs = detail::coords(x, k);
            Jet xx = detail::eta_quad(xs, eta);
            Jet bx = detail::eta_pair(xs, bb, eta);
            double b2 = 0;
            for (int i = 0; i < n; ++i) b2 += eta[i] * bb[i] * bb[i];
            Jet sigma = 1.0 - 2.0 * bx + b2 * xx;
            if (std::abs(sigma.value()) < 0.05)
                throw ProbeSingularError("probe too close to the special-conformal singular locus");
            Jet inv_sigma = sigma.reciprocal();
            std::vector<Jet> c;
            c.reserve(n);
            for (int i = 0; i < n; ++i) c.push_back((xs[i] - bb[i] * xx) * inv_sigma);
            return JetMap(std::move(c));
        };
    };
    Vec neg(b.size());
    for (size_t i = 0; i < b.size(); ++i) neg[i] = -b[i];
    return Diffeo::from_maps(n, mk(b), mk(neg), "special_conformal");
}

/// Rotation (or boost, in mixed-signature planes) by angle t in the (i,j) plane
/// of R^{p,q}; an element of the identity component of O(p,q).
inline Diffeo rotation_map(int p, int q, int i, int j, double t) {
    int n = p + q;
    if (i == j || i < 0 || j < 0 || i >= n || j >= n) throw DomainError("bad rotation plane");
    std::vector<double> eta = eta_diag(p, q);
    std::vector<double> A(static_cast<size_t>(n) * n, 0.0);
    for (int d = 0; d < n; ++d) A[static_cast<size_t>(d) * n + d] = 1.0;
    if (eta[i] * eta[j] > 0) {
        A[static_cast<size_t>(i) * n + i] = std::cos(t);
        A[static_cast<size_t>(j) * n + j] = std::cos(t);
        A[static_cast<size_t>(i) * n + j] = -std::sin(t);
        A[static_cast<size_t>(j) * n + i] = std::sin(t);
    } else {
        A[static_cast<size_t>(i) * n + i] = std::cosh(t);
        A[static_cast<size_t>(j) * n + j] = std::cosh(t);
        A[static_cast<size_t>(i) * n + j] = std::sinh(t);
        A[static_cast<size_t>(j) * n + i] = std::sinh(t);
    }
    return linear_map(A, n, "rotation");
}

/// Validates A^T eta A = eta before realizing the map.
inline FlatConformalMap conformal_map_linear(const std::vector<double>& A, int p, int q) {
    int n = p + q;
    std::vector<double> eta = eta_diag(p, q);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int a = 0; a < n; ++a) s += A[a * n + i] * eta[a] * A[a * n + j];
            double want = i == j ? eta[i] : 0.0;
            if (std::abs(s - want) > 1e-12)
                throw DomainError("linear part is not eta-orthogonal");
        }
    return {ConformalKind::LinearOrthogonal, linear_map(A, n, "orthogonal")};
}

// ---------------------------------------------------------------------------
// o(p+1,q+1) generators
// ---------------------------------------------------------------------------

enum class GeneratorKind { Translation, Rotation, Dilation, SpecialConformal };

struct ConformalGenerator {
    GeneratorKind kind;
    VectorField field;
    std::string label;
};

/// All (n+1)(n+2)/2 generators of o(p+1,q+1) acting on flat R^{p,q}:
/// translations d_i, rotations (eta x)_i d_j - (eta x)_j d_i, the dilation
/// x^i d_i, and special conformal 2<b,x> x - <x,x> b for b = e_i.
inline std::vector<ConformalGenerator> conformal_generators(int p, int q) {
    int n = p + q;
    std::vector<double> eta = eta_diag(p, q);
    std::vector<ConformalGenerator> out;

    for (int i = 0; i < n; ++i) {
        VectorField X;
        for (int k = 0; k < n; ++k) X.comps.push_back(ScalarField::constant(n, k == i ? 1.0 : 0.0));
        out.push_back({GeneratorKind::Translation, std::move(X), "translation_" + std::to_string(i + 1)});
    }
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            VectorField X;
            for (int k = 0; k < n; ++k) {
                ScalarField f = ScalarField::constant(n, 0.0);
                // X^k = (eta x)_i d^k_j - (eta x)_j d^k_i
                if (k == j) f = eta[i] * ScalarField::coordinate(n, i);
                if (k == i) f = f - eta[j] * ScalarField::coordinate(n, j);
                X.comps.push_back(f);
            }
            out.push_back({GeneratorKind::Rotation, std::move(X),
                           "rotation_" + std::to_string(i + 1) + std::to_string(j + 1)});
        }
    {
        VectorField X;
        for (int k = 0; k < n; ++k) X.comps.push_back(ScalarField::coordinate(n, k));
        out.push_back({GeneratorKind::Dilation, std::move(X), "dilation"});
    }
    for (int i = 0; i < n; ++i) {
        VectorField X;
        for (int k = 0; k < n; ++k) {
            int bi = i, kk = k;
            std::vector<double> et = eta;
            X.comps.push_back(ScalarField(n, [bi, kk, et, n](const Vec& x, int ord) {
                auto xs = detail::coords(x, ord);
                Jet xx = detail::eta_quad(xs, et);
                Jet bx = xs[bi] * et[bi]; // <e_i, x>
                Jet r = 2.0 * bx * xs[kk];
                if (kk == bi) r -= xx;
                return r;
            }));
        }
        out.push_back({GeneratorKind::SpecialConformal, std::move(X),
                       "special_conformal_" + std::to_string(i + 1)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// conformality detection
// ---------------------------------------------------------------------------

struct ConformalCheck {
    bool conformal = false;
    std::vector<double> factors; // F at each probe when conformal
    double worst_residual = 0;
};

/// Computes the pullback metric (Df)^T g(f x) (Df) at each probe and tests
/// proportionality to g with a positive factor.
inline ConformalCheck is_conformal(const Diffeo& f, const MetricField& g,
                                   const std::vector<Vec>& probes, double tol = 1e-9) {
    MetricField pulled = pullback_metric(f, g);
    ConformalCheck out;
    out.conformal = true;
    int n = g.dim();
    for (const Vec& x : probes) {
        auto pj = pulled.at(x, 0);
        auto gj = g.at(x, 0);
        // factor from the g-trace of the pullback
        double tr = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) tr += gj->ginv.at(i, j).value() * pj->g.at(i, j).value();
        double F = tr / n;
        double res = 0, scale = 1.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                scale = std::max(scale, std::abs(pj->g.at(i, j).value()));
                res = std::max(res,
                               std::abs(pj->g.at(i, j).value() - F * gj->g.at(i, j).value()));
            }
        res /= scale;
        out.worst_residual = std::max(out.worst_residual, res);
        if (res > tol || F <= 0) out.conformal = false;
        out.factors.push_back(F);
    }
    if (!out.conformal) out.factors.clear();
    return out;
}

/// The pullback conformal factor as a field (valid when f is conformal for g).
inline ScalarField conformal_factor_field(const Diffeo& f, const MetricField& g) {
    MetricField pulled = pullback_metric(f, g);
    int n = g.dim();
    return ScalarField(n, [pulled, g, n](const Vec& x, int k) {
        auto pj = pulled.at(x, k);
        auto gj = g.at(x, k);
        Jet tr(n, k, x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) tr += gj->ginv.at(i, j) * pj->g.at(i, j);
        return tr * (1.0 / n);
    });
}

// ---------------------------------------------------------------------------
// projective (linear-fractional) maps for the comparison cocycle
// ---------------------------------------------------------------------------

/// The affine-chart action of a matrix M in GL(n+1): x -> (A x + b)/(c.x + d)
/// where M = [[A, b], [c^T, d]]. Probes must stay away from c.x + d = 0.
inline Diffeo projective_map(const std::vector<double>& M, int n) {
    if (static_cast<int>(M.size()) != (n + 1) * (n + 1))
        throw DimensionError("projective map needs an (n+1)x(n+1) matrix");
    // inverse chart map comes from the matrix inverse
    int m = n + 1;
    std::vector<double> Minv(M);
    {
        std::vector<double> A = M, I(static_cast<size_t>(m) * m, 0.0);
        for (int i = 0; i < m; ++i) I[static_cast<size_t>(i) * m + i] = 1.0;
        for (int c = 0; c < m; ++c) {
            int piv = c;
            for (int r = c + 1; r < m; ++r)
                if (std::abs(A[r * m + c]) > std::abs(A[piv * m + c])) piv = r;
            if (std::abs(A[piv * m + c]) < 1e-14)
                throw InversionError("projective matrix is singular");
            if (piv != c)
                for (int j = 0; j < m; ++j) {
                    std::swap(A[piv * m + j], A[c * m + j]);
                    std::swap(I[piv * m + j], I[c * m + j]);
                }
            double d = 1.0 / A[c * m + c];
            for (int j = 0; j < m; ++j) {
                A[c * m + j] *= d;
                I[c * m + j] *= d;
            }
            for (int r = 0; r < m; ++r) {
                if (r == c) continue;
                double f = A[r * m + c];
                for (int j = 0; j < m; ++j) {
                    A[r * m + j] -= f * A[c * m + j];
                    I[r * m + j] -= f * I[c * m + j];
                }
            }
        }
        Minv = I;
    }
    auto mk = [n, m](std::vector<double> T) -> Diffeo::Provider {
        return [n, m, T = std::move(T)](const Vec& x, int k) {
            auto xs = detail::coords(x, k);
            Jet den = Jet::constant(n, k, x, T[static_cast<size_t>(n) * m + n]);
            for (int j = 0; j < n; ++j) den += xs[j] * T[static_cast<size_t>(n) * m + j];
            if (std::abs(den.value()) < 0.05)
                throw ProbeSingularError("probe too close to the hyperplane at infinity");
            Jet invden = den.reciprocal();
            std::vector<Jet> c;
            c.reserve(n);
            for (int i = 0; i < n; ++i) {
                Jet num = Jet::constant(n, k, x, T[static_cast<size_t>(i) * m + n]);
                for (int j = 0; j < n; ++j) num += xs[j] * T[static_cast<size_t>(i) * m + j];
                c.push_back(num * invden);
            }
            return JetMap(std::move(c));
        };
    };
    return Diffeo::from_maps(n, mk(M), mk(Minv), "projective");
}

} // namespace csd
