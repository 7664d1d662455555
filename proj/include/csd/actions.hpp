#pragma once

#include "csd/geometry.hpp"

#include <functional>
#include <memory>
#include <string>
#include <utility>

namespace csd {

// ---------------------------------------------------------------------------
// Diffeo
// ---------------------------------------------------------------------------

/// A diffeomorphism with jet-evaluable forward and inverse maps. Copies share
/// state; per-point jets are memoized. `inverted()` swaps the two directions
/// without recomputing anything.
class Diffeo {
public:
    using Provider = std::function<JetMap(const Vec&, int)>;

    Diffeo() = default;

    static Diffeo from_maps(int n, Provider fwd, Provider inv, std::string label) {
        Diffeo d;
        d.s_ = std::make_shared<State>();
        d.s_->n = n;
        d.s_->fwd = std::move(fwd);
        d.s_->inv = std::move(inv);
        d.s_->label = std::move(label);
        return d;
    }

    static Diffeo from_components(std::vector<ScalarField> fwd, std::vector<ScalarField> inv,
                                  std::string label) {
        int n = static_cast<int>(fwd.size());
        auto mk = [n](std::vector<ScalarField> comps) -> Provider {
            return [n, comps = std::move(comps)](const Vec& x, int order) {
                std::vector<Jet> js;
                js.reserve(n);
                for (const auto& c : comps) js.push_back(c.jets(x, order));
                return JetMap(std::move(js));
            };
        };
        return from_maps(n, mk(std::move(fwd)), mk(std::move(inv)), std::move(label));
    }

    /// Forward map only; the inverse is synthesized by Newton iteration plus
    /// jet inversion. Suitable for perturbations of the identity.
    static Diffeo from_forward(std::vector<ScalarField> fwd, std::string label) {
        int n = static_cast<int>(fwd.size());
        auto fvals = [fwd, n](const Vec& x, int order) {
            std::vector<Jet> js;
            js.reserve(n);
            for (const auto& c : fwd) js.push_back(c.jets(x, order));
            return JetMap(std::move(js));
        };
        Provider inv = [fvals, n](const Vec& z, int order) {
            Vec w = z;
            for (int iter = 0; iter < 60; ++iter) {
                JetMap m = fvals(w, 1);
                Vec fx = m.value();
                double err = 0;
                for (int i = 0; i < n; ++i) err = std::max(err, std::abs(fx[i] - z[i]));
                if (err < 1e-14) break;
                if (iter == 59) throw InversionError("Newton inverse failed to converge");
                std::vector<double> J = m.jacobian_values();
                // solve J d = fx - z
                Vec rhs(n);
                for (int i = 0; i < n; ++i) rhs[i] = fx[i] - z[i];
                solve_inplace(J, rhs, n);
                for (int i = 0; i < n; ++i) w[i] -= rhs[i];
            }
            JetMap inv = jet_invert_map(fvals(w, std::max(order, 1)));
            if (order == 0) {
                std::vector<Jet> cs;
                for (const auto& c : inv.comps) cs.push_back(c.truncated(0));
                return JetMap(std::move(cs));
            }
            return inv;
        };
        return from_maps(n, fvals, std::move(inv), std::move(label));
    }

    static Diffeo identity(int n) {
        return from_maps(
            n, [](const Vec& x, int k) { return JetMap::identity(x, k); },
            [](const Vec& x, int k) { return JetMap::identity(x, k); }, "identity");
    }

    /// f∘h (apply h first).
    static Diffeo compose(const Diffeo& f, const Diffeo& h) {
        int n = f.nvars();
        Diffeo fc = f, hc = h;
        Provider fwd = [fc, hc](const Vec& x, int order) {
            JetMap hm = hc.forward_jets(x, order);
            return jet_compose(fc.forward_jets(hm.value(), order), hm);
        };
        Provider inv = [fc, hc](const Vec& x, int order) {
            JetMap fi = fc.inverse_jets(x, order);
            return jet_compose(hc.inverse_jets(fi.value(), order), fi);
        };
        return from_maps(n, std::move(fwd), std::move(inv),
                         f.label() + " . " + h.label());
    }

    int nvars() const { return s_->n; }
    const std::string& label() const { return s_->label; }

    JetMap forward_jets(const Vec& x, int order) const {
        auto p = flip_ ? &State::icache : &State::fcache;
        const auto& fn = flip_ ? s_->inv : s_->fwd;
        return *((*s_).*p).get(x, order, [&] { return fn(x, order); });
    }
    JetMap inverse_jets(const Vec& x, int order) const {
        auto p = flip_ ? &State::fcache : &State::icache;
        const auto& fn = flip_ ? s_->fwd : s_->inv;
        return *((*s_).*p).get(x, order, [&] { return fn(x, order); });
    }

    Vec apply(const Vec& x) const { return forward_jets(x, 0).value(); }
    Vec apply_inverse(const Vec& x) const { return inverse_jets(x, 0).value(); }

    Diffeo inverted() const {
        Diffeo d = *this;
        d.flip_ = !flip_;
        return d;
    }

    /// max |f^{-1}(f(x)) - x| over components
    double roundtrip_residual(const Vec& x) const {
        Vec y = apply(x);
        Vec z = apply_inverse(y);
        double r = 0;
        for (size_t i = 0; i < x.size(); ++i) r = std::max(r, std::abs(z[i] - x[i]));
        return r;
    }

private:
    static void solve_inplace(std::vector<double>& A, Vec& b, int n) {
        for (int c = 0; c < n; ++c) {
            int piv = c;
            for (int r = c + 1; r < n; ++r)
                if (std::abs(A[r * n + c]) > std::abs(A[piv * n + c])) piv = r;
            if (std::abs(A[piv * n + c]) < 1e-14) throw InversionError("singular Jacobian");
            if (piv != c) {
                for (int j = 0; j < n; ++j) std::swap(A[piv * n + j], A[c * n + j]);
                std::swap(b[piv], b[c]);
            }
            for (int r = 0; r < n; ++r) {
                if (r == c) continue;
                double f = A[r * n + c] / A[c * n + c];
                for (int j = c; j < n; ++j) A[r * n + j] -= f * A[c * n + j];
                b[r] -= f * b[c];
            }
        }
        for (int i = 0; i < n; ++i) b[i] /= A[i * n + i];
    }

    struct State {
        int n = 0;
        Provider fwd, inv;
        std::string label;
        PointCache<JetMap> fcache, icache;
    };
    std::shared_ptr<State> s_;
    bool flip_ = false;
};

// ---------------------------------------------------------------------------
// density and symbol actions
// ---------------------------------------------------------------------------

namespace detail {

/// (det D f^{-1})^w at x with the orientation contract: fractional powers
/// demand a positive determinant.
inline Jet jacobian_power(const JetMap& inv_jets, const Rational& w, int order) {
    std::vector<Jet> J;
    J.reserve(static_cast<size_t>(inv_jets.out_dim()) * inv_jets.in_dim());
    for (const auto& c : inv_jets.comps)
        for (int j = 0; j < inv_jets.in_dim(); ++j) J.push_back(c.partial(j));
    Jet det = jet_det(J, inv_jets.in_dim()).truncated(order);
    if (w.is_zero()) return Jet::constant(det.nvars(), order, det.base(), 1.0);
    if (det.value() <= 0.0 && !w.is_integer())
        throw OrientationError("fractional power of non-positive Jacobian (weight " + w.str() + ")");
    return pow(det, w);
}

} // namespace detail

/// f*phi = phi∘f^{-1} · (J_{f^{-1}})^lambda, expanded at x.
inline Jet pullback_density(const Diffeo& f, const DensityField& phi, const Vec& x, int order) {
    JetMap inv = f.inverse_jets(x, order + 1);
    Vec w = inv.value();
    JetMap invK{[&] {
        std::vector<Jet> cs;
        cs.reserve(inv.comps.size());
        for (const auto& c : inv.comps) cs.push_back(c.truncated(order));
        return cs;
    }()};
    Jet comp = jet_compose(phi.value.jets(w, order), invK);
    return comp * detail::jacobian_power(inv, phi.weight, order);
}

inline DensityField pullback_density_field(const Diffeo& f, const DensityField& phi) {
    int n = f.nvars();
    return DensityField{phi.weight, ScalarField(n, [f, phi](const Vec& x, int k) {
                            return pullback_density(f, phi, x, k);
                        })};
}

/// The natural left action of f on tensor densities: `up` contravariant
/// indices (first), `low` covariant indices, density weight w. Components come
/// from the preimage point; contravariant slots transform with Df at the
/// preimage (the inverse of the f^{-1}-Jacobian), covariant slots with the
/// f^{-1}-Jacobian itself, and everything scales by (det D f^{-1})^w.
inline JTensor act_tensor_jets(const Diffeo& f, int up, int low, const Rational& w,
                               const std::function<JTensor(const Vec&, int)>& provider,
                               const Vec& x, int order) {
    int n = f.nvars();
    int rank = up + low;
    JetMap inv = f.inverse_jets(x, order + 1);
    Vec pre = inv.value();
    JetMap invK{[&] {
        std::vector<Jet> cs;
        cs.reserve(inv.comps.size());
        for (const auto& c : inv.comps) cs.push_back(c.truncated(order));
        return cs;
    }()};

    JTensor Pw = provider(pre, order);
    JTensor Pc(n, rank, Jet(n, order, x));
    for (size_t i = 0; i < Pc.v.size(); ++i) Pc.v[i] = jet_compose(Pw.v[i], invK);

    Jet jpow = detail::jacobian_power(inv, w, order);
    if (rank == 0) {
        Pc.v[0] *= jpow;
        return Pc;
    }

    std::vector<Jet> B; // Jacobian of f^{-1} at x
    B.reserve(static_cast<size_t>(n) * n);
    for (const auto& c : inv.comps)
        for (int j = 0; j < n; ++j) B.push_back(c.partial(j));
    std::vector<Jet> Binv = jet_mat_inverse(B, n);
    for (auto& j : B) j = j.truncated(order);
    for (auto& j : Binv) j = j.truncated(order);

    JTensor out(n, rank, Jet(n, order, x));
    std::array<int, 8> id{}, src{};
    for (size_t fl = 0; fl < out.v.size(); ++fl) {
        out.digits(fl, id.data());
        Jet acc(n, order, x);
        // sum over all source index assignments
        size_t total = Pc.v.size();
        for (size_t sfl = 0; sfl < total; ++sfl) {
            Pc.digits(sfl, src.data());
            Jet factor = Pc.v[sfl];
            for (int r = 0; r < rank; ++r) {
                const Jet& m = r < up ? Binv[static_cast<size_t>(id[r]) * n + src[r]]
                                      : B[static_cast<size_t>(src[r]) * n + id[r]];
                factor *= m;
            }
            acc += factor;
        }
        out.v[fl] = acc * jpow;
    }
    return out;
}

/// Weight-delta action on pure contravariant symbols (degree <= 2).
inline JTensor act_symbol_jets(const Diffeo& f, int degree, const Rational& delta,
                               const std::function<JTensor(const Vec&, int)>& provider,
                               const Vec& x, int order) {
    if (degree > 2) throw DomainError("symbol action supports degree <= 2");
    return act_tensor_jets(f, degree, 0, delta, provider, x, order);
}

/// f_delta(P) at a point.
inline JTensor act_symbol(const Diffeo& f, const SymbolField& P, const Vec& x, int order) {
    return act_symbol_jets(
        f, P.degree(), P.weight(), [&](const Vec& w, int k) { return P.jets(w, k); }, x, order);
}

/// f_delta(P) as a lazy symbol field with a shared per-point memo.
inline SymbolField act_symbol_field(const Diffeo& f, const SymbolField& P) {
    int n = P.dim();
    int deg = P.degree();
    auto cache = std::make_shared<PointCache<JTensor>>();
    auto eval = [f, P, cache](const Vec& x, int k) {
        return cache->get(x, k, [&] { return act_symbol(f, P, x, k); });
    };
    size_t sz = 1;
    for (int i = 0; i < deg; ++i) sz *= n;
    std::vector<ScalarField> comps(sz);
    for (size_t fl = 0; fl < sz; ++fl)
        comps[fl] = ScalarField(n, [eval, fl](const Vec& x, int k) { return eval(x, k)->v[fl]; });
    return SymbolField(n, deg, P.weight(), std::move(comps));
}

/// f_{lambda,mu}(A) = f* ∘ A ∘ f*^{-1} applied to phi, as a lazy field.
using DensityOperator = std::function<ScalarField(const DensityField&)>;

inline ScalarField act_operator_field(const Diffeo& f, const Rational& lam, const Rational& mu,
                                      const DensityOperator& A, const DensityField& phi) {
    DensityField pulled = pullback_density_field(f.inverted(), phi);
    ScalarField mid = A(pulled);
    DensityField out{mu, mid};
    return pullback_density_field(f, out).value;
}

inline Jet act_operator(const Diffeo& f, const Rational& lam, const Rational& mu,
                        const DensityOperator& A, const DensityField& phi, const Vec& x,
                        int order) {
    return act_operator_field(f, lam, mu, A, phi).jets(x, order);
}

// ---------------------------------------------------------------------------
// the tensor ell(f) = f*Gamma - Gamma and Lie derivatives of the connection
// ---------------------------------------------------------------------------

/// Symmetric (2,1)-tensor data at a point: components U^k_ij plus the trace
/// U_j = U^t_{tj}.
struct Tensor21 {
    JTensor comp; // (k,i,j)
    std::vector<Jet> trace;
};

/// Lazy, memoized (2,1)-tensor field.
class Tensor21Field {
public:
    using Fn = std::function<Tensor21(const Vec&, int)>;
    Tensor21Field() = default;
    Tensor21Field(int n, Fn fn)
        : n_(n), fn_(std::move(fn)), cache_(std::make_shared<PointCache<Tensor21>>()) {}

    int nvars() const { return n_; }
    std::shared_ptr<const Tensor21> at(const Vec& x, int order) const {
        return cache_->get(x, order, [&] { return fn_(x, order); });
    }

private:
    int n_ = 0;
    Fn fn_;
    std::shared_ptr<PointCache<Tensor21>> cache_;
};

namespace detail {

inline Tensor21 make_tensor21(JTensor comp) {
    int n = comp.n;
    Tensor21 t;
    t.trace.assign(n, Jet(n, comp.v[0].order(), comp.v[0].base()));
    for (int j = 0; j < n; ++j)
        for (int s = 0; s < n; ++s) t.trace[j] += comp.at(s, s, j);
    t.comp = std::move(comp);
    return t;
}

} // namespace detail

/// Pullback of the Levi-Civita connection through f minus the connection:
/// ell(identity) = 0, and in the 1-D model ell(f)^1_11 = f''/f'.
inline Tensor21 ell(const Diffeo& f, const MetricField& g, const Vec& x, int order) {
    int n = g.dim();
    JetMap fw = f.forward_jets(x, order + 2);
    Vec y = fw.value();
    JetMap fwK{[&] {
        std::vector<Jet> cs;
        cs.reserve(fw.comps.size());
        for (const auto& c : fw.comps) cs.push_back(c.truncated(order));
        return cs;
    }()};

    std::vector<Jet> A; // A(a,i) = d f^a / dx^i, order+1
    A.reserve(static_cast<size_t>(n) * n);
    for (const auto& c : fw.comps)
        for (int j = 0; j < n; ++j) A.push_back(c.partial(j));
    std::vector<Jet> Ainv = jet_mat_inverse(A, n);

    auto connY = g.christoffel_at(y, order);
    JTensor Gy(n, 3, Jet(n, order, x));
    for (size_t fl = 0; fl < Gy.v.size(); ++fl) Gy.v[fl] = jet_compose(connY->gamma.v[fl], fwK);

    auto connX = g.christoffel_at(x, order);

    JTensor comp(n, 3, Jet(n, order, x));
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                Jet acc(n, order, x);
                for (int c = 0; c < n; ++c) {
                    Jet inner = fw.comps[c].partial(i).partial(j); // Hessian, order
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < n; ++b)
                            inner += A[a * n + i].truncated(order) * A[b * n + j].truncated(order) *
                                     Gy.at(c, a, b);
                    acc += Ainv[k * n + c].truncated(order) * inner;
                }
                acc -= connX->gamma.at(k, i, j);
                comp.at(k, i, j) = acc;
                comp.at(k, j, i) = acc;
            }
    return detail::make_tensor21(std::move(comp));
}

inline Tensor21Field ell_field(const Diffeo& f, const MetricField& g) {
    return Tensor21Field(g.dim(),
                         [f, g](const Vec& x, int k) { return ell(f, g, x, k); });
}

/// L_X of the Levi-Civita connection:
/// (L_X ∇)^k_ij = X^a d_a Γ^k_ij - Γ^s_ij d_s X^k + d_i X^a Γ^k_aj + d_j X^a Γ^k_ia + d_i d_j X^k.
inline Tensor21 lie_connection(const VectorField& X, const MetricField& g, const Vec& x,
                               int order) {
    int n = g.dim();
    auto conn = g.christoffel_at(x, order + 1);
    std::vector<Jet> Xj;
    Xj.reserve(n);
    for (const auto& c : X.comps) Xj.push_back(c.jets(x, order + 2));

    JTensor comp(n, 3, Jet(n, order, x));
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                Jet acc = Xj[k].partial(i).partial(j).truncated(order);
                for (int a = 0; a < n; ++a) {
                    acc += Xj[a].truncated(order) * conn->gamma.at(k, i, j).partial(a);
                    acc -= conn->gamma.at(a, i, j).truncated(order) * Xj[k].partial(a).truncated(order);
                    acc += Xj[a].partial(i).truncated(order) * conn->gamma.at(k, a, j).truncated(order);
                    acc += Xj[a].partial(j).truncated(order) * conn->gamma.at(k, i, a).truncated(order);
                }
                comp.at(k, i, j) = acc;
                comp.at(k, j, i) = acc;
            }
    return detail::make_tensor21(std::move(comp));
}

inline Tensor21Field lie_connection_field(const VectorField& X, const MetricField& g) {
    return Tensor21Field(g.dim(),
                         [X, g](const Vec& x, int k) { return lie_connection(X, g, x, k); });
}

/// Pullback of a (2,1)-tensor field through h (the action appearing in the
/// cocycle law for ell): (h#U)^k_ij(x) = (Dh)^{-1 k}_c (Dh)^a_i (Dh)^b_j U^c_ab(h x).
inline Tensor21 pullback_tensor21(const Diffeo& h, const Tensor21Field& U, const Vec& x,
                                  int order) {
    int n = h.nvars();
    JetMap fw = h.forward_jets(x, order + 1);
    Vec y = fw.value();
    JetMap fwK{[&] {
        std::vector<Jet> cs;
        for (const auto& c : fw.comps) cs.push_back(c.truncated(order));
        return cs;
    }()};
    std::vector<Jet> A;
    for (const auto& c : fw.comps)
        for (int j = 0; j < n; ++j) A.push_back(c.partial(j));
    std::vector<Jet> Ainv = jet_mat_inverse(A, n);

    auto Uy = U.at(y, order);
    JTensor Uc(n, 3, Jet(n, order, x));
    for (size_t fl = 0; fl < Uc.v.size(); ++fl) Uc.v[fl] = jet_compose(Uy->comp.v[fl], fwK);

    JTensor comp(n, 3, Jet(n, order, x));
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                Jet acc(n, order, x);
                for (int c = 0; c < n; ++c) {
                    Jet inner(n, order, x);
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < n; ++b)
                            inner += A[a * n + i].truncated(order) * A[b * n + j].truncated(order) *
                                     Uc.at(c, a, b);
                    acc += Ainv[k * n + c].truncated(order) * inner;
                }
                comp.at(k, i, j) = acc;
            }
    return detail::make_tensor21(std::move(comp));
}

// ---------------------------------------------------------------------------
// Lie derivative of symbols (weight-delta infinitesimal action)
// ---------------------------------------------------------------------------

/// L^delta_X P = L_X P + delta (div X) P on a degree-<=2 symbol; this is the
/// infinitesimal version of the f_delta action (up to the global sign fixed by
/// the flow-derivative tests).
inline JTensor lie_symbol_jets(const VectorField& X, const SymbolField& P, const Vec& x,
                               int order) {
    int n = P.dim();
    int deg = P.degree();
    double delta = P.weight().to_double();
    std::vector<Jet> Xj;
    for (const auto& c : X.comps) Xj.push_back(c.jets(x, order + 1));
    JTensor Pj = P.jets(x, order + 1);
    Jet div(n, order, x);
    for (int a = 0; a < n; ++a) div += Xj[a].partial(a);

    JTensor out(n, deg, Jet(n, order, x));
    std::array<int, 4> id{};
    for (size_t f = 0; f < out.v.size(); ++f) {
        out.digits(f, id.data());
        Jet acc(n, order, x);
        for (int a = 0; a < n; ++a)
            acc += Xj[a].truncated(order) * Pj.v[f].partial(a);
        for (int r = 0; r < deg; ++r) {
            int keep = id[r];
            for (int a = 0; a < n; ++a) {
                id[r] = a;
                size_t sf = 0;
                for (int rr = 0; rr < deg; ++rr) sf = sf * n + id[rr];
                acc -= Xj[keep].partial(a).truncated(order) * Pj.v[sf].truncated(order);
            }
            id[r] = keep;
        }
        acc += delta * (div * Pj.v[f].truncated(order));
        out.v[f] = acc;
    }
    return out;
}

inline SymbolField lie_symbol_field(const VectorField& X, const SymbolField& P) {
    int n = P.dim();
    int deg = P.degree();
    auto cache = std::make_shared<PointCache<JTensor>>();
    auto eval = [X, P, cache](const Vec& x, int k) {
        return cache->get(x, k, [&] { return lie_symbol_jets(X, P, x, k); });
    };
    size_t sz = 1;
    for (int i = 0; i < deg; ++i) sz *= n;
    std::vector<ScalarField> comps(sz);
    for (size_t fl = 0; fl < sz; ++fl)
        comps[fl] = ScalarField(n, [eval, fl](const Vec& x, int k) { return eval(x, k)->v[fl]; });
    return SymbolField(n, deg, P.weight(), std::move(comps));
}

// ---------------------------------------------------------------------------
// flow of a vector field (Taylor time stepping in the jet algebra)
// ---------------------------------------------------------------------------

namespace detail {

/// One Taylor step of length t: the flow's space-jet coefficients are advanced
/// through the recurrence  W_{i,b}' = sum_a W_{i,b+e_a} * Phi^a',  where
/// W_{i,b}(t) is the jet of (d^b X^i) along the flow.
inline JetMap flow_taylor_step(const VectorField& X, double t, const Vec& x0, int order,
                               int torder) {
    int n = static_cast<int>(x0.size());
    const MultiIndexTable* bt = MultiIndexTable::get(n, torder);

    // x-jets of all d^b X^i at x0, truncated to `order`
    std::vector<std::vector<Jet>> W0(n); // [i][b]
    for (int i = 0; i < n; ++i) {
        Jet lift = X.comps[i].jets(x0, order + torder);
        W0[i].resize(bt->count, Jet(n, order, x0));
        for (int b = 0; b < bt->count; ++b) {
            Jet d = lift;
            const int* e = bt->exp_at(b);
            for (int v = 0; v < n; ++v)
                for (int r = 0; r < e[v]; ++r) d = d.partial(v);
            W0[i][b] = d.truncated(order);
        }
    }

    // W[i][b][m]: t^m coefficient; only m + deg(b) <= torder is ever used
    std::vector<std::vector<std::vector<Jet>>> W(n);
    for (int i = 0; i < n; ++i) {
        W[i].resize(bt->count);
        for (int b = 0; b < bt->count; ++b) W[i][b].push_back(W0[i][b]);
    }

    std::vector<std::vector<Jet>> c(torder + 1); // c[m][a]
    {
        JetMap id = JetMap::identity(x0, order);
        c[0] = id.comps;
    }
    for (int m = 0; m < torder; ++m) {
        c[m + 1].clear();
        for (int a = 0; a < n; ++a) c[m + 1].push_back(W[a][0][m] * (1.0 / (m + 1)));
        for (int i = 0; i < n; ++i)
            for (int b = 0; b < bt->count; ++b) {
                if (bt->deg[b] + m + 1 > torder) continue;
                Jet acc(n, order, x0);
                for (int r = 0; r <= m; ++r)
                    for (int a = 0; a < n; ++a) {
                        MultiIndex up(bt->exp_at(b), bt->exp_at(b) + n);
                        up[a] += 1;
                        int bu = bt->index_of(up);
                        acc += W[i][bu][r] * ((m - r + 1.0) * c[m - r + 1][a]);
                    }
                W[i][b].push_back(acc * (1.0 / (m + 1)));
            }
    }

    std::vector<Jet> comps;
    comps.reserve(n);
    for (int a = 0; a < n; ++a) {
        Jet acc = c[torder][a];
        for (int m = torder - 1; m >= 0; --m) acc = acc * t + c[m][a];
        comps.push_back(std::move(acc));
    }
    return JetMap(std::move(comps));
}

} // namespace detail

/// Jet of the time-t flow of X at x. Steps are halved until the forward and
/// backward half-step jets compose to the identity within 1e-10.
inline JetMap flow_map(const VectorField& X, double t, const Vec& x, int order,
                       int time_order = 8) {
    int n = static_cast<int>(x.size());
    if (t == 0.0) return JetMap::identity(x, order);
    int steps = 1;
    for (int attempt = 0; attempt < 10; ++attempt) {
        double h = t / steps;
        JetMap total = detail::flow_taylor_step(X, h, x, order, time_order);
        for (int s = 1; s < steps; ++s)
            total = jet_compose(detail::flow_taylor_step(X, h, total.value(), order, time_order),
                                total);
        // round-trip check
        JetMap back = detail::flow_taylor_step(X, -h, total.value(), order, time_order);
        for (int s = 1; s < steps; ++s)
            back = jet_compose(detail::flow_taylor_step(X, -h, back.value(), order, time_order),
                               back);
        JetMap round = jet_compose(back, total);
        JetMap id = JetMap::identity(x, order);
        double err = 0;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < round.comps[i].size(); ++k)
                err = std::max(err, std::abs(round.comps[i][k] - id.comps[i][k]));
        if (err < 1e-10) return total;
        steps *= 2;
        if (steps > 512) throw Error("flow_map: step-size underflow before reaching tolerance");
    }
    throw Error("flow_map: failed to converge");
}

/// The flow as a Diffeo (forward t, backward -t).
inline Diffeo flow_diffeo(const VectorField& X, double t, int time_order = 8) {
    int n = X.nvars();
    return Diffeo::from_maps(
        n,
        [X, t, time_order](const Vec& x, int k) { return flow_map(X, t, x, k, time_order); },
        [X, t, time_order](const Vec& x, int k) { return flow_map(X, -t, x, k, time_order); },
        "flow(t=" + std::to_string(t) + ")");
}

// ---------------------------------------------------------------------------
// pullback metric and the rescaling identity report
// ---------------------------------------------------------------------------

/// psi#g: components (Dpsi)^a_i (Dpsi)^b_j g_ab(psi x), as a lazy metric.
inline MetricField pullback_metric(const Diffeo& psi, const MetricField& g) {
    int n = g.dim();
    auto cache = std::make_shared<PointCache<JTensor>>();
    auto eval = [psi, g, cache, n](const Vec& x, int order) {
        return cache->get(x, order, [&] {
            JetMap fw = psi.forward_jets(x, order + 1);
            Vec y = fw.value();
            JetMap fwK{[&] {
                std::vector<Jet> cs;
                for (const auto& c : fw.comps) cs.push_back(c.truncated(order));
                return cs;
            }()};
            std::vector<Jet> A;
            for (const auto& c : fw.comps)
                for (int j = 0; j < n; ++j) A.push_back(c.partial(j));
            auto gy = g.at(y, order);
            JTensor out(n, 2, Jet(n, order, x));
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Jet acc(n, order, x);
                    for (int a = 0; a < n; ++a)
                        for (int b = 0; b < n; ++b)
                            acc += A[a * n + i].truncated(order) * A[b * n + j].truncated(order) *
                                   jet_compose(gy->g.at(a, b), fwK);
                    out.at(i, j) = acc;
                }
            return out;
        });
    };
    std::vector<ScalarField> comps(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            size_t fl = static_cast<size_t>(i) * n + j;
            comps[fl] = ScalarField(n, [eval, fl](const Vec& x, int k) { return eval(x, k)->v[fl]; });
        }
    return MetricField(g.sig_p(), g.sig_q(), std::move(comps));
}

struct RescalingReport {
    struct Item {
        std::string name;
        double residual;
    };
    std::vector<Item> items;

    double max_residual() const {
        double m = 0;
        for (const auto& it : items) m = std::max(m, it.residual);
        return m;
    }
};

namespace detail {

inline double tensor_residual(const JTensor& a, const JTensor& b) {
    double scale = std::max(1.0, std::max(a.max_abs_value(), b.max_abs_value()));
    double r = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        Jet d = a.v[i] - b.v[i];
        for (int k = 0; k < d.size(); ++k) r = std::max(r, std::abs(d[k]));
    }
    return r / scale;
}

} // namespace detail

/// Evaluates both sides of the printed conformal-rescaling identities for
/// g~ = F g and returns the worst residual per identity.
inline RescalingReport verify_rescaling_identities(const MetricField& g, const ScalarField& F,
                                                   const SymbolField& P,
                                                   const std::optional<Diffeo>& f, const Vec& x) {
    int n = g.dim();
    double delta = P.weight().to_double();
    MetricField gt = conformally_scaled(g, F);
    RescalingReport rep;

    auto mg = g.at(x, 1);
    Jet Fx = F.jets(x, 2);
    std::vector<Jet> dF(n);
    for (int i = 0; i < n; ++i) dF[i] = Fx.partial(i);
    Jet inv2F = (Fx.truncated(1) * 2.0).reciprocal();

    // (1) Gamma~ = Gamma + (1/2F)(F_i d^k_j + F_j d^k_i - F_t g^{tk} g_ij)
    {
        auto ct = gt.christoffel_at(x, 1);
        auto c = g.christoffel_at(x, 1);
        JTensor rhs(n, 3, Jet(n, 1, x));
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Jet acc = c->gamma.at(k, i, j).truncated(1);
                    Jet corr(n, 1, x);
                    if (k == j) corr += dF[i].truncated(1);
                    if (k == i) corr += dF[j].truncated(1);
                    for (int t = 0; t < n; ++t)
                        corr -= dF[t].truncated(1) * mg->ginv.at(t, k) * mg->g.at(i, j);
                    acc += inv2F * corr;
                    rhs.at(k, i, j) = acc;
                }
        rep.items.push_back({"gamma_rescaling", detail::tensor_residual(ct->gamma.truncated(1), rhs)});
    }

    // (2) nabla~_k P^{ij} = nabla_k P^{ij}
    //     + (1/2F)( Sym_{i,j} P^{mi}(F_m d^j_k - F_t g^{tj} g_{km}) + (2 - n delta) P^{ij} F_k )
    {
        JTensor lhs = covderiv_symbol_jets(gt, P, x, 1);
        JTensor d = covderiv_symbol_jets(g, P, x, 1);
        JTensor Pj = P.jets(x, 1);
        JTensor rhs(n, 3, Jet(n, 1, x));
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Jet corr(n, 1, x);
                    auto term = [&](int ii, int jj) {
                        Jet s(n, 1, x);
                        for (int m = 0; m < n; ++m) {
                            Jet br(n, 1, x);
                            if (k == jj) br += dF[m].truncated(1);
                            for (int t = 0; t < n; ++t)
                                br -= dF[t].truncated(1) * mg->ginv.at(t, jj) * mg->g.at(k, m);
                            // careful: bracket is F_m d^j_k - F_t g^{tj} g_{km}
                            s += Pj.at(m, ii) * br;
                        }
                        return s;
                    };
                    corr += term(i, j) + term(j, i);
                    corr += (2.0 - n * delta) * (Pj.at(i, j) * dF[k].truncated(1));
                    rhs.at(k, i, j) = d.at(k, i, j) + inv2F * corr;
                }
        rep.items.push_back({"symbol_covderiv_rescaling", detail::tensor_residual(lhs, rhs)});
    }

    // (6) R~ = (1/F)(R - (n-1)(1/F)(g^{ij} nabla_i F_j + (n-6)(1/4F) g^{ij} F_i F_j))
    {
        Jet lhs = gt.curvature_at(x, 0)->scalar;
        auto conn = g.christoffel_at(x, 0);
        Jet lap(n, 0, x), grad2(n, 0, x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                Jet hess = Fx.partial(i).partial(j).truncated(0);
                for (int t = 0; t < n; ++t)
                    hess -= conn->gamma.at(t, i, j) * dF[t].truncated(0);
                lap += mg->ginv.at(i, j).truncated(0) * hess;
                grad2 += mg->ginv.at(i, j).truncated(0) * dF[i].truncated(0) * dF[j].truncated(0);
            }
        Jet F0 = Fx.truncated(0);
        Jet R = g.curvature_at(x, 0)->scalar;
        Jet rhs = (R - (n - 1.0) * ((lap + (n - 6.0) * grad2 / (4.0 * F0)) / F0)) / F0;
        Jet diff = lhs - rhs;
        double scale = std::max({1.0, std::abs(lhs.value()), std::abs(rhs.value())});
        rep.items.push_back({"scalar_curvature_rescaling", std::abs(diff.value()) / scale});
    }

    // (4) nabla~_l nabla~_k P^{ij} expansion in terms of nabla (g) of nabla~ P
    {
        JTensor lhs = covderiv2_symbol_jets(gt, P, x, 0); // (l,k,i,j)
        JTensor W = covderiv_symbol_jets(gt, P, x, 1);    // (k,i,j) = nabla~_k P^ij, order 1
        // permute to (i,j,k) and apply the g-covariant derivative (u=2,l=1,w=delta)
        JTensor perm(n, 3, Jet(n, 1, x));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) perm.at(i, j, k) = W.at(k, i, j);
        auto conn0 = g.christoffel_at(x, 0);
        JTensor dW = covderiv_tensor(perm, 2, 1, delta, *conn0); // (l,i,j,k)
        JTensor rhs(n, 4, Jet(n, 0, x));
        for (int l = 0; l < n; ++l)
            for (int k = 0; k < n; ++k)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j) {
                        Jet acc = dW.at(l, i, j, k);
                        Jet corr = (1.0 - delta * n) * (dF[l].truncated(0) * W.at(k, i, j).truncated(0));
                        corr -= dF[k].truncated(0) * W.at(l, i, j).truncated(0);
                        for (int s = 0; s < n; ++s)
                            for (int t = 0; t < n; ++t)
                                corr += mg->ginv.at(s, t).truncated(0) * mg->g.at(l, k).truncated(0) *
                                        dF[s].truncated(0) * W.at(t, i, j).truncated(0);
                        auto sym = [&](int ii, int jj) {
                            Jet s2(n, 0, x);
                            for (int m = 0; m < n; ++m) {
                                Jet br(n, 0, x);
                                if (l == jj) br += dF[m].truncated(0);
                                for (int s = 0; s < n; ++s)
                                    br -= mg->ginv.at(s, jj).truncated(0) * mg->g.at(m, l).truncated(0) *
                                          dF[s].truncated(0);
                                s2 += W.at(k, m, ii).truncated(0) * br;
                            }
                            return s2;
                        };
                        corr += sym(i, j) + sym(j, i);
                        acc += inv2F.truncated(0) * corr;
                        rhs.at(l, k, i, j) = acc;
                    }
        rep.items.push_back({"symbol_covderiv2_rescaling", detail::tensor_residual(lhs, rhs)});
    }

    if (f) {
        // (3) ell~(f) = ell(f) + f#(Delta) - Delta with Delta the Gamma correction,
        //     written with the starred (pulled-back) F and g exactly as printed
        Tensor21 lt = ell(*f, gt, x, 0);
        Tensor21 l = ell(*f, g, x, 0);
        JetMap fw = f->forward_jets(x, 1);
        Vec y = fw.value();
        JetMap fw0{[&] {
            std::vector<Jet> cs;
            for (const auto& c : fw.comps) cs.push_back(c.truncated(0));
            return cs;
        }()};
        std::vector<Jet> A;
        for (const auto& c : fw.comps)
            for (int j = 0; j < n; ++j) A.push_back(c.partial(j));
        std::vector<Jet> Ainv = jet_mat_inverse(A, n);
        auto mgy = g.at(y, 0);
        Jet Fy = F.jets(y, 1);
        // starred quantities at x
        std::vector<Jet> Fs(n);
        for (int i = 0; i < n; ++i) {
            Fs[i] = Jet(n, 0, x);
            for (int a = 0; a < n; ++a)
                Fs[i] += A[a * n + i].truncated(0) * jet_compose(Fy.partial(a), fw0);
        }
        JTensor gs(n, 2, Jet(n, 0, x)), gsu(n, 2, Jet(n, 0, x));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                Jet acc(n, 0, x), accu(n, 0, x);
                for (int a = 0; a < n; ++a)
                    for (int b = 0; b < n; ++b) {
                        acc += A[a * n + i].truncated(0) * A[b * n + j].truncated(0) *
                               jet_compose(mgy->g.at(a, b), fw0);
                        accu += Ainv[i * n + a].truncated(0) * Ainv[j * n + b].truncated(0) *
                                jet_compose(mgy->ginv.at(a, b), fw0);
                    }
                gs.at(i, j) = acc;
                gsu.at(i, j) = accu;
            }
        Jet Fcf = jet_compose(Fy.truncated(0), fw0);
        JTensor rhs(n, 3, Jet(n, 0, x));
        for (int k = 0; k < n; ++k)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    Jet star(n, 0, x), plain(n, 0, x);
                    if (k == j) star += Fs[i];
                    if (k == i) star += Fs[j];
                    for (int t = 0; t < n; ++t) star -= Fs[t] * gsu.at(t, k) * gs.at(i, j);
                    if (k == j) plain += dF[i].truncated(0);
                    if (k == i) plain += dF[j].truncated(0);
                    for (int t = 0; t < n; ++t)
                        plain -= dF[t].truncated(0) * mg->ginv.at(t, k).truncated(0) *
                                 mg->g.at(i, j).truncated(0);
                    rhs.at(k, i, j) = l.comp.at(k, i, j) + star / (2.0 * Fcf) -
                                      plain * inv2F.truncated(0);
                }
        rep.items.push_back({"ell_rescaling", detail::tensor_residual(lt.comp, rhs)});

        // (5) nabla~_l ell~(f) expansion through the g-covariant derivative
        {
            Tensor21 lt1 = ell(*f, gt, x, 1);
            auto connt0 = gt.christoffel_at(x, 0);
            JTensor lhs5 = covderiv_tensor(lt1.comp, 1, 2, 0.0, *connt0); // (l,k,i,j)
            auto conn0 = g.christoffel_at(x, 0);
            JTensor dl = covderiv_tensor(lt1.comp, 1, 2, 0.0, *conn0);
            JTensor rhs5(n, 4, Jet(n, 0, x));
            for (int l = 0; l < n; ++l)
                for (int k = 0; k < n; ++k)
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < n; ++j) {
                            Jet acc = dl.at(l, k, i, j);
                            Jet corr = -1.0 * (dF[l].truncated(0) * lt1.comp.at(k, i, j).truncated(0));
                            for (int t = 0; t < n; ++t) {
                                Jet br(n, 0, x);
                                if (k == l) br += dF[t].truncated(0);
                                for (int s = 0; s < n; ++s)
                                    br -= mg->ginv.at(s, k).truncated(0) * mg->g.at(t, l).truncated(0) *
                                          dF[s].truncated(0);
                                corr += br * lt1.comp.at(t, i, j).truncated(0);
                            }
                            auto sym = [&](int ii, int jj) {
                                Jet s2(n, 0, x);
                                for (int s = 0; s < n; ++s) {
                                    Jet br(n, 0, x);
                                    if (s == l) br += dF[ii].truncated(0);
                                    for (int m = 0; m < n; ++m)
                                        br -= dF[m].truncated(0) * mg->ginv.at(m, s).truncated(0) *
                                              mg->g.at(ii, l).truncated(0);
                                    s2 += br * lt1.comp.at(k, jj, s).truncated(0);
                                }
                                return s2;
                            };
                            corr -= sym(i, j) + sym(j, i);
                            acc += inv2F.truncated(0) * corr;
                            rhs5.at(l, k, i, j) = acc;
                        }
            rep.items.push_back({"ell_covderiv_rescaling", detail::tensor_residual(lhs5, rhs5)});
        }
    }

    return rep;
}

} // namespace csd
