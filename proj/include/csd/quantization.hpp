#pragma once

#include "csd/cocycles.hpp"

#include <optional>
#include <string>
#include <vector>

namespace csd {

// ---------------------------------------------------------------------------
// coefficient families for the quantization maps
// ---------------------------------------------------------------------------

namespace detail {

/// num/den with the resonance contract: a vanishing numerator kills the term
/// outright, a vanishing denominator under a nonzero numerator is a resonance.
inline Rational safe_ratio(const Rational& num, const Rational& den, const std::string& what) {
    if (num.is_zero()) return Rational(0);
    if (den.is_zero()) throw ResonanceError("resonant weight in " + what, what);
    return num / den;
}

} // namespace detail

/// Excluded weights for the degree-2 map: 2/n, (n+2)/2n, (n+1)/n, (n+2)/n.
inline void check_q2_resonance(int n, const Rational& delta) {
    const std::pair<Rational, const char*> excluded[] = {
        {Rational(2, n), "delta = 2/n"},
        {Rational(n + 2, 2 * n), "delta = (n+2)/2n"},
        {Rational(n + 1, n), "delta = (n+1)/n"},
        {Rational(n + 2, n), "delta = (n+2)/n"},
    };
    for (const auto& [v, name] : excluded)
        if (delta == v)
            throw ResonanceError(std::string("degree-2 quantization excludes ") + name, name);
}

inline void check_surface_resonance(const Rational& delta) {
    const std::pair<Rational, const char*> excluded[] = {
        {Rational(1), "delta = 1"},
        {Rational(2), "delta = 2"},
        {Rational(3, 2), "delta = 3/2"},
        {Rational(5, 2), "delta = 5/2"},
    };
    for (const auto& [v, name] : excluded)
        if (delta == v)
            throw ResonanceError(std::string("surface quantization excludes ") + name, name);
}

/// alpha1..alpha6 for the degree-2 map (n > 2), plus the first-order alpha.
/// For n = 2 only alpha1..alpha4 exist (the curvature terms are replaced by
/// the Osgood-Stowe correction of the surface map).
inline CoefficientSet coeff_alpha(int n, const Rational& lam, const Rational& mu) {
    CoefficientSet cs;
    cs.family = "alpha";
    cs.n = n;
    cs.lambda = lam;
    cs.mu = mu;
    Rational delta = mu - lam;
    cs.delta = delta;
    if (n > 2) check_q2_resonance(n, delta);
    else check_surface_resonance(delta);

    Rational one(1);
    Rational A = Rational(2) + Rational(n) * (one - delta);       // 2 + n(1-d)
    Rational B = Rational(1) + Rational(n) * (one - delta);       // 1 + n(1-d)
    Rational C = Rational(2) + Rational(n) * (one - delta * 2);   // 2 + n(1-2d)
    Rational D = Rational(2) - Rational(n) * delta;               // 2 - nd
    Rational nl1 = Rational(n) * lam + 1;

    cs.values.emplace_back("alpha1", detail::safe_ratio(nl1 * 2, A, "alpha1"));
    cs.values.emplace_back("alpha2",
                           detail::safe_ratio(Rational(n) * (lam + mu - one), A * D, "alpha2"));
    cs.values.emplace_back("alpha3",
                           detail::safe_ratio(Rational(n) * lam * nl1, B * A, "alpha3"));
    Rational num4 = Rational(n) * lam *
                    (Rational(n) * n * mu * (Rational(2) - lam - mu) + nl1 * nl1 * 2 -
                     Rational(n) * (n + 1));
    cs.values.emplace_back("alpha4", detail::safe_ratio(num4, B * A * C * D, "alpha4"));
    if (n > 2) {
        Rational a5 = detail::safe_ratio(Rational(n) * n * lam * (mu - one),
                                         Rational(n - 2) * B, "alpha5");
        cs.values.emplace_back("alpha5", a5);
        cs.values.emplace_back(
            "alpha6",
            detail::safe_ratio((Rational(n) * delta - 2) * a5, Rational(n - 1) * C, "alpha6"));
    }
    // the first-order map's coefficient
    cs.values.emplace_back("alpha", detail::safe_ratio(lam, one - delta, "alpha (first order)"));
    return cs;
}

/// d1, d2, d3 of the metric-rescaling relation; reports whether all vanish.
inline CoefficientSet coeff_d(int n, const Rational& lam, const Rational& mu) {
    CoefficientSet cs;
    cs.family = "d";
    cs.n = n;
    cs.lambda = lam;
    cs.mu = mu;
    Rational delta = mu - lam;
    cs.delta = delta;
    Rational one(1);
    Rational A = Rational(2) + Rational(n) * (one - delta);
    Rational B = Rational(1) + Rational(n) * (one - delta);
    Rational C = Rational(2) + Rational(n) * (one - delta * 2);
    Rational D = Rational(2) - Rational(n) * delta;

    Rational d1 = detail::safe_ratio(Rational(n) * (lam + mu - one), A * D, "d1");
    Rational d2 = detail::safe_ratio(Rational(n) * lam * (lam + mu - one), A * D * (one - delta), "d2");
    Rational d3 = detail::safe_ratio(Rational(n) * lam * (mu - one), C * (delta - one) * B, "d3");
    cs.values.emplace_back("d1", d1);
    cs.values.emplace_back("d2", d2);
    cs.values.emplace_back("d3", d3);
    if (d1.is_zero() && d2.is_zero() && d3.is_zero())
        cs.flags.push_back("all d vanish (conformally invariant weights)");
    return cs;
}

// ---------------------------------------------------------------------------
// quantization maps
// ---------------------------------------------------------------------------

/// Symbols of degree <= 2 bundled with common weight delta; unused parts may
/// be left invalid and are treated as zero.
struct SymbolTriple {
    SymbolField P2, P1, P0;

    int dim() const { return P2.dim() ? P2.dim() : (P1.dim() ? P1.dim() : P0.dim()); }
};

namespace detail {

inline Jet quantize1_jet(const MetricField& g, const Rational& lam, const Rational& mu,
                         const SymbolField* P1, const SymbolField* P0, const DensityField& phi,
                         const Vec& x, int order) {
    int n = g.dim();
    Rational delta = mu - lam;
    if (delta == Rational(1))
        throw ResonanceError("first-order quantization excludes delta = 1", "delta = 1");
    double alpha = safe_ratio(lam, Rational(1) - delta, "alpha").to_double();

    Jet acc(n, order, x);
    Jet phij = phi.value.jets(x, order);
    if (P1 && P1->dim()) {
        JTensor dphi = covderiv_density_jets(g, phi, x, order);
        JTensor Pj = P1->jets(x, order);
        for (int i = 0; i < n; ++i) acc += Pj.at(i) * dphi.at(i);
        JTensor dP = covderiv_symbol_jets(g, *P1, x, order); // (s,i)
        Jet divP(n, order, x);
        for (int i = 0; i < n; ++i) divP += dP.at(i, i);
        acc += alpha * (divP * phij);
    }
    if (P0 && P0->dim()) acc += P0->jets(x, order).v[0] * phij;
    return acc;
}

inline Jet quantize2_jet(const MetricField& g, const Rational& lam, const Rational& mu,
                         const SymbolField& P2, const DensityField& phi, const Vec& x,
                         int order) {
    int n = g.dim();
    if (n <= 2) throw DimensionError("degree-2 quantization needs n > 2 (use the surface map)");
    CoefficientSet cs = coeff_alpha(n, lam, mu);
    double a1 = cs.get("alpha1").to_double(), a2 = cs.get("alpha2").to_double(),
           a3 = cs.get("alpha3").to_double(), a4 = cs.get("alpha4").to_double(),
           a5 = cs.get("alpha5").to_double(), a6 = cs.get("alpha6").to_double();

    auto mg = g.at(x, order);
    JTensor Pj = P2.jets(x, order);
    JTensor dphi2 = covderiv2_density_jets(g, phi, x, order); // (j,i)
    JTensor dphi = covderiv_density_jets(g, phi, x, order);
    JTensor dP = covderiv_symbol_jets(g, P2, x, order);       // (s,i,j)
    JTensor ddP = covderiv2_symbol_jets(g, P2, x, order);     // (l,k,i,j)
    auto curv = g.curvature_at(x, order);
    Jet phij = phi.value.jets(x, order);

    Jet acc(n, order, x);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) acc += Pj.at(i, j) * dphi2.at(i, j);

    for (int j = 0; j < n; ++j) {
        Jet coef(n, order, x);
        for (int i = 0; i < n; ++i) coef += a1 * dP.at(i, i, j);
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l)
                    coef += a2 * (mg->ginv.at(i, j) * mg->g.at(k, l) * dP.at(i, k, l));
        acc += coef * dphi.at(j);
    }

    Jet zero_order(n, order, x);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            zero_order += a3 * ddP.at(i, j, i, j);
            zero_order += a5 * (curv->ricci.at(i, j) * Pj.at(i, j));
            zero_order += a6 * (curv->scalar * mg->g.at(i, j) * Pj.at(i, j));
            for (int s = 0; s < n; ++s)
                for (int t = 0; t < n; ++t)
                    zero_order += a4 * (mg->ginv.at(s, t) * mg->g.at(i, j) * ddP.at(s, t, i, j));
        }
    acc += zero_order * phij;
    return acc;
}

} // namespace detail

inline Jet quantize1(const MetricField& g, const Rational& lam, const Rational& mu,
                     const SymbolField& P1, const SymbolField& P0, const DensityField& phi,
                     const Vec& x, int order = 0) {
    return detail::quantize1_jet(g, lam, mu, &P1, &P0, phi, x, order);
}

inline Jet quantize2(const MetricField& g, const Rational& lam, const Rational& mu,
                     const SymbolField& P2, const DensityField& phi, const Vec& x,
                     int order = 0) {
    return detail::quantize2_jet(g, lam, mu, P2, phi, x, order);
}

/// Full map on S_{delta,2}: degree-2 display plus the first-order part.
inline ScalarField quantize_full_field(const MetricField& g, const Rational& lam,
                                       const Rational& mu, const SymbolTriple& P,
                                       const DensityField& phi) {
    int n = g.dim();
    SymbolTriple Pc = P;
    return ScalarField(n, [g, lam, mu, Pc, phi](const Vec& x, int order) {
        Jet acc(g.dim(), order, x);
        if (Pc.P2.dim()) acc = detail::quantize2_jet(g, lam, mu, Pc.P2, phi, x, order);
        const SymbolField* p1 = Pc.P1.dim() ? &Pc.P1 : nullptr;
        const SymbolField* p0 = Pc.P0.dim() ? &Pc.P0 : nullptr;
        if (p1 || p0) acc += detail::quantize1_jet(g, lam, mu, p1, p0, phi, x, order);
        return acc;
    });
}

/// Surface quantization (n = 2) with the Osgood-Stowe curvature correction:
/// the alpha1..alpha4 display plus (4 lam (mu-1)/(2 delta - 3)) [ S(psi)_ij P^ij
/// + (1/(8(delta-1))) R g_ij P^ij ] phi and the first-order part.
inline Jet quantize_surface(const MetricField& g, const Rational& lam, const Rational& mu,
                            const SymbolTriple& P, const FlatteningData& flat,
                            const DensityField& phi, const Vec& x, int order = 0) {
    int n = g.dim();
    if (n != 2) throw DimensionError("surface quantization needs n = 2");
    if (!flat.F.valid()) throw FlatteningError("missing conformal flattening data");
    Rational delta = mu - lam;
    check_surface_resonance(delta);
    CoefficientSet cs = coeff_alpha(2, lam, mu);
    double a1 = cs.get("alpha1").to_double(), a2 = cs.get("alpha2").to_double(),
           a3 = cs.get("alpha3").to_double(), a4 = cs.get("alpha4").to_double();
    double spre = detail::safe_ratio(lam * (mu - 1) * 4, delta * 2 - 3, "surface curvature prefactor")
                      .to_double();
    double sinner =
        detail::safe_ratio(Rational(1), (delta - 1) * 8, "surface inner constant").to_double();

    auto mg = g.at(x, order);
    Jet phij = phi.value.jets(x, order);
    Jet acc(n, order, x);
    if (P.P2.dim()) {
        JTensor Pj = P.P2.jets(x, order);
        JTensor dphi2 = covderiv2_density_jets(g, phi, x, order);
        JTensor dphi = covderiv_density_jets(g, phi, x, order);
        JTensor dP = covderiv_symbol_jets(g, P.P2, x, order);
        JTensor ddP = covderiv2_symbol_jets(g, P.P2, x, order);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) acc += Pj.at(i, j) * dphi2.at(i, j);
        for (int j = 0; j < n; ++j) {
            Jet coef(n, order, x);
            for (int i = 0; i < n; ++i) coef += a1 * dP.at(i, i, j);
            for (int i = 0; i < n; ++i)
                for (int k = 0; k < n; ++k)
                    for (int l = 0; l < n; ++l)
                        coef += a2 * (mg->ginv.at(i, j) * mg->g.at(k, l) * dP.at(i, k, l));
            acc += coef * dphi.at(j);
        }
        Jet zero_order(n, order, x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                zero_order += a3 * ddP.at(i, j, i, j);
                for (int s = 0; s < n; ++s)
                    for (int t = 0; t < n; ++t)
                        zero_order += a4 * (mg->ginv.at(s, t) * mg->g.at(i, j) * ddP.at(s, t, i, j));
            }
        if (spre != 0.0) {
            JTensor S = osgood_stowe_jets(flat.F, g, x, order);
            auto curv = g.curvature_at(x, order);
            Jet sterm(n, order, x);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) {
                    sterm += S.at(i, j) * Pj.at(i, j);
                    sterm += sinner * (curv->scalar * mg->g.at(i, j) * Pj.at(i, j));
                }
            zero_order += spre * sterm;
        }
        acc += zero_order * phij;
    }
    const SymbolField* p1 = P.P1.dim() ? &P.P1 : nullptr;
    const SymbolField* p0 = P.P0.dim() ? &P.P0 : nullptr;
    if (p1 || p0) acc += detail::quantize1_jet(g, lam, mu, p1, p0, phi, x, order);
    return acc;
}

// ---------------------------------------------------------------------------
// deformed symbol action (the commutative diagram of section 4.2)
// ---------------------------------------------------------------------------

namespace detail {

inline SymbolField add_scaled(const SymbolField& a, double c, const SymbolField& b) {
    int n = a.dim();
    int deg = a.degree();
    size_t sz = 1;
    for (int i = 0; i < deg; ++i) sz *= n;
    std::vector<ScalarField> comps(sz);
    for (size_t fl = 0; fl < sz; ++fl) {
        ScalarField fa = a.comp(fl), fb = b.comp(fl);
        comps[fl] = ScalarField(n, [fa, fb, c](const Vec& x, int k) {
            return fa.jets(x, k) + c * fb.jets(x, k);
        });
    }
    return SymbolField(n, deg, a.weight(), std::move(comps));
}

} // namespace detail

/// The deformation of the plain symbol action that makes the quantization
/// diagram commute: corrections by A(f^{-1}) and B(f^{-1}) applied to the
/// transformed degree-2 part.
inline SymbolTriple deformed_action(const Diffeo& f, const MetricField& g, const Rational& lam,
                                    const Rational& mu, const SymbolTriple& P) {
    int n = g.dim();
    Rational delta = mu - lam;
    check_q2_resonance(n, delta);
    Rational one(1);
    Rational A = Rational(2) + Rational(n) * (one - delta);
    Rational B = Rational(1) + Rational(n) * (one - delta);
    Rational C = Rational(2) + Rational(n) * (one - delta * 2);
    Rational D = Rational(2) - Rational(n) * delta;
    double k1 = detail::safe_ratio(Rational(n) * (mu + lam - one), A * D, "T^i coefficient")
                    .to_double();
    double k0 = detail::safe_ratio(-(Rational(n) * lam * (mu - one)), C * (one - delta) * B,
                                   "T^0 coefficient")
                    .to_double();

    SymbolTriple out;
    out.P2 = act_symbol_field(f, P.P2);
    SymbolField corr1 = eval_A_sfield(f.inverted(), g, delta, out.P2);
    out.P1 = P.P1.dim() ? detail::add_scaled(act_symbol_field(f, P.P1), k1, corr1)
                        : detail::add_scaled(detail::lazy_symbol(
                                                 n, 1, delta,
                                                 [n](const Vec& x, int k) {
                                                     return JTensor(n, 1, Jet(n, k, x));
                                                 }),
                                             k1, corr1);
    SymbolField corr0 = eval_B_sfield(f.inverted(), g, delta, out.P2);
    SymbolField base0 = P.P0.dim() ? act_symbol_field(f, P.P0)
                                   : detail::lazy_symbol(n, 0, delta, [n](const Vec& x, int k) {
                                         return JTensor(n, 0, Jet(n, k, x));
                                     });
    out.P0 = detail::add_scaled(base0, k0, corr0);
    return out;
}

// ---------------------------------------------------------------------------
// metric-rescaling relation for the degree-2 map
// ---------------------------------------------------------------------------

/// Builds g~ = F^{-1} psi# g and evaluates both sides of
/// Q^{g~}(P) = Q^{g}(P) + d1 A^s(psi^{-1})(P) nabla_s + d2 nabla_s(A^s(psi^{-1})(P)) + d3 B(psi^{-1})(P)
/// on phi at x; returns the relative residual.
inline double verify_q2_rescaling(const MetricField& g, const ScalarField& F, const Diffeo& psi,
                                  const Rational& lam, const Rational& mu, const SymbolField& P2,
                                  const DensityField& phi, const Vec& x) {
    int n = g.dim();
    Rational delta = mu - lam;
    CoefficientSet ds = coeff_d(n, lam, mu);
    double d1 = ds.get("d1").to_double(), d2 = ds.get("d2").to_double(),
           d3 = ds.get("d3").to_double();

    // psi* in the relation is the paper's pushforward action, i.e. the
    // pullback through psi^{-1}
    ScalarField invF(n, [F](const Vec& z, int k) { return F.jets(z, k).reciprocal(); });
    MetricField gt = conformally_scaled(pullback_metric(psi.inverted(), g), invF);

    double lhs = quantize2(gt, lam, mu, P2, phi, x).value();
    double rhs = quantize2(g, lam, mu, P2, phi, x).value();

    SymbolField As = eval_A_sfield(psi.inverted(), g, delta, P2);
    JTensor Aj = As.jets(x, 0);
    JTensor dphi = covderiv_density_jets(g, phi, x, 0);
    for (int s = 0; s < n; ++s) rhs += d1 * Aj.at(s).value() * dphi.at(s).value();

    JTensor dA = covderiv_symbol_jets(g, As, x, 0); // (s,i)
    double divA = 0;
    for (int s = 0; s < n; ++s) divA += dA.at(s, s).value();
    double phiv = phi.value.value(x);
    rhs += d2 * divA * phiv;

    rhs += d3 * eval_B(psi.inverted(), g, delta, P2, x) * phiv;

    double scale = std::max({1.0, std::abs(lhs), std::abs(rhs)});
    return std::abs(lhs - rhs) / scale;
}

// ---------------------------------------------------------------------------
// proof identities of section 4.2 (standalone both-sides checks)
// ---------------------------------------------------------------------------

struct ProofIdentityReport {
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

/// The expansion identities used in the section-4.2 proofs, each evaluated on
/// both sides: nabla of f*phi, nabla nabla of f*phi, the Ricci pullback, the
/// nabla(f_delta P) expansion and the nabla nabla (f_delta^{-1} P) expansion.
inline ProofIdentityReport verify_quantization_proof_identities(
    const Diffeo& f, const MetricField& g, const Rational& lam, const SymbolField& P,
    const DensityField& phi, const Vec& x) {
    int n = g.dim();
    Rational delta = P.weight();
    double dl = delta.to_double();
    double lm = lam.to_double();
    ProofIdentityReport rep;

    Tensor21Field ellinv_f = ell_field(f.inverted(), g); // ell(f^{-1})
    auto ellinv = ellinv_f.at(x, 1);

    // nabla_i f*phi = f* nabla_i phi + lam ell(f^{-1})_i f*phi
    {
        DensityField fphi = pullback_density_field(f, phi);
        JTensor lhs = covderiv_density_jets(g, fphi, x, 0); // (i)
        JTensor rhs = act_tensor_jets(
            f, 0, 1, lam,
            [&](const Vec& w, int k) { return covderiv_density_jets(g, phi, w, k); }, x, 0);
        Jet fphij = fphi.value.jets(x, 0);
        double r = 0, scale = 1;
        for (int i = 0; i < n; ++i) {
            double v = rhs.at(i).value() + lm * ellinv->trace[i].value() * fphij.value();
            scale = std::max(scale, std::abs(v));
            r = std::max(r, std::abs(lhs.at(i).value() - v));
        }
        rep.items.push_back({"grad_pullback_density", r / scale});
    }

    // nabla_j nabla_i f*phi = f* nabla_j nabla_i phi + ell(f^{-1})^t_{ji} f* nabla_t phi
    //   + lam Sym_{i,j} ell(f^{-1})_j f* nabla_i phi
    //   + (lam nabla_j ell(f^{-1})_i + lam^2 ell(f^{-1})_j ell(f^{-1})_i) f*phi
    {
        DensityField fphi = pullback_density_field(f, phi);
        JTensor lhs = covderiv2_density_jets(g, fphi, x, 0); // (j,i)
        JTensor f_ddphi = act_tensor_jets(
            f, 0, 2, lam,
            [&](const Vec& w, int k) { return covderiv2_density_jets(g, phi, w, k); }, x, 0);
        JTensor f_dphi = act_tensor_jets(
            f, 0, 1, lam,
            [&](const Vec& w, int k) { return covderiv_density_jets(g, phi, w, k); }, x, 0);
        Jet fphij = fphi.value.jets(x, 0);
        auto conn = g.christoffel_at(x, 0);
        JTensor tr(n, 1, Jet(n, 1, x));
        for (int i = 0; i < n; ++i) tr.at(i) = ellinv->trace[i];
        JTensor dtr = covderiv_tensor(tr, 0, 1, 0.0, *conn); // (j,i) = nabla_j ell_i
        double r = 0, scale = 1;
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                double v = f_ddphi.at(j, i).value();
                for (int t = 0; t < n; ++t)
                    v += ellinv->comp.at(t, j, i).value() * f_dphi.at(t).value();
                v += lm * (ellinv->trace[j].value() * f_dphi.at(i).value() +
                           ellinv->trace[i].value() * f_dphi.at(j).value());
                v += (lm * dtr.at(j, i).value() +
                      lm * lm * ellinv->trace[j].value() * ellinv->trace[i].value()) *
                     fphij.value();
                scale = std::max(scale, std::abs(v));
                r = std::max(r, std::abs(lhs.at(j, i).value() - v));
            }
        rep.items.push_back({"grad2_pullback_density", r / scale});
    }

    // f* R_jk - R_jk = nabla_i ell(f^{-1})^i_jk - nabla_j ell(f^{-1})_k
    //   - ell(f^{-1})^m_{sj} ell(f^{-1})^s_{km} + ell(f^{-1})_m ell(f^{-1})^m_{jk}
    {
        JTensor fR = act_tensor_jets(
            f, 0, 2, Rational(0),
            [&](const Vec& w, int k) { return g.curvature_at(w, k)->ricci; }, x, 0);
        auto curv = g.curvature_at(x, 0);
        auto conn = g.christoffel_at(x, 0);
        JTensor dell = covderiv_tensor(ellinv->comp, 1, 2, 0.0, *conn); // (i,k,j,k2)
        JTensor tr(n, 1, Jet(n, 1, x));
        for (int i = 0; i < n; ++i) tr.at(i) = ellinv->trace[i];
        JTensor dtr = covderiv_tensor(tr, 0, 1, 0.0, *conn);
        double r = 0, scale = 1;
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                double lhs = fR.at(j, k).value() - curv->ricci.at(j, k).value();
                double v = 0;
                for (int i = 0; i < n; ++i) v += dell.at(i, i, j, k).value();
                v -= dtr.at(j, k).value();
                for (int m = 0; m < n; ++m) {
                    for (int s = 0; s < n; ++s)
                        v -= ellinv->comp.at(m, s, j).value() * ellinv->comp.at(s, k, m).value();
                    v += ellinv->trace[m].value() * ellinv->comp.at(m, j, k).value();
                }
                scale = std::max(scale, std::abs(v));
                r = std::max(r, std::abs(lhs - v));
            }
        rep.items.push_back({"ricci_pullback", r / scale});
    }

    // nabla_i (f_delta P)^{kl} = f_delta(nabla_i P^{kl})
    //   - Sym_{k,l}( ell(f^{-1})^k_{it} (f_delta P)^{tl} ) + delta ell(f^{-1})_i (f_delta P)^{kl}
    {
        SymbolField fP = act_symbol_field(f, P);
        JTensor lhs = covderiv_symbol_jets(g, fP, x, 0); // (i,k,l)
        // f_delta on the mixed (2 up, 1 down) tensor nabla P; provider gives (i,k,l),
        // reorder to (k,l,i) for the action, then back
        JTensor fdP = act_tensor_jets(
            f, 2, 1, delta,
            [&](const Vec& w, int kk) {
                JTensor d = covderiv_symbol_jets(g, P, w, kk); // (i,k,l)
                JTensor p(n, 3, d.v[0]);
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < n; ++k)
                        for (int l = 0; l < n; ++l) p.at(k, l, i) = d.at(i, k, l);
                return p;
            },
            x, 0); // (k,l,i)
        JTensor fPj = fP.jets(x, 0);
        double r = 0, scale = 1;
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) {
                    double v = fdP.at(k, l, i).value();
                    for (int t = 0; t < n; ++t) {
                        v -= ellinv->comp.at(k, i, t).value() * fPj.at(t, l).value();
                        v -= ellinv->comp.at(l, i, t).value() * fPj.at(t, k).value();
                    }
                    v += dl * ellinv->trace[i].value() * fPj.at(k, l).value();
                    scale = std::max(scale, std::abs(v));
                    r = std::max(r, std::abs(lhs.at(i, k, l).value() - v));
                }
        rep.items.push_back({"grad_symbol_action", r / scale});
    }

    // nabla_i nabla_j (f_delta^{-1} P)^{kl} expansion with ell(f)
    {
        SymbolField fiP = act_symbol_field(f.inverted(), P);
        JTensor lhs = covderiv2_symbol_jets(g, fiP, x, 0); // (i,j,k,l)
        JTensor fi_ddP = act_tensor_jets(
            f.inverted(), 2, 2, delta,
            [&](const Vec& w, int kk) {
                JTensor d = covderiv2_symbol_jets(g, P, w, kk); // (i,j,k,l)
                JTensor p(n, 4, d.v[0]);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < n; ++j)
                        for (int k = 0; k < n; ++k)
                            for (int l = 0; l < n; ++l) p.at(k, l, i, j) = d.at(i, j, k, l);
                return p;
            },
            x, 0); // (k,l,i,j)
        JTensor fi_dP = act_tensor_jets(
            f.inverted(), 2, 1, delta,
            [&](const Vec& w, int kk) {
                JTensor d = covderiv_symbol_jets(g, P, w, kk);
                JTensor p(n, 3, d.v[0]);
                for (int i = 0; i < n; ++i)
                    for (int k = 0; k < n; ++k)
                        for (int l = 0; l < n; ++l) p.at(k, l, i) = d.at(i, k, l);
                return p;
            },
            x, 0); // (k,l,i)
        JTensor fiPj = fiP.jets(x, 1);
        JTensor dfiP = covderiv_symbol_jets(g, fiP, x, 0); // (j,t,l)
        Tensor21 lf1 = ell(f, g, x, 1);
        auto conn = g.christoffel_at(x, 0);
        JTensor dellf = covderiv_tensor(lf1.comp, 1, 2, 0.0, *conn); // (j,k,i,t)
        JTensor trf(n, 1, Jet(n, 1, x));
        for (int i = 0; i < n; ++i) trf.at(i) = lf1.trace[i];
        JTensor dtrf = covderiv_tensor(trf, 0, 1, 0.0, *conn); // (j,i)

        // in this display the second slot of nabla nabla is the outer derivative
        double r = 0, scale = 1;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k)
                    for (int l = 0; l < n; ++l) {
                        double v = fi_ddP.at(k, l, j, i).value();
                        // - Sym_{l,k}( f^{-1}(nabla_i P^{tl}) ell(f)^k_{tj} )
                        for (int t = 0; t < n; ++t) {
                            v -= fi_dP.at(t, l, i).value() * lf1.comp.at(k, t, j).value();
                            v -= fi_dP.at(t, k, i).value() * lf1.comp.at(l, t, j).value();
                        }
                        // + f^{-1}(nabla_u P^{kl}) ell(f)^u_{ij}
                        for (int u = 0; u < n; ++u)
                            v += fi_dP.at(k, l, u).value() * lf1.comp.at(u, i, j).value();
                        // + delta f^{-1}(nabla_i P^{kl}) ell(f)_j
                        v += dl * fi_dP.at(k, l, i).value() * lf1.trace[j].value();
                        // - Sym_{k,l}( nabla_j ell(f)^k_{it} f^{-1}P^{tl} )
                        for (int t = 0; t < n; ++t) {
                            v -= dellf.at(j, k, i, t).value() * fiPj.at(t, l).value();
                            v -= dellf.at(j, l, i, t).value() * fiPj.at(t, k).value();
                        }
                        // + delta nabla_j ell(f)_i f^{-1}P^{kl}
                        v += dl * dtrf.at(j, i).value() * fiPj.at(k, l).value();
                        // - Sym_{k,l}( ell(f)^k_{it} nabla_j f^{-1}P^{tl} )
                        for (int t = 0; t < n; ++t) {
                            v -= lf1.comp.at(k, i, t).value() * dfiP.at(j, t, l).value();
                            v -= lf1.comp.at(l, i, t).value() * dfiP.at(j, t, k).value();
                        }
                        // + delta ell(f)_i nabla_j f^{-1}P^{kl}
                        v += dl * lf1.trace[i].value() * dfiP.at(j, k, l).value();
                        scale = std::max(scale, std::abs(v));
                        r = std::max(r, std::abs(lhs.at(j, i, k, l).value() - v));
                    }
        rep.items.push_back({"grad2_symbol_inverse_action", r / scale});
    }
    return rep;
}

} // namespace csd
