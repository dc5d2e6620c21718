//! Principal actions, momentum maps, unreduction and the magnetic
//! Lagrange–Poincaré system.
//!
//! Group elements never appear; an action enters through the coefficients
//! `K^α_β(x, y)` of its fundamental fields `Ẽ_β = K^α_β ∂/∂y^α`, its structure
//! constants, and numerically integrated flows.

use nalgebra::{DMatrix, DVector};

use crate::bundle::{complete_lift, BundleChart, SecondTangentPoint, TangentPointM, VectorFieldEval};
use crate::error::{Error, Result};
use crate::jet::{Jet2, ScalarField};
use crate::lagrangian::{el_acceleration, LagrangianSpec, ResidualReport, SodeProvenance, SodeSpec};
use crate::numerics::{linear_solve, rk4_integrate, IvpProblem, LinearSystem, LuFactors, TrajectoryRecord};
use crate::sampling::{sweep, SampleSpec, Sweep};
use crate::splitting::{vilms_horizontal, SplittingSpec};

/// Tolerance on the structure-constant checks.
pub const STRUCTURE_TOLERANCE: f64 = 1e-12;
/// Threshold of [`principal_check`] used by [`unreduce`].
pub const PRINCIPAL_TOLERANCE: f64 = 1e-7;

/// An action of an `m`-dimensional group along the fibres.
#[derive(Debug, Clone)]
pub struct ActionSpec {
    pub chart: BundleChart,
    /// `K^α_β` at row-major index `α·m + β`, fields of `(x, y)`.
    pub k: Vec<ScalarField>,
    /// `C^γ_{αβ}` at index `(γ·m + α)·m + β`.
    pub c: Vec<f64>,
}

fn check_structure_constants(m: usize, c: &[f64]) -> Result<()> {
    if c.len() != m * m * m {
        return Err(Error::DimensionMismatch(format!(
            "{} structure constants for dimension {m}",
            c.len()
        )));
    }
    let at = |g: usize, a: usize, b: usize| c[(g * m + a) * m + b];
    for g in 0..m {
        for a in 0..m {
            for b in 0..m {
                if (at(g, a, b) + at(g, b, a)).abs() > STRUCTURE_TOLERANCE {
                    return Err(Error::InvalidInput("structure constants are not antisymmetric".into()));
                }
                for d in 0..m {
                    // [[E_a, E_b], E_d] + cyclic
                    let j: f64 = (0..m)
                        .map(|e| at(e, a, b) * at(g, e, d) + at(e, b, d) * at(g, e, a) + at(e, d, a) * at(g, e, b))
                        .sum();
                    if j.abs() > STRUCTURE_TOLERANCE {
                        return Err(Error::InvalidInput(format!("Jacobi identity fails by {j:e}")));
                    }
                }
            }
        }
    }
    Ok(())
}

impl ActionSpec {
    pub fn new(chart: BundleChart, k: Vec<ScalarField>, c: Vec<f64>) -> Result<Self> {
        let m = chart.m;
        if k.len() != m * m {
            return Err(Error::DimensionMismatch(format!("K needs {} entries", m * m)));
        }
        if k.iter().any(|f| f.arity() != chart.position_dim()) {
            return Err(Error::DimensionMismatch("K entries are fields of (x, y)".into()));
        }
        check_structure_constants(m, &c)?;
        Ok(Self { chart, k, c })
    }

    /// Fibre translations: `K = 1`, `C = 0`.
    pub fn translations(chart: BundleChart) -> Self {
        let m = chart.m;
        let k = (0..m * m)
            .map(|t| ScalarField::constant(chart.position_dim(), if t / m == t % m { 1.0 } else { 0.0 }))
            .collect();
        Self {
            chart,
            k,
            c: vec![0.0; m * m * m],
        }
    }

    pub fn k_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.chart.m;
        let vals = self.k.iter().map(|f| f.value(q)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(m, m, |a, b| vals[a * m + b]))
    }

    /// `∂K/∂(x, y)`: one `m × m` matrix per coordinate.
    pub fn k_derivatives(&self, q: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let m = self.chart.m;
        let grads = self.k.iter().map(|f| f.gradient(q)).collect::<Result<Vec<_>>>()?;
        Ok((0..q.len())
            .map(|c| DMatrix::from_fn(m, m, |a, b| grads[a * m + b][c]))
            .collect())
    }

    /// `K̇ = v^i ∂K/∂x^i + w^ε ∂K/∂y^ε`.
    pub fn k_dot(&self, w_pt: &TangentPointM) -> Result<DMatrix<f64>> {
        let m = self.chart.m;
        let d = self.k_derivatives(&w_pt.position())?;
        let u = [&w_pt.v[..], &w_pt.w].concat();
        Ok(d.iter()
            .zip(&u)
            .fold(DMatrix::zeros(m, m), |acc, (dk, c)| acc + dk * *c))
    }

    fn k_inverse_apply(&self, q: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
        let sys = LinearSystem::new(self.k_matrix(q)?, DVector::from_column_slice(rhs))?;
        Ok(linear_solve(&sys)?.iter().copied().collect())
    }

    /// The fundamental field `Ẽ_ξ = ξ^γ K^α_γ ∂/∂y^α` on `M`.
    pub fn fundamental_field(&self, xi: &[f64]) -> FundamentalField<'_> {
        FundamentalField {
            action: self,
            xi: xi.to_vec(),
        }
    }
}

pub struct FundamentalField<'a> {
    action: &'a ActionSpec,
    xi: Vec<f64>,
}

impl VectorFieldEval for FundamentalField<'_> {
    fn arity(&self) -> usize {
        self.action.chart.position_dim()
    }
    fn dim(&self) -> usize {
        self.action.chart.position_dim()
    }
    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.action.chart.n;
        let k = self.action.k_matrix(q)?;
        let mut out = vec![0.0; q.len()];
        let col = k * DVector::from_column_slice(&self.xi);
        out[n..].copy_from_slice(col.as_slice());
        Ok(out)
    }
    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.action.chart.n;
        let d = self.action.k_derivatives(q)?;
        let xi = DVector::from_column_slice(&self.xi);
        let mut j = DMatrix::zeros(q.len(), q.len());
        for (c, dk) in d.iter().enumerate() {
            let col = dk * &xi;
            for a in 0..col.len() {
                j[(n + a, c)] = col[a];
            }
        }
        Ok(j)
    }
}

fn unit(m: usize, g: usize) -> Vec<f64> {
    (0..m).map(|i| if i == g { 1.0 } else { 0.0 }).collect()
}

fn report(sw: &Sweep<f64>) -> ResidualReport {
    ResidualReport {
        max: sw.max_abs(),
        sample_count: sw.len(),
        skipped: sw.skipped,
    }
}

/// `max |ξ̃^c(L)|` over the basis `ξ = E_γ`.
pub fn invariance_check(l: &LagrangianSpec, action: &ActionSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let chart = l.chart;
    let m = chart.m;
    let sw = sweep(samples, chart.tangent_dim(), |s| {
        let at = TangentPointM::from_slice(&chart, s)?;
        let grad = l.jet(s)?.gradient;
        let mut worst = 0.0_f64;
        for g in 0..m {
            let lift = complete_lift(&action.fundamental_field(&unit(m, g)), &at)?;
            let d: f64 = lift.tangent().iter().zip(&grad).map(|(a, b)| a * b).sum();
            worst = worst.max(d.abs());
        }
        Ok(worst)
    })?;
    Ok(report(&sw))
}

/// `J_γ = K^α_γ ∂L/∂w^α`.
pub fn momentum_map(l: &LagrangianSpec, action: &ActionSpec, w_pt: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (l.chart.n, l.chart.m);
    let g = l.jet(w_pt)?.gradient;
    let k = action.k_matrix(&w_pt[..n + m])?;
    let lw = DVector::from_column_slice(&g[2 * n + m..]);
    Ok((k.transpose() * lw).iter().copied().collect())
}

/// `v^i ∂K^α_γ/∂x^i + h^β ∂K^α_γ/∂y^β − K^β_γ ∂h^α/∂y^β` at a pullback point.
pub fn principal_residual(h: &SplittingSpec, action: &ActionSpec, p: &[f64]) -> Result<DMatrix<f64>> {
    let (n, m) = (h.chart.n, h.chart.m);
    let q = &p[..n + m];
    let hv = h.coefficients(p)?;
    let jac = h.coefficient_jacobian(p)?;
    let d = action.k_derivatives(q)?;
    let k = action.k_matrix(q)?;
    let mut r = DMatrix::zeros(m, m);
    for i in 0..n {
        r += &d[i] * p[n + m + i];
    }
    for b in 0..m {
        r += &d[n + b] * hv[b];
    }
    let hy = jac.columns(n, m).into_owned();
    Ok(r - hy * k)
}

pub fn principal_check(h: &SplittingSpec, action: &ActionSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let sw = sweep(samples, h.chart.pullback_dim(), |p| {
        Ok(principal_residual(h, action, p)?.amax())
    })?;
    Ok(report(&sw))
}

/// `ω = K⁻¹(w − h)`.
pub fn omega(h: &SplittingSpec, action: &ActionSpec, w_pt: &TangentPointM) -> Result<Vec<f64>> {
    let hv = h.coefficients(&w_pt.pullback())?;
    let d: Vec<f64> = w_pt.w.iter().zip(&hv).map(|(a, b)| a - b).collect();
    action.k_inverse_apply(&w_pt.position(), &d)
}

/// `max |K⁻¹(v·∂h/∂v − h)|`.
pub fn connection_test_domega(h: &SplittingSpec, action: &ActionSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let (n, m) = (h.chart.n, h.chart.m);
    let sw = sweep(samples, h.chart.pullback_dim(), |p| {
        let hv = h.coefficients(p)?;
        let jac = h.coefficient_jacobian(p)?;
        let e: Vec<f64> = (0..m)
            .map(|a| (0..n).map(|i| p[n + m + i] * jac[(a, n + m + i)]).sum::<f64>() - hv[a])
            .collect();
        Ok(action
            .k_inverse_apply(&p[..n + m], &e)?
            .iter()
            .fold(0.0_f64, |acc, c| acc.max(c.abs())))
    })?;
    Ok(report(&sw))
}

/// `Ξ = ω^β Ẽ^c_β`: `Y = w − h`, `W = K̇·K⁻¹(w − h)`.
pub fn xi_field(h: &SplittingSpec, action: &ActionSpec, w_pt: &TangentPointM) -> Result<SecondTangentPoint> {
    let om = omega(h, action, w_pt)?;
    let kd = action.k_dot(w_pt)?;
    let k = action.k_matrix(&w_pt.position())?;
    let om = DVector::from_column_slice(&om);
    Ok(SecondTangentPoint {
        ty: (k * &om).iter().copied().collect(),
        tw: (kd * &om).iter().copied().collect(),
        ..SecondTangentPoint::zero_at(w_pt)
    })
}

/// `Γ̄^Vilms` at `w_pt` for a SODE `Γ̄` on the base.
pub fn vilms_of_sode(gamma_bar: &SodeSpec, h: &SplittingSpec, w_pt: &TangentPointM) -> Result<SecondTangentPoint> {
    let f = gamma_bar.forces(&[&w_pt.x[..], &w_pt.v].concat())?;
    vilms_horizontal(h, w_pt, &w_pt.v, &f)
}

/// `Γ = Γ̄^Vilms + Ξ`, after checking that `h` is principal.
pub fn unreduce(
    gamma_bar: &SodeSpec,
    h: &SplittingSpec,
    action: &ActionSpec,
    samples: &SampleSpec,
) -> Result<SodeSpec> {
    let chart = h.chart;
    if gamma_bar.dim != chart.n {
        return Err(Error::DimensionMismatch("the reduced SODE lives on the base".into()));
    }
    let pr = principal_check(h, action, samples)?;
    if pr.max >= PRINCIPAL_TOLERANCE {
        return Err(Error::NotPrincipal { residual: pr.max });
    }
    let (gb, hh, act) = (gamma_bar.clone(), h.clone(), action.clone());
    Ok(SodeSpec::new(
        chart.position_dim(),
        SodeProvenance::Unreduced,
        move |s| {
            let w = TangentPointM::from_slice(&chart, s)?;
            let a = vilms_of_sode(&gb, &hh, &w)?;
            let b = xi_field(&hh, &act, &w)?;
            Ok([a.tv, a.tw.iter().zip(&b.tw).map(|(p, q)| p + q).collect()].concat())
        },
    ))
}

/// `max |TTπ∘Γ − Γ̄∘Tπ|`.
pub fn submersion_residual(
    gamma: &SodeSpec,
    gamma_bar: &SodeSpec,
    chart: &BundleChart,
    samples: &SampleSpec,
) -> Result<ResidualReport> {
    let n = chart.n;
    let sw = sweep(samples, chart.tangent_dim(), |s| {
        let w = TangentPointM::from_slice(chart, s)?;
        let full = gamma.vector_field(s)?;
        let base = gamma_bar.vector_field(&[&w.x[..], &w.v].concat())?;
        // blocks (v, f^i) of Γ against (v, f̄) of Γ̄
        let fx = &full[..n];
        let fv = &full[n + chart.m..2 * n + chart.m];
        Ok(fx
            .iter()
            .chain(fv)
            .zip(&base)
            .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs())))
    })?;
    Ok(report(&sw))
}

/// Flow of `Ẽ_ξ` for time `t` from `(x, y)`, with `∂y(t)/∂(x, y)`.
fn flow_with_variation(action: &ActionSpec, xi: &[f64], q: &[f64], t: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (n, m) = (action.chart.n, action.chart.m);
    let k = n + m;
    if t == 0.0 {
        let mut j = DMatrix::zeros(m, k);
        for a in 0..m {
            j[(a, n + a)] = 1.0;
        }
        return Ok((q[n..].to_vec(), j));
    }
    let sign = t.signum();
    let field = action.fundamental_field(xi);
    let x = q[..n].to_vec();
    // state: y (m), then ∂y/∂(x, y) column-major (m·k)
    let mut s0 = q[n..].to_vec();
    for c in 0..k {
        for a in 0..m {
            s0.push(if c == n + a { 1.0 } else { 0.0 });
        }
    }
    let rhs = |_t: f64, s: &[f64]| -> Result<Vec<f64>> {
        let pos = [&x[..], &s[..m]].concat();
        let e = field.eval(&pos)?;
        let de = field.jacobian(&pos)?;
        let mut out: Vec<f64> = e[n..].iter().map(|v| sign * v).collect();
        for c in 0..k {
            for a in 0..m {
                // d/dt ∂y^a/∂q^c = ∂E^a/∂x^c [c < n] + ∂E^a/∂y^b ∂y^b/∂q^c
                let mut d = if c < n { de[(n + a, c)] } else { 0.0 };
                for b in 0..m {
                    d += de[(n + a, n + b)] * s[m + c * m + b];
                }
                out.push(sign * d);
            }
        }
        Ok(out)
    };
    let steps = 50.0;
    let prob = IvpProblem {
        vector_field: rhs,
        state0: s0,
        t0: 0.0,
        t1: t.abs(),
        dt: t.abs() / steps,
    };
    let rec = rk4_integrate(&prob).map_err(|e| match e {
        Error::NonFiniteState { t } => Error::FlowEscape { t: sign * t },
        Error::Domain(_) => Error::FlowEscape { t },
        other => other,
    })?;
    let s = rec.final_state();
    let j = DMatrix::from_fn(m, k, |a, c| s[m + c * m + a]);
    Ok((s[..m].to_vec(), j))
}

/// `TΦ_t(x, y, v, w) = (x, Φ_t(x, y), v, ∂Φ_t/∂x·v + ∂Φ_t/∂y·w)`.
fn tangent_flow(action: &ActionSpec, xi: &[f64], w: &[f64], t: f64) -> Result<Vec<f64>> {
    let (n, m) = (action.chart.n, action.chart.m);
    let (y, j) = flow_with_variation(action, xi, &w[..n + m], t)?;
    let u = DVector::from_column_slice(&w[n + m..]);
    let wt = &j * u;
    Ok([&w[..n], &y[..], &w[n + m..2 * n + m], wt.as_slice()].concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VilmsPrincipalReport {
    /// `max |h^V(TΦ_t(w), X, V) − T(TΦ_t)·h^V(w, X, V)|`.
    pub residual: f64,
    /// Largest principal residual of `h` at `(x, y, X)`, the rate of change at `t = 0`.
    pub infinitesimal_residual: f64,
    pub sample_count: usize,
    pub skipped: usize,
}

/// Equivariance of the Vilms lift under tangent flows of `Ẽ_γ`.
///
/// Samples are `(w, X, V)` with `w ∈ TM`; `T(TΦ_t)` is realised by a central
/// difference of `TΦ_t` along the lifted vector. `t = 0` is the identity.
pub fn vilms_principal_check(
    h: &SplittingSpec,
    action: &ActionSpec,
    times: &[f64],
    samples: &SampleSpec,
) -> Result<VilmsPrincipalReport> {
    let chart = h.chart;
    let (n, m) = (chart.n, chart.m);
    let td = chart.tangent_dim();
    let sw = sweep(samples, td + 2 * n, |s| {
        let w = TangentPointM::from_slice(&chart, &s[..td])?;
        let (bx, bv) = s[td..].split_at(n);
        let lifted = vilms_horizontal(h, &w, bx, bv)?.tangent();
        let p = [&w.x[..], &w.y, bx].concat();
        let inf = principal_residual(h, action, &p)?.amax();
        let mut worst = 0.0_f64;
        for g in 0..m {
            let xi = unit(m, g);
            for &t in times {
                let (moved, pushed) = if t == 0.0 {
                    (s[..td].to_vec(), lifted.clone())
                } else {
                    let moved = tangent_flow(action, &xi, &s[..td], t)?;
                    let scale = 1.0 + s[..td].iter().fold(0.0_f64, |a, c| a.max(c.abs()));
                    let eps = 1e-5 * scale / (1.0 + lifted.iter().fold(0.0_f64, |a, c| a.max(c.abs())));
                    let plus: Vec<f64> = s[..td].iter().zip(&lifted).map(|(a, d)| a + eps * d).collect();
                    let minus: Vec<f64> = s[..td].iter().zip(&lifted).map(|(a, d)| a - eps * d).collect();
                    let (fp, fm) = (
                        tangent_flow(action, &xi, &plus, t)?,
                        tangent_flow(action, &xi, &minus, t)?,
                    );
                    (moved, fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
                };
                let wt = TangentPointM::from_slice(&chart, &moved)?;
                let direct = vilms_horizontal(h, &wt, bx, bv)?.tangent();
                for (a, b) in direct.iter().zip(&pushed) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok((worst, inf))
    })?;
    Ok(VilmsPrincipalReport {
        residual: sw.values.iter().fold(0.0_f64, |a, v| a.max(v.0)),
        infinitesimal_residual: sw.values.iter().fold(0.0_f64, |a, v| a.max(v.1)),
        sample_count: sw.len(),
        skipped: sw.skipped,
    })
}

/// A magnetic Lagrangian in quasi-velocities,
/// `L = ½g_ij v^i v^j + ½k_αβ w̄^α w̄^β − V + A_i v^i + A_α w̄^α`.
#[derive(Debug, Clone)]
pub struct MagneticModel {
    pub n: usize,
    pub m: usize,
    /// `g_ij(x)`, row-major.
    pub g: Vec<ScalarField>,
    pub k: DMatrix<f64>,
    pub potential: ScalarField,
    pub a_base: Vec<ScalarField>,
    pub a_fibre: Vec<ScalarField>,
    /// `Υ^a_{ib}` at index `(i·m + a)·m + b`.
    pub upsilon: Vec<ScalarField>,
    /// `K^a_{ij}` at index `(a·n + i)·n + j`.
    pub kcurv: Vec<ScalarField>,
    /// `C^c_{ab}` at index `(c·m + a)·m + b`.
    pub c: Vec<f64>,
}

impl MagneticModel {
    /// Checks shapes, symmetry and invertibility of `k`, the structure
    /// constants, and bi-invariance `k_αδ C^δ_βγ + k_βδ C^δ_αγ = 0`.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let shapes = [
            (self.g.len(), n * n, "g"),
            (self.a_base.len(), n, "A_i"),
            (self.a_fibre.len(), m, "A_alpha"),
            (self.upsilon.len(), n * m * m, "Upsilon"),
            (self.kcurv.len(), m * n * n, "Kcurv"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        let fields = self
            .g
            .iter()
            .chain(&self.a_base)
            .chain(&self.a_fibre)
            .chain(&self.upsilon)
            .chain(&self.kcurv);
        if fields.chain(std::iter::once(&self.potential)).any(|f| f.arity() != n) {
            return Err(Error::DimensionMismatch(
                "magnetic model fields are functions of x".into(),
            ));
        }
        if self.k.nrows() != m || self.k.ncols() != m || (&self.k - self.k.transpose()).amax() > 0.0 {
            return Err(Error::InvalidInput("k must be a symmetric m x m matrix".into()));
        }
        LuFactors::factor(&self.k)?;
        check_structure_constants(m, &self.c)?;
        for a in 0..m {
            for b in 0..m {
                for g in 0..m {
                    let s: f64 = (0..m)
                        .map(|d| {
                            self.k[(a, d)] * self.c[(d * m + b) * m + g] + self.k[(b, d)] * self.c[(d * m + a) * m + g]
                        })
                        .sum();
                    if s.abs() > STRUCTURE_TOLERANCE {
                        return Err(Error::InvalidInput(format!("k is not bi-invariant: defect {s:e}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Cholesky test of `g` at sampled base points.
    pub fn check_metric(&self, samples: &SampleSpec) -> Result<()> {
        for x in samples.points(self.n)? {
            if self.metric(&x)?.cholesky().is_none() {
                return Err(Error::InvalidInput(format!("g is not positive definite at {x:?}")));
            }
        }
        Ok(())
    }

    fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.n;
        let v = self.g.iter().map(|f| f.value(x)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(n, n, |i, j| v[i * n + j]))
    }

    fn ups(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.upsilon.iter().map(|f| f.value(x)).collect()
    }

    /// `p_a = k_aγ w̄^γ + A_a`.
    pub fn fibre_momentum(&self, x: &[f64], wbar: &[f64]) -> Result<Vec<f64>> {
        let kw = &self.k * DVector::from_column_slice(wbar);
        (0..self.m).map(|a| Ok(kw[a] + self.a_fibre[a].value(x)?)).collect()
    }

    /// `Υ^a_{ib} w̄^b k_aγ w̄^γ` for each `i`; vanishes under the usual
    /// invariance assumptions but is evaluated, not assumed.
    pub fn quadratic_term(&self, x: &[f64], wbar: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        let ups = self.ups(x)?;
        let kw = &self.k * DVector::from_column_slice(wbar);
        Ok((0..n)
            .map(|i| {
                (0..m)
                    .map(|a| (0..m).map(|b| ups[(i * m + a) * m + b] * wbar[b]).sum::<f64>() * kw[a])
                    .sum()
            })
            .collect())
    }

    /// Time derivative of `(x, v, w̄)`.
    pub fn rhs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        if state.len() != 2 * n + m {
            return Err(Error::DimensionMismatch("magnetic state is (x, v, wbar)".into()));
        }
        let (x, r) = state.split_at(n);
        let (v, wbar) = r.split_at(n);
        let p = self.fibre_momentum(x, wbar)?;
        let ups = self.ups(x)?;
        let kc = self.kcurv.iter().map(|f| f.value(x)).collect::<Result<Vec<_>>>()?;
        let gj = self.g.iter().map(|f| f.gradient(x)).collect::<Result<Vec<_>>>()?;
        let ai = self.a_base.iter().map(|f| f.gradient(x)).collect::<Result<Vec<_>>>()?;
        let aa = self.a_fibre.iter().map(|f| f.gradient(x)).collect::<Result<Vec<_>>>()?;
        let dv = self.potential.gradient(x)?;
        let mut base = DVector::zeros(n);
        for i in 0..n {
            let mut s = 0.0;
            for a in 0..m {
                let curv: f64 = (0..n).map(|j| kc[(a * n + i) * n + j] * v[j]).sum();
                let adj: f64 = (0..m).map(|b| ups[(i * m + a) * m + b] * wbar[b]).sum();
                s += (-curv + adj) * p[a];
            }
            for j in 0..n {
                for k in 0..n {
                    s += 0.5 * gj[j * n + k][i] * v[j] * v[k] - gj[i * n + j][k] * v[k] * v[j];
                }
                s += ai[j][i] * v[j] - ai[i][j] * v[j];
            }
            s -= dv[i];
            for a in 0..m {
                s += aa[a][i] * wbar[a];
            }
            base[i] = s;
        }
        let vdot = linear_solve(&LinearSystem::new(self.metric(x)?, base)?)?;
        let mut fibre = DVector::zeros(m);
        for a in 0..m {
            let mut s = 0.0;
            for b in 0..m {
                let adj: f64 = (0..n).map(|i| ups[(i * m + b) * m + a] * v[i]).sum();
                let str_: f64 = (0..m).map(|c| self.c[(b * m + a) * m + c] * wbar[c]).sum();
                s += (adj + str_) * p[b];
            }
            s -= (0..n).map(|i| aa[a][i] * v[i]).sum::<f64>();
            fibre[a] = s;
        }
        let wdot = linear_solve(&LinearSystem::new(self.k.clone(), fibre)?)?;
        Ok([v, vdot.as_slice(), wdot.as_slice()].concat())
    }

    /// Integrates from `(x, v, w̄)`; diagnostics are the quadratic term and `p_a`.
    pub fn integrate(&self, state0: &[f64], t1: f64, dt: f64) -> Result<TrajectoryRecord> {
        let (n, m) = (self.n, self.m);
        let prob = IvpProblem {
            vector_field: |_t: f64, s: &[f64]| self.rhs(s),
            state0: state0.to_vec(),
            t0: 0.0,
            t1,
            dt,
        };
        let mut labels: Vec<String> = (1..=n).map(|i| format!("quadratic{i}")).collect();
        labels.extend((1..=m).map(|a| format!("p{a}")));
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let mut rec = crate::numerics::rk4_integrate_with(&prob, &refs, |_, s| {
            let (x, r) = s.split_at(n);
            let wbar = &r[n..];
            Ok([self.quadratic_term(x, wbar)?, self.fibre_momentum(x, wbar)?].concat())
        })?;
        rec.labels = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=n).map(|i| format!("v{i}")))
            .chain((1..=m).map(|a| format!("wbar{a}")))
            .collect();
        Ok(rec)
    }

    /// `L̄(x, v) = ½g_ij v^i v^j − V + A_i v^i`.
    pub fn base_lagrangian(&self) -> ScalarField {
        let model = self.clone();
        let n = self.n;
        ScalarField::new(2 * n, "Lbar", move |z: &[f64]| {
            let (x, _) = z.split_at(n);
            let vars = Jet2::seed(z);
            let pos: Vec<usize> = (0..n).collect();
            let lift = |f: &ScalarField| -> Result<Jet2> { Ok(f.jet(x)?.embed(2 * n, &pos)) };
            let mut acc = lift(&model.potential)?.scale(-1.0);
            for i in 0..n {
                acc = &acc + &(&lift(&model.a_base[i])? * &vars[n + i]);
                for j in 0..n {
                    let gij = lift(&model.g[i * n + j])?;
                    acc = &acc + &(&(&gij * &vars[n + i]) * &vars[n + j]).scale(0.5);
                }
            }
            Ok(acc)
        })
    }
}

/// `h^α(x) = −k^{αβ} A_β(x)`.
pub fn magnetic_induced_splitting(model: &MagneticModel, x: &[f64]) -> Result<Vec<f64>> {
    let a = model.a_fibre.iter().map(|f| f.value(x)).collect::<Result<Vec<_>>>()?;
    let sol = linear_solve(&LinearSystem::new(model.k.clone(), DVector::from_column_slice(&a))?)?;
    Ok(sol.iter().map(|v| -v).collect())
}

/// Threshold below which a model counts as decoupled.
pub const DECOUPLING_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingReport {
    /// `max |−K^α_ij v^j k_αγ + Υ^α_iγ A_α + ∂A_γ/∂x^i|`.
    pub residual: f64,
    pub decoupled: bool,
    /// `max |v̇(w̄) − v̇(w̄')|` under perturbed `w̄`, when decoupled.
    pub wbar_sensitivity: Option<f64>,
    /// `max |v̇ − EL(L̄)|`, when decoupled.
    pub base_el_mismatch: Option<f64>,
    /// Largest `|Υ^a_ib w̄^b k_aγ w̄^γ|` seen.
    pub quadratic_term: f64,
    pub sample_count: usize,
}

/// Samples are `(x, v, w̄)` points.
pub fn decoupling_check(model: &MagneticModel, samples: &SampleSpec) -> Result<DecouplingReport> {
    let (n, m) = (model.n, model.m);
    let sw = sweep(samples, 2 * n + m, |s| {
        let (x, r) = s.split_at(n);
        let (v, wbar) = r.split_at(n);
        let ups = model.ups(x)?;
        let kc = model.kcurv.iter().map(|f| f.value(x)).collect::<Result<Vec<_>>>()?;
        let a = model.a_fibre.iter().map(|f| f.value(x)).collect::<Result<Vec<_>>>()?;
        let da = model
            .a_fibre
            .iter()
            .map(|f| f.gradient(x))
            .collect::<Result<Vec<_>>>()?;
        let mut worst = 0.0_f64;
        for i in 0..n {
            for g in 0..m {
                let mut d = da[g][i];
                for al in 0..m {
                    let kv: f64 = (0..n).map(|j| kc[(al * n + i) * n + j] * v[j]).sum();
                    d += -kv * model.k[(al, g)] + ups[(i * m + al) * m + g] * a[al];
                }
                worst = worst.max(d.abs());
            }
        }
        let quad = model
            .quadratic_term(x, wbar)?
            .iter()
            .fold(0.0_f64, |acc, q| acc.max(q.abs()));
        Ok((worst, quad))
    })?;
    let residual = sw.values.iter().fold(0.0_f64, |a, v| a.max(v.0));
    let quadratic_term = sw.values.iter().fold(0.0_f64, |a, v| a.max(v.1));
    let decoupled = residual < DECOUPLING_TOLERANCE;
    let (mut sens, mut mismatch) = (None, None);
    if decoupled {
        let lbar = model.base_lagrangian();
        let (mut s_max, mut e_max) = (0.0_f64, 0.0_f64);
        for s in &sw.points {
            let base = model.rhs(s)?;
            let mut shifted = s.clone();
            for (k, c) in shifted[2 * n..].iter_mut().enumerate() {
                *c += 0.5 + 0.25 * k as f64;
            }
            let moved = model.rhs(&shifted)?;
            for i in 0..n {
                s_max = s_max.max((base[n + i] - moved[n + i]).abs());
            }
            let el = el_acceleration(&lbar, n, &s[..2 * n])?;
            for i in 0..n {
                e_max = e_max.max((base[n + i] - el[i]).abs());
            }
        }
        sens = Some(s_max);
        mismatch = Some(e_max);
    }
    Ok(DecouplingReport {
        residual,
        decoupled,
        wbar_sensitivity: sens,
        base_el_mismatch: mismatch,
        quadratic_term,
        sample_count: sw.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::compile;
    use crate::splitting::SplittingSpec;
    use std::collections::BTreeMap;

    fn chart() -> BundleChart {
        BundleChart::new(1, 1, 1e-6).unwrap()
    }

    fn split(text: &str) -> SplittingSpec {
        SplittingSpec::from_expressions(chart(), &[text], &BTreeMap::new()).unwrap()
    }

    fn lag(text: &str) -> LagrangianSpec {
        LagrangianSpec::from_expression(chart(), text, &BTreeMap::new()).unwrap()
    }

    fn scaled(c: &str) -> ActionSpec {
        ActionSpec::new(
            chart(),
            vec![compile(c, &chart().position_context()).unwrap()],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn structure_constants_are_validated() {
        let ch = BundleChart::new(1, 2, 1e-6).unwrap();
        let k = ActionSpec::translations(ch).k;
        assert!(ActionSpec::new(ch, k.clone(), vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        // so(2)-free abelian is fine; a 2d non-abelian algebra [E1, E2] = E2
        let c = vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        assert!(ActionSpec::new(ch, k, c).is_ok());
    }

    #[test]
    fn invariance_examples() {
        let s = SampleSpec::new(50, 42);
        let t = ActionSpec::translations(chart());
        assert_eq!(
            invariance_check(&lag("0.5*v1^2 + 0.5*w1^2 + w1*v1^2"), &t, &s)
                .unwrap()
                .max,
            0.0
        );
        let bad = invariance_check(&lag("0.5*v1^2 + 0.5*w1^2 + y1*v1"), &t, &s).unwrap();
        let vmax = s.points(4).unwrap().iter().fold(0.0_f64, |a, p| a.max(p[2].abs()));
        assert_eq!(bad.max, vmax);
    }

    #[test]
    fn momentum_examples() {
        let t = ActionSpec::translations(chart());
        assert_eq!(
            momentum_map(&lag("0.5*(v1^2 + w1^2)"), &t, &[0.1, 0.2, 0.3, 0.4]).unwrap(),
            vec![0.4]
        );
        let l = lag("0.5*v1^2 + 0.5*w1^2 + w1*v1^2");
        assert!((momentum_map(&l, &t, &[0.1, 0.2, 0.3, 0.4]).unwrap()[0] - 0.49).abs() < 1e-15);
        assert_eq!(momentum_map(&l, &t, &[0.1, 0.2, 0.3, -0.09]).unwrap()[0], 0.0);
    }

    #[test]
    fn principal_examples() {
        let s = SampleSpec::new(50, 42);
        let t = ActionSpec::translations(chart());
        assert_eq!(principal_check(&split("3*v1"), &t, &s).unwrap().max, 0.0);
        let r = principal_check(&split("y1*v1"), &t, &s).unwrap().max;
        let vmax = s.points(3).unwrap().iter().fold(0.0_f64, |a, p| a.max(p[2].abs()));
        assert_eq!(r, vmax);
    }

    #[test]
    fn omega_examples() {
        let t = ActionSpec::translations(chart());
        let w = TangentPointM::new(vec![0.0], vec![0.0], vec![1.0], vec![3.0]);
        assert_eq!(omega(&split("0"), &t, &w).unwrap(), vec![3.0]);
        let w = TangentPointM::new(vec![0.0], vec![0.0], vec![1.0], vec![1.5 + 4.0]);
        assert_eq!(omega(&split("1.5*v1"), &scaled("2"), &w).unwrap(), vec![2.0]);
        let on = TangentPointM::new(vec![0.2], vec![0.1], vec![0.7], vec![1.5 * 0.7]);
        assert_eq!(omega(&split("1.5*v1"), &t, &on).unwrap(), vec![0.0]);
    }

    #[test]
    fn domega_examples() {
        let s = SampleSpec::new(50, 42);
        let t = ActionSpec::translations(chart());
        assert!(connection_test_domega(&split("x1*v1"), &t, &s).unwrap().max < 1e-15);
        let vmax = s.points(3).unwrap().iter().fold(0.0_f64, |a, p| a.max(p[2] * p[2]));
        assert!((connection_test_domega(&split("v1^2"), &t, &s).unwrap().max - vmax).abs() < 1e-15);
        assert!(connection_test_domega(&split("sqrt(v1^2)"), &t, &s).unwrap().max < 1e-15);
    }

    #[test]
    fn xi_examples() {
        let t = ActionSpec::translations(chart());
        let h = split("1.5*v1");
        let w = TangentPointM::new(vec![0.3], vec![0.1], vec![1.0], vec![3.5]);
        let xi = xi_field(&h, &t, &w).unwrap();
        assert_eq!((xi.ty[0], xi.tw[0], xi.tx[0], xi.tv[0]), (2.0, 0.0, 0.0, 0.0));
        let on = TangentPointM::new(vec![0.3], vec![0.1], vec![1.0], vec![1.5]);
        assert_eq!(xi_field(&h, &t, &on).unwrap().tangent(), vec![0.0; 4]);
        // K = exp(y): K̇ = w·exp(y), K⁻¹(w − h) = exp(−y)(w − h)
        let e = scaled("exp(y1)");
        let xi = xi_field(&h, &e, &w).unwrap();
        assert!((xi.tw[0] - 3.5 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn unreduced_oscillator() {
        let gbar = SodeSpec::new(1, SodeProvenance::Explicit, |s| Ok(vec![-s[0]]));
        let h = split("1.5*v1");
        let t = ActionSpec::translations(chart());
        let g = unreduce(&gbar, &h, &t, &SampleSpec::new(20, 42)).unwrap();
        let r = g.integrate(&[1.0, 0.0, 0.0, 0.0], 0.0, 10.0, 1e-3).unwrap();
        for (tt, s) in r.times.iter().zip(&r.states) {
            assert!((s[0] - tt.cos()).abs() < 1e-8);
            assert!((s[3] - 1.5 * s[2]).abs() < 1e-7);
        }
        assert_eq!(
            submersion_residual(&g, &gbar, &chart(), &SampleSpec::new(100, 1))
                .unwrap()
                .max,
            0.0
        );
        let bad = unreduce(&gbar, &split("y1*v1"), &t, &SampleSpec::new(20, 42));
        assert!(matches!(bad, Err(Error::NotPrincipal { .. })));
    }

    #[test]
    fn vilms_of_sode_examples() {
        let gbar = SodeSpec::new(1, SodeProvenance::Explicit, |s| Ok(vec![-s[0]]));
        let w = TangentPointM::new(vec![1.0], vec![0.0], vec![2.0], vec![3.0]);
        let s = vilms_of_sode(&gbar, &split("1.5*v1"), &w).unwrap();
        assert_eq!((s.tx[0], s.ty[0], s.tv[0], s.tw[0]), (2.0, 3.0, -1.0, -1.5));
        let free = SodeSpec::new(1, SodeProvenance::Explicit, |_| Ok(vec![0.0]));
        assert_eq!(
            vilms_of_sode(&free, &split("0"), &w).unwrap().tangent(),
            vec![2.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn vilms_principal_examples() {
        let s = SampleSpec::new(10, 42);
        let t = ActionSpec::translations(chart());
        let good = vilms_principal_check(&split("x1*v1^2"), &t, &[0.0, 0.3, -0.5], &s).unwrap();
        assert!(good.residual < 1e-6, "{good:?}");
        let zero = vilms_principal_check(&split("y1*v1"), &t, &[0.0], &s).unwrap();
        assert_eq!(zero.residual, 0.0);
        let bad = vilms_principal_check(&split("y1*v1"), &t, &[0.5], &s).unwrap();
        assert!(bad.residual > 1e-2);
        // y-dependent K with a principal h: K = exp(y), h = 0 satisfies the coordinate condition
        let e = scaled("exp(y1)");
        let r = vilms_principal_check(&split("0"), &e, &[0.4], &s).unwrap();
        assert!(r.residual < 1e-6, "{r:?}");
    }

    fn magnetic(m: usize, a_fibre: &[&str], ups: &[&str], potential: &str) -> MagneticModel {
        let ctx = crate::expr::VarContext::base(1);
        let f = |t: &str| compile(t, &ctx).unwrap();
        MagneticModel {
            n: 1,
            m,
            g: vec![f("1")],
            k: DMatrix::identity(m, m),
            potential: f(potential),
            a_base: vec![f("0")],
            a_fibre: a_fibre.iter().map(|t| f(t)).collect(),
            upsilon: ups.iter().map(|t| f(t)).collect(),
            kcurv: vec![f("0"); m],
            c: vec![0.0; m * m * m],
        }
    }

    #[test]
    fn magnetic_examples() {
        let trivial = magnetic(1, &["0.7"], &["0"], "0");
        trivial.validate().unwrap();
        assert_eq!(trivial.rhs(&[0.3, 0.5, -0.2]).unwrap(), vec![0.5, 0.0, 0.0]);
        let osc = magnetic(1, &["0"], &["0"], "0.5*x1^2");
        assert_eq!(osc.rhs(&[0.3, 0.5, -0.2]).unwrap()[1], -0.3);
        let r = trivial.integrate(&[0.1, 0.4, 0.9], 10.0, 1e-2).unwrap();
        let p = r.diagnostic("p1").unwrap();
        assert!(p.iter().all(|v| (v - p[0]).abs() < 1e-7));
        assert_eq!(magnetic_induced_splitting(&trivial, &[0.0]).unwrap(), vec![-0.7]);
        let mut two = magnetic(1, &["6"], &["0"], "0");
        two.k = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(magnetic_induced_splitting(&two, &[0.0]).unwrap(), vec![-3.0]);
    }

    #[test]
    fn decoupling_examples() {
        let s = SampleSpec::new(50, 42);
        let r = decoupling_check(&magnetic(1, &["0.7"], &["0"], "0.5*x1^2"), &s).unwrap();
        assert!(r.decoupled && r.residual == 0.0);
        assert!(r.wbar_sensitivity.unwrap() < 1e-9 && r.base_el_mismatch.unwrap() < 1e-9);
        let r = decoupling_check(&magnetic(1, &["sin(x1)"], &["0"], "0"), &s).unwrap();
        let cmax = s
            .points(3)
            .unwrap()
            .iter()
            .fold(0.0_f64, |a, p| a.max(p[0].cos().abs()));
        assert!(!r.decoupled && (r.residual - cmax).abs() < 1e-15);
        let cancel = magnetic(2, &["cos(x1)", "sin(x1)"], &["0", "-1", "1", "0"], "0");
        cancel.validate().unwrap();
        let r = decoupling_check(&cancel, &s).unwrap();
        assert!(r.decoupled, "{r:?}");
        assert!(r.wbar_sensitivity.unwrap() < 1e-9);
        assert!(r.quadratic_term < 1e-15);
    }
}
