//! Nonlinear splittings: projectors, lifts, classification, the Vilms lift
//! and curvature.
//!
//! A splitting is given by its coefficients `h^α(x, y, v)`; every function
//! here takes points of the pullback bundle as flat slices `(x, y, v)`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::bundle::{
    complete_lift, lie_bracket, BundleChart, PullbackPoint, SecondTangentPoint, TangentPointM, VectorField,
    VectorFieldEval,
};
use crate::error::{Error, Result};
use crate::expr::{parse_expression, to_scalar_field};
use crate::jet::{Jet2, ScalarField};
use crate::lagrangian::ResidualReport;
use crate::numerics::{rk4_integrate_with, IvpProblem, TrajectoryRecord};
use crate::sampling::{sweep, SampleSpec};

/// Source of coefficient values and derivatives over `(x, y, v)`.
pub trait CoefficientModel: Send + Sync {
    fn values(&self, p: &[f64]) -> Result<Vec<f64>>;
    /// `m × (2n+m)` matrix `∂h^α/∂(x, y, v)`.
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>>;
    /// Full second-order jets when the model can supply them.
    fn jets(&self, _p: &[f64]) -> Result<Option<Vec<Jet2>>> {
        Ok(None)
    }
}

/// Coefficients given as scalar fields of `(x, y, v)`.
#[derive(Debug, Clone)]
pub struct FieldModel {
    fields: Vec<ScalarField>,
}

impl FieldModel {
    pub fn new(fields: Vec<ScalarField>) -> Self {
        Self { fields }
    }
}

impl CoefficientModel for FieldModel {
    fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.fields.iter().map(|f| f.value(p)).collect()
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let jets = self.fields.iter().map(|f| f.jet(p)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(jets.len(), p.len(), |r, c| jets[r].gradient[c]))
    }

    fn jets(&self, p: &[f64]) -> Result<Option<Vec<Jet2>>> {
        Ok(Some(self.fields.iter().map(|f| f.jet(p)).collect::<Result<_>>()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Explicit,
    InducedByLagrangian,
    AffineFromConstraints,
    VilmsLift,
}

/// A nonlinear splitting on a chart.
#[derive(Clone)]
pub struct SplittingSpec {
    pub chart: BundleChart,
    model: Arc<dyn CoefficientModel>,
    /// False when the coefficients are only defined off the slit ball.
    pub smooth_at_zero: bool,
    pub provenance: Provenance,
}

impl fmt::Debug for SplittingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SplittingSpec")
            .field("chart", &self.chart)
            .field("smooth_at_zero", &self.smooth_at_zero)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl SplittingSpec {
    pub fn new(
        chart: BundleChart,
        model: Arc<dyn CoefficientModel>,
        smooth_at_zero: bool,
        provenance: Provenance,
    ) -> Self {
        Self {
            chart,
            model,
            smooth_at_zero,
            provenance,
        }
    }

    pub fn from_fields(chart: BundleChart, fields: Vec<ScalarField>, smooth_at_zero: bool) -> Result<Self> {
        if fields.len() != chart.m {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients given for fibre dimension {}",
                fields.len(),
                chart.m
            )));
        }
        if let Some(f) = fields.iter().find(|f| f.arity() != chart.pullback_dim()) {
            return Err(Error::DimensionMismatch(format!(
                "coefficient `{}` has arity {}, expected {}",
                f.label(),
                f.arity(),
                chart.pullback_dim()
            )));
        }
        Ok(Self::new(
            chart,
            Arc::new(FieldModel::new(fields)),
            smooth_at_zero,
            Provenance::Explicit,
        ))
    }

    /// Parses `h1..hm` over `(x, y, v)`; a coefficient containing `abs`,
    /// `sqrt` or a fractional power marks the splitting as not smooth at zero.
    pub fn from_expressions(chart: BundleChart, texts: &[&str], constants: &BTreeMap<String, f64>) -> Result<Self> {
        let ctx = chart.pullback_context().with_constants(constants)?;
        let asts = texts
            .iter()
            .map(|t| parse_expression(t, &ctx))
            .collect::<Result<Vec<_>>>()?;
        let smooth = !asts.iter().any(|a| a.has_kink());
        let fields = asts.iter().map(|a| to_scalar_field(a, &ctx)).collect();
        Self::from_fields(chart, fields, smooth)
    }

    pub fn model(&self) -> &Arc<dyn CoefficientModel> {
        &self.model
    }

    fn admit(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.chart.pullback_dim() {
            return Err(Error::DimensionMismatch(format!(
                "pullback point has length {}, expected {}",
                p.len(),
                self.chart.pullback_dim()
            )));
        }
        let v = &p[self.chart.n + self.chart.m..];
        if !self.smooth_at_zero && self.chart.in_slit(v) {
            return Err(Error::domain(format!(
                "base velocity {v:?} lies inside the slit ball of radius {}",
                self.chart.slit_eps
            )));
        }
        Ok(())
    }

    /// `h^α(x, y, v)`.
    pub fn coefficients(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.admit(p)?;
        let h = self.model.values(p)?;
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(Error::domain("non-finite splitting coefficient"))
        }
    }

    /// `∂h^α/∂(x, y, v)`, an `m × (2n+m)` matrix.
    pub fn coefficient_jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        self.admit(p)?;
        let j = self.model.jacobian(p)?;
        if j.iter().all(|v| v.is_finite()) {
            Ok(j)
        } else {
            Err(Error::domain("non-finite splitting derivative"))
        }
    }

    /// Second-order jets of the coefficients; when the model has no second
    /// derivatives they come from central differences of the Jacobian.
    pub fn coefficient_jets(&self, p: &[f64]) -> Result<Vec<Jet2>> {
        self.admit(p)?;
        if let Some(j) = self.model.jets(p)? {
            return Ok(j);
        }
        let k = p.len();
        let values = self.model.values(p)?;
        let jac = self.model.jacobian(p)?;
        let mut hess = vec![vec![0.0; k * k]; values.len()];
        for c in 0..k {
            let e = 1e-5 * (1.0 + p[c].abs());
            let mut pp = p.to_vec();
            pp[c] += e;
            let mut pm = p.to_vec();
            pm[c] -= e;
            let (jp, jm) = (self.model.jacobian(&pp)?, self.model.jacobian(&pm)?);
            for (a, h) in hess.iter_mut().enumerate() {
                for r in 0..k {
                    h[r * k + c] = (jp[(a, r)] - jm[(a, r)]) / (2.0 * e);
                }
            }
        }
        Ok(values
            .into_iter()
            .zip(hess)
            .enumerate()
            .map(|(a, (value, h))| {
                let mut sym = h.clone();
                for r in 0..k {
                    for c in 0..k {
                        sym[r * k + c] = 0.5 * (h[r * k + c] + h[c * k + r]);
                    }
                }
                Jet2 {
                    value,
                    gradient: (0..k).map(|c| jac[(a, c)]).collect(),
                    hessian: sym,
                }
            })
            .collect())
    }
}

fn pullback(x: &[f64], y: &[f64], v: &[f64]) -> Vec<f64> {
    [x, y, v].concat()
}

/// `h(x, y, v) = (x, y, v, h^α(x, y, v))`.
pub fn horizontal_map(h: &SplittingSpec, p: &PullbackPoint) -> Result<TangentPointM> {
    let w = h.coefficients(&p.to_vec())?;
    Ok(TangentPointM::new(p.x.clone(), p.y.clone(), p.v.clone(), w))
}

/// `P_h(x, y, v, w) = (x, y, v, h(x, y, v))`.
pub fn project_horizontal(h: &SplittingSpec, w: &TangentPointM) -> Result<TangentPointM> {
    horizontal_map(h, &PullbackPoint::new(w.x.clone(), w.y.clone(), w.v.clone()))
}

/// `P_v(x, y, v, w) = (x, y, 0, w − h(x, y, v))`.
pub fn project_vertical(h: &SplittingSpec, w: &TangentPointM) -> Result<TangentPointM> {
    let c = h.coefficients(&w.pullback())?;
    Ok(TangentPointM::new(
        w.x.clone(),
        w.y.clone(),
        vec![0.0; w.v.len()],
        w.w.iter().zip(&c).map(|(a, b)| a - b).collect(),
    ))
}

/// `X^h(m) = h(m, X(π(m)))` for a field `X` on the base.
pub fn horizontal_lift_field(h: &SplittingSpec, x_field: &dyn VectorFieldEval, m_pt: &[f64]) -> Result<TangentPointM> {
    let n = h.chart.n;
    if m_pt.len() != h.chart.position_dim() || x_field.arity() != n || x_field.dim() != n {
        return Err(Error::DimensionMismatch("horizontal lift of a base field".into()));
    }
    let (x, y) = m_pt.split_at(n);
    let xv = x_field.eval(x)?;
    horizontal_map(h, &PullbackPoint::new(x.to_vec(), y.to_vec(), xv))
}

/// The lifted field `X^h` as a vector field on `M`.
pub struct HorizontalLift<'a> {
    pub splitting: &'a SplittingSpec,
    pub base_field: &'a dyn VectorFieldEval,
}

impl VectorFieldEval for HorizontalLift<'_> {
    fn arity(&self) -> usize {
        self.splitting.chart.position_dim()
    }

    fn dim(&self) -> usize {
        self.splitting.chart.position_dim()
    }

    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        let t = horizontal_lift_field(self.splitting, self.base_field, q)?;
        Ok([t.v, t.w].concat())
    }

    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let (n, m) = (self.splitting.chart.n, self.splitting.chart.m);
        let (x, y) = q.split_at(n);
        let xv = self.base_field.eval(x)?;
        let dx = self.base_field.jacobian(x)?;
        let jh = self.splitting.coefficient_jacobian(&pullback(x, y, &xv))?;
        let mut j = DMatrix::zeros(n + m, n + m);
        for r in 0..n {
            for c in 0..n {
                j[(r, c)] = dx[(r, c)];
            }
        }
        for a in 0..m {
            for c in 0..n {
                let chain: f64 = (0..n).map(|k| jh[(a, n + m + k)] * dx[(k, c)]).sum();
                j[(n + a, c)] = jh[(a, c)] + chain;
            }
            for b in 0..m {
                j[(n + a, n + b)] = jh[(a, n + b)];
            }
        }
        Ok(j)
    }
}

/// A base curve `t ↦ (x(t), ẋ(t))`.
pub type BaseCurve<'a> = dyn Fn(f64) -> Result<(Vec<f64>, Vec<f64>)> + Sync + 'a;

/// Derivative of the five-point Lagrange interpolant, on a possibly
/// non-uniform grid (fewer points when the grid is shorter).
fn fd_derivative(times: &[f64], values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let len = times.len();
    let d = values.first().map(Vec::len).unwrap_or(0);
    if len < 2 {
        return vec![vec![0.0; d]; len];
    }
    let width = len.min(5);
    (0..len)
        .map(|i| {
            let i0 = i.saturating_sub(width / 2).min(len - width);
            let nodes = &times[i0..i0 + width];
            let t = times[i];
            let weights: Vec<f64> = (0..width)
                .map(|j| {
                    (0..width)
                        .filter(|&k| k != j)
                        .map(|k| {
                            let rest: f64 = (0..width)
                                .filter(|&q| q != j && q != k)
                                .map(|q| (t - nodes[q]) / (nodes[j] - nodes[q]))
                                .product();
                            rest / (nodes[j] - nodes[k])
                        })
                        .sum()
                })
                .collect();
            (0..d)
                .map(|c| weights.iter().enumerate().map(|(j, w)| w * values[i0 + j][c]).sum())
                .collect()
        })
        .collect()
}

/// Horizontal lift of a base curve: solves `ẏ = h(x(t), y, ẋ(t))`, `y(t0) = y0`.
///
/// Rows hold `(x, y, ẋ, h)`; the diagnostic `lift_residual` compares a
/// five-point derivative of the computed `y` with `h`.
pub fn horizontal_lift_curve(
    h: &SplittingSpec,
    base_curve: &BaseCurve<'_>,
    y0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<TrajectoryRecord> {
    let (n, m) = (h.chart.n, h.chart.m);
    if y0.len() != m {
        return Err(Error::DimensionMismatch("initial fibre point".into()));
    }
    let field = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let (x, xd) = base_curve(t)?;
        h.coefficients(&pullback(&x, y, &xd))
    };
    let prob = IvpProblem {
        vector_field: field,
        state0: y0.to_vec(),
        t0,
        t1,
        dt,
    };
    let ys = rk4_integrate_with(&prob, &[], |_, _| Ok(Vec::new()))?;
    let dy = fd_derivative(&ys.times, &ys.states);
    let mut rec = TrajectoryRecord {
        labels: coordinate_labels(n, m),
        diagnostic_labels: vec!["lift_residual".into()],
        ..TrajectoryRecord::default()
    };
    for (k, (&t, y)) in ys.times.iter().zip(&ys.states).enumerate() {
        let (x, xd) = base_curve(t)?;
        let w = h.coefficients(&pullback(&x, y, &xd))?;
        let res = dy[k].iter().zip(&w).fold(0.0_f64, |a, (d, w)| a.max((d - w).abs()));
        rec.times.push(t);
        rec.states.push([&x[..], y, &xd, &w].concat());
        rec.diagnostics.push(vec![res]);
    }
    Ok(rec)
}

/// Column labels `x1.., y1.., v1.., w1..`.
pub fn coordinate_labels(n: usize, m: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(2 * (n + m));
    for (p, k) in [("x", n), ("y", m), ("v", n), ("w", m)] {
        out.extend((1..=k).map(|i| format!("{p}{i}")));
    }
    out
}

/// Largest gap between the lift of `c` and the lift of `c∘θ` at matched
/// parameters `θ(s)` for each `s` in `checkpoints` (all `> s0`).
#[allow(clippy::too_many_arguments)]
pub fn reparametrization_deviation(
    h: &SplittingSpec,
    curve: &BaseCurve<'_>,
    theta: &(dyn Fn(f64) -> f64 + Sync),
    dtheta: &(dyn Fn(f64) -> f64 + Sync),
    y0: &[f64],
    s0: f64,
    checkpoints: &[f64],
    dt: f64,
) -> Result<f64> {
    let reparam = |s: f64| -> Result<(Vec<f64>, Vec<f64>)> {
        let (x, xd) = curve(theta(s))?;
        let k = dtheta(s);
        Ok((x, xd.iter().map(|v| k * v).collect()))
    };
    let m = h.chart.m;
    let n = h.chart.n;
    let mut worst = 0.0_f64;
    for &s in checkpoints {
        let a = horizontal_lift_curve(h, &reparam, y0, s0, s, dt.min(s - s0))?;
        let b = horizontal_lift_curve(h, curve, y0, theta(s0), theta(s), dt.min(theta(s) - theta(s0)))?;
        let ya = &a.final_state()[n..n + m];
        let yb = &b.final_state()[n..n + m];
        for (p, q) in ya.iter().zip(yb) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ehresmann,
    Affine,
    Homogeneous,
    General,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Ehresmann => "Ehresmann",
            Verdict::Affine => "Affine",
            Verdict::Homogeneous => "Homogeneous",
            Verdict::General => "General",
        })
    }
}

/// Residual keys in a [`ClassificationReport`].
pub const RESIDUAL_EULER: &str = "euler";
pub const RESIDUAL_LINEARITY: &str = "linearity";
pub const RESIDUAL_INTERCEPT: &str = "intercept";
pub const RESIDUAL_REFLECTION: &str = "reflection";

/// Outcome of [`classify`].
///
/// Residuals are maxima over the admissible samples of
/// - `euler`: `|v^i ∂h^α/∂v^i − h^α|`
/// - `linearity`: `|∂²h^α/∂v^i∂v^j|`
/// - `intercept`: `|h^α(x, y, 0)|` (infinite when `h` is not smooth at zero)
/// - `reflection`: `|h(v) − h(−v) − 2 v^i ∂h/∂v^i|`
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub verdict: Verdict,
    pub residuals: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub sample_count: usize,
    pub skipped: usize,
    pub seed: u64,
}

struct PointResiduals {
    euler: f64,
    linearity: f64,
    intercept: f64,
    reflection: f64,
    scale: f64,
}

fn point_residuals(h: &SplittingSpec, p: &[f64]) -> Result<PointResiduals> {
    let (n, m) = (h.chart.n, h.chart.m);
    let off = n + m;
    let v = &p[off..];
    let val = h.coefficients(p)?;
    let jac = h.coefficient_jacobian(p)?;
    let jets = h.coefficient_jets(p)?;
    let mut neg = p.to_vec();
    for c in &mut neg[off..] {
        *c = -*c;
    }
    let val_neg = h.coefficients(&neg)?;
    let mut r = PointResiduals {
        euler: 0.0,
        linearity: 0.0,
        intercept: f64::INFINITY,
        reflection: 0.0,
        scale: 0.0,
    };
    for a in 0..m {
        let dv: f64 = (0..n).map(|i| v[i] * jac[(a, off + i)]).sum();
        r.euler = r.euler.max((dv - val[a]).abs());
        r.reflection = r.reflection.max((val[a] - val_neg[a] - 2.0 * dv).abs());
        r.scale = r.scale.max(val[a].abs()).max(dv.abs());
        for i in 0..n {
            for j in 0..n {
                r.linearity = r.linearity.max(jets[a].hess(off + i, off + j).abs());
            }
        }
    }
    if h.smooth_at_zero {
        let mut zero = p.to_vec();
        zero[off..].iter_mut().for_each(|c| *c = 0.0);
        let h0 = h.coefficients(&zero)?;
        r.intercept = h0.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    }
    Ok(r)
}

/// Sampling-based classification.
///
/// With `tol = 1e-7·(1 + scale)`, where `scale` bounds `|h|` and `|v·∂h/∂v|`
/// over the samples: a splitting that is smooth at zero with linearity and
/// reflection residuals below `tol` is Ehresmann when its intercept is also
/// below `tol`, and Affine otherwise; failing that it is Homogeneous when the
/// Euler residual is below `tol`, and General otherwise.
pub fn classify(h: &SplittingSpec, samples: &SampleSpec) -> Result<ClassificationReport> {
    let sw = sweep(samples, h.chart.pullback_dim(), |p| point_residuals(h, p))?;
    let mut euler = 0.0_f64;
    let mut linearity = 0.0_f64;
    let mut intercept = 0.0_f64;
    let mut reflection = 0.0_f64;
    let mut scale = 0.0_f64;
    for r in &sw.values {
        euler = euler.max(r.euler);
        linearity = linearity.max(r.linearity);
        intercept = intercept.max(r.intercept);
        reflection = reflection.max(r.reflection);
        scale = scale.max(r.scale);
    }
    let tol = 1e-7 * (1.0 + scale);
    let affine_like = h.smooth_at_zero && linearity < tol && reflection < tol;
    let verdict = if affine_like && intercept < tol {
        Verdict::Ehresmann
    } else if affine_like {
        Verdict::Affine
    } else if euler < tol {
        Verdict::Homogeneous
    } else {
        Verdict::General
    };
    let residuals = [
        (RESIDUAL_EULER, euler),
        (RESIDUAL_LINEARITY, linearity),
        (RESIDUAL_INTERCEPT, intercept),
        (RESIDUAL_REFLECTION, reflection),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(ClassificationReport {
        verdict,
        residuals,
        tolerance: tol,
        sample_count: sw.len(),
        skipped: sw.skipped,
        seed: samples.seed,
    })
}

/// Coefficients of the Vilms lift, on the chart of `Tπ: TM → TN`.
struct VilmsModel {
    inner: SplittingSpec,
}

impl VilmsModel {
    /// Splits a Vilms pullback point `(x, v, y, w, X, V)`.
    fn unpack<'a>(&self, p: &'a [f64]) -> [&'a [f64]; 6] {
        let (n, m) = (self.inner.chart.n, self.inner.chart.m);
        let (x, r) = p.split_at(n);
        let (v, r) = r.split_at(n);
        let (y, r) = r.split_at(m);
        let (w, r) = r.split_at(m);
        let (bx, bv) = r.split_at(n);
        [x, v, y, w, bx, bv]
    }
}

impl CoefficientModel for VilmsModel {
    fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        let [x, v, y, w, bx, bv] = self.unpack(p);
        let q = pullback(x, y, bx);
        let top = self.inner.coefficients(&q)?;
        let jac = self.inner.coefficient_jacobian(&q)?;
        let d = [v, w, bv].concat();
        let bottom = (0..self.inner.chart.m)
            .map(|a| (0..d.len()).map(|k| jac[(a, k)] * d[k]).sum())
            .collect::<Vec<f64>>();
        Ok([top, bottom].concat())
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let (n, m) = (self.inner.chart.n, self.inner.chart.m);
        let [x, v, y, w, bx, bv] = self.unpack(p);
        let q = pullback(x, y, bx);
        let jets = self.inner.coefficient_jets(&q)?;
        let d = [v, w, bv].concat();
        let k = q.len();
        // column of the Vilms coordinate holding inner coordinate `c` of (x, y, X)
        let col_of_q = |c: usize| -> usize {
            if c < n {
                c
            } else if c < n + m {
                2 * n + (c - n)
            } else {
                2 * n + 2 * m + (c - n - m)
            }
        };
        // column holding component `c` of the direction d = (v, w, V)
        let col_of_d = |c: usize| -> usize {
            if c < n {
                n + c
            } else if c < n + m {
                2 * n + m + (c - n)
            } else {
                2 * n + 2 * m + n + (c - n - m)
            }
        };
        let mut j = DMatrix::zeros(2 * m, 4 * n + 2 * m);
        for a in 0..m {
            for c in 0..k {
                j[(a, col_of_q(c))] = jets[a].gradient[c];
                let second: f64 = (0..k).map(|r| jets[a].hess(r, c) * d[r]).sum();
                j[(m + a, col_of_q(c))] += second;
                j[(m + a, col_of_d(c))] += jets[a].gradient[c];
            }
        }
        Ok(j)
    }
}

/// The Vilms lift of `h`, a splitting of `Tπ: TM → TN`.
///
/// Its chart has base coordinates `(x, v)`, fibre coordinates `(y, w)` and base
/// velocities `(X, V)`; the coefficients are `(Y, W)` with `Y = h(x, y, X)` and
/// `W = ∂h/∂x·v + ∂h/∂y·w + ∂h/∂v·V`, all at `(x, y, X)`.
pub fn vilms_lift(h: &SplittingSpec) -> Result<SplittingSpec> {
    let chart = BundleChart::new(2 * h.chart.n, 2 * h.chart.m, h.chart.slit_eps)?;
    Ok(SplittingSpec::new(
        chart,
        Arc::new(VilmsModel { inner: h.clone() }),
        h.smooth_at_zero,
        Provenance::VilmsLift,
    ))
}

/// `h^V(w, (X, V))` as a point of `TTM`.
pub fn vilms_horizontal(
    h: &SplittingSpec,
    w: &TangentPointM,
    big_x: &[f64],
    big_v: &[f64],
) -> Result<SecondTangentPoint> {
    let m = h.chart.m;
    let p = [&w.x[..], &w.v, &w.y, &w.w, big_x, big_v].concat();
    let c = VilmsModel { inner: h.clone() }.values(&p)?;
    Ok(SecondTangentPoint {
        tx: big_x.to_vec(),
        ty: c[..m].to_vec(),
        tv: big_v.to_vec(),
        tw: c[m..].to_vec(),
        ..SecondTangentPoint::zero_at(w)
    })
}

/// Vertical projector of the Vilms lift, from its coordinate formula.
pub fn vilms_vertical_projection(h: &SplittingSpec, s: &SecondTangentPoint) -> Result<SecondTangentPoint> {
    let hv = vilms_horizontal(h, &s.base(), &s.tx, &s.tv)?;
    Ok(SecondTangentPoint {
        tx: vec![0.0; s.tx.len()],
        ty: s.ty.iter().zip(&hv.ty).map(|(a, b)| a - b).collect(),
        tv: vec![0.0; s.tv.len()],
        tw: s.tw.iter().zip(&hv.tw).map(|(a, b)| a - b).collect(),
        ..s.clone()
    })
}

/// `TP_v`: the tangent map of the vertical projector, using coefficient jets.
pub fn tangent_vertical_projection(h: &SplittingSpec, s: &SecondTangentPoint) -> Result<SecondTangentPoint> {
    let p = pullback(&s.x, &s.y, &s.v);
    let jets = h.coefficient_jets(&p)?;
    let dir = pullback(&s.tx, &s.ty, &s.tv);
    let base = project_vertical(h, &s.base())?;
    Ok(SecondTangentPoint {
        x: base.x,
        y: base.y,
        v: base.v,
        w: base.w,
        tx: s.tx.clone(),
        ty: s.ty.clone(),
        tv: vec![0.0; s.tv.len()],
        tw: jets
            .iter()
            .zip(&s.tw)
            .map(|(j, tw)| tw - j.gradient.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>())
            .collect(),
    })
}

/// `σ ∘ TP_v ∘ σ`.
pub fn flipped_vertical_projection(h: &SplittingSpec, s: &SecondTangentPoint) -> Result<SecondTangentPoint> {
    use crate::bundle::canonical_flip;
    Ok(canonical_flip(&tangent_vertical_projection(h, &canonical_flip(s))?))
}

/// Comparison of lifts of `h(∂/∂x^j)` with Vilms lifts of `∂/∂x^j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VilmsLiftComparison {
    /// `|(h(∂_j))^c − (∂_j^c)^Vilms|`, zero for every splitting.
    pub complete_residual: f64,
    /// `|(h(∂_j))^v − (∂_j^v)^Vilms|`, generically nonzero.
    pub vertical_difference: f64,
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()))
}

pub fn vilms_complete_lift_check(h: &SplittingSpec, j: usize, at: &TangentPointM) -> Result<VilmsLiftComparison> {
    let n = h.chart.n;
    if j >= n {
        return Err(Error::InvalidInput(format!("coordinate index {j} out of range")));
    }
    let e_j = VectorField::coordinate(n, j);
    let lifted = HorizontalLift {
        splitting: h,
        base_field: &e_j,
    };
    let complete = complete_lift(&lifted, at)?;
    let unit: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
    let zero = vec![0.0; n];
    let vilms_c = vilms_horizontal(h, at, &unit, &zero)?;
    let hx = lifted.eval(&at.position())?;
    let vertical_of_lift = SecondTangentPoint {
        tv: hx[..n].to_vec(),
        tw: hx[n..].to_vec(),
        ..SecondTangentPoint::zero_at(at)
    };
    let vilms_v = vilms_horizontal(h, at, &zero, &unit)?;
    Ok(VilmsLiftComparison {
        complete_residual: max_diff(&complete.tangent(), &vilms_c.tangent()),
        vertical_difference: max_diff(&vertical_of_lift.tangent(), &vilms_v.tangent()),
    })
}

/// `P_h(0_m) = (x, y, 0, h(x, y, 0))`; reported, not otherwise used.
pub fn horizontal_of_zero(h: &SplittingSpec, m_pt: &[f64]) -> Result<TangentPointM> {
    let n = h.chart.n;
    let (x, y) = m_pt.split_at(n);
    horizontal_map(h, &PullbackPoint::new(x.to_vec(), y.to_vec(), vec![0.0; n]))
}

/// Sampled projector identities over `TM`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectorReport {
    /// `max |P_h∘P_h − P_h|`.
    pub idempotence: f64,
    /// `max |P_h + P_v − id|` on w-blocks, in units of `ε·max(1, |w|, |h|)`.
    pub complement_ulps: f64,
    /// `max |P_h(P_v(w)) − (x, y, 0, h(x, y, 0))|`, or `None` when the zero
    /// section lies in the slit.
    pub zero_section: Option<f64>,
    pub sample_count: usize,
    pub skipped: usize,
}

pub fn projector_identities(h: &SplittingSpec, samples: &SampleSpec) -> Result<ProjectorReport> {
    let chart = h.chart;
    let sw = sweep(samples, chart.tangent_dim(), |s| {
        let w = TangentPointM::from_slice(&chart, s)?;
        let ph = project_horizontal(h, &w)?;
        let pv = project_vertical(h, &w)?;
        let idem = max_diff(&project_horizontal(h, &ph)?.to_vec(), &ph.to_vec());
        let ulps = (0..chart.m).fold(0.0_f64, |a, al| {
            let scale = 1.0_f64.max(w.w[al].abs()).max(ph.w[al].abs());
            a.max((ph.w[al] + pv.w[al] - w.w[al]).abs() / (f64::EPSILON * scale))
        });
        let zs = match horizontal_of_zero(h, &w.position()) {
            Ok(zero) => max_diff(&project_horizontal(h, &pv)?.to_vec(), &zero.to_vec()),
            Err(Error::Domain(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok([idem, ulps, zs])
    })?;
    let col = |k: usize| sw.values.iter().fold(0.0_f64, |a, v| a.max(v[k]));
    Ok(ProjectorReport {
        idempotence: col(0),
        complement_ulps: col(1),
        zero_section: sw.values.iter().map(|v| v[2]).filter(|z| !z.is_nan()).reduce(f64::max),
        sample_count: sw.len(),
        skipped: sw.skipped,
    })
}

/// `max |h^V vertical projector − σ∘TP_v∘σ|` over samples of `TTM`.
pub fn vilms_oracle_check(h: &SplittingSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let chart = h.chart;
    let sw = sweep(samples, 2 * chart.tangent_dim(), |s| {
        let s = SecondTangentPoint::from_slice(&chart, s)?;
        let a = vilms_vertical_projection(h, &s)?;
        let b = flipped_vertical_projection(h, &s)?;
        Ok(max_diff(&a.to_vec(), &b.to_vec()))
    })?;
    Ok(ResidualReport {
        max: sw.max_abs(),
        sample_count: sw.len(),
        skipped: sw.skipped,
    })
}

/// `R̄(X, Y)(m) = [X^h, Y^h](m) − [X, Y]^h(m)`, returned as a tangent vector at `m`.
pub fn curvature_rbar(
    h: &SplittingSpec,
    x_field: &dyn VectorFieldEval,
    y_field: &dyn VectorFieldEval,
    at: &[f64],
) -> Result<TangentPointM> {
    let n = h.chart.n;
    let xh = HorizontalLift {
        splitting: h,
        base_field: x_field,
    };
    let yh = HorizontalLift {
        splitting: h,
        base_field: y_field,
    };
    let top = lie_bracket(&xh, &yh, at)?;
    let (x, y) = at.split_at(n);
    let base = lie_bracket(x_field, y_field, x)?;
    let lifted = horizontal_map(h, &PullbackPoint::new(x.to_vec(), y.to_vec(), base))?;
    let low = [lifted.v, lifted.w].concat();
    let d: Vec<f64> = top.iter().zip(&low).map(|(a, b)| a - b).collect();
    Ok(TangentPointM::new(
        x.to_vec(),
        y.to_vec(),
        d[..n].to_vec(),
        d[n..].to_vec(),
    ))
}

/// A base field `x ↦ c + L·(x − x0)`.
struct AffineBaseField {
    c: Vec<f64>,
    l: DMatrix<f64>,
    x0: Vec<f64>,
}

impl VectorFieldEval for AffineBaseField {
    fn arity(&self) -> usize {
        self.c.len()
    }
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        let k = self.c.len();
        Ok((0..k)
            .map(|r| self.c[r] + (0..k).map(|s| self.l[(r, s)] * (p[s] - self.x0[s])).sum::<f64>())
            .collect())
    }
    fn jacobian(&self, _p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.l.clone())
    }
}

/// Tolerance on extension dependence in [`curvature_pointwise`].
pub const EXTENSION_TOLERANCE: f64 = 1e-7;

/// `R̄_m(u, v)` using constant extensions of `u` and `v`.
///
/// The value is recomputed with two linearly varying extensions; if the
/// results differ by more than [`EXTENSION_TOLERANCE`] the value depends on
/// the extension and `NotWellDefined` is returned.
pub fn curvature_pointwise(h: &SplittingSpec, u: &[f64], v: &[f64], m_pt: &[f64]) -> Result<TangentPointM> {
    let n = h.chart.n;
    if u.len() != n || v.len() != n || m_pt.len() != h.chart.position_dim() {
        return Err(Error::DimensionMismatch("pointwise curvature arguments".into()));
    }
    let x0 = m_pt[..n].to_vec();
    let ext = |c: &[f64], l: DMatrix<f64>| AffineBaseField {
        c: c.to_vec(),
        l,
        x0: x0.clone(),
    };
    let zero = DMatrix::zeros(n, n);
    let reference = curvature_rbar(h, &ext(u, zero.clone()), &ext(v, zero), m_pt)?;
    let l1 = DMatrix::from_fn(n, n, |r, c| 0.3 + 0.7 * r as f64 - 0.4 * c as f64);
    let l2 = DMatrix::from_fn(n, n, |r, c| if r == c { -0.6 } else { 0.25 });
    let alt = curvature_rbar(h, &ext(u, l1), &ext(v, l2), m_pt)?;
    let difference = max_diff(&reference.w, &alt.w).max(max_diff(&reference.v, &alt.v));
    if difference > EXTENSION_TOLERANCE {
        return Err(Error::NotWellDefined { difference });
    }
    Ok(reference)
}

/// `h^α = −A^α_i(x, y) v^i + A^α_0(x, y)`.
#[derive(Debug, Clone)]
pub struct AffineSplittingData {
    pub chart: BundleChart,
    /// `A^α_i`, row-major over `(α, i)`, each a field of `(x, y)`.
    pub a: Vec<ScalarField>,
    /// `A^α_0`, fields of `(x, y)`.
    pub a0: Vec<ScalarField>,
    /// Largest reconstruction error seen by [`affine_decompose`] (0 when built directly).
    pub reconstruction_residual: f64,
}

/// `H_i = ∂/∂x^i − A^α_i ∂/∂y^α`.
struct FrameField<'a> {
    data: &'a AffineSplittingData,
    i: usize,
}

impl VectorFieldEval for FrameField<'_> {
    fn arity(&self) -> usize {
        self.data.chart.position_dim()
    }
    fn dim(&self) -> usize {
        self.data.chart.position_dim()
    }
    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.data.chart.n, self.data.chart.m);
        let mut out = vec![0.0; n + m];
        out[self.i] = 1.0;
        for a in 0..m {
            out[n + a] = -self.data.a[a * n + self.i].value(q)?;
        }
        Ok(out)
    }
    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let (n, m) = (self.data.chart.n, self.data.chart.m);
        let mut j = DMatrix::zeros(n + m, n + m);
        for a in 0..m {
            let g = self.data.a[a * n + self.i].gradient(q)?;
            for c in 0..n + m {
                j[(n + a, c)] = -g[c];
            }
        }
        Ok(j)
    }
}

/// `A_0 = A^α_0 ∂/∂y^α`.
struct DriftField<'a>(&'a AffineSplittingData);

impl VectorFieldEval for DriftField<'_> {
    fn arity(&self) -> usize {
        self.0.chart.position_dim()
    }
    fn dim(&self) -> usize {
        self.0.chart.position_dim()
    }
    fn eval(&self, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.0.chart.n;
        let mut out = vec![0.0; q.len()];
        for (a, f) in self.0.a0.iter().enumerate() {
            out[n + a] = f.value(q)?;
        }
        Ok(out)
    }
    fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.0.chart.n;
        let mut j = DMatrix::zeros(q.len(), q.len());
        for (a, f) in self.0.a0.iter().enumerate() {
            for (c, g) in f.gradient(q)?.into_iter().enumerate() {
                j[(n + a, c)] = g;
            }
        }
        Ok(j)
    }
}

impl AffineSplittingData {
    pub fn new(chart: BundleChart, a: Vec<ScalarField>, a0: Vec<ScalarField>) -> Result<Self> {
        let (n, m) = (chart.n, chart.m);
        if a.len() != m * n || a0.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "affine data needs {} linear and {m} drift coefficients",
                m * n
            )));
        }
        if a.iter().chain(&a0).any(|f| f.arity() != n + m) {
            return Err(Error::DimensionMismatch(
                "affine coefficients are fields of (x, y)".into(),
            ));
        }
        Ok(Self {
            chart,
            a,
            a0,
            reconstruction_residual: 0.0,
        })
    }

    /// `(A (m×n), A_0 (m))` at `(x, y)`.
    pub fn values(&self, q: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let (n, m) = (self.chart.n, self.chart.m);
        let mut a = DMatrix::zeros(m, n);
        for al in 0..m {
            for i in 0..n {
                a[(al, i)] = self.a[al * n + i].value(q)?;
            }
        }
        let a0 = self.a0.iter().map(|f| f.value(q)).collect::<Result<_>>()?;
        Ok((a, a0))
    }

    /// `−A·v + A_0` at a pullback point.
    pub fn reconstruct(&self, p: &[f64]) -> Result<Vec<f64>> {
        let (n, m) = (self.chart.n, self.chart.m);
        let (a, a0) = self.values(&p[..n + m])?;
        let v = &p[n + m..];
        Ok((0..m)
            .map(|al| a0[al] - (0..n).map(|i| a[(al, i)] * v[i]).sum::<f64>())
            .collect())
    }

    /// `B^α_ij` with `[H_i, H_j] = B^α_ij ∂/∂y^α`, indexed `[α][i][j]`.
    pub fn curvature_coefficients(&self, q: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
        let (n, m) = (self.chart.n, self.chart.m);
        let mut b = vec![vec![vec![0.0; n]; n]; m];
        for i in 0..n {
            for j in (i + 1)..n {
                let br = lie_bracket(&FrameField { data: self, i }, &FrameField { data: self, i: j }, q)?;
                for a in 0..m {
                    b[a][i][j] = br[n + a];
                    b[a][j][i] = -br[n + a];
                }
            }
        }
        Ok(b)
    }

    /// `A^α_0j` with `[H_j, A_0] = A^α_0j ∂/∂y^α`, indexed `[α][j]`.
    pub fn drift_coefficients(&self, q: &[f64]) -> Result<Vec<Vec<f64>>> {
        let (n, m) = (self.chart.n, self.chart.m);
        let mut out = vec![vec![0.0; n]; m];
        for j in 0..n {
            let br = lie_bracket(&FrameField { data: self, i: j }, &DriftField(self), q)?;
            for a in 0..m {
                out[a][j] = br[n + a];
            }
        }
        Ok(out)
    }

    /// The splitting `h = −A·v + A_0`.
    pub fn to_splitting(&self, provenance: Provenance) -> SplittingSpec {
        SplittingSpec::new(self.chart, Arc::new(AffineModel(self.clone())), true, provenance)
    }
}

struct AffineModel(AffineSplittingData);

impl AffineModel {
    /// Jets of each coefficient over `(x, y, v)`.
    fn coefficient_jets(&self, p: &[f64]) -> Result<Vec<Jet2>> {
        let d = &self.0;
        let (n, m) = (d.chart.n, d.chart.m);
        let k = p.len();
        let q = &p[..n + m];
        let pos: Vec<usize> = (0..n + m).collect();
        let vars = Jet2::seed(p);
        (0..m)
            .map(|al| {
                let mut acc = d.a0[al].jet(q)?.embed(k, &pos);
                for i in 0..n {
                    let a = d.a[al * n + i].jet(q)?.embed(k, &pos);
                    acc = &acc - &(&a * &vars[n + m + i]);
                }
                Ok(acc)
            })
            .collect()
    }
}

impl CoefficientModel for AffineModel {
    fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.0.reconstruct(p)
    }
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let jets = self.coefficient_jets(p)?;
        Ok(DMatrix::from_fn(jets.len(), p.len(), |r, c| jets[r].gradient[c]))
    }
    fn jets(&self, p: &[f64]) -> Result<Option<Vec<Jet2>>> {
        Ok(Some(self.coefficient_jets(p)?))
    }
}

/// Threshold on the reconstruction residual in [`affine_decompose`].
pub const AFFINE_TOLERANCE: f64 = 1e-7;

/// Reads off `A_0(x, y) = h(x, y, 0)` and `A_i(x, y) = h(x, y, 0) − h(x, y, e_i)`,
/// the latter being `−∂h/∂v^i` for an affine splitting.
pub fn affine_decompose(h: &SplittingSpec, samples: &SampleSpec) -> Result<AffineSplittingData> {
    let (n, m) = (h.chart.n, h.chart.m);
    let k = n + m;
    // jet over (x, y) of h^α(x, y, c) for a fixed velocity c
    let restricted = |alpha: usize, c: Vec<f64>| -> ScalarField {
        let h = h.clone();
        ScalarField::new(k, format!("h{}", alpha + 1), move |q: &[f64]| {
            let p = pullback(&q[..n], &q[n..], &c);
            let jets = h.coefficient_jets(&p)?;
            let j = &jets[alpha];
            Ok(Jet2 {
                value: j.value,
                gradient: j.gradient[..k].to_vec(),
                hessian: (0..k * k).map(|t| j.hess(t / k, t % k)).collect(),
            })
        })
    };
    let mut a0 = Vec::with_capacity(m);
    let mut a = Vec::with_capacity(m * n);
    for al in 0..m {
        let f0 = restricted(al, vec![0.0; n]);
        a0.push(f0.clone());
        for i in 0..n {
            let unit: Vec<f64> = (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
            let fi = restricted(al, unit);
            let (f0c, fic) = (f0.clone(), fi);
            a.push(ScalarField::new(
                k,
                format!("A{}_{}", al + 1, i + 1),
                move |q: &[f64]| Ok(&f0c.jet(q)? - &fic.jet(q)?),
            ));
        }
    }
    let mut data = AffineSplittingData::new(h.chart, a, a0)?;
    let sw = sweep(samples, h.chart.pullback_dim(), |p| {
        let direct = h.coefficients(p)?;
        let rebuilt = data.reconstruct(p)?;
        Ok(max_diff(&direct, &rebuilt))
    })?;
    let residual = sw.max_abs();
    if residual > AFFINE_TOLERANCE {
        return Err(Error::NotAffine { residual });
    }
    data.reconstruction_residual = residual;
    Ok(data)
}

/// `R̄⁰(ζ)(w) = ζ^i (v^j B^α_ij + A^α_0i) ∂/∂y^α`, returned as a tangent
/// vector at `(x, y)` with the value in the `w` block.
pub fn rbar_zero(affine: &AffineSplittingData, zeta: &[f64], w_pt: &TangentPointM) -> Result<TangentPointM> {
    let (n, m) = (affine.chart.n, affine.chart.m);
    if zeta.len() != n {
        return Err(Error::DimensionMismatch("zeta must have the base dimension".into()));
    }
    let q = w_pt.position();
    let b = affine.curvature_coefficients(&q)?;
    let d = affine.drift_coefficients(&q)?;
    let val = (0..m)
        .map(|a| {
            (0..n)
                .map(|i| zeta[i] * ((0..n).map(|j| w_pt.v[j] * b[a][i][j]).sum::<f64>() + d[a][i]))
                .sum()
        })
        .collect();
    Ok(TangentPointM::new(w_pt.x.clone(), w_pt.y.clone(), vec![0.0; n], val))
}
