//! Euler–Lagrange dynamics, the splitting induced by a fibre-regular
//! Lagrangian, and subduction to the base.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::BundleChart;
use crate::error::{Error, Result};
use crate::expr::{parse_expression, to_scalar_field};
use crate::jet::{Jet2, ScalarField};
use crate::numerics::{
    condition_estimate, linear_solve, newton_solve, rk4_integrate_with, IvpProblem, LinearSystem, LuFactors,
    NewtonProblem, TrajectoryRecord,
};
use crate::sampling::{sweep, SampleSpec};
use crate::splitting::{CoefficientModel, Provenance, SplittingSpec};

/// A Lagrangian `L(x, y, v, w)` on `TM`.
#[derive(Debug, Clone)]
pub struct LagrangianSpec {
    pub chart: BundleChart,
    pub lagrangian: ScalarField,
    /// Declared homogeneity degree in the velocities, if any.
    pub homogeneity: Option<f64>,
    /// False when `L` contains `abs`, `sqrt` or fractional powers.
    pub smooth_at_zero: bool,
}

impl LagrangianSpec {
    pub fn new(chart: BundleChart, lagrangian: ScalarField, smooth_at_zero: bool) -> Result<Self> {
        if lagrangian.arity() != chart.tangent_dim() {
            return Err(Error::DimensionMismatch(format!(
                "Lagrangian has arity {}, expected {}",
                lagrangian.arity(),
                chart.tangent_dim()
            )));
        }
        Ok(Self {
            chart,
            lagrangian,
            homogeneity: None,
            smooth_at_zero,
        })
    }

    pub fn from_expression(chart: BundleChart, text: &str, constants: &BTreeMap<String, f64>) -> Result<Self> {
        let ctx = chart.tangent_context().with_constants(constants)?;
        let ast = parse_expression(text, &ctx)?;
        Self::new(chart, to_scalar_field(&ast, &ctx), !ast.has_kink())
    }

    pub fn with_homogeneity(mut self, degree: f64) -> Self {
        self.homogeneity = Some(degree);
        self
    }

    pub fn jet(&self, w_pt: &[f64]) -> Result<Jet2> {
        self.lagrangian.jet(w_pt)
    }

    /// Index of `w^α` in a flat `(x, y, v, w)` point.
    fn w_index(&self, alpha: usize) -> usize {
        2 * self.chart.n + self.chart.m + alpha
    }
}

/// Maps a failed solve against a velocity Hessian to `SingularHessian`.
fn hessian_solve(h: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    linear_solve(&LinearSystem::new(h, rhs)?).map_err(|e| match e {
        Error::SingularMatrix { .. } | Error::IllConditioned { .. } => Error::SingularHessian(format!("{what}: {e}")),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FibreRegularity {
    pub det: f64,
    pub condition: f64,
}

impl FibreRegularity {
    pub fn is_regular(&self) -> bool {
        self.det != 0.0 && self.condition.is_finite() && self.condition < crate::numerics::DEFAULT_CONDITION_BOUND
    }
}

/// Determinant and condition estimate of `∂²L/∂w∂w`.
pub fn fibre_regularity(l: &LagrangianSpec, w_pt: &[f64]) -> Result<FibreRegularity> {
    let j = l.jet(w_pt)?;
    let m = l.chart.m;
    let h = DMatrix::from_fn(m, m, |a, b| j.hess(l.w_index(a), l.w_index(b)));
    let det = LuFactors::factor(&h).map(|lu| lu.determinant()).unwrap_or(0.0);
    Ok(FibreRegularity {
        det,
        condition: condition_estimate(&h),
    })
}

/// Accelerations `f` of the Euler–Lagrange equations of `field`, a function
/// of `(q, u)` with `k` configuration coordinates, from
/// `(∂²L/∂u∂u)·f = ∂L/∂q − (∂²L/∂u∂q)·u`.
pub fn el_acceleration(field: &ScalarField, k: usize, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != 2 * k || field.arity() != 2 * k {
        return Err(Error::DimensionMismatch(format!(
            "Euler-Lagrange state of length {} for {k} coordinates",
            state.len()
        )));
    }
    let j = field.jet(state)?;
    let huu = DMatrix::from_fn(k, k, |a, b| j.hess(k + a, k + b));
    let rhs = DVector::from_fn(k, |a, _| {
        j.gradient[a] - (0..k).map(|b| j.hess(k + a, b) * state[k + b]).sum::<f64>()
    });
    Ok(hessian_solve(huu, rhs, "velocity Hessian")?.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SodeProvenance {
    EulerLagrange,
    Unreduced,
    Explicit,
}

type ForceFn = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync;

/// A second-order system `q̈ = f(q, q̇)` on `dim` coordinates.
#[derive(Clone)]
pub struct SodeSpec {
    pub dim: usize,
    forces: Arc<ForceFn>,
    pub provenance: SodeProvenance,
}

impl std::fmt::Debug for SodeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SodeSpec")
            .field("dim", &self.dim)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl SodeSpec {
    pub fn new(
        dim: usize,
        provenance: SodeProvenance,
        forces: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            forces: Arc::new(forces),
            provenance,
        }
    }

    pub fn forces(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != 2 * self.dim {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for a system on {} coordinates",
                state.len(),
                self.dim
            )));
        }
        (self.forces)(state)
    }

    /// `Γ(q, u) = (u, f(q, u))`.
    pub fn vector_field(&self, state: &[f64]) -> Result<Vec<f64>> {
        let f = self.forces(state)?;
        Ok([&state[self.dim..], &f[..]].concat())
    }

    pub fn integrate(&self, state0: &[f64], t0: f64, t1: f64, dt: f64) -> Result<TrajectoryRecord> {
        self.integrate_with(state0, t0, t1, dt, &[], |_, _| Ok(Vec::new()))
    }

    pub fn integrate_with<D>(
        &self,
        state0: &[f64],
        t0: f64,
        t1: f64,
        dt: f64,
        diagnostic_labels: &[&str],
        diagnostic: D,
    ) -> Result<TrajectoryRecord>
    where
        D: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
    {
        let prob = IvpProblem {
            vector_field: |_t: f64, s: &[f64]| self.vector_field(s),
            state0: state0.to_vec(),
            t0,
            t1,
            dt,
        };
        rk4_integrate_with(&prob, diagnostic_labels, diagnostic)
    }
}

/// The Euler–Lagrange SODE of `L` on all `n + m` coordinates.
pub fn euler_lagrange_sode(l: &LagrangianSpec) -> SodeSpec {
    let field = l.lagrangian.clone();
    let k = l.chart.position_dim();
    SodeSpec::new(k, SodeProvenance::EulerLagrange, move |s| el_acceleration(&field, k, s))
}

/// Steps of the continuation parameter along the ray `s·v`.
const CONTINUATION_STEPS: usize = 10;
/// Newton tolerance for the defining relation.
pub const INDUCED_TOL: f64 = 1e-12;
const PROBE_POINTS: usize = 3;
const PROBE_SEEDS: usize = 10;
const BRANCH_SPREAD: f64 = 1e-6;

/// Newton solution of `∂L/∂w(x, y, v, w) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedSolve {
    pub w: Vec<f64>,
    /// Largest Newton iteration count over the continuation steps.
    pub max_iterations: usize,
}

/// Coefficients `h(x, y, v)` defined implicitly by `∂L/∂w^α(x, y, v, h) = 0`.
pub struct InducedModel {
    lag: LagrangianSpec,
    max_iterations: AtomicUsize,
}

impl InducedModel {
    pub fn new(lag: LagrangianSpec) -> Self {
        Self {
            lag,
            max_iterations: AtomicUsize::new(0),
        }
    }

    pub fn lagrangian(&self) -> &LagrangianSpec {
        &self.lag
    }

    /// Largest per-step iteration count seen by any solve so far.
    pub fn max_iterations_seen(&self) -> usize {
        self.max_iterations.load(Ordering::Relaxed)
    }

    fn full_point(&self, p: &[f64], w: &[f64]) -> Vec<f64> {
        [p, w].concat()
    }

    /// Newton from `seed` at a single pullback point.
    pub fn newton_at(&self, p: &[f64], seed: Vec<f64>) -> Result<(Vec<f64>, usize)> {
        let m = self.lag.chart.m;
        let residual = |w: &[f64]| -> Result<Vec<f64>> {
            let j = self.lag.jet(&self.full_point(p, w))?;
            Ok((0..m).map(|a| j.gradient[self.lag.w_index(a)]).collect())
        };
        let jacobian = |w: &[f64]| -> Result<DMatrix<f64>> {
            let j = self.lag.jet(&self.full_point(p, w))?;
            Ok(DMatrix::from_fn(m, m, |a, b| {
                j.hess(self.lag.w_index(a), self.lag.w_index(b))
            }))
        };
        let prob = NewtonProblem::new(residual, jacobian, seed).with_tol(INDUCED_TOL);
        let sol = newton_solve(&prob).map_err(|e| match e {
            Error::SingularMatrix { .. } | Error::IllConditioned { .. } => {
                Error::SingularHessian(format!("fibre Hessian at {p:?}: {e}"))
            }
            other => other,
        })?;
        Ok((sol.x, sol.iterations))
    }

    /// Continuation from `w = 0` along `s ↦ (x, y, s·v)`, `s = 0, 0.1, …, 1`.
    /// Steps that are outside the domain are skipped; the final one must succeed.
    pub fn solve(&self, p: &[f64]) -> Result<InducedSolve> {
        let (n, m) = (self.lag.chart.n, self.lag.chart.m);
        if p.len() != 2 * n + m {
            return Err(Error::DimensionMismatch("induced splitting point".into()));
        }
        let mut w = vec![0.0; m];
        let mut worst = 0;
        for k in 0..=CONTINUATION_STEPS {
            let s = k as f64 / CONTINUATION_STEPS as f64;
            let mut q = p.to_vec();
            for c in &mut q[n + m..] {
                *c *= s;
            }
            match self.newton_at(&q, w.clone()) {
                Ok((sol, it)) => {
                    w = sol;
                    worst = worst.max(it);
                }
                Err(Error::Domain(_)) if k < CONTINUATION_STEPS => continue,
                Err(e) => return Err(e),
            }
        }
        self.max_iterations.fetch_max(worst, Ordering::Relaxed);
        Ok(InducedSolve {
            w,
            max_iterations: worst,
        })
    }

    /// Roots reached from the seeds `w0 = −2 + 4k/9`, `k = 0..9`.
    fn probe_roots(&self, p: &[f64]) -> (Vec<Vec<f64>>, Option<Error>) {
        let m = self.lag.chart.m;
        let mut roots = Vec::new();
        let mut first_err = None;
        for k in 0..PROBE_SEEDS {
            let w0 = -2.0 + 4.0 * k as f64 / (PROBE_SEEDS - 1) as f64;
            match self.newton_at(p, vec![w0; m]) {
                Ok((r, _)) => roots.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        (roots, first_err)
    }

    /// Rejects models whose Newton iteration reaches distinct roots.
    pub fn branch_probe(&self, seed: u64) -> Result<()> {
        let dim = self.lag.chart.pullback_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..PROBE_POINTS {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (roots, err) = self.probe_roots(&p);
            if roots.is_empty() {
                match err {
                    Some(Error::Domain(_)) | None => continue,
                    Some(e) => return Err(e),
                }
            }
            let mut spread = 0.0_f64;
            for a in &roots {
                for b in &roots {
                    for (u, v) in a.iter().zip(b) {
                        spread = spread.max((u - v).abs());
                    }
                }
            }
            if spread > BRANCH_SPREAD {
                return Err(Error::BranchAmbiguity { point: p, spread });
            }
        }
        Ok(())
    }
}

impl CoefficientModel for InducedModel {
    fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(p)?.w)
    }

    /// Implicit-function formula `∂h/∂z = −(∂²L/∂w∂w)⁻¹·∂²L/∂w∂z`.
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let w = self.solve(p)?.w;
        self.implicit_jacobian(p, &w)
    }

    /// Second derivatives by central differences of the implicit Jacobian,
    /// with the nearby roots found by Newton started from the root at `p`.
    fn jets(&self, p: &[f64]) -> Result<Option<Vec<Jet2>>> {
        let w = self.solve(p)?.w;
        let jac = self.implicit_jacobian(p, &w)?;
        let (m, k) = (self.lag.chart.m, p.len());
        let mut hess = vec![vec![0.0; k * k]; m];
        for c in 0..k {
            let e = 1e-5 * (1.0 + p[c].abs());
            let mut pp = p.to_vec();
            pp[c] += e;
            let mut pm = p.to_vec();
            pm[c] -= e;
            let (wp, _) = self.newton_at(&pp, w.clone())?;
            let (wm, _) = self.newton_at(&pm, w.clone())?;
            let (jp, jm) = (self.implicit_jacobian(&pp, &wp)?, self.implicit_jacobian(&pm, &wm)?);
            for (a, h) in hess.iter_mut().enumerate() {
                for r in 0..k {
                    h[r * k + c] = (jp[(a, r)] - jm[(a, r)]) / (2.0 * e);
                }
            }
        }
        Ok(Some(
            hess.into_iter()
                .enumerate()
                .map(|(a, h)| Jet2 {
                    value: w[a],
                    gradient: (0..k).map(|c| jac[(a, c)]).collect(),
                    hessian: (0..k * k).map(|t| 0.5 * (h[t] + h[(t % k) * k + t / k])).collect(),
                })
                .collect(),
        ))
    }
}

impl InducedModel {
    fn implicit_jacobian(&self, p: &[f64], w: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.lag.chart.m;
        let j = self.lag.jet(&self.full_point(p, w))?;
        let lww = DMatrix::from_fn(m, m, |a, b| j.hess(self.lag.w_index(a), self.lag.w_index(b)));
        let lwz = DMatrix::from_fn(m, p.len(), |a, c| j.hess(self.lag.w_index(a), c));
        let lu = LuFactors::factor(&lww).map_err(|e| Error::SingularHessian(format!("fibre Hessian: {e}")))?;
        let mut out = DMatrix::zeros(m, p.len());
        for c in 0..p.len() {
            let col = lu.solve(&lwz.column(c).into_owned());
            for a in 0..m {
                out[(a, c)] = -col[a];
            }
        }
        Ok(out)
    }
}

/// Seed of the branch probe run when an induced splitting is built.
pub const BRANCH_PROBE_SEED: u64 = 42;

/// The splitting induced by a fibre-regular `L`, with its model for statistics.
pub fn induced_splitting_with_model(l: &LagrangianSpec) -> Result<(SplittingSpec, Arc<InducedModel>)> {
    let model = Arc::new(InducedModel::new(l.clone()));
    model.branch_probe(BRANCH_PROBE_SEED)?;
    let spec = SplittingSpec::new(
        l.chart,
        model.clone(),
        l.smooth_at_zero,
        Provenance::InducedByLagrangian,
    );
    Ok((spec, model))
}

/// The splitting `h` with `∂L/∂w ∘ h = 0`.
pub fn induced_splitting(l: &LagrangianSpec) -> Result<SplittingSpec> {
    Ok(induced_splitting_with_model(l)?.0)
}

/// Maximum of a sampled residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    pub max: f64,
    pub sample_count: usize,
    pub skipped: usize,
}

fn report_from(values: &crate::sampling::Sweep<f64>) -> ResidualReport {
    ResidualReport {
        max: values.max_abs(),
        sample_count: values.len(),
        skipped: values.skipped,
    }
}

/// `max |∂L/∂y^α ∘ h|`. Checking the coordinate frame suffices: for `f·Y`
/// the extra term is a multiple of `Y^v(L) ∘ h`, which vanishes.
pub fn symmetry_condition_check(l: &LagrangianSpec, h: &SplittingSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let (n, m) = (l.chart.n, l.chart.m);
    let sw = sweep(samples, l.chart.pullback_dim(), |p| {
        let w = h.coefficients(p)?;
        let j = l.jet(&[p, &w[..]].concat())?;
        Ok((0..m).fold(0.0_f64, |a, al| a.max(j.gradient[n + al].abs())))
    })?;
    Ok(report_from(&sw))
}

/// `max |∂L/∂w^α ∘ h|`, zero exactly when `h` is induced by `L`.
pub fn defining_relation_check(l: &LagrangianSpec, h: &SplittingSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let m = l.chart.m;
    let sw = sweep(samples, l.chart.pullback_dim(), |p| {
        let w = h.coefficients(p)?;
        let j = l.jet(&[p, &w[..]].concat())?;
        Ok((0..m).fold(0.0_f64, |a, al| a.max(j.gradient[l.w_index(al)].abs())))
    })?;
    Ok(report_from(&sw))
}

/// `E = v·∂L/∂v + w·∂L/∂w − L` at a point of `TM`.
pub fn energy(l: &LagrangianSpec, w_pt: &[f64]) -> Result<f64> {
    let j = l.jet(w_pt)?;
    let k = l.chart.position_dim();
    Ok((k..2 * k).map(|c| w_pt[c] * j.gradient[c]).sum::<f64>() - j.value)
}

/// `max |Γ_L(∂L/∂w^α)|` on the image of `h`.
pub fn tangency_check(l: &LagrangianSpec, h: &SplittingSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let m = l.chart.m;
    let k = l.chart.position_dim();
    let sw = sweep(samples, l.chart.pullback_dim(), |p| {
        let w = h.coefficients(p)?;
        let state = [p, &w[..]].concat();
        let f = el_acceleration(&l.lagrangian, k, &state)?;
        let j = l.jet(&state)?;
        let dir = [&state[k..], &f[..]].concat();
        Ok((0..m).fold(0.0_f64, |acc, al| {
            let row = l.w_index(al);
            let d: f64 = (0..2 * k).map(|c| j.hess(row, c) * dir[c]).sum();
            acc.max(d.abs())
        }))
    })?;
    Ok(report_from(&sw))
}

/// Threshold on `y`-dependence of `L ∘ h`.
pub const SUBDUCTION_TOLERANCE: f64 = 1e-6;

/// `L̄(x, v) = L(x, y_ref, v, h(x, y_ref, v))`.
#[derive(Debug, Clone)]
pub struct Subduced {
    pub lbar: ScalarField,
    pub y_ref: Vec<f64>,
    pub y_independence: f64,
}

/// Jet of `L ∘ h` over `(x, v)` at fixed `y`.
fn subduced_jet(l: &LagrangianSpec, h: &SplittingSpec, y: &[f64], z: &[f64]) -> Result<Jet2> {
    let (n, m) = (l.chart.n, l.chart.m);
    let (x, v) = z.split_at(n);
    let p = [x, y, v].concat();
    let hj = h.coefficient_jets(&p)?;
    let outer = l.jet(&[&p[..], &hj.iter().map(|j| j.value).collect::<Vec<_>>()[..]].concat())?;
    let zdim = 2 * n;
    let vars = Jet2::seed(z);
    // (x, v) inside the pullback coordinates (x, y, v)
    let pick: Vec<usize> = (0..n).chain(n + m..2 * n + m).collect();
    let mut inner = Vec::with_capacity(l.chart.tangent_dim());
    inner.extend(vars[..n].iter().cloned());
    inner.extend(y.iter().map(|&c| Jet2::constant(zdim, c)));
    inner.extend(vars[n..].iter().cloned());
    for j in &hj {
        inner.push(Jet2 {
            value: j.value,
            gradient: pick.iter().map(|&c| j.gradient[c]).collect(),
            hessian: pick
                .iter()
                .flat_map(|&r| pick.iter().map(move |&c| (r, c)))
                .map(|(r, c)| j.hess(r, c))
                .collect(),
        });
    }
    Jet2::compose(&outer, &inner)
}

/// Subduces `L` through `h`, with `y_ref` the fibre value of the first sample.
pub fn subduce(l: &LagrangianSpec, h: &SplittingSpec, samples: &SampleSpec) -> Result<Subduced> {
    let (n, m) = (l.chart.n, l.chart.m);
    let first = samples.points(l.chart.pullback_dim())?;
    let y_ref = first[0][n..n + m].to_vec();
    let composed = |p: &[f64]| -> Result<f64> {
        let w = h.coefficients(p)?;
        l.lagrangian.value(&[p, &w[..]].concat())
    };
    let sw = sweep(samples, l.chart.pullback_dim(), |p| {
        let mut q = p.to_vec();
        q[n..n + m].copy_from_slice(&y_ref);
        Ok(composed(p)? - composed(&q)?)
    })?;
    let y_independence = sw.max_abs();
    if y_independence > SUBDUCTION_TOLERANCE {
        return Err(Error::NotSubducible {
            residual: y_independence,
        });
    }
    let (lc, hc, yc) = (l.clone(), h.clone(), y_ref.clone());
    let lbar = ScalarField::new(2 * n, "Lbar", move |z: &[f64]| subduced_jet(&lc, &hc, &yc, z));
    Ok(Subduced {
        lbar,
        y_ref,
        y_independence,
    })
}

/// Comparison of a full Euler–Lagrange run with the subduced one.
#[derive(Debug, Clone)]
pub struct ProjectionReport {
    /// `max_t |x_full(t) − x_reduced(t)|`.
    pub base_deviation: f64,
    /// `max_t |w(t) − h(x, y, v)(t)|`.
    pub horizontality_drift: f64,
    /// Euler–Lagrange residual of `L̄` along the projected full solution.
    pub lbar_el_residual: f64,
    /// Smallest `|det ∂²L̄/∂v∂v|` along the reduced run.
    pub lbar_min_det: f64,
    pub full: TrajectoryRecord,
    pub reduced: TrajectoryRecord,
}

/// Integrates `Γ_L` from `(x0, y0, v0, w0)` (with `w0 = h` when absent) and
/// `Γ_L̄` from `(x0, v0)` on the same grid.
#[allow(clippy::too_many_arguments)]
pub fn projection_verify(
    l: &LagrangianSpec,
    h: &SplittingSpec,
    sub: &Subduced,
    x0: &[f64],
    v0: &[f64],
    y0: &[f64],
    w0: Option<&[f64]>,
    t1: f64,
    dt: f64,
) -> Result<ProjectionReport> {
    let (n, m) = (l.chart.n, l.chart.m);
    let k = n + m;
    let w_start = match w0 {
        Some(w) => w.to_vec(),
        None => h.coefficients(&[x0, y0, v0].concat())?,
    };
    let sode = euler_lagrange_sode(l);
    let full = sode.integrate_with(
        &[x0, y0, v0, &w_start[..]].concat(),
        0.0,
        t1,
        dt,
        &["horizontality_drift", "lbar_el_residual"],
        |_, s| {
            let p = [&s[..n], &s[n..k], &s[k..k + n]].concat();
            let hw = h.coefficients(&p)?;
            let drift = hw
                .iter()
                .zip(&s[k + n..])
                .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()));
            // the reduced equations evaluated with the full accelerations
            let z = [&s[..n], &s[k..k + n]].concat();
            let acc = sode.forces(s)?;
            let j = sub.lbar.jet(&z)?;
            let mut res = 0.0_f64;
            for i in 0..n {
                let lhs: f64 = (0..n)
                    .map(|r| j.hess(n + i, n + r) * acc[r] + j.hess(n + i, r) * z[n + r])
                    .sum();
                res = res.max((lhs - j.gradient[i]).abs());
            }
            Ok(vec![drift, res])
        },
    )?;
    let lbar = sub.lbar.clone();
    let reduced_sode = SodeSpec::new(n, SodeProvenance::EulerLagrange, move |s| el_acceleration(&lbar, n, s));
    let reduced = reduced_sode.integrate_with(&[x0, v0].concat(), 0.0, t1, dt, &["lbar_hessian_det"], |_, s| {
        let j = sub.lbar.jet(s)?;
        let hv = DMatrix::from_fn(n, n, |a, b| j.hess(n + a, n + b));
        Ok(vec![LuFactors::factor(&hv).map(|lu| lu.determinant()).unwrap_or(0.0)])
    })?;
    let mut base_deviation = 0.0_f64;
    for (a, b) in full.states.iter().zip(&reduced.states) {
        for i in 0..n {
            base_deviation = base_deviation.max((a[i] - b[i]).abs());
        }
    }
    let lbar_min_det = reduced
        .diagnostic("lbar_hessian_det")
        .unwrap_or_default()
        .iter()
        .fold(f64::INFINITY, |a, d| a.min(d.abs()));
    Ok(ProjectionReport {
        base_deviation,
        horizontality_drift: full.diagnostic_max("horizontality_drift").unwrap_or(0.0),
        lbar_el_residual: full.diagnostic_max("lbar_el_residual").unwrap_or(0.0),
        lbar_min_det,
        full,
        reduced,
    })
}

/// Tolerance on `|Δ(L) − 2L|` for the homogeneity hypothesis.
pub const HOMOGENEITY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneityReport {
    /// `max |Δ(L) − 2L|` over the samples.
    pub liouville_residual: f64,
    /// `max |v·∂h/∂v − h|` of the induced splitting.
    pub euler_residual: f64,
    pub sample_count: usize,
    pub skipped: usize,
}

/// `max |Δ(L) − 2L|` over samples of `TM`, with `Δ = v·∂/∂v + w·∂/∂w`.
pub fn liouville_homogeneity_residual(l: &LagrangianSpec, samples: &SampleSpec) -> Result<ResidualReport> {
    let k = l.chart.position_dim();
    let sw = sweep(samples, l.chart.tangent_dim(), |s| {
        if !l.smooth_at_zero && l.chart.in_slit(&s[k..k + l.chart.n]) {
            return Err(Error::domain("sample inside the slit ball"));
        }
        let j = l.jet(s)?;
        let delta: f64 = (k..2 * k).map(|c| s[c] * j.gradient[c]).sum();
        Ok(delta - 2.0 * j.value)
    })?;
    Ok(report_from(&sw))
}

/// Checks `Δ(L) = 2L` and then the Euler residual of the induced splitting.
pub fn homogeneity_of_induced(l: &LagrangianSpec, samples: &SampleSpec) -> Result<HomogeneityReport> {
    let hom = liouville_homogeneity_residual(l, samples)?;
    if hom.max >= HOMOGENEITY_TOLERANCE {
        return Err(Error::HypothesisFailed(format!(
            "Lagrangian is not 2-homogeneous: max |Δ(L) - 2L| = {:e}",
            hom.max
        )));
    }
    let h = induced_splitting(l)?;
    let (n, m) = (l.chart.n, l.chart.m);
    let sw = sweep(samples, l.chart.pullback_dim(), |p| {
        let val = h.coefficients(p)?;
        let jac = h.coefficient_jacobian(p)?;
        let v = &p[n + m..];
        Ok((0..m).fold(0.0_f64, |a, al| {
            let d: f64 = (0..n).map(|i| v[i] * jac[(al, n + m + i)]).sum();
            a.max((d - val[al]).abs())
        }))
    })?;
    Ok(HomogeneityReport {
        liouville_residual: hom.max,
        euler_residual: sw.max_abs(),
        sample_count: sw.len(),
        skipped: sw.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag(text: &str) -> LagrangianSpec {
        LagrangianSpec::from_expression(BundleChart::new(1, 1, 1e-6).unwrap(), text, &BTreeMap::new()).unwrap()
    }

    const CUBIC: &str = "0.5*v1^2 + 0.5*w1^2 + w1*v1^2";
    const KINKED: &str = "0.5*v1^2 + 0.5*(w1 - sqrt(v1^2))^2";

    #[test]
    fn fibre_regularity_examples() {
        assert_eq!(
            fibre_regularity(&lag("0.5*v1^2 + 0.5*w1^2"), &[0.1, 0.2, 0.3, 0.4])
                .unwrap()
                .det,
            1.0
        );
        assert_eq!(fibre_regularity(&lag(CUBIC), &[0.1, 0.2, 0.3, 0.4]).unwrap().det, 1.0);
        let r = fibre_regularity(&lag("v1*w1"), &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(r.det, 0.0);
        assert!(!r.is_regular());
    }

    #[test]
    fn defining_relation_and_energy() {
        let l = lag(CUBIC);
        let h = induced_splitting(&l).unwrap();
        assert!(defining_relation_check(&l, &h, &SampleSpec::new(30, 42)).unwrap().max < 1e-9);
        let zero = SplittingSpec::from_expressions(l.chart, &["0"], &BTreeMap::new()).unwrap();
        let r = defining_relation_check(&l, &zero, &SampleSpec::new(30, 42)).unwrap();
        assert!(r.max > 0.1);
        // E = ½v² + ½w² + 2wv²
        assert_eq!(energy(&l, &[0.0, 0.0, 1.0, 2.0]).unwrap(), 0.5 + 2.0 + 4.0);
    }

    #[test]
    fn el_forces() {
        let sode = euler_lagrange_sode(&lag("0.5*(v1^2 + w1^2)"));
        assert_eq!(sode.forces(&[0.3, 0.1, 0.2, 0.5]).unwrap(), vec![0.0, 0.0]);
        let osc = lag("0.5*v1^2 - 0.5*x1^2 + 0.5*w1^2");
        let r = euler_lagrange_sode(&osc)
            .integrate(&[1.0, 0.0, 0.0, 0.0], 0.0, 2.0 * std::f64::consts::PI, 1e-3)
            .unwrap();
        for (t, s) in r.times.iter().zip(&r.states) {
            assert!((s[0] - t.cos()).abs() < 1e-6);
        }
        let bad = euler_lagrange_sode(&lag("0.5*v1^2 + x1*w1"));
        assert!(matches!(
            bad.forces(&[0.0, 0.0, 1.0, 1.0]),
            Err(Error::SingularHessian(_))
        ));
    }

    #[test]
    fn cubic_hessian_determinant() {
        // full velocity Hessian [[1 + 2w, 2v], [2v, 1]]
        let l = lag(CUBIC);
        let (v, w) = (0.2_f64, -0.04);
        let j = l.jet(&[0.0, 0.0, v, w]).unwrap();
        let det = j.hess(2, 2) * j.hess(3, 3) - j.hess(2, 3) * j.hess(3, 2);
        assert!((det - (1.0 + 2.0 * w - 4.0 * v * v)).abs() < 1e-14);
        assert!(euler_lagrange_sode(&l)
            .forces(&[0.0, 0.0, v, w])
            .unwrap()
            .iter()
            .all(|f| f.is_finite()));
    }

    #[test]
    fn induced_examples() {
        let h = induced_splitting(&lag(CUBIC)).unwrap();
        assert!((h.coefficients(&[0.3, 0.4, 0.7]).unwrap()[0] + 0.49).abs() < 1e-12);
        let h = induced_splitting(&lag("0.5*v1^2 + 0.5*(w1 - x1*v1)^2")).unwrap();
        assert!((h.coefficients(&[0.3, 0.4, 0.7]).unwrap()[0] - 0.21).abs() < 1e-12);
        let h = induced_splitting(&lag(KINKED)).unwrap();
        assert!(!h.smooth_at_zero);
        assert!((h.coefficients(&[0.3, 0.4, -0.7]).unwrap()[0] - 0.7).abs() < 1e-12);
        assert!(h.coefficients(&[0.3, 0.4, 1e-9]).is_err());
    }

    #[test]
    fn branch_ambiguity_detected() {
        // ∂L/∂w = w³ − w has roots −1, 0, 1
        let r = induced_splitting(&lag("0.5*v1^2 + 0.25*w1^4 - 0.5*w1^2"));
        assert!(matches!(r, Err(Error::BranchAmbiguity { .. })), "{r:?}");
    }

    #[test]
    fn implicit_derivatives_match_differences() {
        let l = lag("0.5*v1^2 + 0.5*w1^2 + 0.1*w1^4 + w1*x1*v1 + sin(y1)*w1");
        let h = induced_splitting(&l).unwrap();
        let s = SampleSpec::new(50, 3);
        for p in s.points(3).unwrap() {
            let j = h.coefficient_jacobian(&p).unwrap();
            for c in 0..3 {
                let e = 1e-6;
                let mut pp = p.clone();
                pp[c] += e;
                let mut pm = p.clone();
                pm[c] -= e;
                let fd = (h.coefficients(&pp).unwrap()[0] - h.coefficients(&pm).unwrap()[0]) / (2.0 * e);
                assert!((fd - j[(0, c)]).abs() <= 1e-5 * (1.0 + j[(0, c)].abs()));
            }
        }
    }

    #[test]
    fn symmetry_and_tangency() {
        let s = SampleSpec::new(50, 42).with_box(-0.3, 0.3);
        let l = lag(CUBIC);
        let h = induced_splitting(&l).unwrap();
        assert_eq!(symmetry_condition_check(&l, &h, &s).unwrap().max, 0.0);
        assert!(tangency_check(&l, &h, &s).unwrap().max < 1e-8);
        let bad = lag("0.5*v1^2 + 0.5*w1^2 + y1*v1");
        let hb = induced_splitting(&bad).unwrap();
        let pts = s.points(3).unwrap();
        let vmax = pts.iter().fold(0.0_f64, |a, p| a.max(p[2].abs()));
        assert_eq!(symmetry_condition_check(&bad, &hb, &s).unwrap().max, vmax);
        assert!(tangency_check(&bad, &hb, &s).unwrap().max > 0.1);
        assert!(matches!(subduce(&bad, &hb, &s), Err(Error::NotSubducible { .. })));
    }

    #[test]
    fn subduced_cubic() {
        let s = SampleSpec::new(50, 42);
        let l = lag(CUBIC);
        let h = induced_splitting(&l).unwrap();
        let sub = subduce(&l, &h, &s).unwrap();
        for (x, v) in [(0.1, 0.3), (-0.5, 0.8), (0.9, -0.2)] {
            let j = sub.lbar.jet(&[x, v]).unwrap();
            assert!((j.value - (0.5 * v * v - 0.5 * v.powi(4))).abs() < 1e-12);
            assert!((j.gradient[1] - (v - 2.0 * v.powi(3))).abs() < 1e-10);
            assert!((j.hess(1, 1) - (1.0 - 6.0 * v * v)).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_cubic() {
        let l = lag(CUBIC);
        let h = induced_splitting(&l).unwrap();
        let sub = subduce(&l, &h, &SampleSpec::new(20, 42)).unwrap();
        let r = projection_verify(&l, &h, &sub, &[0.0], &[0.2], &[0.0], None, 5.0, 1e-3).unwrap();
        assert!(r.base_deviation < 1e-6);
        assert!(r.horizontality_drift < 1e-6);
        assert!(r.lbar_el_residual < 1e-6);
        assert!((r.full.final_state()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn homogeneity() {
        let s = SampleSpec::new(100, 42);
        let r = homogeneity_of_induced(&lag(KINKED), &s).unwrap();
        assert!(r.liouville_residual < 1e-8 && r.euler_residual < 1e-7);
        let r = homogeneity_of_induced(&lag("0.5*(v1^2 + w1^2)"), &s).unwrap();
        assert_eq!(r.euler_residual, 0.0);
        assert!(matches!(
            homogeneity_of_induced(&lag(CUBIC), &s),
            Err(Error::HypothesisFailed(_))
        ));
    }
}
