//! Affine nonholonomic constraints `ẏ^α + A^α_i(x, y) ẋ^i = A^α_0(x, y)`
//! and their Lagrange–d'Alembert dynamics on the reduced state `(x, y, v)`.

use nalgebra::{DMatrix, DVector};

use crate::bundle::BundleChart;
use crate::error::{Error, Result};
use crate::jet::{Jet2, ScalarField};
use crate::lagrangian::{energy, LagrangianSpec};
use crate::numerics::{linear_solve, rk4_integrate_with, IvpProblem, LinearSystem, TrajectoryRecord};
use crate::splitting::{coordinate_labels, AffineSplittingData, Provenance, SplittingSpec};

#[derive(Debug, Clone)]
pub struct AffineConstraintSpec {
    data: AffineSplittingData,
}

impl AffineConstraintSpec {
    /// `a` holds `A^α_i` row-major over `(α, i)`; all entries are fields of `(x, y)`.
    pub fn new(chart: BundleChart, a: Vec<ScalarField>, a0: Vec<ScalarField>) -> Result<Self> {
        Ok(Self {
            data: AffineSplittingData::new(chart, a, a0)?,
        })
    }

    pub fn chart(&self) -> &BundleChart {
        &self.data.chart
    }

    /// The affine splitting `h = −A·v + A_0` whose image is the constraint.
    pub fn affine_data(&self) -> &AffineSplittingData {
        &self.data
    }

    pub fn to_splitting(&self) -> SplittingSpec {
        self.data.to_splitting(Provenance::AffineFromConstraints)
    }

    /// Jets over `(x, y, v)` of `w = −A·v + A_0`.
    fn w_jets(&self, p: &[f64]) -> Result<Vec<Jet2>> {
        let (n, m) = (self.data.chart.n, self.data.chart.m);
        let k = p.len();
        let q = &p[..n + m];
        let pos: Vec<usize> = (0..n + m).collect();
        let vars = Jet2::seed(p);
        (0..m)
            .map(|al| {
                let mut acc = self.data.a0[al].jet(q)?.embed(k, &pos);
                for i in 0..n {
                    let a = self.data.a[al * n + i].jet(q)?.embed(k, &pos);
                    acc = &acc - &(&a * &vars[n + m + i]);
                }
                Ok(acc)
            })
            .collect()
    }
}

/// `L_c(x, y, v) = L(x, y, v, −A·v + A_0)`.
pub fn constrained_lagrangian(l: &LagrangianSpec, c: &AffineConstraintSpec) -> Result<ScalarField> {
    if l.chart.n != c.chart().n || l.chart.m != c.chart().m {
        return Err(Error::DimensionMismatch(
            "Lagrangian and constraints live on different charts".into(),
        ));
    }
    let (lc, cc) = (l.clone(), c.clone());
    Ok(ScalarField::new(l.chart.pullback_dim(), "Lc", move |p: &[f64]| {
        let w = cc.w_jets(p)?;
        let values: Vec<f64> = w.iter().map(|j| j.value).collect();
        let outer = lc.jet(&[p, &values[..]].concat())?;
        let mut inner = Jet2::seed(p);
        inner.extend(w);
        Jet2::compose(&outer, &inner)
    }))
}

/// Right-hand side of the Lagrange–d'Alembert equations on `(x, y, v)`.
#[derive(Clone)]
pub struct LagrangeDalembert {
    lagrangian: LagrangianSpec,
    constraints: AffineConstraintSpec,
    lc: ScalarField,
}

impl LagrangeDalembert {
    pub fn new(l: &LagrangianSpec, c: &AffineConstraintSpec) -> Result<Self> {
        Ok(Self {
            lagrangian: l.clone(),
            constraints: c.clone(),
            lc: constrained_lagrangian(l, c)?,
        })
    }

    pub fn constrained_lagrangian(&self) -> &ScalarField {
        &self.lc
    }

    /// `w = −A·v + A_0`.
    pub fn reconstruct_w(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.constraints.data.reconstruct(state)
    }

    /// `(ẋ, ẏ, v̇)` with `v̇` from
    /// `d/dt(∂L_c/∂v^i) − ∂L_c/∂x^i + A^α_i ∂L_c/∂y^α = (−B^α_ij v^j − A^α_0i) ∂L/∂w^α`.
    pub fn rhs(&self, state: &[f64]) -> Result<Vec<f64>> {
        let chart = self.lagrangian.chart;
        let (n, m) = (chart.n, chart.m);
        if state.len() != chart.pullback_dim() {
            return Err(Error::DimensionMismatch("constrained state is (x, y, v)".into()));
        }
        let q = &state[..n + m];
        let v = &state[n + m..];
        let data = &self.constraints.data;
        let (a, _) = data.values(q)?;
        let w = data.reconstruct(state)?;
        let ydot = w.clone();
        let j = self.lc.jet(state)?;
        let lw = self.lagrangian.jet(&[state, &w[..]].concat())?.gradient[2 * n + m..].to_vec();
        let b = data.curvature_coefficients(q)?;
        let a0i = data.drift_coefficients(q)?;
        let hvv = DMatrix::from_fn(n, n, |r, c| j.hess(n + m + r, n + m + c));
        let rhs = DVector::from_fn(n, |i, _| {
            let mut s = j.gradient[i];
            for al in 0..m {
                s -= a[(al, i)] * j.gradient[n + al];
                let bv: f64 = (0..n).map(|k| b[al][i][k] * v[k]).sum();
                s += (-bv - a0i[al][i]) * lw[al];
            }
            for k in 0..n {
                s -= j.hess(n + m + i, k) * v[k];
            }
            for al in 0..m {
                s -= j.hess(n + m + i, n + al) * ydot[al];
            }
            s
        });
        let vdot = linear_solve(&LinearSystem::new(hvv, rhs)?)?;
        Ok([v, &ydot[..], vdot.as_slice()].concat())
    }

    /// `E = v·∂L/∂v + w·∂L/∂w − L` on the constraint.
    pub fn energy(&self, state: &[f64]) -> Result<f64> {
        let w = self.reconstruct_w(state)?;
        energy(&self.lagrangian, &[state, &w[..]].concat())
    }
}

/// The Lagrange–d'Alembert system of `L` under the constraints.
pub fn lagrange_dalembert_system(l: &LagrangianSpec, c: &AffineConstraintSpec) -> Result<LagrangeDalembert> {
    LagrangeDalembert::new(l, c)
}

/// RK4 on `(x, y, v)`. Rows are `(x, y, v, w)` with `w` reconstructed from
/// the constraint; diagnostics are the recomputed constraint residual
/// `|ẏ + A·ẋ − A_0|` and the energy.
pub fn integrate_constrained(
    l: &LagrangianSpec,
    c: &AffineConstraintSpec,
    ic: &[f64],
    t1: f64,
    dt: f64,
) -> Result<TrajectoryRecord> {
    let sys = lagrange_dalembert_system(l, c)?;
    let chart = l.chart;
    let (n, m) = (chart.n, chart.m);
    let prob = IvpProblem {
        vector_field: |_t: f64, s: &[f64]| sys.rhs(s),
        state0: ic.to_vec(),
        t0: 0.0,
        t1,
        dt,
    };
    let mut rec = rk4_integrate_with(&prob, &["constraint_residual", "energy"], |_, s| {
        let d = sys.rhs(s)?;
        let (a, a0) = c.data.values(&s[..n + m])?;
        let mut res = 0.0_f64;
        for al in 0..m {
            let av: f64 = (0..n).map(|i| a[(al, i)] * d[i]).sum();
            res = res.max((d[n + al] + av - a0[al]).abs());
        }
        Ok(vec![res, sys.energy(s)?])
    })?;
    for s in &mut rec.states {
        let w = sys.reconstruct_w(s)?;
        s.extend(w);
    }
    rec.labels = coordinate_labels(n, m);
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::compile;
    use std::collections::BTreeMap;

    fn constraint(n: usize, m: usize, a: &[&str], a0: &[&str]) -> AffineConstraintSpec {
        let chart = BundleChart::new(n, m, 1e-6).unwrap();
        let ctx = chart.position_context();
        let f = |t: &&str| compile(t, &ctx).unwrap();
        AffineConstraintSpec::new(chart, a.iter().map(f).collect(), a0.iter().map(f).collect()).unwrap()
    }

    fn lag(n: usize, m: usize, text: &str) -> LagrangianSpec {
        LagrangianSpec::from_expression(BundleChart::new(n, m, 1e-6).unwrap(), text, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn constrained_lagrangian_examples() {
        let l = lag(1, 1, "0.5*(v1^2 + w1^2)");
        let free = constrained_lagrangian(&l, &constraint(1, 1, &["0"], &["0"])).unwrap();
        assert_eq!(free.value(&[0.3, 0.2, 2.0]).unwrap(), 2.0);
        let slope = constrained_lagrangian(&l, &constraint(1, 1, &["-3"], &["0"])).unwrap();
        assert_eq!(slope.value(&[0.3, 0.2, 2.0]).unwrap(), 0.5 * 10.0 * 4.0);
        let drift = constrained_lagrangian(&l, &constraint(1, 1, &["0"], &["1.5"])).unwrap();
        assert_eq!(drift.value(&[0.3, 0.2, 2.0]).unwrap(), 2.0 + 0.5 * 2.25);
        let j = slope.jet(&[0.3, 0.2, 2.0]).unwrap();
        assert_eq!(j.hess(2, 2), 10.0);
    }

    #[test]
    fn free_motion() {
        let l = lag(1, 1, "0.5*(v1^2 + w1^2)");
        let r = integrate_constrained(&l, &constraint(1, 1, &["0"], &["0"]), &[0.0, 1.0, 2.0], 1.0, 0.1).unwrap();
        let s = r.final_state();
        assert!((s[0] - 2.0).abs() < 1e-12 && s[1] == 1.0 && s[2] == 2.0 && s[3] == 0.0);
    }

    #[test]
    fn drifted_fibre_motion() {
        let l = lag(1, 1, "0.5*(v1^2 + w1^2)");
        let r = integrate_constrained(&l, &constraint(1, 1, &["0"], &["0.7"]), &[0.0, 0.5, 1.0], 3.0, 1e-2).unwrap();
        for (t, s) in r.times.iter().zip(&r.states) {
            assert!((s[1] - 0.5 - 0.7 * t).abs() < 1e-9);
        }
    }

    #[test]
    fn rolling_energy_and_constraint() {
        let l = lag(2, 1, "0.5*(v1^2 + v2^2 + w1^2)");
        let c = constraint(2, 1, &["0", "-x1"], &["0"]);
        let r = integrate_constrained(&l, &c, &[0.0, 0.0, 0.0, 1.0, 0.5], 10.0, 1e-3).unwrap();
        let e = r.diagnostic("energy").unwrap();
        assert!(e.iter().all(|v| (v - e[0]).abs() < 1e-6));
        assert!(r.diagnostic_max("constraint_residual").unwrap() < 1e-12);
        let straight = 0.5 * 10.0;
        assert!(
            (r.final_state()[1] - straight).abs() > 1e-3,
            "coupling should bend the path"
        );
    }
}
