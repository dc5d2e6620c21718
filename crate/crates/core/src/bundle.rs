//! Coordinate records for `π: M → N`, its tangent and double tangent bundles,
//! and the canonical operations between them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{compile, VarContext};
use crate::jet::ScalarField;
use crate::splitting::SplittingSpec;

/// Dimensions of a bundle chart: base `n`, fibre `m`, and the radius of the
/// excluded ball around the zero section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleChart {
    pub n: usize,
    pub m: usize,
    pub slit_eps: f64,
}

impl BundleChart {
    pub fn new(n: usize, m: usize, slit_eps: f64) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput(format!(
                "bundle dimensions must be positive, got n={n}, m={m}"
            )));
        }
        if !(slit_eps > 0.0) || !slit_eps.is_finite() {
            return Err(Error::InvalidInput(format!(
                "slit_eps must be positive, got {slit_eps}"
            )));
        }
        Ok(Self { n, m, slit_eps })
    }

    /// Length of `(x, y)`.
    pub fn position_dim(&self) -> usize {
        self.n + self.m
    }

    /// Length of `(x, y, v)`.
    pub fn pullback_dim(&self) -> usize {
        2 * self.n + self.m
    }

    /// Length of `(x, y, v, w)`.
    pub fn tangent_dim(&self) -> usize {
        2 * (self.n + self.m)
    }

    /// True when `v` lies in the excluded ball `|v|₂ < slit_eps`.
    pub fn in_slit(&self, v: &[f64]) -> bool {
        norm2(v) < self.slit_eps
    }

    pub fn tangent_context(&self) -> VarContext {
        VarContext::tangent(self.n, self.m).with_slit_eps(self.slit_eps)
    }

    pub fn pullback_context(&self) -> VarContext {
        VarContext::pullback(self.n, self.m).with_slit_eps(self.slit_eps)
    }

    pub fn position_context(&self) -> VarContext {
        VarContext::positions(self.n, self.m).with_slit_eps(self.slit_eps)
    }

    pub fn base_context(&self) -> VarContext {
        VarContext::base(self.n).with_slit_eps(self.slit_eps)
    }

    pub fn base_tangent_context(&self) -> VarContext {
        VarContext::base_tangent(self.n).with_slit_eps(self.slit_eps)
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} has length {got}, expected {want}"
        )))
    }
}

/// A tangent vector `(x, y, v, w)` on `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPointM {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl TangentPointM {
    pub fn new(x: Vec<f64>, y: Vec<f64>, v: Vec<f64>, w: Vec<f64>) -> Self {
        Self { x, y, v, w }
    }

    pub fn from_slice(chart: &BundleChart, s: &[f64]) -> Result<Self> {
        check_len("tangent point", s.len(), chart.tangent_dim())?;
        let (n, m) = (chart.n, chart.m);
        Ok(Self {
            x: s[..n].to_vec(),
            y: s[n..n + m].to_vec(),
            v: s[n + m..2 * n + m].to_vec(),
            w: s[2 * n + m..].to_vec(),
        })
    }

    pub fn check(&self, chart: &BundleChart) -> Result<()> {
        check_len("x", self.x.len(), chart.n)?;
        check_len("y", self.y.len(), chart.m)?;
        check_len("v", self.v.len(), chart.n)?;
        check_len("w", self.w.len(), chart.m)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.x[..], &self.y, &self.v, &self.w].concat()
    }

    /// `(x, y)`.
    pub fn position(&self) -> Vec<f64> {
        [&self.x[..], &self.y].concat()
    }

    /// `(x, y, v)`.
    pub fn pullback(&self) -> Vec<f64> {
        [&self.x[..], &self.y, &self.v].concat()
    }
}

/// A point `(x, y, v)` of the pullback bundle `π*TN`.
#[derive(Debug, Clone, PartialEq)]
pub struct PullbackPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl PullbackPoint {
    pub fn new(x: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> Self {
        Self { x, y, v }
    }

    pub fn from_slice(chart: &BundleChart, s: &[f64]) -> Result<Self> {
        check_len("pullback point", s.len(), chart.pullback_dim())?;
        let (n, m) = (chart.n, chart.m);
        Ok(Self {
            x: s[..n].to_vec(),
            y: s[n..n + m].to_vec(),
            v: s[n + m..].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [&self.x[..], &self.y, &self.v].concat()
    }
}

/// A point of `TTM`: base point `(x, y, v, w)` and tangent `(X, Y, V, W)`,
/// the latter stored as `tx, ty, tv, tw`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondTangentPoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub tx: Vec<f64>,
    pub ty: Vec<f64>,
    pub tv: Vec<f64>,
    pub tw: Vec<f64>,
}

impl SecondTangentPoint {
    /// The zero tangent vector at `base`.
    pub fn zero_at(base: &TangentPointM) -> Self {
        Self {
            x: base.x.clone(),
            y: base.y.clone(),
            v: base.v.clone(),
            w: base.w.clone(),
            tx: vec![0.0; base.x.len()],
            ty: vec![0.0; base.y.len()],
            tv: vec![0.0; base.v.len()],
            tw: vec![0.0; base.w.len()],
        }
    }

    pub fn from_slice(chart: &BundleChart, s: &[f64]) -> Result<Self> {
        check_len("second tangent point", s.len(), 2 * chart.tangent_dim())?;
        let half = chart.tangent_dim();
        let a = TangentPointM::from_slice(chart, &s[..half])?;
        let b = TangentPointM::from_slice(chart, &s[half..])?;
        Ok(Self {
            x: a.x,
            y: a.y,
            v: a.v,
            w: a.w,
            tx: b.x,
            ty: b.y,
            tv: b.v,
            tw: b.w,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        [
            &self.x[..],
            &self.y,
            &self.v,
            &self.w,
            &self.tx,
            &self.ty,
            &self.tv,
            &self.tw,
        ]
        .concat()
    }

    pub fn base(&self) -> TangentPointM {
        TangentPointM::new(self.x.clone(), self.y.clone(), self.v.clone(), self.w.clone())
    }

    /// The tangent part `(X, Y, V, W)`.
    pub fn tangent(&self) -> Vec<f64> {
        [&self.tx[..], &self.ty, &self.tv, &self.tw].concat()
    }
}

/// `μ = (τ, Tπ)`: forgets the fibre velocity.
pub fn mu(w: &TangentPointM) -> PullbackPoint {
    PullbackPoint::new(w.x.clone(), w.y.clone(), w.v.clone())
}

/// The canonical involution of `TTM`, swapping `(v, w)` with `(X, Y)`.
pub fn canonical_flip(s: &SecondTangentPoint) -> SecondTangentPoint {
    SecondTangentPoint {
        x: s.x.clone(),
        y: s.y.clone(),
        v: s.tx.clone(),
        w: s.ty.clone(),
        tx: s.v.clone(),
        ty: s.w.clone(),
        tv: s.tv.clone(),
        tw: s.tw.clone(),
    }
}

/// `(w₁, w₂)^v ∈ T_{w₁}TM`.
pub fn vertical_lift(w1: &TangentPointM, w2: &TangentPointM) -> Result<SecondTangentPoint> {
    if w1.x != w2.x || w1.y != w2.y {
        return Err(Error::BasePointMismatch);
    }
    let mut s = SecondTangentPoint::zero_at(w1);
    s.tv = w2.v.clone();
    s.tw = w2.w.clone();
    Ok(s)
}

/// `S = dq^a ⊗ ∂/∂u^a`: moves `(X, Y)` into `(V, W)`.
pub fn vertical_endomorphism(s: &SecondTangentPoint) -> SecondTangentPoint {
    SecondTangentPoint {
        tx: vec![0.0; s.tx.len()],
        ty: vec![0.0; s.ty.len()],
        tv: s.tx.clone(),
        tw: s.ty.clone(),
        ..s.clone()
    }
}

/// A vector field on a coordinate space with an available Jacobian.
pub trait VectorFieldEval: Send + Sync {
    /// Number of coordinates the field depends on.
    fn arity(&self) -> usize;
    /// Number of components.
    fn dim(&self) -> usize;
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>>;
    /// `dim × arity` matrix of partial derivatives.
    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>>;
}

/// A vector field whose components are scalar fields.
#[derive(Debug, Clone)]
pub struct VectorField {
    arity: usize,
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self> {
        let arity = components
            .first()
            .map(ScalarField::arity)
            .ok_or_else(|| Error::InvalidInput("vector field needs at least one component".into()))?;
        if components.iter().any(|c| c.arity() != arity) {
            return Err(Error::DimensionMismatch("component arities differ".into()));
        }
        Ok(Self { arity, components })
    }

    pub fn from_expressions(texts: &[&str], ctx: &VarContext) -> Result<Self> {
        Self::new(texts.iter().map(|t| compile(t, ctx)).collect::<Result<_>>()?)
    }

    /// The coordinate field `∂/∂z^index`.
    pub fn coordinate(arity: usize, index: usize) -> Self {
        Self::constant(
            &(0..arity)
                .map(|i| if i == index { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        )
    }

    pub fn constant(values: &[f64]) -> Self {
        let arity = values.len();
        Self {
            arity,
            components: values.iter().map(|&c| ScalarField::constant(arity, c)).collect(),
        }
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }
}

impl VectorFieldEval for VectorField {
    fn arity(&self) -> usize {
        self.arity
    }

    fn dim(&self) -> usize {
        self.components.len()
    }

    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.value(p)).collect()
    }

    fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.components.len(), self.arity);
        for (r, c) in self.components.iter().enumerate() {
            let g = c.gradient(p)?;
            for (k, gk) in g.into_iter().enumerate() {
                j[(r, k)] = gk;
            }
        }
        Ok(j)
    }
}

/// `Z^c` at `at`: `(X, Y) = Z(x, y)`, `(V, W) = DZ·(v, w)`.
pub fn complete_lift(z: &dyn VectorFieldEval, at: &TangentPointM) -> Result<SecondTangentPoint> {
    let (n, m) = (at.x.len(), at.y.len());
    if z.arity() != n + m || z.dim() != n + m {
        return Err(Error::DimensionMismatch("complete lift needs a field on M".into()));
    }
    let q = at.position();
    let u = [&at.v[..], &at.w].concat();
    let val = z.eval(&q)?;
    let jac = z.jacobian(&q)?;
    let du: Vec<f64> = (0..n + m)
        .map(|r| (0..n + m).map(|c| jac[(r, c)] * u[c]).sum())
        .collect();
    Ok(SecondTangentPoint {
        x: at.x.clone(),
        y: at.y.clone(),
        v: at.v.clone(),
        w: at.w.clone(),
        tx: val[..n].to_vec(),
        ty: val[n..].to_vec(),
        tv: du[..n].to_vec(),
        tw: du[n..].to_vec(),
    })
}

/// `[Z₁, Z₂] = DZ₂·Z₁ − DZ₁·Z₂` at `at`.
pub fn lie_bracket(z1: &dyn VectorFieldEval, z2: &dyn VectorFieldEval, at: &[f64]) -> Result<Vec<f64>> {
    let k = at.len();
    for z in [z1, z2] {
        if z.arity() != k || z.dim() != k {
            return Err(Error::DimensionMismatch(format!(
                "bracket needs fields with {k} components on {k} coordinates"
            )));
        }
    }
    let (a, b) = (z1.eval(at)?, z2.eval(at)?);
    let (ja, jb) = (z1.jacobian(at)?, z2.jacobian(at)?);
    Ok((0..k)
        .map(|r| (0..k).map(|c| jb[(r, c)] * a[c] - ja[(r, c)] * b[c]).sum())
        .collect())
}

/// Members of the Liouville family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Liouville {
    /// `Δ = u^a ∂/∂u^a`
    Total,
    /// `Δ_h = v^i ∂/∂v^i + h^α ∂/∂w^α`
    Horizontal,
    /// `Δ_v = (w^α − h^α) ∂/∂w^α`
    Vertical,
    /// `Δ_0 = h^α(x, y, 0) ∂/∂w^α`
    Zero,
}

/// The selected Liouville field at `at`, as a vertical vector of `TTM`.
pub fn liouville_fields(h: Option<&SplittingSpec>, at: &TangentPointM, which: Liouville) -> Result<SecondTangentPoint> {
    let mut s = SecondTangentPoint::zero_at(at);
    if which == Liouville::Total {
        s.tv = at.v.clone();
        s.tw = at.w.clone();
        return Ok(s);
    }
    let h = h.ok_or_else(|| Error::InvalidInput("this Liouville field needs a splitting".into()))?;
    match which {
        Liouville::Horizontal => {
            s.tv = at.v.clone();
            s.tw = h.coefficients(&at.pullback())?;
        }
        Liouville::Vertical => {
            let c = h.coefficients(&at.pullback())?;
            s.tw = at.w.iter().zip(&c).map(|(w, c)| w - c).collect();
        }
        Liouville::Zero => {
            let p = [&at.x[..], &at.y, &vec![0.0; at.v.len()]].concat();
            s.tw = h.coefficients(&p)?;
        }
        Liouville::Total => unreachable!(),
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chart11() -> BundleChart {
        BundleChart::new(1, 1, 1e-6).unwrap()
    }

    fn tp(s: &[f64]) -> TangentPointM {
        TangentPointM::from_slice(&chart11(), s).unwrap()
    }

    #[test]
    fn mu_drops_w() {
        let p = mu(&tp(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(mu(&tp(&[1.0, 2.0, 3.0, -9.0])), p);
        assert_eq!(mu(&tp(&[1.0, 2.0, 0.0, 0.0])).v, vec![0.0]);
    }

    #[test]
    fn flip_example() {
        let s = SecondTangentPoint::from_slice(&chart11(), &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(
            canonical_flip(&s).to_vec(),
            vec![1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 4.0, 0.0]
        );
        let fixed = SecondTangentPoint::from_slice(&chart11(), &[1.0, 2.0, 5.0, 6.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(canonical_flip(&fixed), fixed);
    }

    #[test]
    fn vertical_lift_examples() {
        let s = vertical_lift(&tp(&[0.0, 0.0, 1.0, 1.0]), &tp(&[0.0, 0.0, 5.0, 7.0])).unwrap();
        assert_eq!(s.to_vec(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 5.0, 7.0]);
        let z = vertical_lift(&tp(&[0.0, 0.0, 1.0, 1.0]), &tp(&[0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(z.tangent().iter().all(|&c| c == 0.0));
        assert_eq!(
            vertical_lift(&tp(&[0.0, 0.0, 1.0, 1.0]), &tp(&[1.0, 0.0, 5.0, 7.0])),
            Err(Error::BasePointMismatch)
        );
    }

    #[test]
    fn vertical_endomorphism_example() {
        let s = SecondTangentPoint::from_slice(&chart11(), &[9.0, 8.0, 7.0, 6.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(vertical_endomorphism(&s).tangent(), vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn complete_lift_examples() {
        let ctx = VarContext::positions(1, 1);
        let dy = VectorField::from_expressions(&["0", "1"], &ctx).unwrap();
        assert_eq!(
            complete_lift(&dy, &tp(&[3.0, 4.0, 5.0, 6.0])).unwrap().tangent(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
        let ydy = VectorField::from_expressions(&["0", "y1"], &ctx).unwrap();
        assert_eq!(
            complete_lift(&ydy, &tp(&[0.0, 2.0, 0.0, 5.0])).unwrap().tangent(),
            vec![0.0, 2.0, 0.0, 5.0]
        );
        let c = VectorField::constant(&[2.0, -1.0]);
        let s = complete_lift(&c, &tp(&[0.3, 0.4, 5.0, 6.0])).unwrap();
        assert_eq!((s.tv.clone(), s.tw.clone()), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn brackets() {
        let ctx = VarContext::positions(1, 1);
        let dx = VectorField::coordinate(2, 0);
        let dy = VectorField::coordinate(2, 1);
        assert_eq!(lie_bracket(&dx, &dy, &[0.3, -0.2]).unwrap(), vec![0.0, 0.0]);
        let ctx2 = VarContext::positions(2, 1);
        let d1 = VectorField::coordinate(3, 0);
        let z = VectorField::from_expressions(&["0", "1", "x1"], &ctx2).unwrap();
        assert_eq!(lie_bracket(&d1, &z, &[0.5, 0.1, 2.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        let f = VectorField::from_expressions(&["sin(y1)*x1", "x1^2 - y1"], &ctx).unwrap();
        assert_eq!(lie_bracket(&f, &f, &[0.7, 0.2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn total_liouville() {
        let s = liouville_fields(None, &tp(&[0.0, 0.0, 2.0, 3.0]), Liouville::Total).unwrap();
        assert_eq!(s.tangent(), vec![0.0, 0.0, 2.0, 3.0]);
        assert!(liouville_fields(None, &tp(&[0.0, 0.0, 2.0, 3.0]), Liouville::Vertical).is_err());
    }

    fn arb_second() -> impl Strategy<Value = SecondTangentPoint> {
        proptest::collection::vec(-5.0f64..5.0, 12)
            .prop_map(|s| SecondTangentPoint::from_slice(&BundleChart::new(2, 1, 1e-6).unwrap(), &s).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn flip_is_involution(s in arb_second()) {
            prop_assert_eq!(canonical_flip(&canonical_flip(&s)), s);
        }

        #[test]
        fn s_squared_vanishes(s in arb_second()) {
            let ss = vertical_endomorphism(&vertical_endomorphism(&s));
            prop_assert!(ss.tangent().iter().all(|&c| c == 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn jacobi_identity(p in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let ctx = VarContext::positions(2, 1);
            let a = VectorField::from_expressions(&["x2*y1", "x1^2", "1 + x1*x2"], &ctx).unwrap();
            let b = VectorField::from_expressions(&["y1^2", "x1 - y1", "x2^3"], &ctx).unwrap();
            let c = VectorField::from_expressions(&["x1*x2*y1", "2", "x1 + y1^2"], &ctx).unwrap();
            // [a,[b,c]] + [b,[c,a]] + [c,[a,b]] via brackets of bracket fields
            struct Br<'a>(&'a VectorField, &'a VectorField);
            impl VectorFieldEval for Br<'_> {
                fn arity(&self) -> usize { 3 }
                fn dim(&self) -> usize { 3 }
                fn eval(&self, p: &[f64]) -> Result<Vec<f64>> { lie_bracket(self.0, self.1, p) }
                fn jacobian(&self, p: &[f64]) -> Result<DMatrix<f64>> {
                    let e = 1e-5;
                    let mut j = DMatrix::zeros(3, 3);
                    for k in 0..3 {
                        let mut pp = p.to_vec(); pp[k] += e;
                        let mut pm = p.to_vec(); pm[k] -= e;
                        let (fp, fm) = (self.eval(&pp)?, self.eval(&pm)?);
                        for r in 0..3 { j[(r, k)] = (fp[r] - fm[r]) / (2.0 * e); }
                    }
                    Ok(j)
                }
            }
            let t1 = lie_bracket(&a, &Br(&b, &c), &p).unwrap();
            let t2 = lie_bracket(&b, &Br(&c, &a), &p).unwrap();
            let t3 = lie_bracket(&c, &Br(&a, &b), &p).unwrap();
            for k in 0..3 {
                prop_assert!((t1[k] + t2[k] + t3[k]).abs() < 1e-7);
            }
        }
    }
}
