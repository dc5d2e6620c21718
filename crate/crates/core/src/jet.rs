//! Second-order forward-mode differentiation.
//!
//! A [`Jet2`] carries the value, gradient and Hessian of a scalar with respect
//! to a fixed tuple of `k` coordinates. Arithmetic on jets applies the chain
//! rule to second order, so any composition of the supported operations
//! evaluates to exact (up to rounding) first and second derivatives.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Value, gradient and (symmetric, row-major) Hessian of a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2 {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

impl Jet2 {
    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            value,
            gradient: vec![0.0; dim],
            hessian: vec![0.0; dim * dim],
        }
    }

    /// The coordinate function `z ↦ z[index]` evaluated at `value`.
    pub fn variable(dim: usize, index: usize, value: f64) -> Self {
        let mut j = Self::constant(dim, value);
        j.gradient[index] = 1.0;
        j
    }

    /// Seeds one variable jet per coordinate of `point`.
    pub fn seed(point: &[f64]) -> Vec<Self> {
        let k = point.len();
        point
            .iter()
            .enumerate()
            .map(|(i, &v)| Self::variable(k, i, v))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hessian[i * self.dim() + j]
    }

    pub fn hessian_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_row_slice(k, k, &self.hessian)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite())
    }

    /// Builds a Hessian from its upper triangle, mirroring for exact symmetry.
    fn from_upper(value: f64, gradient: Vec<f64>, upper: impl Fn(usize, usize) -> f64) -> Self {
        let k = gradient.len();
        let mut hessian = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let h = upper(i, j);
                hessian[i * k + j] = h;
                hessian[j * k + i] = h;
            }
        }
        Self {
            value,
            gradient,
            hessian,
        }
    }

    /// `φ(self)` for a scalar function with `φ(v) = d0`, `φ'(v) = d1`, `φ''(v) = d2`.
    pub fn chain(&self, d0: f64, d1: f64, d2: f64) -> Self {
        let g = &self.gradient;
        let gradient = g.iter().map(|gi| d1 * gi).collect();
        Self::from_upper(d0, gradient, |i, j| d1 * self.hess(i, j) + d2 * g[i] * g[j])
    }

    pub fn scale(&self, c: f64) -> Self {
        self.chain(c * self.value, c, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let mut j = self.clone();
        j.value += c;
        j
    }

    pub fn sin(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(s, c, -s)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(c, -s, -c)
    }

    pub fn tan(&self) -> Result<Self> {
        let c = self.value.cos();
        if c.abs() < 1e-300 {
            return Err(Error::domain("tan at a pole"));
        }
        let t = self.value.tan();
        let sec2 = 1.0 + t * t;
        Ok(self.chain(t, sec2, 2.0 * t * sec2))
    }

    pub fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Result<Self> {
        let x = self.value;
        if !(x > 0.0) {
            return Err(Error::domain(format!("log of nonpositive value {x}")));
        }
        Ok(self.chain(x.ln(), 1.0 / x, -1.0 / (x * x)))
    }

    pub fn sqrt(&self) -> Result<Self> {
        let x = self.value;
        if x < 0.0 {
            return Err(Error::domain(format!("sqrt of negative value {x}")));
        }
        if x == 0.0 {
            return Err(Error::domain("sqrt is not differentiable at 0"));
        }
        let s = x.sqrt();
        Ok(self.chain(s, 0.5 / s, -0.25 / (s * x)))
    }

    /// `|self|` realised as `sqrt(self²)`, admissible only when `|self| ≥ slit_eps`.
    pub fn abs_slit(&self, slit_eps: f64) -> Result<Self> {
        if self.value.abs() < slit_eps || self.value == 0.0 {
            return Err(Error::domain(format!(
                "abs evaluated inside the slit ball (|{}| < {slit_eps})",
                self.value
            )));
        }
        (self * self).sqrt()
    }

    pub fn powi(&self, n: i32) -> Self {
        let x = self.value;
        let nf = n as f64;
        let d0 = x.powi(n);
        let d1 = if n == 0 { 0.0 } else { nf * x.powi(n - 1) };
        let d2 = if n == 0 || n == 1 {
            0.0
        } else {
            nf * (nf - 1.0) * x.powi(n - 2)
        };
        self.chain(d0, d1, d2)
    }

    /// `self^c` for a constant exponent.
    pub fn powf(&self, c: f64) -> Result<Self> {
        if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
            let x = self.value;
            if x == 0.0 && c < 0.0 {
                return Err(Error::domain("division by zero in negative power"));
            }
            return Ok(self.powi(c as i32));
        }
        let x = self.value;
        if x < 0.0 {
            return Err(Error::domain(format!("non-integer power {c} of negative value {x}")));
        }
        if x == 0.0 {
            return Err(Error::domain("non-integer power is not differentiable at 0"));
        }
        Ok(self.chain(x.powf(c), c * x.powf(c - 1.0), c * (c - 1.0) * x.powf(c - 2.0)))
    }

    /// General power `self^exponent`.
    pub fn pow(&self, exponent: &Jet2) -> Result<Self> {
        if exponent.gradient.iter().all(|g| *g == 0.0) && exponent.hessian.iter().all(|h| *h == 0.0) {
            return self.powf(exponent.value);
        }
        self.pow_var(exponent)
    }

    /// `exp(exponent · ln self)`, requiring a positive base.
    pub fn pow_var(&self, exponent: &Jet2) -> Result<Self> {
        if !(self.value > 0.0) {
            return Err(Error::domain(format!(
                "variable exponent needs a positive base, got {}",
                self.value
            )));
        }
        Ok((exponent * &self.ln()?).exp())
    }

    pub fn checked_div(&self, rhs: &Jet2) -> Result<Self> {
        let d = rhs.value;
        if d == 0.0 {
            return Err(Error::domain("division by zero"));
        }
        let recip = rhs.chain(1.0 / d, -1.0 / (d * d), 2.0 / (d * d * d));
        let mut q = self * &recip;
        q.value = self.value / d;
        Ok(q)
    }

    /// Lifts a jet over `k` coordinates into `new_dim` coordinates, where
    /// old coordinate `i` becomes new coordinate `positions[i]`.
    pub fn embed(&self, new_dim: usize, positions: &[usize]) -> Self {
        let k = self.dim();
        let mut out = Self::constant(new_dim, self.value);
        for i in 0..k {
            out.gradient[positions[i]] += self.gradient[i];
            for j in 0..k {
                out.hessian[positions[i] * new_dim + positions[j]] += self.hess(i, j);
            }
        }
        out
    }

    /// Chain rule `F(u₁(z), …, u_N(z))` where `outer` is the jet of `F` at `u(z)`
    /// (over `N` coordinates) and `inner[a]` is the jet of `u_a` over `z`.
    pub fn compose(outer: &Jet2, inner: &[Jet2]) -> Result<Self> {
        let n = outer.dim();
        if inner.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "outer jet has {n} arguments but {} inner jets were given",
                inner.len()
            )));
        }
        let k = inner.first().map(Jet2::dim).unwrap_or(0);
        let mut gradient = vec![0.0; k];
        for (a, u) in inner.iter().enumerate() {
            for i in 0..k {
                gradient[i] += outer.gradient[a] * u.gradient[i];
            }
        }
        Ok(Self::from_upper(outer.value, gradient, |i, j| {
            let mut h = 0.0;
            for a in 0..n {
                let ga = outer.gradient[a];
                if ga != 0.0 {
                    h += ga * inner[a].hess(i, j);
                }
                for b in 0..n {
                    let hab = outer.hess(a, b);
                    if hab != 0.0 {
                        h += hab * inner[a].gradient[i] * inner[b].gradient[j];
                    }
                }
            }
            h
        }))
    }
}

impl Add for &Jet2 {
    type Output = Jet2;
    fn add(self, rhs: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value + rhs.value,
            gradient: self.gradient.iter().zip(&rhs.gradient).map(|(a, b)| a + b).collect(),
            hessian: self.hessian.iter().zip(&rhs.hessian).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Jet2 {
    type Output = Jet2;
    fn sub(self, rhs: &Jet2) -> Jet2 {
        Jet2 {
            value: self.value - rhs.value,
            gradient: self.gradient.iter().zip(&rhs.gradient).map(|(a, b)| a - b).collect(),
            hessian: self.hessian.iter().zip(&rhs.hessian).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &Jet2 {
    type Output = Jet2;
    fn mul(self, rhs: &Jet2) -> Jet2 {
        let (f, g) = (self.value, rhs.value);
        let gradient = self
            .gradient
            .iter()
            .zip(&rhs.gradient)
            .map(|(a, b)| f * b + g * a)
            .collect();
        Jet2::from_upper(f * g, gradient, |i, j| {
            f * rhs.hess(i, j)
                + g * self.hess(i, j)
                + self.gradient[i] * rhs.gradient[j]
                + rhs.gradient[i] * self.gradient[j]
        })
    }
}

impl Neg for &Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        Jet2 {
            value: -self.value,
            gradient: self.gradient.iter().map(|v| -v).collect(),
            hessian: self.hessian.iter().map(|v| -v).collect(),
        }
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr for Jet2 {
            type Output = Jet2;
            fn $m(self, rhs: Jet2) -> Jet2 {
                (&self).$m(&rhs)
            }
        }
    };
}
forward_owned!(Add, add);
forward_owned!(Sub, sub);
forward_owned!(Mul, mul);

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        -&self
    }
}

impl Div for &Jet2 {
    type Output = Result<Jet2>;
    fn div(self, rhs: &Jet2) -> Result<Jet2> {
        self.checked_div(rhs)
    }
}

/// Anything that evaluates to a [`Jet2`] at a point.
pub trait FieldEval: Send + Sync {
    fn jet2(&self, point: &[f64]) -> Result<Jet2>;

    /// Value only; implementors may override with a cheaper path.
    fn value(&self, point: &[f64]) -> Result<f64> {
        Ok(self.jet2(point)?.value)
    }
}

impl<F> FieldEval for F
where
    F: Fn(&[f64]) -> Result<Jet2> + Send + Sync,
{
    fn jet2(&self, point: &[f64]) -> Result<Jet2> {
        self(point)
    }
}

/// A real function of a declared coordinate tuple, evaluable as a jet.
#[derive(Clone)]
pub struct ScalarField {
    arity: usize,
    label: String,
    eval: Arc<dyn FieldEval>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("arity", &self.arity)
            .field("label", &self.label)
            .finish()
    }
}

impl ScalarField {
    pub fn new(arity: usize, label: impl Into<String>, eval: impl FieldEval + 'static) -> Self {
        Self {
            arity,
            label: label.into(),
            eval: Arc::new(eval),
        }
    }

    pub fn constant(arity: usize, c: f64) -> Self {
        Self::new(arity, format!("{c:?}"), move |p: &[f64]| Ok(Jet2::constant(p.len(), c)))
    }

    /// The coordinate function picking component `index`.
    pub fn coordinate(arity: usize, index: usize) -> Self {
        Self::new(arity, format!("z{index}"), move |p: &[f64]| {
            Ok(Jet2::variable(p.len(), index, p[index]))
        })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.arity {
            return Err(Error::DimensionMismatch(format!(
                "field `{}` has arity {} but was evaluated at a point of length {}",
                self.label,
                self.arity,
                point.len()
            )));
        }
        Ok(())
    }

    pub fn jet(&self, point: &[f64]) -> Result<Jet2> {
        eval_jet2(self, point)
    }

    pub fn value(&self, point: &[f64]) -> Result<f64> {
        self.check_point(point)?;
        let v = self.eval.value(point)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::domain(format!("`{}` is not finite here", self.label)))
        }
    }

    pub fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        Ok(self.jet(point)?.gradient)
    }
}

/// Evaluates a field's value, gradient and Hessian at `point`.
pub fn eval_jet2(f: &ScalarField, point: &[f64]) -> Result<Jet2> {
    f.check_point(point)?;
    let j = f.eval.jet2(point)?;
    if j.dim() != point.len() {
        return Err(Error::DimensionMismatch(format!(
            "field `{}` returned a jet of dimension {}",
            f.label,
            j.dim()
        )));
    }
    if !j.is_finite() {
        return Err(Error::domain(format!("`{}` is not finite here", f.label)));
    }
    Ok(j)
}

/// `∇f(point) · direction`.
pub fn directional_derivative(f: &ScalarField, point: &[f64], direction: &[f64]) -> Result<f64> {
    if direction.len() != point.len() {
        return Err(Error::DimensionMismatch("direction length".into()));
    }
    let j = eval_jet2(f, point)?;
    Ok(j.gradient.iter().zip(direction).map(|(g, d)| g * d).sum())
}

/// Central-difference derivatives and their deviation from the jet.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub jet: Jet2,
    pub fd_gradient: Vec<f64>,
    pub fd_hessian: Vec<f64>,
    pub gradient_deviation: f64,
    pub hessian_deviation: f64,
}

/// Compares the jet of `f` against central differences of its values with step `step`.
pub fn fd_check(f: &ScalarField, point: &[f64], step: f64) -> Result<DerivativeReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let jet = eval_jet2(f, point)?;
    let k = point.len();
    let at = |offsets: &[(usize, f64)]| -> Result<f64> {
        let mut p = point.to_vec();
        for &(i, d) in offsets {
            p[i] += d;
        }
        f.value(&p)
    };
    let f0 = f.value(point)?;
    let mut fd_gradient = vec![0.0; k];
    let mut fd_hessian = vec![0.0; k * k];
    for i in 0..k {
        let fp = at(&[(i, step)])?;
        let fm = at(&[(i, -step)])?;
        fd_gradient[i] = (fp - fm) / (2.0 * step);
        fd_hessian[i * k + i] = (fp - 2.0 * f0 + fm) / (step * step);
        for j in (i + 1)..k {
            let fpp = at(&[(i, step), (j, step)])?;
            let fpm = at(&[(i, step), (j, -step)])?;
            let fmp = at(&[(i, -step), (j, step)])?;
            let fmm = at(&[(i, -step), (j, -step)])?;
            let h = (fpp - fpm - fmp + fmm) / (4.0 * step * step);
            fd_hessian[i * k + j] = h;
            fd_hessian[j * k + i] = h;
        }
    }
    let dev = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(DerivativeReport {
        gradient_deviation: dev(&jet.gradient, &fd_gradient),
        hessian_deviation: dev(&jet.hessian, &fd_hessian),
        jet,
        fd_gradient,
        fd_hessian,
    })
}
