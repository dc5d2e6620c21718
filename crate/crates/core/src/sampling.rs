//! Seeded sample sweeps.
//!
//! Points are always drawn sequentially from one ChaCha8 stream, so the point
//! set depends only on the seed. Evaluation over the points runs on rayon when
//! the `parallel` feature is enabled and [`Execution::Parallel`] is selected;
//! results are returned in point order either way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_SAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Where and how many points to sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub count: usize,
    pub seed: u64,
    pub lo: f64,
    pub hi: f64,
    pub execution: Execution,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            count: DEFAULT_SAMPLES,
            seed: DEFAULT_SEED,
            lo: -1.0,
            hi: 1.0,
            execution: Execution::default(),
        }
    }
}

impl SampleSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            ..Self::default()
        }
    }

    pub fn with_box(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        if !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sample box [{}, {}] is empty",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// `count` points of dimension `dim`, uniform in the box.
    pub fn points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.count)
            .map(|_| (0..dim).map(|_| rng.gen_range(self.lo..self.hi)).collect())
            .collect())
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, U, F>(items: &[T], execution: Execution, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Values at admissible sample points; domain errors are skipped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep<T> {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<T>,
    pub skipped: usize,
}

impl<T> Sweep<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Sweep<f64> {
    /// Largest absolute value, 0 for an empty sweep.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Evaluates `f` at the sampled points of dimension `dim`.
///
/// Points where `f` fails with a domain error are skipped; any other error
/// aborts the sweep (the first in point order is returned). Fails with
/// `AllSamplesInadmissible` when nothing is left.
pub fn sweep<T, F>(spec: &SampleSpec, dim: usize, f: F) -> Result<Sweep<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<T> + Sync + Send,
{
    let points = spec.points(dim)?;
    sweep_points(points, spec.execution, f)
}

/// As [`sweep`], over explicit points.
pub fn sweep_points<T, F>(points: Vec<Vec<f64>>, execution: Execution, f: F) -> Result<Sweep<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<T> + Sync + Send,
{
    let results = map_ordered(&points, execution, |p| f(p));
    let mut out = Sweep {
        points: Vec::new(),
        values: Vec::new(),
        skipped: 0,
    };
    for (p, r) in points.into_iter().zip(results) {
        match r {
            Ok(v) => {
                out.points.push(p);
                out.values.push(v);
            }
            Err(Error::Domain(_)) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if out.values.is_empty() {
        return Err(Error::AllSamplesInadmissible { skipped: out.skipped });
    }
    Ok(out)
}
