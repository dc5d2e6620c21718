use crate::error::{Error, Result};

/// Initial value problem `ẋ = f(t, x)`, `x(t0) = state0`, integrated to `t1`.
pub struct IvpProblem<F> {
    pub vector_field: F,
    pub state0: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

/// Time-stamped samples of an integration, one row per step including `t0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostic_labels: Vec<String>,
    pub diagnostics: Vec<Vec<f64>>,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Column of a state component over the whole run.
    pub fn component(&self, index: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[index]).collect()
    }

    /// Column of a diagnostic by label.
    pub fn diagnostic(&self, label: &str) -> Option<Vec<f64>> {
        let idx = self.diagnostic_labels.iter().position(|l| l == label)?;
        Some(self.diagnostics.iter().map(|d| d[idx]).collect())
    }

    /// Largest value of a diagnostic over the run.
    pub fn diagnostic_max(&self, label: &str) -> Option<f64> {
        self.diagnostic(label)
            .map(|col| col.into_iter().fold(0.0_f64, f64::max))
    }
}

/// Step times `t0, t0+dt, …, t1`; the last step is shortened to land on `t1`.
fn step_times(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let span = t1 - t0;
    let ratio = span / dt;
    let snap = 1e-9;
    let mut full = ratio.floor() as usize;
    if ratio - (full as f64) > 1.0 - snap {
        full += 1;
    }
    let mut times: Vec<f64> = (0..=full).map(|k| t0 + k as f64 * dt).collect();
    let last = *times.last().unwrap();
    if (t1 - last).abs() <= snap * dt {
        *times.last_mut().unwrap() = t1;
    } else if last < t1 {
        times.push(t1);
    } else {
        *times.last_mut().unwrap() = t1;
    }
    times
}

fn check_finite(values: &[f64], t: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

fn validate<F>(p: &IvpProblem<F>) -> Result<()> {
    if !(p.t1 > p.t0) {
        return Err(Error::InvalidInput(format!(
            "integration interval [{}, {}] is empty",
            p.t0, p.t1
        )));
    }
    if !(p.dt > 0.0) || p.dt > (p.t1 - p.t0) * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("step {} must lie in (0, t1 - t0]", p.dt)));
    }
    Ok(())
}

/// Classical fourth-order Runge–Kutta with a fixed step.
pub fn rk4_integrate<F>(p: &IvpProblem<F>) -> Result<TrajectoryRecord>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    rk4_integrate_with(p, &[], |_, _| Ok(Vec::new()))
}

/// As [`rk4_integrate`], additionally recording `diagnostic(t, state)` at every step.
pub fn rk4_integrate_with<F, D>(
    p: &IvpProblem<F>,
    diagnostic_labels: &[&str],
    mut diagnostic: D,
) -> Result<TrajectoryRecord>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
    D: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    validate(p)?;
    check_finite(&p.state0, p.t0)?;
    let times = step_times(p.t0, p.t1, p.dt);
    let mut record = TrajectoryRecord {
        labels: (0..p.state0.len()).map(|i| format!("s{i}")).collect(),
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        diagnostic_labels: diagnostic_labels.iter().map(|s| s.to_string()).collect(),
        diagnostics: Vec::new(),
    };
    let mut state = p.state0.clone();
    record.times.push(p.t0);
    record.diagnostics.push(diagnostic(p.t0, &state)?);
    record.states.push(state.clone());
    for pair in times.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let h = t_next - t;
        let f = &p.vector_field;
        let k1 = f(t, &state)?;
        check_finite(&k1, t)?;
        let k2 = f(t + 0.5 * h, &axpy(&state, 0.5 * h, &k1))?;
        check_finite(&k2, t)?;
        let k3 = f(t + 0.5 * h, &axpy(&state, 0.5 * h, &k2))?;
        check_finite(&k3, t)?;
        let k4 = f(t_next, &axpy(&state, h, &k3))?;
        check_finite(&k4, t)?;
        for i in 0..state.len() {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&state, t_next)?;
        record.times.push(t_next);
        record.diagnostics.push(diagnostic(t_next, &state)?);
        record.states.push(state.clone());
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_error(dt: f64) -> f64 {
        let p = IvpProblem {
            vector_field: |_t: f64, x: &[f64]| Ok(vec![x[0]]),
            state0: vec![1.0],
            t0: 0.0,
            t1: 1.0,
            dt,
        };
        let r = rk4_integrate(&p).unwrap();
        (r.final_state()[0] - 1f64.exp()).abs()
    }

    #[test]
    fn constant_field_is_exact() {
        let p = IvpProblem {
            vector_field: |_t: f64, _x: &[f64]| Ok(vec![0.0]),
            state0: vec![5.0],
            t0: 0.0,
            t1: 1.0,
            dt: 0.1,
        };
        let r = rk4_integrate(&p).unwrap();
        assert_eq!(r.final_state(), &[5.0]);
        assert_eq!(*r.times.last().unwrap(), 1.0);
        assert_eq!(r.len(), 11);
    }

    #[test]
    fn exponential_growth() {
        assert!(exp_error(0.01) < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let ratio = exp_error(0.1) / exp_error(0.05);
        assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn partial_last_step_lands_on_t1() {
        let p = IvpProblem {
            vector_field: |_t: f64, _x: &[f64]| Ok(vec![1.0]),
            state0: vec![0.0],
            t0: 0.0,
            t1: 1.0,
            dt: 0.3,
        };
        let r = rk4_integrate(&p).unwrap();
        assert_eq!(r.times, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        assert!((r.final_state()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn blow_up_is_reported() {
        let p = IvpProblem {
            vector_field: |_t: f64, x: &[f64]| Ok(vec![1.0 / x[0]]),
            state0: vec![0.0],
            t0: 0.0,
            t1: 1.0,
            dt: 0.1,
        };
        assert!(matches!(rk4_integrate(&p), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn rejects_bad_intervals() {
        let p = IvpProblem {
            vector_field: |_t: f64, _x: &[f64]| Ok(vec![1.0]),
            state0: vec![0.0],
            t0: 1.0,
            t1: 1.0,
            dt: 0.1,
        };
        assert!(rk4_integrate(&p).is_err());
        let p = IvpProblem { t1: 2.0, dt: 2.0, ..p };
        assert!(rk4_integrate(&p).is_err());
    }

    #[test]
    fn diagnostics_recorded_each_step() {
        let p = IvpProblem {
            vector_field: |_t: f64, x: &[f64]| Ok(vec![x[0]]),
            state0: vec![1.0],
            t0: 0.0,
            t1: 0.5,
            dt: 0.1,
        };
        let r = rk4_integrate_with(&p, &["twice"], |_, s| Ok(vec![2.0 * s[0]])).unwrap();
        assert_eq!(r.diagnostics.len(), r.states.len());
        assert_eq!(r.diagnostic("twice").unwrap()[0], 2.0);
    }
}
