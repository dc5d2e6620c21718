//! `report.json` and trajectory CSV emission.
//!
//! Objects are written with sorted keys and reals in shortest round-trip
//! form. Non-finite reals become the strings `"inf"`, `"-inf"` and `"nan"`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use fibresplit::numerics::TrajectoryRecord;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub fn real(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

pub fn reals(xs: &[f64]) -> Value {
    Value::Array(xs.iter().copied().map(real).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// Passes when `value < bound`.
    Below,
    /// Passes when `value ≥ bound`.
    AtLeast,
}

/// One asserted residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub kind: Bound,
    pub note: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        match self.kind {
            Bound::Below => self.value < self.bound,
            Bound::AtLeast => self.value >= self.bound,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub samples: usize,
    pub tolerances: BTreeMap<String, f64>,
    pub residuals: BTreeMap<String, f64>,
    pub verdicts: BTreeMap<String, String>,
    pub values: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn residual(&mut self, name: &str, value: f64) {
        self.residuals.insert(name.to_string(), value);
    }

    pub fn verdict(&mut self, name: &str, value: impl ToString) {
        self.verdicts.insert(name.to_string(), value.to_string());
    }

    pub fn value(&mut self, name: &str, value: Value) {
        self.values.insert(name.to_string(), value);
    }

    pub fn below(&mut self, name: &str, value: f64, bound: f64) {
        self.push(name, value, bound, Bound::Below, None);
    }

    pub fn at_least(&mut self, name: &str, value: f64, bound: f64) {
        self.push(name, value, bound, Bound::AtLeast, None);
    }

    /// A check that could not be evaluated; it fails.
    pub fn failed(&mut self, name: &str, note: String) {
        self.push(name, f64::NAN, 0.0, Bound::Below, Some(note));
    }

    fn push(&mut self, name: &str, value: f64, bound: f64, kind: Bound, note: Option<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            value,
            bound,
            kind,
            note,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn to_json(&self) -> Value {
        let obj = |m: BTreeMap<String, Value>| Value::Object(m.into_iter().collect::<Map<_, _>>());
        let checks = self
            .checks
            .iter()
            .map(|c| {
                let mut m = BTreeMap::new();
                m.insert("name".to_string(), Value::from(c.name.clone()));
                m.insert("value".to_string(), real(c.value));
                m.insert("bound".to_string(), real(c.bound));
                let rel = match c.kind {
                    Bound::Below => "<",
                    Bound::AtLeast => ">=",
                };
                m.insert("relation".to_string(), Value::from(rel));
                m.insert("passed".to_string(), Value::from(c.passed()));
                if let Some(n) = &c.note {
                    m.insert("note".to_string(), Value::from(n.clone()));
                }
                obj(m)
            })
            .collect();
        let mut top = BTreeMap::new();
        top.insert("command".to_string(), Value::from(self.command.clone()));
        top.insert("config_hash".to_string(), Value::from(self.config_hash.clone()));
        top.insert("seed".to_string(), Value::from(self.seed));
        top.insert("samples".to_string(), Value::from(self.samples));
        let map_reals = |m: &BTreeMap<String, f64>| obj(m.iter().map(|(k, v)| (k.clone(), real(*v))).collect());
        top.insert("tolerances".to_string(), map_reals(&self.tolerances));
        top.insert("residuals".to_string(), map_reals(&self.residuals));
        top.insert(
            "verdicts".to_string(),
            obj(self
                .verdicts
                .iter()
                .map(|(k, v)| (k.clone(), Value::from(v.clone())))
                .collect()),
        );
        top.insert("values".to_string(), obj(self.values.clone()));
        top.insert("checks".to_string(), Value::Array(checks));
        top.insert("passed".to_string(), Value::from(self.passed()));
        obj(top)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("report values serialize");
        s.push('\n');
        s
    }

    /// Plain-text residual table for the terminal.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.verdicts {
            let _ = writeln!(out, "{k}: {v}");
        }
        if self.checks.is_empty() {
            return out;
        }
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>2}  {:>10}  status",
            "check", "value", "", "bound"
        );
        for c in &self.checks {
            let rel = match c.kind {
                Bound::Below => "<",
                Bound::AtLeast => ">=",
            };
            let status = if c.passed() { "PASS" } else { "FAIL" };
            let _ = write!(
                out,
                "{:<width$}  {:>14.6e}  {rel:>2}  {:>10.1e}  {status}",
                c.name, c.value, c.bound
            );
            if let Some(n) = &c.note {
                let _ = write!(out, "  ({n})");
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}

/// CSV with header `t,<labels>,<diagnostics>`, one line per step.
pub fn trajectory_csv(rec: &TrajectoryRecord) -> String {
    let mut out = String::new();
    let header: Vec<&str> = std::iter::once("t")
        .chain(rec.labels.iter().map(String::as_str))
        .chain(rec.diagnostic_labels.iter().map(String::as_str))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, t) in rec.times.iter().enumerate() {
        let diag = rec.diagnostics.get(i).map(Vec::as_slice).unwrap_or(&[]);
        let row: Vec<String> = std::iter::once(*t)
            .chain(rec.states[i].iter().copied())
            .chain(diag.iter().copied())
            .map(fmt_real)
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
