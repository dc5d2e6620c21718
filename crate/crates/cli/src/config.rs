//! INI-style model files.
//!
//! ```text
//! # comment
//! [bundle]
//! base_dim = 1
//! fibre_dim = 1
//!
//! [splitting]
//! h1 = "x1*v1"
//! ```
//!
//! Values are numbers, `true`/`false`, double-quoted expressions, or
//! bracketed comma-separated lists of those. Lists may span lines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use fibresplit::bundle::BundleChart;
use fibresplit::expr::{compile, parse_expression, VarContext, DEFAULT_SLIT_EPS};
use fibresplit::jet::ScalarField;
use fibresplit::lagrangian::{LagrangianSpec, SodeProvenance, SodeSpec};
use fibresplit::nonholonomic::AffineConstraintSpec;
use fibresplit::reduction::{ActionSpec, MagneticModel};
use fibresplit::sampling::{DEFAULT_SAMPLES, DEFAULT_SEED};
use fibresplit::splitting::SplittingSpec;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Invalid {
        section: String,
        key: String,
        message: String,
    },
    #[error("[{section}] {key}: dimension mismatch: {message}")]
    DimensionMismatch {
        section: String,
        key: String,
        message: String,
    },
    #[error("missing section [{0}]")]
    MissingSection(String),
}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Str(String),
    Num(f64),
    Bool(bool),
    List(Vec<RawValue>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: RawValue,
    pub line: usize,
}

/// Sections in file order are not kept; lookups are by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, Entry>>,
    pub section_lines: BTreeMap<String, usize>,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn bracket_balance(s: &str) -> i32 {
    let mut quoted = false;
    let mut depth = 0;
    for c in s.chars() {
        match c {
            '"' => quoted = !quoted,
            '[' if !quoted => depth += 1,
            ']' if !quoted => depth -= 1,
            _ => {}
        }
    }
    depth
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut quoted, mut depth, mut start) = (false, 0, 0);
    for (i, c) in s.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '[' if !quoted => depth += 1,
            ']' if !quoted => depth -= 1,
            ',' if !quoted && depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn parse_value(text: &str, line: usize) -> CResult<RawValue> {
    let t = text.trim();
    let err = |message: String| ConfigError::Parse { line, message };
    if t.is_empty() {
        return Err(err("missing value".into()));
    }
    if let Some(inner) = t.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| err("list is not closed with `]`".into()))?;
        if inner.trim().is_empty() {
            return Ok(RawValue::List(Vec::new()));
        }
        return split_top_level(inner)
            .into_iter()
            .map(|item| match parse_value(item, line)? {
                RawValue::List(_) => Err(err("nested lists are not supported".into())),
                v => Ok(v),
            })
            .collect::<CResult<Vec<_>>>()
            .map(RawValue::List);
    }
    if let Some(inner) = t.strip_prefix('"') {
        let inner = inner
            .strip_suffix('"')
            .ok_or_else(|| err("unterminated string".into()))?;
        if inner.contains('"') {
            return Err(err("stray quote inside string".into()));
        }
        return Ok(RawValue::Str(inner.to_string()));
    }
    match t {
        "true" => return Ok(RawValue::Bool(true)),
        "false" => return Ok(RawValue::Bool(false)),
        _ => {}
    }
    t.parse::<f64>()
        .map(RawValue::Num)
        .map_err(|_| err(format!("`{t}` is neither a number nor a quoted expression")))
}

pub fn parse_config(text: &str) -> CResult<RawConfig> {
    let mut cfg = RawConfig::default();
    let mut current: Option<String> = None;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    while let Some((no, raw)) = lines.next() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| is_identifier(n))
                .ok_or_else(|| ConfigError::Parse {
                    line: no,
                    message: format!("malformed section header `{line}`"),
                })?;
            if cfg.sections.contains_key(name) {
                return Err(ConfigError::Parse {
                    line: no,
                    message: format!("duplicate section [{name}]"),
                });
            }
            cfg.sections.insert(name.to_string(), BTreeMap::new());
            cfg.section_lines.insert(name.to_string(), no);
            current = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: no,
            message: format!("expected `key = value`, found `{line}`"),
        })?;
        let key = key.trim();
        if !is_identifier(key) {
            return Err(ConfigError::Parse {
                line: no,
                message: format!("invalid key `{key}`"),
            });
        }
        let section = current.as_ref().ok_or_else(|| ConfigError::Parse {
            line: no,
            message: format!("key `{key}` appears before any section"),
        })?;
        let mut value = value.trim().to_string();
        while bracket_balance(&value) > 0 {
            match lines.next() {
                Some((_, more)) => {
                    value.push(' ');
                    value.push_str(strip_comment(more).trim());
                }
                None => {
                    return Err(ConfigError::Parse {
                        line: no,
                        message: format!("list for `{key}` is never closed"),
                    })
                }
            }
        }
        let parsed = parse_value(&value, no)?;
        let entries = cfg.sections.get_mut(section).expect("current section exists");
        if entries.contains_key(key) {
            return Err(ConfigError::Parse {
                line: no,
                message: format!("duplicate key `{key}` in [{section}]"),
            });
        }
        entries.insert(
            key.to_string(),
            Entry {
                value: parsed,
                line: no,
            },
        );
    }
    Ok(cfg)
}

/// Typed access to one section; keys not consumed are rejected by `finish`.
struct Reader<'a> {
    name: &'a str,
    entries: &'a BTreeMap<String, Entry>,
    used: BTreeSet<String>,
}

impl<'a> Reader<'a> {
    fn new(name: &'a str, entries: &'a BTreeMap<String, Entry>) -> Self {
        Self {
            name,
            entries,
            used: BTreeSet::new(),
        }
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            section: self.name.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn mismatch(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::DimensionMismatch {
            section: self.name.to_string(),
            key: key.to_string(),
            message: message.into(),
        }
    }

    fn get(&mut self, key: &str) -> Option<&'a RawValue> {
        let e = self.entries.get(key)?;
        self.used.insert(key.to_string());
        Some(&e.value)
    }

    fn number(&mut self, key: &str) -> CResult<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(RawValue::Num(x)) => Ok(Some(*x)),
            Some(_) => Err(self.invalid(key, "expected a number")),
        }
    }

    fn count(&mut self, key: &str) -> CResult<Option<usize>> {
        match self.number(key)? {
            None => Ok(None),
            Some(x) if x >= 1.0 && x.fract() == 0.0 && x < 1e9 => Ok(Some(x as usize)),
            Some(_) => Err(self.invalid(key, "expected a positive integer")),
        }
    }

    fn unsigned(&mut self, key: &str) -> CResult<Option<u64>> {
        match self.number(key)? {
            None => Ok(None),
            Some(x) if x >= 0.0 && x.fract() == 0.0 && x < 9e15 => Ok(Some(x as u64)),
            Some(_) => Err(self.invalid(key, "expected a non-negative integer")),
        }
    }

    fn expression(&mut self, key: &str) -> CResult<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(RawValue::Str(s)) => Ok(Some(s.clone())),
            Some(RawValue::Num(x)) => Ok(Some(format!("{x}"))),
            Some(_) => Err(self.invalid(key, "expected a quoted expression")),
        }
    }

    fn expressions(&mut self, key: &str, len: usize) -> CResult<Option<Vec<String>>> {
        let items = match self.get(key) {
            None => return Ok(None),
            Some(RawValue::List(items)) => items,
            Some(RawValue::Str(s)) if len == 1 => return Ok(Some(vec![s.clone()])),
            Some(_) => return Err(self.invalid(key, "expected a list of expressions")),
        };
        if items.len() != len {
            return Err(self.mismatch(key, format!("{} entries, expected {len}", items.len())));
        }
        items
            .iter()
            .map(|v| match v {
                RawValue::Str(s) => Ok(s.clone()),
                RawValue::Num(x) => Ok(format!("{x}")),
                _ => Err(self.invalid(key, "list entries must be expressions or numbers")),
            })
            .collect::<CResult<Vec<_>>>()
            .map(Some)
    }

    fn numbers(&mut self, key: &str, len: Option<usize>) -> CResult<Option<Vec<f64>>> {
        let items = match self.get(key) {
            None => return Ok(None),
            Some(RawValue::List(items)) => items,
            Some(RawValue::Num(x)) if len.is_none_or(|l| l == 1) => return Ok(Some(vec![*x])),
            Some(_) => return Err(self.invalid(key, "expected a list of numbers")),
        };
        if let Some(l) = len {
            if items.len() != l {
                return Err(self.mismatch(key, format!("{} entries, expected {l}", items.len())));
            }
        }
        items
            .iter()
            .map(|v| match v {
                RawValue::Num(x) => Ok(*x),
                _ => Err(self.invalid(key, "list entries must be numbers")),
            })
            .collect::<CResult<Vec<_>>>()
            .map(Some)
    }

    fn finish(self) -> CResult<()> {
        for (key, entry) in self.entries {
            if !self.used.contains(key.as_str()) {
                return Err(ConfigError::Parse {
                    line: entry.line,
                    message: format!("unknown key `{key}` in [{}]", self.name),
                });
            }
        }
        Ok(())
    }
}

fn required<T>(v: Option<T>, section: &str, key: &str) -> CResult<T> {
    v.ok_or_else(|| ConfigError::Invalid {
        section: section.to_string(),
        key: key.to_string(),
        message: "required key is missing".into(),
    })
}

/// Integration and sampling settings, all optional in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub ic: Option<Vec<f64>>,
    pub probe: Option<Vec<f64>>,
    pub seed: u64,
    pub samples: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for Simulation {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 10.0,
            dt: 1e-3,
            ic: None,
            probe: None,
            seed: DEFAULT_SEED,
            samples: DEFAULT_SAMPLES,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

/// A base curve `x(t)` and the fibre point its lifts start from.
#[derive(Debug, Clone)]
pub struct CurveConfig {
    pub x: Vec<ScalarField>,
    pub y0: Vec<f64>,
}

/// A parsed and compiled model file.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub chart: BundleChart,
    pub constants: BTreeMap<String, f64>,
    pub splitting: Option<SplittingSpec>,
    pub lagrangian: Option<LagrangianSpec>,
    pub action: Option<ActionSpec>,
    pub constraints: Option<AffineConstraintSpec>,
    pub magnetic: Option<MagneticModel>,
    pub curve: Option<CurveConfig>,
    pub base_sode: Option<SodeSpec>,
    pub simulation: Simulation,
}

const SECTIONS: [&str; 10] = [
    "bundle",
    "constants",
    "splitting",
    "lagrangian",
    "action",
    "constraints",
    "magnetic",
    "simulation",
    "curve",
    "base_sode",
];

pub fn load_config(path: &Path) -> CResult<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    model_from_str(&text)
}

fn compile_in(ctx: &VarContext, section: &str, key: &str, text: &str) -> CResult<ScalarField> {
    compile(text, ctx).map_err(|e| ConfigError::Invalid {
        section: section.into(),
        key: key.into(),
        message: e.to_string(),
    })
}

fn compile_all(ctx: &VarContext, section: &str, key: &str, texts: &[String]) -> CResult<Vec<ScalarField>> {
    texts.iter().map(|t| compile_in(ctx, section, key, t)).collect()
}

fn core_error(section: &str, key: &str, e: fibresplit::Error) -> ConfigError {
    match e {
        fibresplit::Error::DimensionMismatch(message) => ConfigError::DimensionMismatch {
            section: section.into(),
            key: key.into(),
            message,
        },
        other => ConfigError::Invalid {
            section: section.into(),
            key: key.into(),
            message: other.to_string(),
        },
    }
}

pub fn model_from_str(text: &str) -> CResult<ModelConfig> {
    let raw = parse_config(text)?;
    for (name, line) in &raw.section_lines {
        if !SECTIONS.contains(&name.as_str()) {
            return Err(ConfigError::Parse {
                line: *line,
                message: format!("unknown section [{name}]"),
            });
        }
    }
    let section = |name: &'static str| raw.sections.get(name).map(|e| Reader::new(name, e));

    let mut b = section("bundle").ok_or_else(|| ConfigError::MissingSection("bundle".into()))?;
    let n = required(b.count("base_dim")?, "bundle", "base_dim")?;
    let m = required(b.count("fibre_dim")?, "bundle", "fibre_dim")?;
    let slit_eps = b.number("slit_eps")?.unwrap_or(DEFAULT_SLIT_EPS);
    b.finish()?;
    let chart = BundleChart::new(n, m, slit_eps).map_err(|e| core_error("bundle", "slit_eps", e))?;

    let mut constants = BTreeMap::new();
    if let Some(entries) = raw.sections.get("constants") {
        for (key, entry) in entries {
            match entry.value {
                RawValue::Num(x) => {
                    constants.insert(key.clone(), x);
                }
                _ => {
                    return Err(ConfigError::Invalid {
                        section: "constants".into(),
                        key: key.clone(),
                        message: "constants must be numbers".into(),
                    })
                }
            }
        }
    }
    let with_constants = |ctx: VarContext, sec: &str| -> CResult<VarContext> {
        ctx.with_constants(&constants)
            .map_err(|e| core_error(sec, "constants", e))
    };

    let splitting = match section("splitting") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(chart.pullback_context(), "splitting")?;
            let mut texts = Vec::with_capacity(m);
            for a in 1..=m {
                let key = format!("h{a}");
                let text = r
                    .expression(&key)?
                    .ok_or_else(|| r.mismatch(&key, format!("fibre_dim = {m} needs h1..h{m}")))?;
                parse_expression(&text, &ctx).map_err(|e| core_error("splitting", &key, e))?;
                texts.push(text);
            }
            let extra = r.entries.keys().find(|k| !r.used.contains(k.as_str()));
            if let Some(extra) = extra.filter(|k| k.starts_with('h') && k[1..].parse::<usize>().is_ok()) {
                return Err(r.mismatch(extra, format!("fibre_dim = {m} has no coefficient {extra}")));
            }
            r.finish()?;
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            Some(
                SplittingSpec::from_expressions(chart, &refs, &constants)
                    .map_err(|e| core_error("splitting", "h", e))?,
            )
        }
    };

    let lagrangian = match section("lagrangian") {
        None => None,
        Some(mut r) => {
            let text = required(r.expression("L")?, "lagrangian", "L")?;
            let degree = r.number("homogeneity")?;
            r.finish()?;
            let l = LagrangianSpec::from_expression(chart, &text, &constants)
                .map_err(|e| core_error("lagrangian", "L", e))?;
            Some(match degree {
                Some(d) => l.with_homogeneity(d),
                None => l,
            })
        }
    };

    let action = match section("action") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(chart.position_context(), "action")?;
            let k = required(r.expressions("K", m * m)?, "action", "K")?;
            let c = r.numbers("C", Some(m * m * m))?.unwrap_or_else(|| vec![0.0; m * m * m]);
            r.finish()?;
            let k = compile_all(&ctx, "action", "K", &k)?;
            Some(ActionSpec::new(chart, k, c).map_err(|e| core_error("action", "C", e))?)
        }
    };

    let constraints = match section("constraints") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(chart.position_context(), "constraints")?;
            let a = required(r.expressions("A", m * n)?, "constraints", "A")?;
            let a0 = r.expressions("A0", m)?.unwrap_or_else(|| vec!["0".into(); m]);
            r.finish()?;
            let a = compile_all(&ctx, "constraints", "A", &a)?;
            let a0 = compile_all(&ctx, "constraints", "A0", &a0)?;
            Some(AffineConstraintSpec::new(chart, a, a0).map_err(|e| core_error("constraints", "A", e))?)
        }
    };

    let magnetic = match section("magnetic") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(chart.base_context(), "magnetic")?;
            let g = required(r.expressions("g", n * n)?, "magnetic", "g")?;
            let k = required(r.numbers("k", Some(m * m))?, "magnetic", "k")?;
            let v = r.expression("V")?.unwrap_or_else(|| "0".into());
            let zeros = |len: usize| vec!["0".to_string(); len];
            let a_i = r.expressions("A_i", n)?.unwrap_or_else(|| zeros(n));
            let a_alpha = r.expressions("A_alpha", m)?.unwrap_or_else(|| zeros(m));
            let ups = r.expressions("Upsilon", n * m * m)?.unwrap_or_else(|| zeros(n * m * m));
            let kc = r.expressions("Kcurv", m * n * n)?.unwrap_or_else(|| zeros(m * n * n));
            let c = r.numbers("C", Some(m * m * m))?.unwrap_or_else(|| vec![0.0; m * m * m]);
            r.finish()?;
            let model = MagneticModel {
                n,
                m,
                g: compile_all(&ctx, "magnetic", "g", &g)?,
                k: DMatrix::from_row_slice(m, m, &k),
                potential: compile_in(&ctx, "magnetic", "V", &v)?,
                a_base: compile_all(&ctx, "magnetic", "A_i", &a_i)?,
                a_fibre: compile_all(&ctx, "magnetic", "A_alpha", &a_alpha)?,
                upsilon: compile_all(&ctx, "magnetic", "Upsilon", &ups)?,
                kcurv: compile_all(&ctx, "magnetic", "Kcurv", &kc)?,
                c,
            };
            model.validate().map_err(|e| core_error("magnetic", "k", e))?;
            Some(model)
        }
    };

    let curve = match section("curve") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(
                VarContext::custom(&["t"]).map_err(|e| core_error("curve", "x", e))?,
                "curve",
            )?;
            let x = required(r.expressions("x", n)?, "curve", "x")?;
            let y0 = required(r.numbers("y0", Some(m))?, "curve", "y0")?;
            r.finish()?;
            Some(CurveConfig {
                x: compile_all(&ctx, "curve", "x", &x)?,
                y0,
            })
        }
    };

    let base_sode = match section("base_sode") {
        None => None,
        Some(mut r) => {
            let ctx = with_constants(chart.base_tangent_context(), "base_sode")?;
            let f = required(r.expressions("f", n)?, "base_sode", "f")?;
            r.finish()?;
            let fields = compile_all(&ctx, "base_sode", "f", &f)?;
            Some(SodeSpec::new(n, SodeProvenance::Explicit, move |s: &[f64]| {
                fields.iter().map(|f| f.value(s)).collect()
            }))
        }
    };

    let simulation = match section("simulation") {
        None => Simulation::default(),
        Some(mut r) => {
            let d = Simulation::default();
            let box_ = r.numbers("box", Some(2))?.unwrap_or_else(|| vec![d.lo, d.hi]);
            let sim = Simulation {
                t0: r.number("t0")?.unwrap_or(d.t0),
                t1: r.number("t1")?.unwrap_or(d.t1),
                dt: r.number("dt")?.unwrap_or(d.dt),
                ic: r.numbers("ic", None)?,
                probe: r.numbers("probe", None)?,
                seed: r.unsigned("seed")?.unwrap_or(d.seed),
                samples: r.count("samples")?.unwrap_or(d.samples),
                lo: box_[0],
                hi: box_[1],
            };
            if !sim.dt.is_finite() || sim.dt <= 0.0 {
                return Err(r.invalid("dt", "time step must be positive"));
            }
            if sim.lo.partial_cmp(&sim.hi) != Some(std::cmp::Ordering::Less) {
                return Err(r.invalid("box", "box must satisfy lo < hi"));
            }
            r.finish()?;
            sim
        }
    };

    Ok(ModelConfig {
        chart,
        constants,
        splitting,
        lagrangian,
        action,
        constraints,
        magnetic,
        curve,
        base_sode,
        simulation,
    })
}

impl ModelConfig {
    pub fn require<'a, T>(item: &'a Option<T>, section: &str) -> CResult<&'a T> {
        item.as_ref().ok_or_else(|| ConfigError::MissingSection(section.into()))
    }

    /// Checks the length of `[simulation] ic` against the allowed layouts.
    pub fn initial_condition(&self, lens: &[usize], layout: &str) -> CResult<Vec<f64>> {
        let ic = self.simulation.ic.clone().ok_or_else(|| ConfigError::Invalid {
            section: "simulation".into(),
            key: "ic".into(),
            message: format!("required key is missing; expected {layout}"),
        })?;
        if !lens.contains(&ic.len()) {
            return Err(ConfigError::DimensionMismatch {
                section: "simulation".into(),
                key: "ic".into(),
                message: format!("{} entries, expected {layout}", ic.len()),
            });
        }
        Ok(ic)
    }

    /// `[simulation] probe`, a pullback point `(x, y, v)`.
    pub fn probe(&self) -> CResult<Option<Vec<f64>>> {
        let len = self.chart.pullback_dim();
        match &self.simulation.probe {
            None => Ok(None),
            Some(p) if p.len() == len => Ok(Some(p.clone())),
            Some(p) => Err(ConfigError::DimensionMismatch {
                section: "simulation".into(),
                key: "probe".into(),
                message: format!("{} entries, expected (x, y, v) with {len}", p.len()),
            }),
        }
    }
}
