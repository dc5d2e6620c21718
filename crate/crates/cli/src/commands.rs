//! One function per subcommand, each a composition of library operations.

use std::sync::Arc;

use fibresplit::bundle::VectorField;
use fibresplit::lagrangian::{
    defining_relation_check, energy, euler_lagrange_sode, fibre_regularity, homogeneity_of_induced,
    induced_splitting_with_model, projection_verify, subduce, symmetry_condition_check, tangency_check, InducedModel,
    LagrangianSpec, HOMOGENEITY_TOLERANCE,
};
use fibresplit::nonholonomic::integrate_constrained;
use fibresplit::numerics::TrajectoryRecord;
use fibresplit::reduction::{
    decoupling_check, invariance_check, principal_check, submersion_residual, unreduce, DecouplingReport,
};
use fibresplit::sampling::SampleSpec;
use fibresplit::splitting::{
    affine_decompose, classify, coordinate_labels, curvature_rbar, horizontal_lift_curve, projector_identities,
    vilms_oracle_check, SplittingSpec,
};
use fibresplit::Error;
use serde_json::Value;

use crate::config::{ConfigError, ModelConfig, Simulation};
use crate::report::{real, reals, Report};
use crate::RunError;

/// Largest `|P_h + P_v − id|` on w-blocks still attributed to rounding.
pub const COMPLEMENT_ULPS: f64 = 4.0;

/// Everything a command needs: the model, sampling and tolerances.
pub struct Context {
    pub cfg: ModelConfig,
    pub samples: SampleSpec,
    pub sim: Simulation,
    pub tol_structural: f64,
    pub tol_dynamic: f64,
}

pub type Outcome = Option<TrajectoryRecord>;

fn need<'a, T>(item: &'a Option<T>, section: &str) -> Result<&'a T, RunError> {
    Ok(ModelConfig::require(item, section)?)
}

fn max_drift(values: &[f64]) -> f64 {
    let first = values.first().copied().unwrap_or(0.0);
    values.iter().fold(0.0_f64, |a, v| a.max((v - first).abs()))
}

/// The configured splitting, or the one induced by the Lagrangian.
fn splitting_or_induced(ctx: &Context) -> Result<(SplittingSpec, Option<Arc<InducedModel>>), RunError> {
    if let Some(h) = &ctx.cfg.splitting {
        return Ok((h.clone(), None));
    }
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let (h, model) = induced_splitting_with_model(l)?;
    Ok((h, Some(model)))
}

pub fn classify_cmd(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let h = need(&ctx.cfg.splitting, "splitting")?;
    let c = classify(h, &ctx.samples)?;
    r.verdict("classification", c.verdict);
    for (k, v) in &c.residuals {
        r.residual(k, *v);
    }
    r.value("classification_tolerance", real(c.tolerance));
    r.value("sample_count", Value::from(c.sample_count));
    r.value("skipped", Value::from(c.skipped));
    if let Some(p) = ctx.cfg.probe()? {
        r.value("h_at_probe", reals(&h.coefficients(&p)?));
    }
    Ok(None)
}

pub fn lift_curve(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let h = need(&ctx.cfg.splitting, "splitting")?;
    let curve = need(&ctx.cfg.curve, "curve")?;
    let base = |t: f64| -> fibresplit::Result<(Vec<f64>, Vec<f64>)> {
        let jets = curve
            .x
            .iter()
            .map(|f| f.jet(&[t]))
            .collect::<fibresplit::Result<Vec<_>>>()?;
        Ok((
            jets.iter().map(|j| j.value).collect(),
            jets.iter().map(|j| j.gradient[0]).collect(),
        ))
    };
    let rec = horizontal_lift_curve(h, &base, &curve.y0, ctx.sim.t0, ctx.sim.t1, ctx.sim.dt)?;
    let res = rec.diagnostic_max("lift_residual").unwrap_or(0.0);
    r.residual("lift_residual", res);
    r.below("lift_residual", res, ctx.tol_dynamic);
    r.value("final_state", reals(rec.final_state()));
    Ok(Some(rec))
}

pub fn induce(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let (h, model) = induced_splitting_with_model(l)?;
    let def = defining_relation_check(l, &h, &ctx.samples)?;
    r.residual("defining_relation", def.max);
    r.below("defining_relation", def.max, ctx.tol_structural);
    r.value("sample_count", Value::from(def.sample_count));
    r.value("skipped", Value::from(def.skipped));
    r.value("newton_max_iterations", Value::from(model.max_iterations_seen()));
    if let Some(p) = ctx.cfg.probe()? {
        let w = h.coefficients(&p)?;
        let reg = fibre_regularity(l, &[&p[..], &w].concat())?;
        r.value("h_at_probe", reals(&w));
        r.value("fibre_hessian_det_at_probe", real(reg.det));
    }
    Ok(None)
}

pub fn subduce_cmd(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let (h, _) = splitting_or_induced(ctx)?;
    let sub = subduce(l, &h, &ctx.samples)?;
    r.residual("y_independence", sub.y_independence);
    r.below("y_independence", sub.y_independence, ctx.tol_dynamic);
    r.value("y_ref", reals(&sub.y_ref));
    if let Some(p) = ctx.cfg.probe()? {
        let (n, m) = (ctx.cfg.chart.n, ctx.cfg.chart.m);
        r.value("lbar_at_probe", real(sub.lbar.value(&[&p[..n], &p[n + m..]].concat())?));
    }
    Ok(None)
}

pub fn project_verify(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let chart = ctx.cfg.chart;
    let (n, m) = (chart.n, chart.m);
    let ic = ctx.cfg.initial_condition(
        &[chart.pullback_dim(), chart.tangent_dim()],
        "(x, y, v) or (x, y, v, w)",
    )?;
    let (h, _) = splitting_or_induced(ctx)?;
    let sub = subduce(l, &h, &ctx.samples)?;
    let (x0, y0, v0) = (&ic[..n], &ic[n..n + m], &ic[n + m..2 * n + m]);
    let w0 = (ic.len() == chart.tangent_dim()).then(|| &ic[2 * n + m..]);
    let rep = projection_verify(l, &h, &sub, x0, v0, y0, w0, ctx.sim.t1, ctx.sim.dt)?;
    r.residual("base_deviation", rep.base_deviation);
    r.residual("horizontality_drift", rep.horizontality_drift);
    r.residual("lbar_el_residual", rep.lbar_el_residual);
    r.value("lbar_min_hessian_det", real(rep.lbar_min_det));
    r.value("y_independence", real(sub.y_independence));
    r.below("base_deviation", rep.base_deviation, ctx.tol_dynamic);
    r.below("horizontality_drift", rep.horizontality_drift, ctx.tol_dynamic);
    let mut full = rep.full;
    full.labels = coordinate_labels(n, m);
    Ok(Some(full))
}

pub fn el_simulate(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let chart = ctx.cfg.chart;
    let ic = ctx.cfg.initial_condition(&[chart.tangent_dim()], "(x, y, v, w)")?;
    let sode = euler_lagrange_sode(l);
    let mut rec = sode.integrate_with(&ic, ctx.sim.t0, ctx.sim.t1, ctx.sim.dt, &["energy"], |_, s| {
        Ok(vec![energy(l, s)?])
    })?;
    rec.labels = coordinate_labels(chart.n, chart.m);
    r.residual("energy_drift", max_drift(&rec.diagnostic("energy").unwrap_or_default()));
    r.value("final_state", reals(rec.final_state()));
    Ok(Some(rec))
}

pub fn nh_simulate(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let l = need(&ctx.cfg.lagrangian, "lagrangian")?;
    let c = need(&ctx.cfg.constraints, "constraints")?;
    let ic = ctx
        .cfg
        .initial_condition(&[ctx.cfg.chart.pullback_dim()], "(x, y, v)")?;
    let rec = integrate_constrained(l, c, &ic, ctx.sim.t1, ctx.sim.dt)?;
    let res = rec.diagnostic_max("constraint_residual").unwrap_or(0.0);
    r.residual("constraint_residual", res);
    r.residual("energy_drift", max_drift(&rec.diagnostic("energy").unwrap_or_default()));
    r.below("constraint_residual", res, ctx.tol_structural);
    r.value("final_state", reals(rec.final_state()));
    Ok(Some(rec))
}

fn decoupling_into(report: &mut Report, d: &DecouplingReport) {
    report.residual("decoupling_residual", d.residual);
    report.residual("quadratic_term", d.quadratic_term);
    report.verdict("decoupling", if d.decoupled { "decoupled" } else { "coupled" });
    let opt = |v: Option<f64>| v.map_or(Value::Null, real);
    report.value("wbar_sensitivity", opt(d.wbar_sensitivity));
    report.value("base_el_mismatch", opt(d.base_el_mismatch));
}

pub fn magnetic_simulate(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let model = need(&ctx.cfg.magnetic, "magnetic")?;
    let ic = ctx.cfg.initial_condition(&[2 * model.n + model.m], "(x, v, wbar)")?;
    let d = decoupling_check(model, &ctx.samples)?;
    decoupling_into(r, &d);
    let rec = model.integrate(&ic, ctx.sim.t1, ctx.sim.dt)?;
    r.value("final_state", reals(rec.final_state()));
    Ok(Some(rec))
}

pub fn curvature(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let h = need(&ctx.cfg.splitting, "splitting")?;
    let chart = ctx.cfg.chart;
    let n = chart.n;
    let fields: Vec<VectorField> = (0..n).map(|i| VectorField::coordinate(n, i)).collect();
    let points = ctx.samples.points(chart.position_dim())?;
    let probe = ctx.cfg.probe()?.map(|p| p[..chart.position_dim()].to_vec());
    for i in 0..n {
        for j in i + 1..n {
            let mut worst = 0.0_f64;
            for q in &points {
                let rb = curvature_rbar(h, &fields[i], &fields[j], q)?;
                worst = rb.w.iter().fold(worst, |a, c| a.max(c.abs()));
            }
            let name = format!("rbar_{}{}", i + 1, j + 1);
            r.residual(&name, worst);
            if let Some(q) = &probe {
                r.value(
                    &format!("{name}_at_probe"),
                    reals(&curvature_rbar(h, &fields[i], &fields[j], q)?.w),
                );
            }
        }
    }
    match affine_decompose(h, &ctx.samples) {
        Ok(data) => {
            r.verdict("affine", "yes");
            r.residual("affine_reconstruction", data.reconstruction_residual);
            if let Some(q) = &probe {
                let b = data.curvature_coefficients(q)?;
                let a0 = data.drift_coefficients(q)?;
                r.value(
                    "B_at_probe",
                    Value::Array(
                        b.iter()
                            .map(|rows| Value::Array(rows.iter().map(|row| reals(row)).collect()))
                            .collect(),
                    ),
                );
                r.value("A0_at_probe", Value::Array(a0.iter().map(|row| reals(row)).collect()));
            }
        }
        Err(Error::NotAffine { residual }) => {
            r.verdict("affine", "no");
            r.residual("affine_reconstruction", residual);
        }
        Err(e) => return Err(e.into()),
    }
    Ok(None)
}

pub fn unreduce_cmd(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let h = need(&ctx.cfg.splitting, "splitting")?;
    let action = need(&ctx.cfg.action, "action")?;
    let gamma_bar = need(&ctx.cfg.base_sode, "base_sode")?;
    let chart = ctx.cfg.chart;
    let (n, m) = (chart.n, chart.m);
    let ic = ctx.cfg.initial_condition(
        &[chart.pullback_dim(), chart.tangent_dim()],
        "(x, y, v) or (x, y, v, w)",
    )?;
    let gamma = unreduce(gamma_bar, h, action, &ctx.samples)?;
    let sub = submersion_residual(&gamma, gamma_bar, &chart, &ctx.samples)?;
    r.residual("submersion", sub.max);
    r.below("submersion", sub.max, ctx.tol_structural);
    let horizontal_start = ic.len() == chart.pullback_dim();
    let state0 = if horizontal_start {
        [&ic[..], &h.coefficients(&ic)?].concat()
    } else {
        ic
    };
    let k = n + m;
    let mut rec = gamma.integrate_with(
        &state0,
        ctx.sim.t0,
        ctx.sim.t1,
        ctx.sim.dt,
        &["horizontality"],
        |_, s| {
            let hw = h.coefficients(&s[..k + n])?;
            Ok(vec![hw
                .iter()
                .zip(&s[k + n..])
                .fold(0.0_f64, |a, (p, q)| a.max((p - q).abs()))])
        },
    )?;
    rec.labels = coordinate_labels(n, m);
    let drift = rec.diagnostic_max("horizontality").unwrap_or(0.0);
    r.residual("horizontality", drift);
    if horizontal_start {
        r.below("horizontality", drift, ctx.tol_dynamic);
    }
    r.value("final_state", reals(rec.final_state()));
    Ok(Some(rec))
}

/// Runs `f`; hypothesis-type failures become failed checks, numerical ones abort.
fn guarded(r: &mut Report, name: &str, f: impl FnOnce(&mut Report) -> fibresplit::Result<()>) -> Result<(), RunError> {
    match f(r) {
        Ok(()) => Ok(()),
        Err(e) if e.is_numerical() => Err(e.into()),
        Err(
            e @ (Error::Syntax { .. }
            | Error::UnknownIdentifier { .. }
            | Error::Arity { .. }
            | Error::DimensionMismatch(_)),
        ) => Err(e.into()),
        Err(e) => {
            r.failed(name, e.to_string());
            Ok(())
        }
    }
}

pub fn check_all(ctx: &Context, r: &mut Report) -> Result<Outcome, RunError> {
    let cfg = &ctx.cfg;
    let (ts, td) = (ctx.tol_structural, ctx.tol_dynamic);
    let s = &ctx.samples;
    if let Some(h) = &cfg.splitting {
        guarded(r, "classification", |r| {
            r.verdict("classification", classify(h, s)?.verdict);
            Ok(())
        })?;
        guarded(r, "projectors", |r| {
            let p = projector_identities(h, s)?;
            r.below("projector_idempotence", p.idempotence, ts);
            r.below("projector_complement_ulps", p.complement_ulps, COMPLEMENT_ULPS);
            if let Some(zs) = p.zero_section {
                r.below("projector_zero_section", zs, ts);
            }
            Ok(())
        })?;
        guarded(r, "vilms_oracle", |r| {
            r.below("vilms_oracle", vilms_oracle_check(h, s)?.max, ts);
            Ok(())
        })?;
    }
    let mut lag_splitting = None;
    if let Some(l) = &cfg.lagrangian {
        let (h, induced) = splitting_or_induced(ctx)?;
        if induced.is_some() {
            guarded(r, "defining_relation", |r| {
                r.below("defining_relation", defining_relation_check(l, &h, s)?.max, ts);
                Ok(())
            })?;
        }
        guarded(r, "symmetry_condition", |r| {
            r.below("symmetry_condition", symmetry_condition_check(l, &h, s)?.max, td);
            Ok(())
        })?;
        guarded(r, "tangency", |r| {
            r.below("tangency", tangency_check(l, &h, s)?.max, td);
            Ok(())
        })?;
        if l.homogeneity.is_some() {
            homogeneity_checks(r, l, s, td)?;
        }
        lag_splitting = Some(h);
    }
    if let Some(action) = &cfg.action {
        if let Some(h) = cfg.splitting.as_ref().or(lag_splitting.as_ref()) {
            guarded(r, "principal", |r| {
                r.below("principal", principal_check(h, action, s)?.max, td);
                Ok(())
            })?;
        }
        if let Some(l) = &cfg.lagrangian {
            guarded(r, "invariance", |r| {
                r.below("invariance", invariance_check(l, action, s)?.max, ts);
                Ok(())
            })?;
        }
    }
    if let Some(model) = &cfg.magnetic {
        guarded(r, "decoupling", |r| {
            decoupling_into(r, &decoupling_check(model, s)?);
            Ok(())
        })?;
    }
    if r.checks.is_empty() && r.verdicts.is_empty() {
        return Err(ConfigError::MissingSection("splitting, lagrangian or magnetic".into()).into());
    }
    Ok(None)
}

fn homogeneity_checks(r: &mut Report, l: &LagrangianSpec, s: &SampleSpec, td: f64) -> Result<(), RunError> {
    guarded(r, "homogeneity", |r| {
        let h = homogeneity_of_induced(l, s)?;
        r.below("liouville_homogeneity", h.liouville_residual, HOMOGENEITY_TOLERANCE);
        r.below("induced_euler", h.euler_residual, td);
        Ok(())
    })
}
