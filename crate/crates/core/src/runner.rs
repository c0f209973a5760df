//! Dispatch of [`CheckSpec`]s onto the module operations.

use std::sync::Arc;

use serde::Serialize;

use crate::dynamics::{
    check_constant_of_motion, check_tangency, ConstantMode, IntegralOptions, SamplePlan,
};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::geometry::{CoordinateSpace, Field, Map};
use crate::poisson::{jacobi_check, poisson_lagrangian_check, theorem5_check};
use crate::report::{CheckReport, Verdict};
use crate::slicing::{
    check_complete_slicing, check_fibred_slicing, check_slicing, constant_from_complete,
    gauge_transform, straighten_local,
};
use crate::sode::{
    check_reconstruction, lemma8_check, lemma8_converse_check, second_order_check,
    TangentBundleSpace,
};
use crate::symplectic::{
    check_fibre_isotropy, check_hj_residual, check_lagrangian_slicing, check_vertical_block,
    classical_hj_check, classify_submanifold, involution_check, theorem6_check,
};
use crate::sysdef::{resolve_bounds, CheckSpec, Expectation, Model, Structure};
use crate::tolerances::{
    DEFAULT_TOLERANCE, INTEGRAL_CHECKPOINTS, INTEGRAL_HORIZON, INTEGRATOR_TOLERANCE,
};

/// Every operation name accepted in `op`.
pub const OPERATIONS: &[&str] = &[
    "slicing",
    "gauge",
    "tangency",
    "complete",
    "constant",
    "constant-from-complete",
    "straighten",
    "hj-residual",
    "classify",
    "lagrangian-slicing",
    "classical-hj",
    "fibred",
    "fibre-isotropy",
    "theorem6",
    "vertical-block",
    "involution",
    "structure",
    "jacobi",
    "poisson-lagrangian",
    "theorem5",
    "second-order",
    "reconstruct-sode",
    "lemma8",
    "lemma8-converse",
];

/// Defaults for checks that leave tolerance, sample count or seed unset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub tolerance: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            tolerance: DEFAULT_TOLERANCE,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
}

impl From<Verdict> for Outcome {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Pass => Outcome::Pass,
            Verdict::Fail => Outcome::Fail,
        }
    }
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub label: String,
    pub op: String,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected: Option<Expectation>,
    /// `true` when no expectation was declared or every one was met.
    pub matched: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub mismatches: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub citation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<CheckReport>,
}

impl CheckOutcome {
    /// Whether the run itself succeeded, ignoring expectations.
    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

fn need<'a>(v: &'a Option<String>, arg: &str, op: &str) -> Result<&'a str> {
    v.as_deref()
        .ok_or_else(|| Error::precondition(op, format!("missing argument `{arg}`")))
}

fn plan_for(spec: &CheckSpec, opts: &RunOptions, space: &CoordinateSpace) -> Result<SamplePlan> {
    let count = spec.samples.unwrap_or(opts.samples);
    let seed = spec.seed.unwrap_or(opts.seed);
    let mut plan = match spec.strategy.as_deref() {
        None | Some("random") => SamplePlan::random(count, seed),
        Some("grid") => SamplePlan::grid(count),
        Some(other) => {
            return Err(Error::definition(format!(
                "check `{}`: unknown strategy `{other}`",
                spec.label
            )))
        }
    };
    if let Some(b) = &spec.bounds {
        let b = resolve_bounds(b)?;
        if b.len() != space.dim() {
            return Err(Error::dimension("check bounds", space.dim(), b.len()));
        }
        plan = plan.with_bounds(b);
    }
    Ok(plan)
}

fn constant_mode(spec: &CheckSpec) -> Result<ConstantMode> {
    match spec.mode.as_deref() {
        None | Some("infinitesimal") => Ok(ConstantMode::Infinitesimal),
        Some("integral") => Ok(ConstantMode::Integral(IntegralOptions {
            horizon: spec.horizon.unwrap_or(INTEGRAL_HORIZON),
            checkpoints: spec.checkpoints.unwrap_or(INTEGRAL_CHECKPOINTS),
            tolerance: spec.integrator_tolerance.unwrap_or(INTEGRATOR_TOLERANCE),
        })),
        Some(other) => Err(Error::definition(format!(
            "check `{}`: unknown mode `{other}`",
            spec.label
        ))),
    }
}

fn expressions(fs: &[String], space: &CoordinateSpace) -> Result<Vec<Expression>> {
    fs.iter()
        .map(|f| Ok(Expression::parse(f, space.coords())?))
        .collect()
}

fn tangent_bundle(z: &Arc<dyn Field>) -> Result<TangentBundleSpace> {
    TangentBundleSpace::new(z.space().clone())
}

/// Runs the operation named by `spec.op` and returns its report.
pub fn execute(model: &Model, spec: &CheckSpec, opts: &RunOptions) -> Result<CheckReport> {
    let op = spec.op.as_str();
    let tol = spec.tolerance.unwrap_or(opts.tolerance);
    let field = || model.field(need(&spec.field, "field", op)?);
    let map = || -> Result<Arc<dyn Map>> { Ok(model.map(need(&spec.map, "map", op)?)?.clone()) };
    let symplectic = || model.symplectic(need(&spec.system, "system", op)?);
    let poisson = || model.poisson(need(&spec.system, "system", op)?);
    let fibration = || model.fibration(need(&spec.fibration, "fibration", op)?);
    let complete = || model.complete(need(&spec.complete, "complete", op)?);
    let mut report = match op {
        "slicing" | "gauge" => {
            let s = model.slicing(need(&spec.slicing, "slicing", op)?)?;
            let z = field()?;
            if op == "gauge" {
                let phi = model.map(need(&spec.phi, "phi", op)?)?.clone();
                let g = gauge_transform(s, phi)?;
                check_slicing(&g, z.as_ref(), &plan_for(spec, opts, g.source())?, tol)?
            } else {
                check_slicing(s, z.as_ref(), &plan_for(spec, opts, s.source())?, tol)?
            }
        }
        "tangency" => {
            let a = map()?;
            check_tangency(
                field()?.as_ref(),
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "complete" => {
            let cs = complete()?;
            let plan = plan_for(spec, opts, cs.family().source())?;
            let coverage = spec
                .coverage_samples
                .map(|n| SamplePlan::random(n, spec.seed.unwrap_or(opts.seed)));
            check_complete_slicing(cs, field()?.as_ref(), &plan, coverage.as_ref(), tol)?
        }
        "constant" => {
            let f = map()?;
            let sys = model.dynamical_system(need(&spec.field, "field", op)?)?;
            let plan = plan_for(spec, opts, f.source())?;
            check_constant_of_motion(&sys, f.as_ref(), &plan, constant_mode(spec)?, tol)?
        }
        "constant-from-complete" => {
            let cs = complete()?.clone();
            let sys = model.dynamical_system(need(&spec.field, "field", op)?)?;
            let plan = plan_for(spec, opts, cs.phase_space())?;
            constant_from_complete(cs, &sys, &plan, constant_mode(spec)?, tol)?.1
        }
        "straighten" => {
            let sys = model.dynamical_system(need(&spec.field, "field", op)?)?;
            let transversal = map()?;
            let [t0, t1] = spec
                .t_range
                .ok_or_else(|| Error::precondition(op, "missing argument `t_range`"))?;
            let plan = plan_for(spec, opts, transversal.source())?;
            let integrator = spec.integrator_tolerance.unwrap_or(INTEGRATOR_TOLERANCE);
            let cs = straighten_local(&sys, transversal, (t0, t1), &plan, integrator)?;
            let joint = plan_for(spec, opts, cs.family().source())?;
            check_complete_slicing(&cs, sys.field().as_ref(), &joint, None, tol)?
        }
        "hj-residual" => {
            let s = model.slicing(need(&spec.slicing, "slicing", op)?)?;
            check_hj_residual(symplectic()?, s, &plan_for(spec, opts, s.source())?, tol)?
        }
        "classify" => {
            let a = map()?;
            classify_submanifold(
                symplectic()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
            .1
        }
        "lagrangian-slicing" => {
            let a = map()?;
            check_lagrangian_slicing(
                symplectic()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "classical-hj" => {
            let q = model.space(need(&spec.base, "base", op)?)?;
            let w = Expression::parse(need(&spec.potential, "potential", op)?, q.coords())?;
            classical_hj_check(symplectic()?, q, &w, &plan_for(spec, opts, q)?, tol)?
        }
        "fibred" => {
            let a = map()?;
            let plan = plan_for(spec, opts, a.source())?;
            check_fibred_slicing(fibration()?, a.as_ref(), field()?.as_ref(), &plan, tol)?
        }
        "fibre-isotropy" => {
            let fib = fibration()?;
            check_fibre_isotropy(fib, symplectic()?, &plan_for(spec, opts, fib.total())?, tol)?
        }
        "theorem6" => {
            let a = map()?;
            theorem6_check(
                fibration()?,
                symplectic()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "vertical-block" => {
            let a = map()?;
            check_vertical_block(
                fibration()?,
                symplectic()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
            )?
        }
        "involution" => {
            let s = model.structure(need(&spec.system, "system", op)?)?;
            let b = s.bracket();
            let fs = spec
                .functions
                .as_ref()
                .ok_or_else(|| Error::precondition(op, "missing argument `functions`"))?;
            let fs = expressions(fs, b.bracket_space())?;
            involution_check(b, &fs, &plan_for(spec, opts, b.bracket_space())?, tol)?
        }
        "structure" => match model.structure(need(&spec.system, "system", op)?)? {
            Structure::Symplectic(s) => {
                let mut r = s.check_structure(&plan_for(spec, opts, s.space())?)?;
                r.tolerance = tol;
                r.recompute();
                r
            }
            Structure::Poisson(p) => p.check_skew(&plan_for(spec, opts, p.space())?, tol)?,
        },
        "jacobi" => {
            let p = poisson()?;
            let fs = spec
                .functions
                .as_ref()
                .map(|fs| expressions(fs, p.space()))
                .transpose()?;
            jacobi_check(p, &plan_for(spec, opts, p.space())?, fs.as_deref(), tol)?
        }
        "poisson-lagrangian" => {
            let a = map()?;
            poisson_lagrangian_check(
                poisson()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "theorem5" => {
            let a = map()?;
            theorem5_check(
                poisson()?,
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "second-order" => {
            let z = field()?;
            let tb = tangent_bundle(z)?;
            second_order_check(&tb, z.as_ref(), &plan_for(spec, opts, tb.space())?, tol)?
        }
        "reconstruct-sode" => {
            let s = model.sode(need(&spec.sode, "sode", op)?)?;
            let plan = plan_for(spec, opts, s.bundle.space())?;
            check_reconstruction(&s.bundle, &s.constants, &plan, tol)?.1
        }
        "lemma8" => {
            let z = field()?;
            let a = map()?;
            let tb = tangent_bundle(z)?;
            lemma8_check(
                &tb,
                z.as_ref(),
                a.as_ref(),
                &plan_for(spec, opts, a.source())?,
                tol,
            )?
        }
        "lemma8-converse" => {
            let z = field()?;
            let cs = complete()?;
            let tb = tangent_bundle(z)?;
            let plan = plan_for(spec, opts, cs.family().source())?;
            lemma8_converse_check(&tb, z.as_ref(), cs, &plan, tol)?
        }
        other => {
            return Err(Error::Unknown {
                kind: "operation".into(),
                name: other.to_string(),
            })
        }
    };
    report.citation = spec.citation.clone();
    Ok(report)
}

/// Runs `spec` and compares the result with its declared expectations.
pub fn run_check(model: &Model, spec: &CheckSpec, opts: &RunOptions) -> CheckOutcome {
    let result = execute(model, spec, opts);
    let mut mismatches = Vec::new();
    let (outcome, report, error) = match result {
        Ok(r) => (Outcome::from(r.verdict), Some(r), None),
        Err(e) => (Outcome::Error, None, Some(e.to_string())),
    };
    if let Some(exp) = spec.expect {
        let want = match exp {
            Expectation::Pass => Outcome::Pass,
            Expectation::Fail => Outcome::Fail,
            Expectation::Error => Outcome::Error,
        };
        if want != outcome {
            mismatches.push(format!("expected {exp}, got {outcome}"));
        }
    }
    if let Some(r) = &report {
        if let Some(want) = &spec.classification {
            if r.classification.as_deref() != Some(want.as_str()) {
                mismatches.push(format!(
                    "expected classification `{want}`, got `{}`",
                    r.classification.as_deref().unwrap_or("none")
                ));
            }
        }
        for c in r.cross_checks.iter().filter(|c| !c.agrees) {
            mismatches.push(format!(
                "cross-check `{}` disagrees ({})",
                c.name, c.verdict
            ));
        }
        if let Some(min) = spec.min_residual {
            if !(r.max >= min) {
                mismatches.push(format!("max residual {:.3e} below required {min:e}", r.max));
            }
        }
        for (key, [lo, hi]) in &spec.metrics {
            match r.metrics.get(key) {
                Some(v) if *lo <= *v && *v <= *hi => {}
                Some(v) => {
                    mismatches.push(format!("metric `{key}` = {v:.6e} outside [{lo:e}, {hi:e}]"))
                }
                None => mismatches.push(format!("metric `{key}` missing")),
            }
        }
    } else if (spec.classification.is_some()
        || spec.min_residual.is_some()
        || !spec.metrics.is_empty())
        && spec.expect != Some(Expectation::Error)
    {
        mismatches.push("no report to compare against".into());
    }
    CheckOutcome {
        label: spec.label.clone(),
        op: spec.op.clone(),
        outcome,
        expected: spec.expect,
        matched: mismatches.is_empty(),
        mismatches,
        citation: spec.citation.clone(),
        error,
        report,
    }
}

/// Runs every `[[check]]` of the model in declaration order.
pub fn run_all(model: &Model, opts: &RunOptions) -> Vec<CheckOutcome> {
    model
        .checks()
        .iter()
        .map(|c| run_check(model, c, opts))
        .collect()
}
