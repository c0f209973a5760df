//! Second-order dynamics on a tangent bundle chart `(q¹..q^m, v¹..v^m)`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::dynamics::{lie_derivative, SamplePlan};
use crate::error::{Error, Result};
use crate::expr::{Dual, Expression, Scalar};
use crate::geometry::{CoordinateSpace, Field, Map};
use crate::linalg;
use crate::report::{evaluate_samples, CheckReport, Sample};
use crate::slicing::{fibred_residual, induced_slicing_field, CompleteSlicing, FibredStructure};
use crate::tolerances::CONDITION_LIMIT;

/// A `2m`-dimensional chart whose first `m` coordinates are positions and
/// last `m` are velocities, with `τ(q, v) = q`.
#[derive(Debug, Clone)]
pub struct TangentBundleSpace {
    space: Arc<CoordinateSpace>,
    tau: Arc<FibredStructure>,
}

impl TangentBundleSpace {
    pub fn new(space: Arc<CoordinateSpace>) -> Result<Self> {
        let n = space.dim();
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::definition(format!(
                "tangent bundle `{}` needs a positive even dimension, got {n}",
                space.name()
            )));
        }
        let base_name = format!("base_{}", space.name());
        let tau = FibredStructure::adapted_projection(
            &format!("tau_{}", space.name()),
            space.clone(),
            &base_name,
            n / 2,
        )?;
        Ok(TangentBundleSpace {
            space,
            tau: Arc::new(tau),
        })
    }

    pub fn space(&self) -> &Arc<CoordinateSpace> {
        &self.space
    }

    pub fn base(&self) -> &Arc<CoordinateSpace> {
        self.tau.base()
    }

    pub fn tau(&self) -> &Arc<FibredStructure> {
        &self.tau
    }

    /// `m`, the dimension of the base.
    pub fn m(&self) -> usize {
        self.space.dim() / 2
    }

    fn require_field(&self, z: &dyn Field, op: &str) -> Result<()> {
        if z.space().coords() != self.space.coords() {
            return Err(Error::precondition(
                op,
                format!("`{}` does not live on `{}`", z.name(), self.space.name()),
            ));
        }
        Ok(())
    }
}

/// `‖(Z¹..Z^m)(q, v) − v‖`.
pub fn second_order_defect(tb: &TangentBundleSpace, z: &dyn Field, x: &[f64]) -> Result<f64> {
    let m = tb.m();
    let zv = z.eval(x)?;
    Ok(zv[..m]
        .iter()
        .zip(&x[m..])
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn second_order_check(
    tb: &TangentBundleSpace,
    z: &dyn Field,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    tb.require_field(z, "second_order_check")?;
    let points = plan.points(tb.space())?;
    let samples = evaluate_samples(&points, |x| Ok(Sample::new(second_order_defect(tb, z, x)?)));
    Ok(CheckReport::new(
        "second-order",
        z.name(),
        tolerance,
        samples,
    ))
}

/// `(∂f/∂v¹, …, ∂f/∂v^m)` at `x`.
pub fn fibre_derivative(tb: &TangentBundleSpace, f: &Expression, x: &[f64]) -> Result<Vec<f64>> {
    let f = f.rebind(tb.space().coords())?;
    tb.space().check(x)?;
    Ok(f.gradient(x)?[tb.m()..].to_vec())
}

/// The `m × m` matrix `(∂f^α/∂v^i)`.
pub fn fibre_matrix(tb: &TangentBundleSpace, fs: &[Expression], x: &[f64]) -> Result<DMatrix<f64>> {
    let m = tb.m();
    if fs.len() != m {
        return Err(Error::dimension("constants of the motion", m, fs.len()));
    }
    let mut a = DMatrix::zeros(m, m);
    for (k, f) in fs.iter().enumerate() {
        let d = fibre_derivative(tb, f, x)?;
        for i in 0..m {
            a[(k, i)] = d[i];
        }
    }
    Ok(a)
}

/// The unique second-order field with `ℒ_Z f^α = 0`, built pointwise from
/// `Zⁱ = −((∂f/∂v)⁻¹)ⁱ_β (∂f^β/∂q^j) v^j`.
#[derive(Debug, Clone)]
pub struct ReconstructedSode {
    name: String,
    space: Arc<CoordinateSpace>,
    fs: Vec<Expression>,
}

impl ReconstructedSode {
    pub fn new(tb: &TangentBundleSpace, fs: &[Expression]) -> Result<Self> {
        if fs.len() != tb.m() {
            return Err(Error::dimension(
                "constants of the motion",
                tb.m(),
                fs.len(),
            ));
        }
        let fs = fs
            .iter()
            .map(|f| f.rebind(tb.space().coords()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(ReconstructedSode {
            name: format!("sode_{}", tb.space().name()),
            space: tb.space().clone(),
            fs,
        })
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn constants(&self) -> &[Expression] {
        &self.fs
    }

    fn eval_scalar<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        let re: Vec<f64> = x.iter().map(|v| v.re()).collect();
        self.space.check(&re)?;
        let m = self.space.dim() / 2;
        let grads = self
            .fs
            .iter()
            .map(|f| f.gradient_generic(x))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let a: Vec<Vec<T>> = grads.iter().map(|g| g[m..].to_vec()).collect();
        let a_re = DMatrix::from_fn(m, m, |i, j| a[i][j].re());
        let cond = linalg::condition_number(&a_re);
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::Singular {
                context: "fibre derivative matrix (∂f/∂v)".into(),
                detail: format!("condition number {cond:.3e} at {re:?}"),
            });
        }
        let rhs: Vec<T> = grads
            .iter()
            .map(|g| (0..m).fold(T::constant(0.0), |acc, j| acc - g[j] * x[m + j]))
            .collect();
        let accel = linalg::solve_generic(a, rhs, "fibre derivative matrix (∂f/∂v)")?;
        Ok(x[m..].iter().copied().chain(accel).collect())
    }
}

impl Field for ReconstructedSode {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        &self.space
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_scalar(x)
    }
    fn supports_dual(&self) -> bool {
        true
    }
    fn eval_dual(&self, x: &[Dual]) -> Result<Vec<Dual>> {
        self.eval_scalar(x)
    }
}

/// `Z(x)` for the field determined by `fs`.
pub fn reconstruct_sode(tb: &TangentBundleSpace, fs: &[Expression], x: &[f64]) -> Result<Vec<f64>> {
    ReconstructedSode::new(tb, fs)?.eval(x)
}

/// Builds the field from `fs` and reports, per sample, the larger of its
/// second-order defect and `max_α |ℒ_Z f^α|`.
pub fn check_reconstruction(
    tb: &TangentBundleSpace,
    fs: &[Expression],
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<(ReconstructedSode, CheckReport)> {
    let z = ReconstructedSode::new(tb, fs)?;
    let points = plan.points(tb.space())?;
    let samples = evaluate_samples(&points, |x| {
        let order = second_order_defect(tb, &z, x)?;
        let mut worst = order;
        for f in &z.fs {
            worst = worst.max(lie_derivative(&z, f, x)?.abs());
        }
        Ok(Sample::with_value(worst, vec![order]))
    });
    let mut report = CheckReport::new("reconstruct-sode", &z.name, tolerance, samples);
    let order = report
        .samples
        .iter()
        .filter_map(|s| s.value.as_ref().map(|v| v[0]))
        .fold(0.0, f64::max);
    report.metric("second_order_defect", order);
    let a = report
        .samples
        .iter()
        .filter(|s| s.error.is_none())
        .filter_map(|s| {
            fibre_matrix(tb, &z.fs, &s.point)
                .ok()
                .map(|m| linalg::condition_number(&m))
        })
        .fold(0.0, f64::max);
    report.metric("max_condition_number", a);
    Ok((z, report))
}

fn require_second_order_on_image(
    tb: &TangentBundleSpace,
    z: &dyn Field,
    images: &[Vec<f64>],
    tolerance: f64,
) -> Result<()> {
    for p in images {
        let d = second_order_defect(tb, z, p)?;
        if !(d <= tolerance) {
            return Err(Error::precondition(
                "lemma8_check",
                format!(
                    "`{}` is not second order at {p:?} (defect {d:.3e})",
                    z.name()
                ),
            ));
        }
    }
    Ok(())
}

/// For a second-order `Z` and a section `α(q) = (q, a(q))`, the induced field
/// `X = Tτ ∘ Z ∘ α` equals `a`. The residual is `‖X − a‖`; the metric
/// `slicing_residual` records whether `α` is also a slicing.
pub fn lemma8_check(
    tb: &TangentBundleSpace,
    z: &dyn Field,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    tb.require_field(z, "lemma8_check")?;
    let m = tb.m();
    let tau = tb.tau().as_ref();
    let points = plan.points(alpha.source())?;
    let images = points
        .iter()
        .map(|x| tau.check_section(alpha, x))
        .collect::<Result<Vec<_>>>()?;
    require_second_order_on_image(tb, z, &images, tolerance)?;
    let samples = evaluate_samples(&points, |x| {
        let xv = induced_slicing_field(tau, alpha, z, x)?;
        let a = &alpha.eval(x)?[m..];
        let d: Vec<f64> = xv.iter().zip(a).map(|(u, w)| u - w).collect();
        let (r, _) = fibred_residual(tau, alpha, z, x)?;
        Ok(Sample::with_value(linalg::norm(&d), vec![linalg::norm(&r)]))
    });
    let mut report = CheckReport::new("lemma8", z.name(), tolerance, samples);
    let slicing = report
        .samples
        .iter()
        .filter_map(|s| s.value.as_ref().map(|v| v[0]))
        .fold(0.0, f64::max);
    report.metric("slicing_residual", slicing);
    report.note(format!("section `{}`", alpha.name()));
    Ok(report)
}

/// Converse direction: when every member satisfies `X_c = α_c`, `Z` is
/// second order on the image of the family. Uses the declared `X_c` when the
/// family carries them and the induced ones otherwise.
pub fn lemma8_converse_check(
    tb: &TangentBundleSpace,
    z: &dyn Field,
    cs: &CompleteSlicing,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    tb.require_field(z, "lemma8_converse_check")?;
    if cs.phase_space().coords() != tb.space().coords() {
        return Err(Error::precondition(
            "lemma8_converse_check",
            format!("`{}` does not map into `{}`", cs.name(), tb.space().name()),
        ));
    }
    let m = tb.m();
    let family = cs.family().as_ref();
    let points = plan.points(family.source())?;
    let mut hypothesis: f64 = 0.0;
    for xc in &points {
        let img = family.eval(xc)?;
        let xv = match cs.fields() {
            Some(f) => f.eval(xc)?,
            None => z.eval(&img)?[..m].to_vec(),
        };
        let gap = xv
            .iter()
            .zip(&img[m..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        hypothesis = hypothesis.max(gap);
    }
    if !(hypothesis <= tolerance) {
        return Err(Error::precondition(
            "lemma8_converse_check",
            format!("X_c differs from α_c by {hypothesis:.3e}"),
        ));
    }
    let samples = evaluate_samples(&points, |xc| {
        Ok(Sample::new(second_order_defect(tb, z, &family.eval(xc)?)?))
    });
    let mut report = CheckReport::new("lemma8-converse", z.name(), tolerance, samples);
    report.metric("hypothesis_gap", hypothesis);
    report.note(format!(
        "family `{}` with {} fields",
        cs.name(),
        if cs.fields().is_some() {
            "declared"
        } else {
            "induced"
        }
    ));
    Ok(report)
}
