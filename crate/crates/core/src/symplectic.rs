//! Hamiltonian systems on a symplectic chart `(P, Ω, H)`.
//!
//! Conventions: `ω = ½ ω_kℓ dz^k ∧ dz^ℓ` with matrix `Ω = (ω_kℓ)`, so
//! `ω(u, v) = uᵀ Ω v`, the map `ω̂: v ↦ i_v ω` has matrix `Ωᵀ`, and the
//! Hamiltonian field is `Z^k = ∂_ℓ H ω^{ℓk}`, i.e. `Z = Ω⁻ᵀ ∇H`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{check_tangency, tangency_at, DynamicalSystem, SamplePlan};
use crate::error::{Error, Result};
use crate::expr::{Dual, Expression, Scalar};
use crate::geometry::{best_jacobian, BilinearFormField, CoordinateSpace, Field, FormKind, Map};
use crate::linalg;
use crate::report::{evaluate_samples, CheckReport, Sample, Verdict};
use crate::slicing::{check_fibred_slicing, induced_slicing_field, FibredStructure, Slicing};
use crate::tolerances::{CLOSEDNESS, SKEW};

#[derive(Debug, Clone)]
pub struct SymplecticSystem {
    name: String,
    omega: Arc<BilinearFormField>,
    h: Expression,
}

impl SymplecticSystem {
    pub fn new(name: &str, omega: Arc<BilinearFormField>, h: Expression) -> Result<Self> {
        let space = omega.space();
        if omega.kind() != FormKind::Symplectic {
            return Err(Error::definition(format!(
                "system `{name}`: form `{}` is not of symplectic kind",
                omega.name()
            )));
        }
        if !space.dim().is_multiple_of(2) {
            return Err(Error::definition(format!(
                "system `{name}`: a symplectic space needs even dimension, `{}` has {}",
                space.name(),
                space.dim()
            )));
        }
        let h = h.rebind(space.coords()).map_err(|e| {
            Error::definition(format!(
                "system `{name}`: Hamiltonian is not a function on `{}`: {e}",
                space.name()
            ))
        })?;
        Ok(SymplecticSystem {
            name: name.to_string(),
            omega,
            h,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &Arc<CoordinateSpace> {
        self.omega.space()
    }

    pub fn omega(&self) -> &Arc<BilinearFormField> {
        &self.omega
    }

    pub fn hamiltonian(&self) -> &Expression {
        &self.h
    }

    /// Skewness, closedness and invertibility of `Ω` at the plan's points.
    pub fn check_structure(&self, plan: &SamplePlan) -> Result<CheckReport> {
        let points = plan.points(self.space())?;
        let samples = evaluate_samples(&points, |z| {
            let m = self.omega.eval(z)?;
            linalg::inverse(&m, "symplectic matrix")?;
            let skew = self.omega.skew_defect(z)?;
            let closed = self.omega.closedness_defect(z)?;
            // normalise so a single tolerance of 1 decides both
            Ok(Sample::with_value(
                (skew / SKEW).max(closed / CLOSEDNESS),
                vec![skew, closed],
            ))
        });
        Ok(CheckReport::new(
            "symplectic-structure",
            &self.name,
            1.0,
            samples,
        ))
    }

    pub fn hamiltonian_field(&self) -> HamiltonianField {
        HamiltonianField {
            name: format!("Z_{}", self.name),
            omega: self.omega.clone(),
            h: self.h.clone(),
        }
    }

    pub fn dynamical_system(&self) -> DynamicalSystem {
        DynamicalSystem::new(&self.name, Arc::new(self.hamiltonian_field()))
    }

    /// Inverse matrix `(ω^{kℓ})`.
    pub fn inverse_at(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        linalg::inverse(&self.omega.eval(z)?, "symplectic matrix")
    }
}

/// `Z = Ω⁻ᵀ ∇H`, evaluable on dual numbers for flow Jacobians.
#[derive(Debug, Clone)]
pub struct HamiltonianField {
    name: String,
    omega: Arc<BilinearFormField>,
    h: Expression,
}

impl HamiltonianField {
    fn eval_scalar<T: Scalar>(&self, z: &[T]) -> Result<Vec<T>> {
        let re: Vec<f64> = z.iter().map(|v| v.re()).collect();
        self.omega.space().check(&re)?;
        let grad = self.h.gradient_generic(z)?;
        let m = self.omega.eval_generic(z)?;
        let n = z.len();
        // solve Ωᵀ Z = ∇H
        let mt: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| m[j][i]).collect()).collect();
        linalg::solve_generic(mt, grad, "symplectic matrix")
    }
}

impl Field for HamiltonianField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        self.omega.space()
    }
    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.eval_scalar(z)
    }
    fn supports_dual(&self) -> bool {
        true
    }
    fn eval_dual(&self, z: &[Dual]) -> Result<Vec<Dual>> {
        self.eval_scalar(z)
    }
}

fn require_phase_space(alpha: &dyn Map, sys: &SymplecticSystem, op: &str) -> Result<()> {
    if alpha.target().coords() != sys.space().coords() {
        return Err(Error::precondition(
            op,
            format!(
                "`{}` maps into `{}`, not the phase space `{}`",
                alpha.name(),
                alpha.target().name(),
                sys.space().name()
            ),
        ));
    }
    Ok(())
}

/// Components `(Jᵀ Ωᵀ J X − Jᵀ ∇H)_j` of `i_X α*ω − d α*H` at `x`, for
/// the field value `xv = X(x)`.
pub fn hj_residual_at(
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    x: &[f64],
    xv: &[f64],
) -> Result<Vec<f64>> {
    require_phase_space(alpha, sys, "hj_residual")?;
    let img = alpha.eval(x)?;
    let j = best_jacobian(alpha, x)?;
    if xv.len() != j.ncols() {
        return Err(Error::dimension("slicing field value", j.ncols(), xv.len()));
    }
    let w = sys.omega.eval(&img)?;
    let grad = DVector::from_vec(sys.h.gradient(&img)?);
    let jx = &j * DVector::from_column_slice(xv);
    let r = j.transpose() * (w.transpose() * jx - grad);
    Ok(linalg::to_vec(&r))
}

pub fn hj_residual(
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    field: &dyn Field,
    x: &[f64],
) -> Result<Vec<f64>> {
    let xv = field.eval(x)?;
    hj_residual_at(sys, alpha, x, &xv)
}

/// `‖hj_residual‖` over the plan, using the slicing's field or, when it has
/// none, the least-squares field of `Z_H`.
pub fn check_hj_residual(
    sys: &SymplecticSystem,
    s: &Slicing,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    let alpha = s.alpha().as_ref();
    require_phase_space(alpha, sys, "check_hj_residual")?;
    let z = sys.hamiltonian_field();
    let points = plan.points(s.source())?;
    let samples = evaluate_samples(&points, |x| {
        let xv = match s.field() {
            Some(f) => f.eval(x)?,
            None => tangency_at(&z, alpha, x)?.0,
        };
        let r = hj_residual_at(sys, alpha, x, &xv)?;
        Ok(Sample::with_value(linalg::norm(&r), r))
    });
    let mut report = CheckReport::new("hj-residual", &sys.name, tolerance, samples);
    report.note(format!("slicing `{}`", s.name()));
    Ok(report)
}

/// `max |QᵀΩQ|` over an orthonormal basis `Q` of the tangent image, and
/// the largest sine between the `Ω`-orthogonal `ker(JᵀΩ)` and the tangent
/// image (zero iff coisotropic).
fn isotropy_defects(w: &DMatrix<f64>, j: &DMatrix<f64>) -> Result<(f64, f64)> {
    let r = linalg::rank(j);
    if r < j.ncols() {
        return Err(Error::RankDeficient {
            context: "embedding Jacobian".into(),
            rank: r,
            required: j.ncols(),
        });
    }
    let q = linalg::column_space(j);
    let iso = linalg::max_abs(&(q.transpose() * w * &q));
    let orth = linalg::null_space(&(j.transpose() * w));
    let coiso = if orth.ncols() == 0 {
        0.0
    } else {
        let outside = &orth - &q * (q.transpose() * &orth);
        linalg::singular_values(&outside)
            .first()
            .copied()
            .unwrap_or(0.0)
    };
    Ok((iso, coiso))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Lagrangian,
    Isotropic,
    Coisotropic,
    None,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Lagrangian => "lagrangian",
            Classification::Isotropic => "isotropic",
            Classification::Coisotropic => "coisotropic",
            Classification::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Classification::Lagrangian,
            Classification::Isotropic,
            Classification::Coisotropic,
            Classification::None,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }
}

/// Isotropic / coisotropic / Lagrangian image of an embedding. The report
/// passes when some class applies; its residual is the defect of that class.
pub fn classify_submanifold(
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<(Classification, CheckReport)> {
    require_phase_space(alpha, sys, "classify_submanifold")?;
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let img = alpha.eval(x)?;
        let j = best_jacobian(alpha, x)?;
        let w = sys.omega.eval(&img)?;
        let (iso, coiso) = isotropy_defects(&w, &j)?;
        Ok(Sample::with_value(iso.min(coiso), vec![iso, coiso]))
    });
    let mut report = CheckReport::new("classify", &sys.name, tolerance, samples);
    let column_max = |k: usize| {
        report
            .samples
            .iter()
            .map(|s| s.value.as_ref().map_or(f64::INFINITY, |v| v[k]))
            .fold(0.0, f64::max)
    };
    let (iso, coiso) = (column_max(0), column_max(1));
    let m = alpha.source().dim();
    let n2 = sys.space().dim();
    let class = if iso <= tolerance && 2 * m == n2 {
        Classification::Lagrangian
    } else if iso <= tolerance {
        Classification::Isotropic
    } else if coiso <= tolerance {
        Classification::Coisotropic
    } else {
        Classification::None
    };
    for s in &mut report.samples {
        if let Some(v) = &s.value {
            s.residual = Some(match class {
                Classification::Lagrangian | Classification::Isotropic => v[0],
                Classification::Coisotropic => v[1],
                Classification::None => v[0].min(v[1]),
            });
        }
    }
    report.recompute();
    if class == Classification::None {
        report.verdict = Verdict::Fail;
    }
    report.metric("isotropy_defect", iso);
    report.metric("coisotropy_defect", coiso);
    report.classification = Some(class.as_str().to_string());
    report.note(format!("embedding `{}`", alpha.name()));
    Ok((class, report))
}

/// `‖d(α*H)‖` on a Lagrangian image, cross-checked against tangency of `Z_H`.
pub fn check_lagrangian_slicing(
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    let (class, _) = classify_submanifold(sys, alpha, plan, tolerance)?;
    if class != Classification::Lagrangian {
        return Err(Error::precondition(
            "check_lagrangian_slicing",
            format!(
                "image of `{}` is {}, not lagrangian",
                alpha.name(),
                class.as_str()
            ),
        ));
    }
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let (_, d) = crate::geometry::pullback_function(alpha, &sys.h, x)?;
        Ok(Sample::new(linalg::norm(&d)))
    });
    let mut report = CheckReport::new("lagrangian-slicing", &sys.name, tolerance, samples);
    let z = sys.hamiltonian_field();
    let tangency = check_tangency(&z, alpha, plan, tolerance)?;
    report.cross_check(&tangency, true);
    report.note(format!("embedding `{}`", alpha.name()));
    Ok(report)
}

/// Largest `|ω(w, w')|` over an orthonormal basis of `ker J_π`.
pub fn check_fibre_isotropy(
    fib: &FibredStructure,
    sys: &SymplecticSystem,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    if fib.total().coords() != sys.space().coords() {
        return Err(Error::precondition(
            "check_fibre_isotropy",
            format!("fibration `{}` is not over the phase space", fib.name()),
        ));
    }
    let points = plan.points(sys.space())?;
    let samples = evaluate_samples(&points, |z| {
        let jpi = fib.submersion_jacobian(z)?;
        let k = linalg::null_space(&jpi);
        let w = sys.omega.eval(z)?;
        Ok(Sample::new(linalg::max_abs(&(k.transpose() * w * k))))
    });
    let mut report = CheckReport::new("fibre-isotropy", &sys.name, tolerance, samples);
    report.metric(
        "fibre_dimension",
        (sys.space().dim() - fib.base().dim()) as f64,
    );
    Ok(report)
}

/// For isotropic fibres, a section is a slicing section iff its HJ residual
/// vanishes. Reports `‖hj_residual‖` and cross-checks the fibred residual.
pub fn theorem6_check(
    fib: &FibredStructure,
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    let fibre_plan = SamplePlan {
        bounds: None,
        ..plan.clone()
    };
    let iso = check_fibre_isotropy(fib, sys, &fibre_plan, tolerance)?;
    if !iso.passed() {
        return Err(Error::precondition(
            "theorem6_check",
            format!(
                "fibres of `{}` are not isotropic (max |ω| = {:e})",
                fib.name(),
                iso.max
            ),
        ));
    }
    let z = sys.hamiltonian_field();
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let xv = induced_slicing_field(fib, alpha, &z, x)?;
        let r = hj_residual_at(sys, alpha, x, &xv)?;
        Ok(Sample::with_value(linalg::norm(&r), r))
    });
    let mut report = CheckReport::new("theorem6 (hj residual)", &sys.name, tolerance, samples);
    let fibred = check_fibred_slicing(fib, alpha, &z, plan, tolerance)?;
    report.cross_check(&fibred, true);
    report.note(format!("section `{}` of `{}`", alpha.name(), fib.name()));
    Ok(report)
}

/// The block `−N + AᵀΩ_fᵀ` of `ᵗ(Tα) ∘ ω̂` on vertical vectors, in adapted
/// coordinates, and whether it is injective.
pub fn vertical_block(
    fib: &FibredStructure,
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    x: &[f64],
) -> Result<(DMatrix<f64>, bool)> {
    let m = fib.adapted().ok_or_else(|| {
        Error::precondition(
            "vertical_block",
            format!("fibration `{}` declares no adapted split", fib.name()),
        )
    })?;
    let img = fib.check_section(alpha, x)?;
    let n = sys.space().dim();
    let k = n - m;
    let w = sys.omega.eval(&img)?;
    let nblock = w.view((0, m), (m, k)).into_owned();
    let wf = w.view((m, m), (k, k)).into_owned();
    let a = best_jacobian(alpha, x)?.rows(m, k).into_owned();
    let block = -nblock + a.transpose() * wf.transpose();
    let injective = linalg::rank(&block) == k;
    Ok((block, injective))
}

/// Rank deficiency of the vertical block at each sample; zero everywhere
/// iff the block is injective on the plan.
pub fn check_vertical_block(
    fib: &FibredStructure,
    sys: &SymplecticSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
) -> Result<CheckReport> {
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let (block, _) = vertical_block(fib, sys, alpha, x)?;
        let deficiency = block.ncols() - linalg::rank(&block);
        Ok(Sample::with_value(
            deficiency as f64,
            block.iter().copied().collect(),
        ))
    });
    let mut report = CheckReport::new("vertical-block", &sys.name, 0.0, samples);
    report.classification = Some(
        if report.passed() {
            "injective"
        } else {
            "not injective"
        }
        .into(),
    );
    report.note(format!("section `{}` of `{}`", alpha.name(), fib.name()));
    Ok(report)
}

/// Structure providing `{f, g} = ∇fᵀ B ∇g`.
pub trait Bracket: Sync {
    fn bracket_space(&self) -> &Arc<CoordinateSpace>;
    fn bracket_name(&self) -> &str;
    /// The matrix `B(z)`.
    fn bracket_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>>;
}

impl Bracket for SymplecticSystem {
    fn bracket_space(&self) -> &Arc<CoordinateSpace> {
        self.space()
    }
    fn bracket_name(&self) -> &str {
        &self.name
    }
    fn bracket_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.inverse_at(z)
    }
}

pub fn bracket_at(b: &dyn Bracket, f: &Expression, g: &Expression, z: &[f64]) -> Result<f64> {
    let m = b.bracket_matrix(z)?;
    let df = DVector::from_vec(f.gradient(z)?);
    let dg = DVector::from_vec(g.gradient(z)?);
    Ok(df.dot(&(m * dg)))
}

/// Pairwise brackets of the functions vanish at the plan's points.
pub fn involution_check(
    b: &dyn Bracket,
    fs: &[Expression],
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    if fs.len() < 2 {
        return Err(Error::precondition(
            "involution_check",
            "need at least two functions",
        ));
    }
    let space = b.bracket_space();
    let fs = fs
        .iter()
        .map(|f| f.rebind(space.coords()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let points = plan.points(space)?;
    let samples = evaluate_samples(&points, |z| {
        let m = b.bracket_matrix(z)?;
        let grads = fs
            .iter()
            .map(|f| f.gradient(z).map(DVector::from_vec))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut worst: f64 = 0.0;
        for i in 0..grads.len() {
            let mg = &m * &grads[i];
            for g in &grads[i + 1..] {
                worst = worst.max(g.dot(&mg).abs());
            }
        }
        Ok(Sample::new(worst))
    });
    let mut report = CheckReport::new("involution", b.bracket_name(), tolerance, samples);
    if report.passed() {
        let n = space.dim();
        if 2 * fs.len() == n {
            report.note("in involution: regular level sets are lagrangian");
        } else {
            report.note("in involution: regular level sets are coisotropic");
        }
    }
    Ok(report)
}

/// `H ∘ dW` for a generating function `W` on the base of a `(q, p)` split.
pub fn classical_hj_check(
    sys: &SymplecticSystem,
    q_space: &Arc<CoordinateSpace>,
    w: &Expression,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    let n = sys.space().dim();
    let m = q_space.dim();
    if 2 * m != n || sys.space().coords()[..m] != *q_space.coords() {
        return Err(Error::precondition(
            "classical_hj_check",
            format!(
                "`{}` must consist of the first half of the coordinates of `{}`",
                q_space.name(),
                sys.space().name()
            ),
        ));
    }
    for i in w.used_variables() {
        let name = &w.variables()[i];
        if !q_space.coords().contains(name) {
            return Err(Error::precondition(
                "classical_hj_check",
                format!("W references `{name}`, which is not a base coordinate"),
            ));
        }
    }
    let w = w.rebind(q_space.coords())?;
    let h = &sys.h;
    // H(q, ∇W(q)) on any scalar type
    let composed = |q: &[Dual]| -> Result<Dual> {
        let dw = w.gradient_generic(q)?;
        let z: Vec<Dual> = q.iter().copied().chain(dw).collect();
        Ok(h.eval_generic(&z)?)
    };
    let points = plan.points(q_space)?;
    let samples = evaluate_samples(&points, |q| {
        let mut seeded: Vec<Dual> = q.iter().map(|&v| Dual::new(v, 0.0)).collect();
        let mut grad = vec![0.0; m];
        let mut value = 0.0;
        for i in 0..m {
            seeded[i].eps = 1.0;
            let d = composed(&seeded)?;
            value = d.re;
            grad[i] = d.eps;
            seeded[i].eps = 0.0;
        }
        let img: Vec<f64> = q.iter().copied().chain(w.gradient(q)?).collect();
        sys.space().check(&img)?;
        Ok(Sample::with_value(linalg::norm(&grad), vec![value]))
    });
    let mut report = CheckReport::new("classical-hj", &sys.name, tolerance, samples);
    let values: Vec<f64> = report
        .samples
        .iter()
        .filter_map(|s| s.value.as_ref().map(|v| v[0]))
        .collect();
    if let (Some(lo), Some(hi)) = (
        values.iter().copied().reduce(f64::min),
        values.iter().copied().reduce(f64::max),
    ) {
        report.metric("h_of_dw_min", lo);
        report.metric("h_of_dw_max", hi);
        report.metric("h_of_dw_spread", hi - lo);
    }
    report.note(format!("W = {w}"));
    Ok(report)
}
