//! Almost-Poisson structures `(P, Λ, H)`.
//!
//! The matrix `(Λ^{ij})` gives `{f, g} = Λ^{ij} ∂_i f ∂_j g` and the
//! Hamiltonian field `Z = Λ ∇H`, so `ℒ_Z f = {f, H}`. This is the sign that
//! turns the Heisenberg Hamiltonian `½ z (x² + y²)` with `{x, y} = −z` into
//! `Z = z² (−y ∂_x + x ∂_y)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{check_tangency, DynamicalSystem, SamplePlan};
use crate::error::{Error, Result};
use crate::expr::{Dual, Expression, Node, Scalar};
use crate::geometry::{best_jacobian, BilinearFormField, CoordinateSpace, Field, FormKind, Map};
use crate::linalg;
use crate::report::{evaluate_samples, CheckReport, Sample};
use crate::symplectic::{Bracket, SymplecticSystem};
use crate::tolerances::PRINCIPAL_ANGLE;

#[derive(Debug, Clone)]
pub struct PoissonSystem {
    name: String,
    lambda: Arc<BilinearFormField>,
    h: Expression,
}

impl PoissonSystem {
    pub fn new(name: &str, lambda: Arc<BilinearFormField>, h: Expression) -> Result<Self> {
        if lambda.kind() != FormKind::Poisson {
            return Err(Error::definition(format!(
                "system `{name}`: tensor `{}` is not of poisson kind",
                lambda.name()
            )));
        }
        let h = h.rebind(lambda.space().coords()).map_err(|e| {
            Error::definition(format!(
                "system `{name}`: Hamiltonian is not a function on `{}`: {e}",
                lambda.space().name()
            ))
        })?;
        Ok(PoissonSystem {
            name: name.to_string(),
            lambda,
            h,
        })
    }

    /// The Poisson tensor `Λ = Ω⁻ᵀ` of a constant symplectic form, with the
    /// same Hamiltonian, so both structures give the same `Z_H`.
    pub fn from_symplectic(sys: &SymplecticSystem) -> Result<Self> {
        let omega = sys.omega();
        if !omega.is_constant() {
            return Err(Error::precondition(
                "from_symplectic",
                "only constant symplectic matrices can be inverted symbolically",
            ));
        }
        let n = sys.space().dim();
        let origin = vec![0.0; n];
        let inv = linalg::inverse(&omega.entries_at_constant(&origin)?, "symplectic matrix")?;
        let lambda = BilinearFormField::constant(
            &format!("inv_{}", omega.name()),
            sys.space().clone(),
            &inv.transpose(),
            FormKind::Poisson,
        )?;
        PoissonSystem::new(sys.name(), Arc::new(lambda), sys.hamiltonian().clone())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &Arc<CoordinateSpace> {
        self.lambda.space()
    }

    pub fn lambda(&self) -> &Arc<BilinearFormField> {
        &self.lambda
    }

    pub fn hamiltonian(&self) -> &Expression {
        &self.h
    }

    pub fn hamiltonian_field(&self) -> PoissonHamiltonianField {
        hamiltonian_vf_poisson(self)
    }

    pub fn dynamical_system(&self) -> DynamicalSystem {
        DynamicalSystem::new(&self.name, Arc::new(self.hamiltonian_field()))
    }

    /// Maximum skew defect of `Λ` at the plan's points.
    pub fn check_skew(&self, plan: &SamplePlan, tolerance: f64) -> Result<CheckReport> {
        let points = plan.points(self.space())?;
        let samples = evaluate_samples(&points, |z| Ok(Sample::new(self.lambda.skew_defect(z)?)));
        Ok(CheckReport::new(
            "poisson-skew",
            &self.name,
            tolerance,
            samples,
        ))
    }
}

impl Bracket for PoissonSystem {
    fn bracket_space(&self) -> &Arc<CoordinateSpace> {
        self.space()
    }
    fn bracket_name(&self) -> &str {
        &self.name
    }
    fn bracket_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.lambda.eval(z)
    }
}

/// `{f, g}(x) = Λ^{ij}(x) ∂_i f ∂_j g`.
pub fn poisson_bracket(
    ps: &PoissonSystem,
    f: &Expression,
    g: &Expression,
    x: &[f64],
) -> Result<f64> {
    let f = f.rebind(ps.space().coords())?;
    let g = g.rebind(ps.space().coords())?;
    crate::symplectic::bracket_at(ps, &f, &g, x)
}

/// `{f, g}` over any scalar type; nested duals give its derivatives.
fn bracket_generic<T: Scalar>(
    lambda: &BilinearFormField,
    f: &Expression,
    g: &Expression,
    z: &[T],
) -> Result<T> {
    let m = lambda.eval_generic(z)?;
    let df = f.gradient_generic(z)?;
    let dg = g.gradient_generic(z)?;
    let mut acc = T::constant(0.0);
    for (i, row) in m.iter().enumerate() {
        for (j, l) in row.iter().enumerate() {
            acc = acc + *l * df[i] * dg[j];
        }
    }
    Ok(acc)
}

/// `Z = Λ ∇H`.
#[derive(Debug, Clone)]
pub struct PoissonHamiltonianField {
    name: String,
    lambda: Arc<BilinearFormField>,
    h: Expression,
}

impl PoissonHamiltonianField {
    fn eval_scalar<T: Scalar>(&self, z: &[T]) -> Result<Vec<T>> {
        let re: Vec<f64> = z.iter().map(|v| v.re()).collect();
        self.lambda.space().check(&re)?;
        let m = self.lambda.eval_generic(z)?;
        let dh = self.h.gradient_generic(z)?;
        Ok(m.iter()
            .map(|row| {
                row.iter()
                    .zip(&dh)
                    .fold(T::constant(0.0), |acc, (&l, &d)| acc + l * d)
            })
            .collect())
    }
}

impl Field for PoissonHamiltonianField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        self.lambda.space()
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

pub fn hamiltonian_vf_poisson(ps: &PoissonSystem) -> PoissonHamiltonianField {
    PoissonHamiltonianField {
        name: format!("Z_{}", ps.name),
        lambda: ps.lambda.clone(),
        h: ps.h.clone(),
    }
}

/// `|{f,{g,h}} + {g,{h,f}} + {h,{f,g}}|`, maximised over triples of the test
/// functions (default: the coordinate functions) and the plan's points.
pub fn jacobi_check(
    ps: &PoissonSystem,
    plan: &SamplePlan,
    tests: Option<&[Expression]>,
    tolerance: f64,
) -> Result<CheckReport> {
    let coords = ps.space().coords();
    let fs: Vec<Expression> = match tests {
        Some(t) => t
            .iter()
            .map(|f| f.rebind(coords))
            .collect::<std::result::Result<_, _>>()?,
        None => (0..coords.len())
            .map(|i| Expression::from_node(Node::Var(i), coords))
            .collect(),
    };
    let lambda = ps.lambda.as_ref();
    let points = plan.points(ps.space())?;
    let samples = evaluate_samples(&points, |z| {
        let m = lambda.eval(z)?;
        let grads: Vec<DVector<f64>> = fs
            .iter()
            .map(|f| f.gradient(z).map(DVector::from_vec))
            .collect::<std::result::Result<_, _>>()?;
        // gradient of {a, b} by one nested-dual pass per coordinate
        let grad_bracket = |a: &Expression, b: &Expression| -> Result<DVector<f64>> {
            let mut seeded: Vec<Dual> = z.iter().map(|&v| Dual::new(v, 0.0)).collect();
            let mut out = DVector::zeros(z.len());
            for k in 0..z.len() {
                seeded[k].eps = 1.0;
                out[k] = bracket_generic(lambda, a, b, &seeded)?.eps;
                seeded[k].eps = 0.0;
            }
            Ok(out)
        };
        let outer = |i: usize, d: &DVector<f64>| grads[i].dot(&(&m * d));
        let mut worst: f64 = 0.0;
        let n = fs.len();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let jk = grad_bracket(&fs[j], &fs[k])?;
                    let ki = grad_bracket(&fs[k], &fs[i])?;
                    let ij = grad_bracket(&fs[i], &fs[j])?;
                    let cyclic = outer(i, &jk) + outer(j, &ki) + outer(k, &ij);
                    worst = worst.max(cyclic.abs());
                }
            }
        }
        Ok(Sample::new(worst))
    });
    let mut report = CheckReport::new("jacobi", &ps.name, tolerance, samples);
    if fs.len() < 3 {
        report.note("fewer than three test functions: the cyclic sum vanishes identically");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharacteristicData {
    pub rank: usize,
    /// Columns span `ker Λ̂` (covectors).
    pub kernel: Vec<Vec<f64>>,
    /// Columns span `C = Im Λ̂`.
    pub image: Vec<Vec<f64>>,
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter()
        .map(|c| c.iter().copied().collect())
        .collect()
}

pub fn characteristic_data(ps: &PoissonSystem, x: &[f64]) -> Result<CharacteristicData> {
    let m = ps.lambda.eval(x)?;
    Ok(CharacteristicData {
        rank: linalg::rank(&m),
        kernel: columns(&linalg::null_space(&m)),
        image: columns(&linalg::column_space(&m)),
    })
}

fn full_rank_jacobian(alpha: &dyn Map, x: &[f64]) -> Result<DMatrix<f64>> {
    let j = best_jacobian(alpha, x)?;
    let r = linalg::rank(&j);
    if r < j.ncols() {
        return Err(Error::RankDeficient {
            context: format!("Jacobian of `{}`", alpha.name()),
            rank: r,
            required: j.ncols(),
        });
    }
    Ok(j)
}

fn require_phase_space(alpha: &dyn Map, ps: &PoissonSystem, op: &str) -> Result<()> {
    if alpha.target().coords() != ps.space().coords() {
        return Err(Error::precondition(
            op,
            format!(
                "`{}` maps into `{}`, not the phase space `{}`",
                alpha.name(),
                alpha.target().name(),
                ps.space().name()
            ),
        ));
    }
    Ok(())
}

/// Principal-angle distance between `Λ̂((TP₀)°)` and `TP₀ ∩ C` at `x`.
pub fn lagrangian_defect(ps: &PoissonSystem, alpha: &dyn Map, x: &[f64]) -> Result<f64> {
    let j = full_rank_jacobian(alpha, x)?;
    let z = alpha.eval(x)?;
    ps.space().check(&z)?;
    let m = ps.lambda.eval(&z)?;
    let annihilator = linalg::null_space(&j.transpose());
    let pushed = &m * annihilator;
    let meet = linalg::intersection(&j, &linalg::column_space(&m));
    Ok(linalg::subspace_distance(&pushed, &meet))
}

pub fn poisson_lagrangian_check(
    ps: &PoissonSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    require_phase_space(alpha, ps, "poisson_lagrangian_check")?;
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        Ok(Sample::new(lagrangian_defect(ps, alpha, x)?))
    });
    let mut report = CheckReport::new("poisson-lagrangian", &ps.name, tolerance, samples);
    let ranks: Vec<usize> = points
        .iter()
        .filter_map(|x| {
            let z = alpha.eval(x).ok()?;
            Some(linalg::rank(&ps.lambda.eval(&z).ok()?))
        })
        .collect();
    if let (Some(lo), Some(hi)) = (ranks.iter().min(), ranks.iter().max()) {
        report.metric("tensor_rank_min", *lo as f64);
        report.metric("tensor_rank_max", *hi as f64);
        if lo != hi {
            report.note("rank of Λ varies across the samples");
        }
    }
    report.classification = Some(
        if report.passed() {
            "lagrangian"
        } else {
            "none"
        }
        .into(),
    );
    report.note(format!("embedding `{}`", alpha.name()));
    Ok(report)
}

/// Component of `dH(α(x))` outside the annihilator of `Λ̂((TP₀)°)`; on a
/// Lagrangian image also the distance of `α*(dH)` from `Jᵀ(ker Λ̂)`.
pub fn theorem5_residuals(ps: &PoissonSystem, alpha: &dyn Map, x: &[f64]) -> Result<(f64, f64)> {
    let j = full_rank_jacobian(alpha, x)?;
    let z = alpha.eval(x)?;
    ps.space().check(&z)?;
    let m = ps.lambda.eval(&z)?;
    let dh = DVector::from_vec(ps.h.gradient(&z)?);
    let annihilator = linalg::null_space(&j.transpose());
    let s = linalg::column_space(&(&m * annihilator));
    let main = (s.transpose() * &dh).norm();
    let pulled = j.transpose() * &dh;
    let allowed = linalg::column_space(&(j.transpose() * linalg::null_space(&m)));
    let lagrangian_form = (&pulled - &allowed * (allowed.transpose() * &pulled)).norm();
    Ok((main, lagrangian_form))
}

pub fn theorem5_check(
    ps: &PoissonSystem,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    require_phase_space(alpha, ps, "theorem5_check")?;
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let (main, lag) = theorem5_residuals(ps, alpha, x)?;
        Ok(Sample::with_value(main, vec![lag]))
    });
    let mut report = CheckReport::new("theorem5", &ps.name, tolerance, samples);
    let lag = poisson_lagrangian_check(ps, alpha, plan, PRINCIPAL_ANGLE)?;
    if lag.passed() {
        let worst = report
            .samples
            .iter()
            .filter_map(|s| s.value.as_ref().map(|v| v[0]))
            .fold(0.0, f64::max);
        report.metric("lagrangian_form_residual", worst);
        report.note("image is lagrangian: α*(dH) checked against ᵗ(Tα)(ker Λ̂)");
    }
    let z = ps.hamiltonian_field();
    let tangency = check_tangency(&z, alpha, plan, tolerance)?;
    report.cross_check(&tangency, true);
    report.note(format!("embedding `{}`", alpha.name()));
    Ok(report)
}

impl BilinearFormField {
    /// Entries of a constant form (evaluated at any in-domain point).
    pub(crate) fn entries_at_constant(&self, fallback: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.space().dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.entries()[i][j].eval(fallback)?;
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::lie_derivative;
    use crate::geometry::SmoothMap;

    fn r3(constraint: Option<&str>) -> Arc<CoordinateSpace> {
        let s = CoordinateSpace::new("R3", &["x", "y", "z"]).unwrap();
        Arc::new(match constraint {
            Some(c) => s.with_constraint(c).unwrap(),
            None => s,
        })
    }

    fn tensor(space: Arc<CoordinateSpace>, rows: [[&str; 3]; 3]) -> Arc<BilinearFormField> {
        let rows: Vec<Vec<&str>> = rows.iter().map(|r| r.to_vec()).collect();
        Arc::new(BilinearFormField::new("L", space, &rows, FormKind::Poisson).unwrap())
    }

    fn heisenberg() -> PoissonSystem {
        let p = r3(Some("z^2 > 0"));
        let l = tensor(
            p.clone(),
            [["0", "-z", "0"], ["z", "0", "0"], ["0", "0", "0"]],
        );
        let h = Expression::parse("z*(x*x+y*y)/2", p.coords()).unwrap();
        PoissonSystem::new("heisenberg", l, h).unwrap()
    }

    fn expr(ps: &PoissonSystem, s: &str) -> Expression {
        Expression::parse(s, ps.space().coords()).unwrap()
    }

    #[test]
    fn heisenberg_bracket_and_field() {
        let ps = heisenberg();
        let p = [0.4, -1.3, 2.0];
        assert_eq!(
            poisson_bracket(&ps, &expr(&ps, "x"), &expr(&ps, "y"), &p).unwrap(),
            -2.0
        );
        let f = expr(&ps, "x^2 + y^2");
        assert_eq!(poisson_bracket(&ps, &f, &f, &p).unwrap(), 0.0);
        let z = ps.hamiltonian_field().eval(&p).unwrap();
        let (x, y, zz) = (p[0], p[1], p[2]);
        assert_eq!(z, vec![-zz * zz * y, zz * zz * x, 0.0]);
    }

    #[test]
    fn casimirs_are_conserved() {
        let ps = heisenberg();
        let p = [0.4, -1.3, 2.0];
        for h in ["x^3 - y*z", "exp(x)*z", "y"] {
            let sys = PoissonSystem::new("h", ps.lambda().clone(), expr(&ps, h)).unwrap();
            let z = sys.hamiltonian_field();
            for c in ["z", "sin(z) + z^3"] {
                assert!(lie_derivative(&z, &expr(&ps, c), &p).unwrap().abs() < 1e-14);
            }
            assert!(lie_derivative(&z, &expr(&ps, h), &p).unwrap().abs() < 1e-13);
        }
        let casimir = PoissonSystem::new("c", ps.lambda().clone(), expr(&ps, "z^2")).unwrap();
        assert_eq!(casimir.hamiltonian_field().eval(&p).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn jacobi_identity_checks() {
        let plan = SamplePlan::random(20, 0);
        assert!(jacobi_check(&heisenberg(), &plan, None, 1e-10)
            .unwrap()
            .passed());
        let p = r3(None);
        let constant = tensor(
            p.clone(),
            [["0", "1", "2"], ["-1", "0", "3"], ["-2", "-3", "0"]],
        );
        let h = Expression::parse("x", p.coords()).unwrap();
        let ps = PoissonSystem::new("c", constant, h.clone()).unwrap();
        assert!(jacobi_check(&ps, &plan, None, 1e-12).unwrap().passed());
        // Λ^{yz} = z, Λ^{zx} = x, Λ^{xy} = y: cyclic sum −(x + y + z)
        let bad = tensor(p, [["0", "y", "-x"], ["-y", "0", "z"], ["x", "-z", "0"]]);
        let ps = PoissonSystem::new("bad", bad, h).unwrap();
        let at = SamplePlan::random(1, 0).with_bounds(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        let r = jacobi_check(&ps, &at, None, 1e-10).unwrap();
        assert!(!r.passed());
        assert!((r.max - 6.0).abs() < 1e-12, "{}", r.max);
    }

    #[test]
    fn characteristic_distribution() {
        let d = characteristic_data(&heisenberg(), &[1.0, 2.0, 0.5]).unwrap();
        assert_eq!(d.rank, 2);
        assert_eq!(d.kernel.len(), 1);
        assert!((d.kernel[0][2].abs() - 1.0).abs() < 1e-15);
        let p = r3(None);
        let zero = tensor(p.clone(), [["0"; 3]; 3]);
        let ps =
            PoissonSystem::new("0", zero, Expression::parse("x", p.coords()).unwrap()).unwrap();
        assert_eq!(characteristic_data(&ps, &[0.0; 3]).unwrap().rank, 0);
    }

    fn circle(r: f64, c: f64) -> SmoothMap {
        let phi = Arc::new(
            CoordinateSpace::new("S1", &["phi"])
                .unwrap()
                .with_period("phi", 2.0 * std::f64::consts::PI)
                .unwrap()
                .with_bounds(vec![(0.0, 2.0 * std::f64::consts::PI)])
                .unwrap(),
        );
        SmoothMap::new(
            "alpha_rc",
            phi,
            r3(Some("z^2 > 0")),
            &[
                format!("{r}*cos(phi)"),
                format!("{r}*sin(phi)"),
                format!("{c}"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn heisenberg_circles() {
        let ps = heisenberg();
        let plan = SamplePlan::random(20, 0);
        for (r, c) in [(1.0, 0.5), (2.0, -1.5), (0.3, 3.0)] {
            let a = circle(r, c);
            assert!(poisson_lagrangian_check(&ps, &a, &plan, 1e-8)
                .unwrap()
                .passed());
            let t5 = theorem5_check(&ps, &a, &plan, 1e-10).unwrap();
            assert!(t5.passed(), "{t5}");
            assert!(t5.cross_checks_agree());
            assert!(t5.metrics["lagrangian_form_residual"] < 1e-12);
        }
        let excluded = theorem5_check(&ps, &circle(1.0, 0.0), &plan, 1e-10).unwrap();
        assert_eq!(excluded.error_count(), 20);
        assert!(!excluded.passed());
    }

    #[test]
    fn tilted_curve_is_not_invariant() {
        let ps = heisenberg();
        let line = Arc::new(CoordinateSpace::new("L", &["t"]).unwrap());
        let a = SmoothMap::new("line", line, ps.space().clone(), &["t", "1", "1 + t^2"]).unwrap();
        let r = theorem5_check(&ps, &a, &SamplePlan::random(10, 0), 1e-8).unwrap();
        assert!(!r.passed());
        assert!(r.cross_checks_agree());
    }

    #[test]
    fn symplectic_consistency() {
        let p = Arc::new(CoordinateSpace::new("P", &["q", "p"]).unwrap());
        let w = Arc::new(BilinearFormField::canonical("w", p.clone(), &[(0, 1)]).unwrap());
        let h = Expression::parse("(q^2 + p^2)/2", p.coords()).unwrap();
        let s = SymplecticSystem::new("osc", w, h).unwrap();
        let ps = PoissonSystem::from_symplectic(&s).unwrap();
        let z = [0.3, -0.8];
        assert_eq!(
            ps.hamiltonian_field().eval(&z).unwrap(),
            s.hamiltonian_field().eval(&z).unwrap()
        );
        let d = characteristic_data(&ps, &z).unwrap();
        assert_eq!((d.rank, d.kernel.len()), (2, 0));
        let line = Arc::new(CoordinateSpace::new("L", &["t"]).unwrap());
        let a = SmoothMap::new("level", line, p, &["t", "0.2"]).unwrap();
        assert!(
            poisson_lagrangian_check(&ps, &a, &SamplePlan::random(5, 0), 1e-8)
                .unwrap()
                .passed()
        );
    }

    #[test]
    fn constant_hamiltonian_always_passes_theorem5() {
        let ps = heisenberg();
        let c = PoissonSystem::new("c", ps.lambda().clone(), expr(&ps, "2")).unwrap();
        let line = Arc::new(CoordinateSpace::new("L", &["t"]).unwrap());
        let a = SmoothMap::new("line", line, ps.space().clone(), &["t", "t^2", "1 + t^2"]).unwrap();
        assert!(theorem5_check(&c, &a, &SamplePlan::random(10, 0), 1e-12)
            .unwrap()
            .passed());
    }
}
