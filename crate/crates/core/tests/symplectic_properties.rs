mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use slicekit::corpus;
use slicekit::dynamics::{lie_derivative, SamplePlan};
use slicekit::expr::Expression;
use slicekit::geometry::{
    jacobian, pullback_function, pullback_two_form, BilinearFormField, DiffMode, Field, FormKind,
    Map, SmoothMap, VectorField,
};
use slicekit::slicing::{check_fibred_slicing, induced_slicing_field, slicing_residual, Slicing};
use slicekit::symplectic::{hj_residual, hj_residual_at, SymplecticSystem};
use slicekit::sysdef::Structure;

use common::{coords, random_point, random_quadratic, rng};

/// `ℒ_Z H = 0` at 1000 samples of every corpus symplectic structure.
#[test]
fn hamiltonian_flows_conserve_energy() {
    let mut systems = 0;
    for id in corpus::ids() {
        let model = corpus::load(id).unwrap();
        for s in model.structures() {
            let Structure::Symplectic(sys) = s else {
                continue;
            };
            let z = sys.hamiltonian_field();
            for x in SamplePlan::random(1000, 5).points(sys.space()).unwrap() {
                let d = lie_derivative(&z, sys.hamiltonian(), &x).unwrap();
                assert!(d.abs() <= 1e-10, "{id}: ℒ_Z H = {d} at {x:?}");
            }
            systems += 1;
        }
    }
    assert!(systems >= 4);
}

/// Random nondegenerate constant skew matrix `Aᵀ J₀ A`.
fn random_symplectic_matrix(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let dim = 2 * n;
    let mut j0 = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n {
        j0[(i, n + i)] = 1.0;
        j0[(n + i, i)] = -1.0;
    }
    loop {
        let a =
            DMatrix::identity(dim, dim) + DMatrix::from_fn(dim, dim, |_, _| r.gen_range(-0.4..0.4));
        let m = a.transpose() * &j0 * &a;
        if m.determinant().abs() > 1e-2 {
            return m;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// `Jᵀ Ωᵀ (J X − Z∘α)` equals the HJ residual for arbitrary `(α, X, H, Ω)`,
    /// slicing or not, with `Z` solved independently from `Ωᵀ Z = ∇H`.
    #[test]
    fn hj_residual_factors_through_the_slicing_residual(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..=3usize);
        let k = r.gen_range(1..=2 * n);
        let p_coords = coords("z", 2 * n);
        let m_coords = coords("x", k);
        let p = Arc::new(slicekit::geometry::CoordinateSpace::new("P", &p_coords).unwrap());
        let m = Arc::new(slicekit::geometry::CoordinateSpace::new("M", &m_coords).unwrap());
        let omega_m = random_symplectic_matrix(&mut r, n);
        let omega = Arc::new(BilinearFormField::constant("w", p.clone(), &omega_m, FormKind::Symplectic).unwrap());
        let h = Expression::parse(&random_quadratic(&mut r, &p_coords, 1.0), &p_coords).unwrap();
        let sys = SymplecticSystem::new("random", omega, h.clone()).unwrap();
        let alpha_c: Vec<String> = (0..2 * n).map(|_| random_quadratic(&mut r, &m_coords, 1.0)).collect();
        let alpha = Arc::new(SmoothMap::new("alpha", m.clone(), p, &alpha_c).unwrap());
        let x_c: Vec<String> = (0..k).map(|_| random_quadratic(&mut r, &m_coords, 1.0)).collect();
        let xf: Arc<dyn Field> = Arc::new(VectorField::new("X", m, &x_c).unwrap());
        let x = random_point(&mut r, k, 1.0);

        let img = alpha.eval(&x).unwrap();
        let j = jacobian(alpha.as_ref(), &x, DiffMode::Dual).unwrap();
        let grad = DVector::from_vec(h.gradient(&img).unwrap());
        let z = omega_m.transpose().lu().solve(&grad).unwrap();
        let xv = DVector::from_vec(xf.eval(&x).unwrap());
        let slicing = &j * &xv - &z;
        let expected = j.transpose() * omega_m.transpose() * &slicing;

        let s = Slicing::new("s", alpha.clone(), Some(xf.clone())).unwrap();
        let lib_slicing = slicing_residual(&s, &sys.hamiltonian_field(), &x).unwrap();
        let got = hj_residual(&sys, alpha.as_ref(), xf.as_ref(), &x).unwrap();
        let scale = expected.amax().max(1.0);
        for i in 0..slicing.len() {
            prop_assert!((lib_slicing[i] - slicing[i]).abs() <= 1e-10 * slicing.amax().max(1.0));
        }
        for i in 0..k {
            prop_assert!((got[i] - expected[i]).abs() <= 1e-10 * scale, "{got:?} vs {expected}");
        }
    }
}

fn free_particle() -> (slicekit::sysdef::Model, Arc<SymplecticSystem>) {
    let model = corpus::load("free-particle").unwrap();
    let sys = model.symplectic("free").unwrap().clone();
    (model, sys)
}

/// Seeded polynomial sections `q ↦ (q, p(q))` of `T*R² → R²`: constant
/// momenta and momenta `g(s)·c` along the level lines of `s = c₂q₁ − c₁q₂`
/// are slicings; generic quadratic momenta are not.
fn polynomial_section(
    r: &mut rand_chacha::ChaCha8Rng,
    kind: usize,
    base: &Arc<slicekit::geometry::CoordinateSpace>,
    total: &Arc<slicekit::geometry::CoordinateSpace>,
) -> SmoothMap {
    let q = coords("q", 2);
    let c1: f64 = r.gen_range(-1.5..1.5);
    let c2: f64 = r.gen_range(-1.5..1.5);
    let p = match kind {
        0 => vec![format!("{c1:?}"), format!("{c2:?}")],
        1 => {
            let (a, b): (f64, f64) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            let s = format!("({c2:?}*q1 - {c1:?}*q2)");
            let g = format!("(1 + {a:?}*{s} + {b:?}*{s}^2)");
            vec![format!("{g}*{c1:?}"), format!("{g}*{c2:?}")]
        }
        _ => vec![random_quadratic(r, &q, 1.0), random_quadratic(r, &q, 1.0)],
    };
    let comps = [q[0].clone(), q[1].clone(), p[0].clone(), p[1].clone()];
    SmoothMap::new("section", base.clone(), total.clone(), &comps).unwrap()
}

/// With isotropic fibres, the fibred slicing verdict and the HJ verdict
/// coincide on 200 seeded polynomial sections.
#[test]
fn fibred_slicing_and_hj_verdicts_coincide() {
    let (model, sys) = free_particle();
    let fib = model.fibration("cotangent").unwrap();
    let z = sys.hamiltonian_field();
    let mut r = rng(2024);
    let (mut slicings, mut disagreements) = (0, 0);
    for i in 0..200 {
        let alpha = polynomial_section(&mut r, i % 3, fib.base(), fib.total());
        let plan = SamplePlan::random(20, i as u64);
        let fibred = check_fibred_slicing(fib, &alpha, &z, &plan, 1e-8).unwrap();
        let hj_max = plan
            .points(fib.base())
            .unwrap()
            .iter()
            .map(|x| {
                let xv = induced_slicing_field(fib, &alpha, &z, x).unwrap();
                common::norm(&hj_residual_at(&sys, &alpha, x, &xv).unwrap())
            })
            .fold(0.0, f64::max);
        if fibred.passed() != (hj_max <= 1e-8) {
            disagreements += 1;
        }
        slicings += usize::from(fibred.passed());
    }
    assert_eq!(disagreements, 0);
    // both verdicts occur
    assert!((60..=150).contains(&slicings), "{slicings} slicings");
}

/// Lagrangian sections of half dimension: the fibred slicing verdict agrees
/// with `d(α*H) = 0`.
#[test]
fn lagrangian_sections_are_slicings_iff_energy_is_constant() {
    let (model, sys) = free_particle();
    let fib = model.fibration("cotangent").unwrap();
    let z = sys.hamiltonian_field();
    let q = coords("q", 2);
    let mut r = rng(99);
    for i in 0..100 {
        // W = a·q + b₁₁q₁² + b₁₂q₁q₂ + b₂₂q₂² + d q₁³, quadratic and cubic parts only for odd i
        let mut c = || r.gen_range(-1.0..1.0f64);
        let (a1, a2) = (c(), c());
        let (b11, b12, b22, d) = if i % 2 == 0 {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            (c(), c(), c(), c())
        };
        let p1 = format!("{a1:?} + 2*{b11:?}*q1 + {b12:?}*q2 + 3*{d:?}*q1^2");
        let p2 = format!("{a2:?} + {b12:?}*q1 + 2*{b22:?}*q2");
        let alpha = SmoothMap::new(
            "dW",
            fib.base().clone(),
            fib.total().clone(),
            &[q[0].clone(), q[1].clone(), p1.clone(), p2.clone()],
        )
        .unwrap();
        let w = format!("dW = ({p1}, {p2})");
        let plan = SamplePlan::random(20, i as u64);
        for x in plan.points(fib.base()).unwrap() {
            let pb = pullback_two_form(&alpha, sys.omega(), &x).unwrap();
            assert!(pb.amax() <= 1e-12);
        }
        let fibred = check_fibred_slicing(fib, &alpha, &z, &plan, 1e-8).unwrap();
        let dh_max = plan
            .points(fib.base())
            .unwrap()
            .iter()
            .map(|x| common::norm(&pullback_function(&alpha, sys.hamiltonian(), x).unwrap().1))
            .fold(0.0, f64::max);
        assert_eq!(fibred.passed(), dh_max <= 1e-8, "{w}");
        assert_eq!(fibred.passed(), i % 2 == 0, "{w}");
    }
}
