mod common;

use std::sync::Arc;

use rand::Rng;
use slicekit::corpus;
use slicekit::dynamics::{check_tangency, lie_derivative, SamplePlan};
use slicekit::expr::Expression;
use slicekit::geometry::{Map, SmoothMap};
use slicekit::poisson::{poisson_lagrangian_check, theorem5_check, PoissonSystem};
use slicekit::symplectic::{classify_submanifold, Classification};
use slicekit::sysdef::Structure;

use common::{random_quadratic, rng};

fn heisenberg() -> (slicekit::sysdef::Model, Arc<PoissonSystem>) {
    let model = corpus::load("heisenberg").unwrap();
    let ps = model.poisson("heisenberg").unwrap().clone();
    (model, ps)
}

#[test]
fn hamiltonian_flows_conserve_energy() {
    let (_, ps) = heisenberg();
    let z = ps.hamiltonian_field();
    for x in SamplePlan::random(1000, 11).points(ps.space()).unwrap() {
        let d = lie_derivative(&z, ps.hamiltonian(), &x).unwrap();
        assert!(d.abs() <= 1e-10, "ℒ_Z H = {d} at {x:?}");
    }
}

/// Functions of `z` alone are conserved by every Hamiltonian flow.
#[test]
fn functions_of_z_are_casimirs() {
    let (_, ps) = heisenberg();
    let vars = ["x", "y", "z"].map(String::from);
    let casimirs: Vec<Expression> = ["z", "z^2", "sin(z)", "exp(z) - z^3"]
        .iter()
        .map(|f| Expression::parse(f, &vars).unwrap())
        .collect();
    let mut r = rng(31);
    for _ in 0..20 {
        let h = random_quadratic(&mut r, &vars, 1.0) + " + z*x*y";
        let sys = PoissonSystem::new(
            "h",
            ps.lambda().clone(),
            Expression::parse(&h, &vars).unwrap(),
        )
        .unwrap();
        let z = sys.hamiltonian_field();
        for x in SamplePlan::random(50, r.gen()).points(sys.space()).unwrap() {
            for f in &casimirs {
                assert!(
                    lie_derivative(&z, f, &x).unwrap().abs() <= 1e-12,
                    "H = {h}, f = {f}"
                );
            }
        }
    }
}

/// `theorem5_check` verdicts coincide with plain tangency on 200 seeded curves:
/// horizontal circles around the z-axis and perturbations of them.
#[test]
fn theorem5_and_tangency_agree_on_seeded_embeddings() {
    let (model, ps) = heisenberg();
    let s1 = model.space("S1").unwrap().clone();
    let z = ps.hamiltonian_field();
    let mut r = rng(5);
    let mut passes = 0;
    for i in 0..200 {
        let radius: f64 = r.gen_range(0.3..1.5);
        let c: f64 = r.gen_range(0.3..1.8) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let e: f64 = r.gen_range(0.05..0.3);
        let comps = match i % 4 {
            0 | 1 => [
                format!("{radius:?}*cos(phi)"),
                format!("{radius:?}*sin(phi)"),
                format!("{c:?}"),
            ],
            2 => [
                format!("{radius:?}*cos(phi) + {e:?}"),
                format!("{radius:?}*sin(phi)"),
                format!("{c:?}"),
            ],
            _ => [
                format!("{radius:?}*cos(phi)"),
                format!("{radius:?}*sin(phi)"),
                format!("{c:?} + {e:?}*sin(phi)"),
            ],
        };
        let alpha = SmoothMap::new("curve", s1.clone(), ps.space().clone(), &comps).unwrap();
        let plan = SamplePlan::random(20, i);
        let t5 = theorem5_check(&ps, &alpha, &plan, 1e-8).unwrap();
        let tangency = check_tangency(&z, &alpha, &plan, 1e-8).unwrap();
        assert_eq!(t5.passed(), tangency.passed(), "{comps:?}: {t5}");
        passes += usize::from(t5.passed());
    }
    assert_eq!(passes, 100);
}

/// On symplectic tensors the Poisson Lagrangian test agrees with the
/// symplectic classification for every corpus embedding it applies to.
#[test]
fn poisson_lagrangian_matches_symplectic_classification() {
    let mut compared = 0;
    for id in corpus::ids() {
        let model = corpus::load(id).unwrap();
        for s in model.structures() {
            let Structure::Symplectic(sys) = s else {
                continue;
            };
            let ps = PoissonSystem::from_symplectic(sys).unwrap();
            for map in model.maps() {
                if map.target().coords() != sys.space().coords()
                    || map.source().dim() >= sys.space().dim()
                {
                    continue;
                }
                let plan = SamplePlan::random(20, 0);
                let Ok((class, _)) = classify_submanifold(sys, map.as_ref(), &plan, 1e-8) else {
                    continue;
                };
                let poisson = poisson_lagrangian_check(&ps, map.as_ref(), &plan, 1e-8).unwrap();
                assert_eq!(
                    poisson.passed(),
                    class == Classification::Lagrangian,
                    "{id}/{}: {class:?} vs {poisson}",
                    map.name()
                );
                compared += 1;
            }
        }
    }
    assert!(compared >= 5, "{compared}");
}
