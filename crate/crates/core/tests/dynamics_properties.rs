mod common;

use std::sync::Arc;

use proptest::prelude::*;
use slicekit::corpus;
use slicekit::dynamics::{
    check_constant_of_motion, check_tangency, tangency_at, ConstantMode, IntegralOptions,
    SamplePlan,
};
use slicekit::geometry::{ComposedMap, Map, SmoothMap, VectorField};
use slicekit::sysdef::Expectation;

use common::space;

/// Every declared constant of the motion that the corpus expects to pass
/// gets the same verdict in both modes, with drift below 1e-6 over T = 10.
#[test]
fn infinitesimal_and_integral_modes_agree_on_corpus_constants() {
    let mut seen = 0;
    for id in corpus::ids() {
        let model = corpus::load(id).unwrap();
        for spec in model.checks().iter().filter(|c| c.op == "constant") {
            let f = model.map(spec.map.as_deref().unwrap()).unwrap();
            let sys = model
                .dynamical_system(spec.field.as_deref().unwrap())
                .unwrap();
            let plan = SamplePlan::random(20, 0);
            let inf = check_constant_of_motion(
                &sys,
                f.as_ref(),
                &plan,
                ConstantMode::Infinitesimal,
                1e-8,
            )
            .unwrap();
            let opts = IntegralOptions {
                horizon: 10.0,
                checkpoints: 50,
                tolerance: 1e-10,
            };
            let int = check_constant_of_motion(
                &sys,
                f.as_ref(),
                &plan,
                ConstantMode::Integral(opts),
                1e-6,
            )
            .unwrap();
            assert_eq!(inf.verdict, int.verdict, "{id}/{}", spec.label);
            if spec.expect == Some(Expectation::Pass) {
                assert!(int.max < 1e-6, "{id}/{}: drift {}", spec.label, int.max);
            }
            seen += 1;
        }
    }
    assert!(seen >= 8);
}

fn limit_cycle() -> VectorField {
    VectorField::new(
        "Z",
        space("P", &["x", "y"]),
        &["-y + x*(1 - x^2 - y^2)", "x + y*(1 - x^2 - y^2)"],
    )
    .unwrap()
}

fn circle(r: f64) -> SmoothMap {
    let comps = [format!("{r:?}*cos(phi)"), format!("{r:?}*sin(phi)")];
    SmoothMap::new(
        "circle",
        space("S1", &["phi"]),
        space("P", &["x", "y"]),
        &comps,
    )
    .unwrap()
}

#[test]
fn limit_cycle_tangency() {
    let z = limit_cycle();
    let plan = SamplePlan::random(100, 3).with_bounds(vec![(0.0, 6.3)]);
    assert!(check_tangency(&z, &circle(1.0), &plan, 1e-8)
        .unwrap()
        .passed());
    let r = check_tangency(&z, &circle(2.0), &plan, 1e-8).unwrap();
    assert!(!r.passed());
    // the radial component 2·(1 − 4) = −6 is the whole normal defect
    assert!((r.max - 6.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Reparameterizing the embedding by a circle diffeomorphism leaves
    /// the tangency residual at corresponding points unchanged.
    #[test]
    fn tangency_residual_is_gauge_invariant(
        r in 0.3..2.5f64, a in -0.9..0.9f64, w in 0.0..6.3f64
    ) {
        let z = limit_cycle();
        let alpha: Arc<dyn Map> = Arc::new(circle(r));
        let phi = SmoothMap::new(
            "phi",
            space("W", &["w"]),
            space("S1", &["phi"]),
            &[format!("w + {a:?}*sin(w)")],
        ).unwrap();
        let composed = ComposedMap::new(alpha.clone(), Arc::new(phi.clone())).unwrap();
        let direct = tangency_at(&z, alpha.as_ref(), &phi.eval(&[w]).unwrap()).unwrap().1;
        let gauged = tangency_at(&z, &composed, &[w]).unwrap().1;
        prop_assert!((direct - gauged).abs() <= 1e-10, "{direct} vs {gauged}");
    }
}
