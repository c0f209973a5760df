mod common;

use proptest::prelude::*;
use slicekit::expr::Expression;

use common::fd_directional;

const VARS: [&str; 3] = ["x", "y", "z"];

/// Expressions that stay smooth and moderate on `[-1, 1]^3`.
fn expr_strategy() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![
        Just("x".to_string()),
        Just("y".to_string()),
        Just("z".to_string()),
        (-2.0..2.0f64).prop_map(|c| format!("({c:?})")),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} - {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} * {b})")),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} / (2 + sin({b})))")),
            inner.clone().prop_map(|a| format!("sin({a})")),
            inner.clone().prop_map(|a| format!("cos({a})")),
            inner.clone().prop_map(|a| format!("exp(sin({a}))")),
            inner.clone().prop_map(|a| format!("sqrt(1 + ({a})^2)")),
            inner.clone().prop_map(|a| format!("ln(2 + cos({a}))")),
            inner.clone().prop_map(|a| format!("({a})^3")),
            (inner.clone(), inner).prop_map(|(a, b)| format!("atan2({a}, 3 + cos({b}))")),
        ]
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0..1.0f64, 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dual_directional_derivative_matches_central_differences(
        text in expr_strategy(), x in point(), v in point()
    ) {
        let e = Expression::parse(&text, &VARS).unwrap();
        let (value, d) = e.derivative_along(&x, &v).unwrap();
        prop_assert!((value - e.eval(&x).unwrap()).abs() <= 1e-14 * value.abs().max(1.0));
        let fd = fd_directional(|p| e.eval(p).unwrap(), &x, &v);
        prop_assert!(
            (d - fd).abs() <= 1e-6 * d.abs().max(1.0),
            "{text}: dual {d}, fd {fd}"
        );
    }

    #[test]
    fn directional_derivative_is_linear_in_the_direction(
        text in expr_strategy(), x in point(), u in point(), v in point()
    ) {
        let e = Expression::parse(&text, &VARS).unwrap();
        let w: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let du = e.derivative_along(&x, &u).unwrap().1;
        let dv = e.derivative_along(&x, &v).unwrap().1;
        let dw = e.derivative_along(&x, &w).unwrap().1;
        prop_assert!((dw - du - dv).abs() <= 1e-12 * (du.abs() + dv.abs()).max(1.0));
    }

    #[test]
    fn gradient_assembles_directional_derivatives(text in expr_strategy(), x in point(), v in point()) {
        let e = Expression::parse(&text, &VARS).unwrap();
        let g = e.gradient(&x).unwrap();
        let d = e.derivative_along(&x, &v).unwrap().1;
        let dot: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!((d - dot).abs() <= 1e-12 * d.abs().max(1.0));
    }

    #[test]
    fn printing_and_reparsing_preserves_values(text in expr_strategy(), x in point()) {
        let e = Expression::parse(&text, &VARS).unwrap();
        let again = Expression::parse(&e.to_string(), &VARS).unwrap();
        let (a, b) = (e.eval(&x).unwrap(), again.eval(&x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{text} printed as {e}");
    }
}
