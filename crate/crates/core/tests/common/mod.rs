#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicekit::geometry::CoordinateSpace;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn space(name: &str, coords: &[&str]) -> Arc<CoordinateSpace> {
    Arc::new(CoordinateSpace::new(name, coords).unwrap())
}

pub fn coords(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn num(c: f64) -> String {
    format!("({c:?})")
}

/// Quadratic polynomial `c + Σ a_i x_i + Σ_{i≤j} b_ij x_i x_j` with the
/// given coefficients, consumed in that order.
pub fn quadratic(vars: &[String], coeffs: &[f64]) -> String {
    let mut it = coeffs.iter().copied();
    let mut terms = vec![num(it.next().unwrap_or(0.0))];
    for v in vars {
        terms.push(format!("{}*{v}", num(it.next().unwrap_or(0.0))));
    }
    for i in 0..vars.len() {
        for j in i..vars.len() {
            terms.push(format!(
                "{}*{}*{}",
                num(it.next().unwrap_or(0.0)),
                vars[i],
                vars[j]
            ));
        }
    }
    terms.join(" + ")
}

pub fn quadratic_len(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

pub fn random_quadratic(rng: &mut ChaCha8Rng, vars: &[String], scale: f64) -> String {
    let c: Vec<f64> = (0..quadratic_len(vars.len()))
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    quadratic(vars, &c)
}

pub fn random_point(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..r)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<String>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| num(m[(i, j)])).collect())
        .collect()
}

/// Central difference of `f` at `x` along `v` with step `1e-5·max(1,|x|)`.
pub fn fd_directional(f: impl Fn(&[f64]) -> f64, x: &[f64], v: &[f64]) -> f64 {
    let scale = x.iter().fold(1.0f64, |m, a| m.max(a.abs()));
    let h = 1e-5 * scale;
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}
