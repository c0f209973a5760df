//! Dynamical systems `(P, Z)`: integral curves, sampling, constants of the
//! motion and tangency of embedded submanifolds.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::geometry::{best_jacobian, pushforward, CoordinateSpace, Field, Map};
use crate::linalg;
use crate::report::{evaluate_samples, CheckReport, Sample};
use crate::tolerances::{INTEGRAL_CHECKPOINTS, INTEGRAL_HORIZON, INTEGRATOR_TOLERANCE};

#[derive(Debug, Clone)]
pub struct DynamicalSystem {
    name: String,
    field: Arc<dyn Field>,
}

impl DynamicalSystem {
    pub fn new(name: &str, field: Arc<dyn Field>) -> Self {
        DynamicalSystem {
            name: name.to_string(),
            field,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &Arc<CoordinateSpace> {
        self.field.space()
    }

    pub fn field(&self) -> &Arc<dyn Field> {
        &self.field
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.field.eval(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with a fixed step.
    Rk4 { step: f64 },
    /// Dormand–Prince 5(4) with local error `≤ tolerance · max(1, |y|)`.
    Rk45 { tolerance: f64 },
}

impl Default for Method {
    fn default() -> Self {
        Method::Rk45 {
            tolerance: INTEGRATOR_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// Monotone in the direction of integration.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub method: String,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub max_error_estimate: f64,
    /// Set when integration stopped early because the curve left the domain.
    pub exited_domain: Option<String>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states
            .last()
            .expect("trajectory holds the initial point")
    }

    pub fn final_time(&self) -> f64 {
        *self
            .times
            .last()
            .expect("trajectory holds the initial time")
    }

    pub fn completed(&self) -> bool {
        self.exited_domain.is_none()
    }

    /// `t, coords...` with a header row and LF endings.
    pub fn to_csv(&self, coords: &[String]) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend(coords.iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::Io(e.to_string()))?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut row = vec![t.to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

// Dormand–Prince tableau; fields are autonomous so the nodes are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn axpy(y: &[f64], terms: &[(f64, &Vec<f64>)]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (c, k) in terms {
        if *c != 0.0 {
            for (o, v) in out.iter_mut().zip(k.iter()) {
                *o += c * v;
            }
        }
    }
    out
}

fn rk4_step(f: &dyn Field, y: &[f64], h: f64) -> Result<Vec<f64>> {
    let k1 = f.eval(y)?;
    let k2 = f.eval(&axpy(y, &[(h / 2.0, &k1)]))?;
    let k3 = f.eval(&axpy(y, &[(h / 2.0, &k2)]))?;
    let k4 = f.eval(&axpy(y, &[(h, &k3)]))?;
    Ok((0..y.len())
        .map(|i| y[i] + h * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0)
        .collect())
}

/// One Dormand–Prince step: the fifth-order solution and the scaled error
/// (accept when `≤ 1`).
fn dp_step(f: &dyn Field, y: &[f64], h: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for s in 0..7 {
        let terms: Vec<(f64, &Vec<f64>)> = (0..s).map(|j| (h * A[s][j], &k[j])).collect();
        let stage = axpy(y, &terms);
        k.push(f.eval(&stage)?);
    }
    let terms5: Vec<(f64, &Vec<f64>)> = (0..7).map(|j| (h * B5[j], &k[j])).collect();
    let y5 = axpy(y, &terms5);
    let mut err: f64 = 0.0;
    for i in 0..y.len() {
        let e: f64 = (0..7).map(|j| h * (B5[j] - B4[j]) * k[j][i]).sum();
        let scale = tol * 1f64.max(y[i].abs()).max(y5[i].abs());
        err = err.max(e.abs() / scale);
    }
    Ok((y5, err))
}

/// Adaptive stepper that can be advanced to successive targets.
struct Rk45<'a> {
    field: &'a dyn Field,
    tol: f64,
    h: f64,
    t: f64,
    y: Vec<f64>,
    accepted: usize,
    rejected: usize,
    max_err: f64,
}

enum Advance {
    Reached,
    Exited(String),
}

impl<'a> Rk45<'a> {
    fn new(field: &'a dyn Field, y0: &[f64], t0: f64, tol: f64) -> Self {
        Rk45 {
            field,
            tol,
            h: 1e-2,
            t: t0,
            y: y0.to_vec(),
            accepted: 0,
            rejected: 0,
            max_err: 0.0,
        }
    }

    fn advance_to(&mut self, target: f64) -> Result<Advance> {
        let dir = if target >= self.t { 1.0 } else { -1.0 };
        self.h = self.h.abs();
        while (target - self.t) * dir > 0.0 {
            let remaining = (target - self.t).abs();
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };
            let min_h = 1e-14 * self.t.abs().max(1.0);
            if h < min_h && !last {
                return Err(Error::StepUnderflow { t: self.t });
            }
            match dp_step(self.field, &self.y, dir * h, self.tol) {
                Ok((y_new, err)) if err <= 1.0 => {
                    self.t = if last { target } else { self.t + dir * h };
                    self.y = y_new;
                    self.accepted += 1;
                    self.max_err = self.max_err.max(err * self.tol);
                    let grow = if err == 0.0 {
                        5.0
                    } else {
                        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                    };
                    if !last || grow < 1.0 {
                        self.h = h * grow;
                    }
                }
                Ok((_, err)) => {
                    self.rejected += 1;
                    self.h = h * (0.9 * err.powf(-0.25)).clamp(0.1, 0.9);
                }
                Err(e) => {
                    // a stage left the domain: retry smaller, give up near zero
                    self.rejected += 1;
                    if h < min_h * 1e3 {
                        return Ok(Advance::Exited(e.to_string()));
                    }
                    self.h = h / 4.0;
                }
            }
        }
        Ok(Advance::Reached)
    }
}

fn canonical(space: &CoordinateSpace, y: &[f64]) -> Vec<f64> {
    let mut c = y.to_vec();
    space.canonicalize(&mut c);
    c
}

/// Integrates from `x0` at `t = 0` to `t_end` (which may be negative).
pub fn integrate(
    sys: &DynamicalSystem,
    x0: &[f64],
    t_end: f64,
    method: Method,
) -> Result<Trajectory> {
    let space = sys.space();
    space.check(x0)?;
    let field = sys.field().as_ref();
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![canonical(space, x0)],
        method: String::new(),
        accepted_steps: 0,
        rejected_steps: 0,
        max_error_estimate: 0.0,
        exited_domain: None,
    };
    match method {
        Method::Rk4 { step } => {
            if !(step > 0.0) {
                return Err(Error::precondition(
                    "integrate",
                    "rk4 step must be positive",
                ));
            }
            traj.method = format!("rk4(h={step})");
            let n = ((t_end.abs() / step).ceil() as usize).max(1);
            let h = t_end / n as f64;
            let mut y = x0.to_vec();
            for i in 1..=n {
                match rk4_step(field, &y, h) {
                    Ok(next) => y = next,
                    Err(e) => {
                        traj.exited_domain = Some(e.to_string());
                        break;
                    }
                }
                traj.accepted_steps += 1;
                traj.times.push(if i == n { t_end } else { i as f64 * h });
                traj.states.push(canonical(space, &y));
            }
        }
        Method::Rk45 { tolerance } => {
            traj.method = format!("rk45(tol={tolerance:e})");
            let mut stepper = Rk45::new(field, x0, 0.0, tolerance);
            let dir = t_end.signum();
            while (t_end - stepper.t) * dir > 0.0 {
                // advance one accepted step at a time so every step is recorded
                let before = stepper.accepted;
                let target = stepper.t + dir * stepper.h.abs().min((t_end - stepper.t).abs());
                match stepper.advance_to(target)? {
                    Advance::Reached => {}
                    Advance::Exited(reason) => {
                        traj.exited_domain = Some(reason);
                        break;
                    }
                }
                if stepper.accepted > before {
                    traj.times.push(stepper.t);
                    traj.states.push(canonical(space, &stepper.y));
                }
            }
            traj.accepted_steps = stepper.accepted;
            traj.rejected_steps = stepper.rejected;
            traj.max_error_estimate = stepper.max_err;
        }
    }
    Ok(traj)
}

/// States at the given times (same sign, increasing in magnitude), by RK45.
/// Stops early with the reached prefix when the curve leaves the domain.
pub fn integrate_checkpoints(
    sys: &DynamicalSystem,
    x0: &[f64],
    times: &[f64],
    tolerance: f64,
) -> Result<(Vec<Vec<f64>>, Option<String>)> {
    sys.space().check(x0)?;
    let mut stepper = Rk45::new(sys.field().as_ref(), x0, 0.0, tolerance);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        match stepper.advance_to(t)? {
            Advance::Reached => out.push(canonical(sys.space(), &stepper.y)),
            Advance::Exited(reason) => return Ok((out, Some(reason))),
        }
    }
    Ok((out, None))
}

/// `ℒ_Z f (x) = ∇f(x) · Z(x)`.
pub fn lie_derivative(z: &dyn Field, f: &Expression, x: &[f64]) -> Result<f64> {
    let v = z.eval(x)?;
    Ok(f.derivative_along(x, &v)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Grid,
    Random,
}

/// Reproducible set of in-domain sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub strategy: Strategy,
    /// Falls back to the space's declared bounds, then to `[-1, 1]`.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub count: usize,
    pub seed: u64,
}

impl SamplePlan {
    pub fn random(count: usize, seed: u64) -> Self {
        SamplePlan {
            strategy: Strategy::Random,
            bounds: None,
            count,
            seed,
        }
    }

    pub fn grid(count: usize) -> Self {
        SamplePlan {
            strategy: Strategy::Grid,
            bounds: None,
            count,
            seed: 0,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    fn resolve_bounds(&self, space: &CoordinateSpace) -> Result<Vec<(f64, f64)>> {
        let b = match (&self.bounds, space.bounds()) {
            (Some(b), _) => b.clone(),
            (None, Some(b)) => b.to_vec(),
            (None, None) => vec![(-1.0, 1.0); space.dim()],
        };
        if b.len() != space.dim() {
            return Err(Error::dimension("sample bounds", space.dim(), b.len()));
        }
        if b.iter()
            .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(Error::precondition(
                "sampling",
                "bounds must be finite with lo <= hi",
            ));
        }
        Ok(b)
    }

    /// Sample points; grid plans keep every in-domain node of a
    /// `⌈count^{1/n}⌉^n` grid, random plans reject out-of-domain draws.
    pub fn points(&self, space: &CoordinateSpace) -> Result<Vec<Vec<f64>>> {
        let bounds = self.resolve_bounds(space)?;
        let n = space.dim();
        let mut out = Vec::with_capacity(self.count);
        match self.strategy {
            Strategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let max_attempts = 1000 * self.count.max(1);
                let mut attempts = 0;
                while out.len() < self.count {
                    attempts += 1;
                    if attempts > max_attempts {
                        return Err(Error::precondition(
                            "sampling",
                            format!(
                                "only {} of {} draws landed in the domain of `{}`",
                                out.len(),
                                self.count,
                                space.name()
                            ),
                        ));
                    }
                    let mut p: Vec<f64> = bounds
                        .iter()
                        .map(|&(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
                        .collect();
                    space.canonicalize(&mut p);
                    if space.contains(&p) {
                        out.push(p);
                    }
                }
            }
            Strategy::Grid => {
                if self.count == 0 {
                    return Ok(out);
                }
                let k = (self.count as f64).powf(1.0 / n as f64).ceil().max(1.0) as usize;
                let axis = |d: usize, i: usize| {
                    let (lo, hi) = bounds[d];
                    if k == 1 {
                        (lo + hi) / 2.0
                    } else {
                        lo + (hi - lo) * i as f64 / (k - 1) as f64
                    }
                };
                let total = k.pow(n as u32);
                for flat in 0..total {
                    let mut rem = flat;
                    let mut p = vec![0.0; n];
                    for d in (0..n).rev() {
                        p[d] = axis(d, rem % k);
                        rem /= k;
                    }
                    space.canonicalize(&mut p);
                    if space.contains(&p) {
                        out.push(p);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralOptions {
    pub horizon: f64,
    pub checkpoints: usize,
    pub tolerance: f64,
}

impl Default for IntegralOptions {
    fn default() -> Self {
        IntegralOptions {
            horizon: INTEGRAL_HORIZON,
            checkpoints: INTEGRAL_CHECKPOINTS,
            tolerance: INTEGRATOR_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstantMode {
    /// `‖T F · Z‖` at each sample.
    Infinitesimal,
    /// `max_t |F(γ(t)) − F(γ(0))|` along the integral curve.
    Integral(IntegralOptions),
}

fn same_coordinates(a: &CoordinateSpace, b: &CoordinateSpace) -> bool {
    a.coords() == b.coords()
}

/// Checks that `F: P → N` is constant along the flow of the system.
pub fn check_constant_of_motion(
    sys: &DynamicalSystem,
    f: &dyn Map,
    plan: &SamplePlan,
    mode: ConstantMode,
    tolerance: f64,
) -> Result<CheckReport> {
    if !same_coordinates(f.source(), sys.space()) {
        return Err(Error::precondition(
            "check_constant_of_motion",
            format!(
                "source of `{}` is `{}`, not the phase space `{}`",
                f.name(),
                f.source().name(),
                sys.space().name()
            ),
        ));
    }
    let points = plan.points(sys.space())?;
    let (check, samples) = match mode {
        ConstantMode::Infinitesimal => (
            "constant-of-motion (infinitesimal)",
            evaluate_samples(&points, |z| {
                let v = sys.eval(z)?;
                Ok(Sample::new(linalg::norm(&pushforward(f, z, &v)?)))
            }),
        ),
        ConstantMode::Integral(opts) => {
            let times: Vec<f64> = (1..=opts.checkpoints.max(1))
                .map(|i| opts.horizon * i as f64 / opts.checkpoints.max(1) as f64)
                .collect();
            (
                "constant-of-motion (integral)",
                evaluate_samples(&points, |z| {
                    let f0 = f.eval(z)?;
                    let (states, exit) = integrate_checkpoints(sys, z, &times, opts.tolerance)?;
                    if let Some(reason) = exit {
                        return Err(Error::precondition(
                            "integral check",
                            format!("trajectory left the domain: {reason}"),
                        ));
                    }
                    let mut drift: f64 = 0.0;
                    for s in &states {
                        let ft = f.eval(s)?;
                        drift = drift.max(f.target().distance(&ft, &f0));
                    }
                    Ok(Sample::new(drift))
                }),
            )
        }
    };
    let mut report = CheckReport::new(check, sys.name(), tolerance, samples);
    report.note(format!("candidate constant `{}`", f.name()));
    Ok(report)
}

/// Least-squares tangency of `Z` to the image of `α`; each sample carries the
/// minimising `v`, the candidate slicing field at that point.
pub fn check_tangency(
    z: &dyn Field,
    alpha: &dyn Map,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    if !same_coordinates(alpha.target(), z.space()) {
        return Err(Error::precondition(
            "check_tangency",
            format!(
                "`{}` maps into `{}`, but the field lives on `{}`",
                alpha.name(),
                alpha.target().name(),
                z.space().name()
            ),
        ));
    }
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let (v, resid) = tangency_at(z, alpha, x)?;
        Ok(Sample::with_value(resid, v))
    });
    let mut report = CheckReport::new("tangency", z.name(), tolerance, samples);
    report.note(format!("embedding `{}`", alpha.name()));
    Ok(report)
}

/// `argmin_v ‖J_α(x) v − Z(α(x))‖` and the minimum.
pub fn tangency_at(z: &dyn Field, alpha: &dyn Map, x: &[f64]) -> Result<(Vec<f64>, f64)> {
    let img = alpha.eval(x)?;
    let j: DMatrix<f64> = best_jacobian(alpha, x)?;
    let zv = z.eval(&img)?;
    linalg::least_squares(&j, &zv, "tangency (J_α must have full column rank)")
}

/// Values of `Z` at the given points, as a matrix with one column per point.
pub fn field_matrix(z: &dyn Field, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let cols = points
        .iter()
        .map(|p| z.eval(p).map(DVector::from_vec))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}
