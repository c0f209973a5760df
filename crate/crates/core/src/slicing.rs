//! Slicings `(M, α, X)` of a vector field `Z`, fibred slicings of sections,
//! complete slicings and their constants of the motion, flow-box families
//! and gauge transformations.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{check_constant_of_motion, ConstantMode, DynamicalSystem, SamplePlan};
use crate::error::{Error, Result};
use crate::expr::{Dual, Expression, Node, Scalar};
use crate::geometry::{best_jacobian, CoordinateSpace, Field, Map, SmoothMap};
use crate::linalg;
use crate::report::{evaluate_samples, CheckReport, Sample};
use crate::tolerances::{
    CRITICAL, INVERSE, NEWTON_MAX_ITERATIONS, NEWTON_TOLERANCE, SECTION, VERTICALITY,
};

/// `α: M → P` with an optional field `X` on `M`.
#[derive(Debug, Clone)]
pub struct Slicing {
    name: String,
    alpha: Arc<dyn Map>,
    field: Option<Arc<dyn Field>>,
}

impl Slicing {
    pub fn new(name: &str, alpha: Arc<dyn Map>, field: Option<Arc<dyn Field>>) -> Result<Self> {
        if let Some(x) = &field {
            if x.space().coords() != alpha.source().coords() {
                return Err(Error::definition(format!(
                    "slicing `{name}`: field `{}` does not live on the source of `{}`",
                    x.name(),
                    alpha.name()
                )));
            }
        }
        Ok(Slicing {
            name: name.to_string(),
            alpha,
            field,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn alpha(&self) -> &Arc<dyn Map> {
        &self.alpha
    }

    pub fn field(&self) -> Option<&Arc<dyn Field>> {
        self.field.as_ref()
    }

    pub fn source(&self) -> &Arc<CoordinateSpace> {
        self.alpha.source()
    }
}

fn require_target(alpha: &dyn Map, z: &dyn Field, op: &str) -> Result<()> {
    if alpha.target().coords() != z.space().coords() {
        return Err(Error::precondition(
            op,
            format!(
                "`{}` maps into `{}`, but `{}` lives on `{}`",
                alpha.name(),
                alpha.target().name(),
                z.name(),
                z.space().name()
            ),
        ));
    }
    Ok(())
}

fn mat_vec(j: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    linalg::to_vec(&(j * DVector::from_column_slice(v)))
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `J_α(x) X(x) − Z(α(x))`. Without `X`, the least-squares field is used,
/// which requires `α` to be an immersion at `x`.
pub fn slicing_residual(s: &Slicing, z: &dyn Field, x: &[f64]) -> Result<Vec<f64>> {
    require_target(s.alpha.as_ref(), z, "slicing_residual")?;
    let img = s.alpha.eval(x)?;
    let j = best_jacobian(s.alpha.as_ref(), x)?;
    let zv = z.eval(&img)?;
    let xv = match &s.field {
        Some(f) => f.eval(x)?,
        None => linalg::least_squares(&j, &zv, "slicing field (α is not an immersion)")?.0,
    };
    Ok(sub(&mat_vec(&j, &xv), &zv))
}

/// `‖slicing_residual‖` over the plan.
pub fn check_slicing(
    s: &Slicing,
    z: &dyn Field,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    require_target(s.alpha.as_ref(), z, "check_slicing")?;
    let points = plan.points(s.source())?;
    let samples = evaluate_samples(&points, |x| {
        let r = slicing_residual(s, z, x)?;
        Ok(Sample::with_value(linalg::norm(&r), r))
    });
    let mut report = CheckReport::new("slicing", z.name(), tolerance, samples);
    report.note(format!("slicing `{}`", s.name));
    Ok(report)
}

/// Projection `π: P → M`, optionally in adapted coordinates where `π` keeps
/// the first `m` coordinates.
#[derive(Debug, Clone)]
pub struct FibredStructure {
    name: String,
    projection: Arc<dyn Map>,
    adapted: Option<usize>,
}

impl FibredStructure {
    pub fn new(name: &str, projection: Arc<dyn Map>, adapted: Option<usize>) -> Result<Self> {
        if let Some(m) = adapted {
            let base = projection.target().dim();
            if m != base || m >= projection.source().dim() {
                return Err(Error::definition(format!(
                    "fibration `{name}`: adapted split {m} must equal the base dimension {base} \
                     and be smaller than the total dimension"
                )));
            }
            let is_coordinate_projection = projection.as_smooth().is_some_and(|s| {
                s.components()
                    .iter()
                    .enumerate()
                    .all(|(i, c)| matches!(c.root(), Node::Var(k) if *k == i))
            });
            if !is_coordinate_projection {
                return Err(Error::definition(format!(
                    "fibration `{name}`: an adapted split needs π to keep the first {m} coordinates"
                )));
            }
        }
        Ok(FibredStructure {
            name: name.to_string(),
            projection,
            adapted,
        })
    }

    /// `π(q, p) = q` on a space whose first `m` coordinates form the base.
    pub fn adapted_projection(
        name: &str,
        total: Arc<CoordinateSpace>,
        base_name: &str,
        m: usize,
    ) -> Result<Self> {
        if m == 0 || m >= total.dim() {
            return Err(Error::definition(format!(
                "fibration `{name}`: base dimension must lie in 1..{}",
                total.dim()
            )));
        }
        let base = Arc::new(CoordinateSpace::new(base_name, &total.coords()[..m])?);
        let comps = (0..m)
            .map(|i| Expression::from_node(Node::Var(i), total.coords()))
            .collect();
        let pi = SmoothMap::from_expressions(&format!("pi_{name}"), total, base, comps)?;
        Self::new(name, Arc::new(pi), Some(m))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn projection(&self) -> &Arc<dyn Map> {
        &self.projection
    }

    pub fn total(&self) -> &Arc<CoordinateSpace> {
        self.projection.source()
    }

    pub fn base(&self) -> &Arc<CoordinateSpace> {
        self.projection.target()
    }

    pub fn adapted(&self) -> Option<usize> {
        self.adapted
    }

    /// `J_π(z)` after checking it has full row rank.
    pub fn submersion_jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let j = best_jacobian(self.projection.as_ref(), z)?;
        let r = linalg::rank(&j);
        if r < j.nrows() {
            return Err(Error::RankDeficient {
                context: format!("projection of `{}`", self.name),
                rank: r,
                required: j.nrows(),
            });
        }
        Ok(j)
    }

    /// Fails unless `π(α(x)) = x` to the section tolerance.
    pub fn check_section(&self, alpha: &dyn Map, x: &[f64]) -> Result<Vec<f64>> {
        if alpha.source().coords() != self.base().coords()
            || alpha.target().coords() != self.total().coords()
        {
            return Err(Error::precondition(
                "section",
                format!(
                    "`{}` must map the base `{}` into the total space `{}`",
                    alpha.name(),
                    self.base().name(),
                    self.total().name()
                ),
            ));
        }
        let img = alpha.eval(x)?;
        let back = self.projection.eval(&img)?;
        let d = self.base().distance(&back, x);
        if d > SECTION {
            return Err(Error::precondition(
                "section",
                format!("|π(α(x)) − x| = {d:e} at {x:?}"),
            ));
        }
        Ok(img)
    }
}

/// `X(x) = J_π(α(x)) Z(α(x))`.
pub fn induced_slicing_field(
    fib: &FibredStructure,
    alpha: &dyn Map,
    z: &dyn Field,
    x: &[f64],
) -> Result<Vec<f64>> {
    require_target(alpha, z, "induced_slicing_field")?;
    let img = fib.check_section(alpha, x)?;
    let jpi = best_jacobian(fib.projection.as_ref(), &img)?;
    Ok(mat_vec(&jpi, &z.eval(&img)?))
}

/// The induced field of a section, as a field on the base.
#[derive(Debug, Clone)]
pub struct InducedField {
    name: String,
    fib: Arc<FibredStructure>,
    alpha: Arc<dyn Map>,
    z: Arc<dyn Field>,
}

impl InducedField {
    pub fn new(fib: Arc<FibredStructure>, alpha: Arc<dyn Map>, z: Arc<dyn Field>) -> Self {
        InducedField {
            name: format!("Tπ∘{}∘{}", z.name(), alpha.name()),
            fib,
            alpha,
            z,
        }
    }
}

impl Field for InducedField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        self.alpha.source()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        induced_slicing_field(&self.fib, self.alpha.as_ref(), self.z.as_ref(), x)
    }
}

/// Residual of the fibred slicing equation and its `π`-vertical defect
/// `‖J_π r‖`, which vanishes for every section.
pub fn fibred_residual(
    fib: &FibredStructure,
    alpha: &dyn Map,
    z: &dyn Field,
    x: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let img = fib.check_section(alpha, x)?;
    let jpi = best_jacobian(fib.projection.as_ref(), &img)?;
    let zv = z.eval(&img)?;
    let xv = mat_vec(&jpi, &zv);
    let ja = best_jacobian(alpha, x)?;
    let r = sub(&mat_vec(&ja, &xv), &zv);
    let vertical = linalg::norm(&mat_vec(&jpi, &r));
    Ok((r, vertical))
}

pub fn check_fibred_slicing(
    fib: &FibredStructure,
    alpha: &dyn Map,
    z: &dyn Field,
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CheckReport> {
    require_target(alpha, z, "check_fibred_slicing")?;
    let points = plan.points(alpha.source())?;
    let samples = evaluate_samples(&points, |x| {
        let (r, vertical) = fibred_residual(fib, alpha, z, x)?;
        let mut value = r.clone();
        value.push(vertical);
        Ok(Sample::with_value(linalg::norm(&r), value))
    });
    let mut report = CheckReport::new("fibred-slicing", z.name(), tolerance, samples);
    let vertical = report
        .samples
        .iter()
        .filter_map(|s| s.value.as_ref().and_then(|v| v.last().copied()))
        .fold(0.0, f64::max);
    report.metric("vertical_defect", vertical);
    report.note(format!(
        "section `{}` of `{}`; residual is π-vertical: {}",
        alpha.name(),
        fib.name,
        vertical <= VERTICALITY
    ));
    // drop the appended vertical component from the stored residual vectors
    for s in &mut report.samples {
        if let Some(v) = &mut s.value {
            v.pop();
        }
    }
    report.recompute();
    Ok(report)
}

/// Family `ᾱ: M × N → P` of slicings `α_c = ᾱ(·, c)`.
#[derive(Debug, Clone)]
pub struct CompleteSlicing {
    name: String,
    base: Arc<CoordinateSpace>,
    params: Arc<CoordinateSpace>,
    family: Arc<dyn Map>,
    inverse: Option<Arc<dyn Map>>,
    fields: Option<Arc<dyn Map>>,
}

impl CompleteSlicing {
    /// `family` must be defined on `base × params` (base coordinates first);
    /// `inverse` maps `P → M × N`; `fields` maps `M × N` to the `X_c`
    /// components.
    pub fn new(
        name: &str,
        base: Arc<CoordinateSpace>,
        params: Arc<CoordinateSpace>,
        family: Arc<dyn Map>,
        inverse: Option<Arc<dyn Map>>,
        fields: Option<Arc<dyn Map>>,
    ) -> Result<Self> {
        let m = base.dim();
        let src = family.source();
        let expected: Vec<&String> = base.coords().iter().chain(params.coords()).collect();
        if src.coords().iter().collect::<Vec<_>>() != expected {
            return Err(Error::definition(format!(
                "complete slicing `{name}`: family must be defined on `{}` × `{}`",
                base.name(),
                params.name()
            )));
        }
        if let Some(inv) = &inverse {
            if inv.source().coords() != family.target().coords() || inv.target().dim() != src.dim()
            {
                return Err(Error::definition(format!(
                    "complete slicing `{name}`: inverse must map `{}` to `{}`",
                    family.target().name(),
                    src.name()
                )));
            }
        }
        if let Some(f) = &fields {
            if f.source().coords() != src.coords() || f.target().dim() != m {
                return Err(Error::definition(format!(
                    "complete slicing `{name}`: fields must map `{}` to {m} components",
                    src.name()
                )));
            }
        }
        Ok(CompleteSlicing {
            name: name.to_string(),
            base,
            params,
            family,
            inverse,
            fields,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base(&self) -> &Arc<CoordinateSpace> {
        &self.base
    }

    pub fn params(&self) -> &Arc<CoordinateSpace> {
        &self.params
    }

    pub fn family(&self) -> &Arc<dyn Map> {
        &self.family
    }

    pub fn inverse(&self) -> Option<&Arc<dyn Map>> {
        self.inverse.as_ref()
    }

    pub fn fields(&self) -> Option<&Arc<dyn Map>> {
        self.fields.as_ref()
    }

    pub fn phase_space(&self) -> &Arc<CoordinateSpace> {
        self.family.target()
    }

    /// The slicing `α_c` with its declared field when available.
    pub fn member(&self, c: &[f64]) -> Result<Slicing> {
        if c.len() != self.params.dim() {
            return Err(Error::dimension(
                "family parameter",
                self.params.dim(),
                c.len(),
            ));
        }
        let alpha: Arc<dyn Map> = Arc::new(MemberMap {
            name: format!("{}[{c:?}]", self.name),
            family: self.family.clone(),
            base: self.base.clone(),
            c: c.to_vec(),
        });
        let field = self.fields.as_ref().map(|f| {
            Arc::new(MemberField {
                name: format!("X[{c:?}]"),
                fields: f.clone(),
                base: self.base.clone(),
                c: c.to_vec(),
            }) as Arc<dyn Field>
        });
        Slicing::new(&format!("{}[{c:?}]", self.name), alpha, field)
    }

    /// Residual of `α_c` at `x` for the joint sample `(x, c)`.
    pub fn residual_at(&self, z: &dyn Field, xc: &[f64]) -> Result<Vec<f64>> {
        let m = self.base.dim();
        let img = self.family.eval(xc)?;
        let full = best_jacobian(self.family.as_ref(), xc)?;
        let j = full.columns(0, m).into_owned();
        let zv = z.eval(&img)?;
        let xv = match &self.fields {
            Some(f) => f.eval(xc)?,
            None => linalg::least_squares(&j, &zv, "family member (not an immersion)")?.0,
        };
        Ok(sub(&mat_vec(&j, &xv), &zv))
    }

    /// `ᾱ⁻¹(p)`, from the declared inverse or by Newton from the seeds.
    pub fn invert(&self, p: &[f64], seeds: &NewtonSeeds) -> Result<Vec<f64>> {
        match &self.inverse {
            Some(inv) => inv.eval(p),
            None => newton_invert(self.family.as_ref(), p, seeds),
        }
    }

    /// Grid rows `(params, base point, image)` for plotting.
    pub fn grid_csv(&self, plan: &SamplePlan) -> Result<String> {
        let pts = plan.points(self.family.source())?;
        let m = self.base.dim();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header: Vec<String> = self.params.coords().to_vec();
        header.extend(self.base.coords().iter().cloned());
        header.extend(self.phase_space().coords().iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::Io(e.to_string()))?;
        for xc in pts {
            let img = match self.family.eval(&xc) {
                Ok(v) => v,
                Err(_) => continue,
            };
            let row: Vec<String> = xc[m..]
                .iter()
                .chain(&xc[..m])
                .chain(&img)
                .map(|v| v.to_string())
                .collect();
            w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct MemberMap {
    name: String,
    family: Arc<dyn Map>,
    base: Arc<CoordinateSpace>,
    c: Vec<f64>,
}

impl MemberMap {
    fn joint(&self, x: &[f64]) -> Vec<f64> {
        x.iter().chain(&self.c).copied().collect()
    }
}

impl Map for MemberMap {
    fn name(&self) -> &str {
        &self.name
    }
    fn source(&self) -> &Arc<CoordinateSpace> {
        &self.base
    }
    fn target(&self) -> &Arc<CoordinateSpace> {
        self.family.target()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.family.eval(&self.joint(x))
    }
    fn supports_dual(&self) -> bool {
        self.family.supports_dual()
    }
    fn eval_dual(&self, x: &[Dual]) -> Result<Vec<Dual>> {
        let joint: Vec<Dual> = x
            .iter()
            .copied()
            .chain(self.c.iter().map(|&c| Dual::new(c, 0.0)))
            .collect();
        self.family.eval_dual(&joint)
    }
}

#[derive(Debug, Clone)]
struct MemberField {
    name: String,
    fields: Arc<dyn Map>,
    base: Arc<CoordinateSpace>,
    c: Vec<f64>,
}

impl Field for MemberField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        &self.base
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let joint: Vec<f64> = x.iter().chain(&self.c).copied().collect();
        self.fields.eval(&joint)
    }
}

/// Forward images of a coarse grid, used to start Newton inversion.
#[derive(Debug, Clone, Default)]
pub struct NewtonSeeds {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl NewtonSeeds {
    /// Images of about `count` grid nodes of the plan bounds.
    pub fn from_grid(family: &dyn Map, bounds: Option<Vec<(f64, f64)>>, count: usize) -> Self {
        let mut plan = SamplePlan::grid(count);
        plan.bounds = bounds;
        let pairs = plan
            .points(family.source())
            .unwrap_or_default()
            .into_iter()
            .filter_map(|y| family.eval(&y).ok().map(|img| (y, img)))
            .collect();
        NewtonSeeds { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Damped Gauss–Newton for `ᾱ(y) = p`, started at the seed whose image is
/// nearest to `p`.
pub fn newton_invert(family: &dyn Map, p: &[f64], seeds: &NewtonSeeds) -> Result<Vec<f64>> {
    let target = family.target();
    let (mut y, mut img) = seeds
        .pairs
        .iter()
        .min_by(|a, b| {
            target
                .distance(&a.1, p)
                .total_cmp(&target.distance(&b.1, p))
        })
        .cloned()
        .ok_or_else(|| Error::precondition("Newton inversion", "no seed point is in the domain"))?;
    let mut res = target.distance(&img, p);
    for _ in 0..NEWTON_MAX_ITERATIONS {
        if res <= NEWTON_TOLERANCE {
            let mut out = y;
            family.source().canonicalize(&mut out);
            return Ok(out);
        }
        let j = best_jacobian(family, &y)?;
        let rhs = DVector::from_vec(target.difference(p, &img));
        let step = j
            .clone()
            .svd(true, true)
            .solve(
                &rhs,
                1e-12 * linalg::singular_values(&j).first().copied().unwrap_or(1.0),
            )
            .map_err(|e| Error::Singular {
                context: "Newton step".into(),
                detail: e.to_string(),
            })?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = y
                .iter()
                .zip(step.iter())
                .map(|(a, d)| a + lambda * d)
                .collect();
            if let Ok(ti) = family.eval(&trial) {
                let tr = target.distance(&ti, p);
                if tr < res {
                    y = trial;
                    img = ti;
                    res = tr;
                    improved = true;
                    break;
                }
            }
            lambda /= 2.0;
        }
        if !improved {
            break;
        }
    }
    if res <= NEWTON_TOLERANCE {
        family.source().canonicalize(&mut y);
        return Ok(y);
    }
    Err(Error::NewtonDivergence {
        iterations: NEWTON_MAX_ITERATIONS,
        residual: res,
    })
}

/// Slicing residual of every member at the plan's `(x, c)` samples, plus a
/// sampled coverage fraction of the phase space.
pub fn check_complete_slicing(
    cs: &CompleteSlicing,
    z: &dyn Field,
    plan: &SamplePlan,
    coverage: Option<&SamplePlan>,
    tolerance: f64,
) -> Result<CheckReport> {
    require_target(cs.family.as_ref(), z, "check_complete_slicing")?;
    let points = plan.points(cs.family.source())?;
    let samples = evaluate_samples(&points, |xc| {
        let r = cs.residual_at(z, xc)?;
        Ok(Sample::with_value(linalg::norm(&r), r))
    });
    let mut report = CheckReport::new("complete-slicing", z.name(), tolerance, samples);
    report.note(format!("family `{}`", cs.name));

    if let Some(cov) = coverage {
        let seeds = NewtonSeeds::from_grid(cs.family.as_ref(), plan.bounds.clone(), 4096);
        let targets = cov.points(cs.phase_space())?;
        let hits: Vec<(bool, f64)> = {
            use rayon::prelude::*;
            targets
                .par_iter()
                .map(|p| match cs.invert(p, &seeds) {
                    Ok(y) if cs.family.source().contains(&y) => match cs.family.eval(&y) {
                        Ok(img) => {
                            let d = cs.phase_space().distance(&img, p);
                            (d <= INVERSE, d)
                        }
                        Err(_) => (false, f64::INFINITY),
                    },
                    _ => (false, f64::INFINITY),
                })
                .collect()
        };
        let covered = hits.iter().filter(|h| h.0).count();
        let fraction = if targets.is_empty() {
            0.0
        } else {
            covered as f64 / targets.len() as f64
        };
        report.metric("coverage", fraction);
        report.note(format!(
            "coverage {covered}/{} sampled phase-space points (heuristic, not a proof of surjectivity)",
            targets.len()
        ));
        if cs.inverse.is_some() {
            let worst = hits
                .iter()
                .filter(|h| h.1.is_finite())
                .map(|h| h.1)
                .fold(0.0, f64::max);
            report.metric("inverse_defect", worst);
        }
    }
    if let Some(inv) = &cs.inverse {
        // ᾱ⁻¹ ∘ ᾱ = id on the family samples
        let mut worst: f64 = 0.0;
        for xc in &points {
            if let Ok(img) = cs.family.eval(xc) {
                if let Ok(back) = inv.eval(&img) {
                    worst = worst.max(cs.family.source().distance(&back, xc));
                }
            }
        }
        report.metric("left_inverse_defect", worst);
        if worst > INVERSE {
            report.note(format!(
                "declared inverse is inconsistent: defect {worst:e}"
            ));
        }
    }
    Ok(report)
}

/// `F = pr₂ ∘ ᾱ⁻¹`, symbolic when the inverse is, Newton-based otherwise.
#[derive(Debug, Clone)]
pub struct ConstantFromFamily {
    name: String,
    cs: Arc<CompleteSlicing>,
    seeds: Arc<NewtonSeeds>,
    /// Source is the phase space, so `pr₂ ∘ ᾱ⁻¹` is read off `ᾱ⁻¹` directly.
    inverse_block: Option<SmoothMap>,
}

impl ConstantFromFamily {
    fn project(&self, y: Vec<f64>) -> Vec<f64> {
        let mut c = y[self.cs.base.dim()..].to_vec();
        self.cs.params.canonicalize(&mut c);
        c
    }
}

impl Map for ConstantFromFamily {
    fn name(&self) -> &str {
        &self.name
    }
    fn source(&self) -> &Arc<CoordinateSpace> {
        self.cs.phase_space()
    }
    fn target(&self) -> &Arc<CoordinateSpace> {
        &self.cs.params
    }
    fn eval(&self, p: &[f64]) -> Result<Vec<f64>> {
        if let Some(b) = &self.inverse_block {
            return b.eval(p);
        }
        let y = self.cs.invert(p, &self.seeds)?;
        Ok(self.project(y))
    }
    fn supports_dual(&self) -> bool {
        self.inverse_block.is_some()
    }
    fn eval_dual(&self, p: &[Dual]) -> Result<Vec<Dual>> {
        match &self.inverse_block {
            Some(b) => b.eval_dual(p),
            None => Err(Error::precondition(
                "dual evaluation",
                format!("`{}` is evaluated by Newton inversion", self.name),
            )),
        }
    }
    fn as_smooth(&self) -> Option<&SmoothMap> {
        self.inverse_block.as_ref()
    }
}

/// The constant of the motion of a complete slicing and its verification.
pub fn constant_from_complete(
    cs: Arc<CompleteSlicing>,
    sys: &DynamicalSystem,
    plan: &SamplePlan,
    mode: ConstantMode,
    tolerance: f64,
) -> Result<(Arc<ConstantFromFamily>, CheckReport)> {
    let inverse_block = match cs.inverse.as_ref().and_then(|i| i.as_smooth()) {
        Some(inv) => Some(SmoothMap::from_expressions(
            &format!("pr2∘{}", inv.name()),
            cs.phase_space().clone(),
            cs.params.clone(),
            inv.components()[cs.base.dim()..].to_vec(),
        )?),
        None => None,
    };
    let seeds = if cs.inverse.is_none() {
        NewtonSeeds::from_grid(cs.family.as_ref(), None, 4096)
    } else {
        NewtonSeeds::default()
    };
    let f = Arc::new(ConstantFromFamily {
        name: format!("pr2∘{}⁻¹", cs.name),
        cs: cs.clone(),
        seeds: Arc::new(seeds),
        inverse_block,
    });
    let mut report = check_constant_of_motion(sys, f.as_ref(), plan, mode, tolerance)?;
    report.check = "constant-from-complete".into();
    if cs.inverse.is_none() {
        report.note("F evaluated by Newton inversion of the family");
    }
    Ok((f, report))
}

/// Fixed-step RK4 flow from a transversal, `ᾱ(t, s) = Φ_t(σ(s))`. The step
/// count is fixed per map so `ᾱ` is a smooth function of `(t, s)`, and dual
/// numbers pass through the integrator when the field and `σ` allow it.
#[derive(Debug, Clone)]
pub struct FlowMap {
    name: String,
    source: Arc<CoordinateSpace>,
    field: Arc<dyn Field>,
    transversal: Arc<dyn Map>,
    steps: usize,
}

fn rk4_fixed<T: Scalar>(
    f: impl Fn(&[T]) -> Result<Vec<T>>,
    mut y: Vec<T>,
    t: T,
    steps: usize,
) -> Result<Vec<T>> {
    let h = t / T::constant(steps as f64);
    let half = h / T::constant(2.0);
    let shift =
        |y: &[T], k: &[T], c: T| -> Vec<T> { y.iter().zip(k).map(|(&a, &b)| a + c * b).collect() };
    for _ in 0..steps {
        let k1 = f(&y)?;
        let k2 = f(&shift(&y, &k1, half))?;
        let k3 = f(&shift(&y, &k2, half))?;
        let k4 = f(&shift(&y, &k3, h))?;
        let two = T::constant(2.0);
        let six = T::constant(6.0);
        y = (0..y.len())
            .map(|i| y[i] + h * (k1[i] + two * k2[i] + two * k3[i] + k4[i]) / six)
            .collect();
    }
    Ok(y)
}

impl Map for FlowMap {
    fn name(&self) -> &str {
        &self.name
    }
    fn source(&self) -> &Arc<CoordinateSpace> {
        &self.source
    }
    fn target(&self) -> &Arc<CoordinateSpace> {
        self.field.space()
    }
    fn eval(&self, ts: &[f64]) -> Result<Vec<f64>> {
        self.source.check(ts)?;
        let y0 = self.transversal.eval(&ts[1..])?;
        let mut y = rk4_fixed(|y: &[f64]| self.field.eval(y), y0, ts[0], self.steps)?;
        self.field.space().canonicalize(&mut y);
        Ok(y)
    }
    fn supports_dual(&self) -> bool {
        self.field.supports_dual() && self.transversal.supports_dual()
    }
    fn eval_dual(&self, ts: &[Dual]) -> Result<Vec<Dual>> {
        let re: Vec<f64> = ts.iter().map(|d| d.re).collect();
        self.source.check(&re)?;
        let y0 = self.transversal.eval_dual(&ts[1..])?;
        rk4_fixed(|y: &[Dual]| self.field.eval_dual(y), y0, ts[0], self.steps)
    }
}

const MAX_FLOW_STEPS: usize = 1 << 16;

/// `‖∂_t ᾱ − Z(ᾱ)‖` at `(t, s)`.
fn flow_defect(flow: &FlowMap, ts: &[f64]) -> Result<f64> {
    let j = best_jacobian(flow, ts)?;
    let zv = flow.field.eval(&flow.eval(ts)?)?;
    let dt: Vec<f64> = j.column(0).iter().copied().collect();
    Ok(linalg::norm(&sub(&dt, &zv)))
}

/// Flow-box family through a hypersurface transversal to `Z`.
pub fn straighten_local(
    sys: &DynamicalSystem,
    transversal: Arc<dyn Map>,
    t_range: (f64, f64),
    plan: &SamplePlan,
    tolerance: f64,
) -> Result<CompleteSlicing> {
    let p = sys.space();
    if transversal.target().coords() != p.coords() {
        return Err(Error::precondition(
            "straighten_local",
            format!(
                "transversal `{}` must map into `{}`",
                transversal.name(),
                p.name()
            ),
        ));
    }
    let n = transversal.source().clone();
    if n.dim() + 1 != p.dim() {
        return Err(Error::precondition(
            "straighten_local",
            format!(
                "transversal must be a hypersurface (dimension {})",
                p.dim() - 1
            ),
        ));
    }
    if !(t_range.0 < t_range.1) || !(tolerance > 0.0) {
        return Err(Error::precondition(
            "straighten_local",
            "need t_min < t_max and a positive tolerance",
        ));
    }
    for s in plan.points(&n)? {
        let z0 = transversal.eval(&s)?;
        let zv = sys.eval(&z0)?;
        if linalg::norm(&zv) < CRITICAL {
            return Err(Error::precondition(
                "straighten_local",
                format!("Z vanishes at σ({s:?}) = {z0:?}: not a noncritical point"),
            ));
        }
        let j = best_jacobian(transversal.as_ref(), &s)?;
        let mut stacked = DMatrix::zeros(p.dim(), p.dim());
        stacked.view_mut((0, 0), (p.dim(), n.dim())).copy_from(&j);
        stacked.set_column(n.dim(), &DVector::from_vec(zv));
        if linalg::rank(&stacked) < p.dim() {
            return Err(Error::precondition(
                "straighten_local",
                format!("Z is not transversal to the hypersurface at σ({s:?})"),
            ));
        }
    }
    let tname = ["t", "t_flow", "t__"]
        .into_iter()
        .find(|c| !n.coords().iter().any(|x| x == c))
        .expect("three distinct names cannot all be taken by a hypersurface chart");
    let time = Arc::new(CoordinateSpace::new("T", &[tname])?.with_bounds(vec![t_range])?);
    let source = Arc::new(CoordinateSpace::product(
        &format!("T×{}", n.name()),
        &time,
        &n,
    )?);
    let span = t_range.0.abs().max(t_range.1.abs());
    // RK4 defects scale like h⁴; start coarse and predict the step count
    let fine = ((span / (0.5 * tolerance.powf(0.25))).ceil() as usize).max(1);
    let mut flow = FlowMap {
        name: format!("flow∘{}", transversal.name()),
        source: source.clone(),
        field: sys.field().clone(),
        transversal,
        steps: fine.div_ceil(16),
    };
    // refine until the family solves the slicing equation at the probes
    let probes: Vec<Vec<f64>> = plan
        .points(&n)?
        .into_iter()
        .flat_map(|s| {
            (0..=4).map(move |k| {
                let t = t_range.0 + (t_range.1 - t_range.0) * k as f64 / 4.0;
                std::iter::once(t).chain(s.iter().copied()).collect()
            })
        })
        .collect();
    loop {
        let defects = probes
            .par_iter()
            .map(|p| flow_defect(&flow, p))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>();
        // a coarse grid may step out of the domain; only the fine grid's errors count
        let worst = match defects {
            Ok(d) => d.into_iter().fold(0.0, f64::max),
            Err(e) if flow.steps >= fine => return Err(e),
            Err(_) => f64::INFINITY,
        };
        let target = 0.5 * tolerance;
        if worst <= target {
            break;
        }
        if flow.steps >= MAX_FLOW_STEPS {
            return Err(Error::precondition(
                "straighten_local",
                format!(
                    "flow defect {worst:.3e} exceeds the tolerance at {} RK4 steps",
                    flow.steps
                ),
            ));
        }
        let predicted = (flow.steps as f64 * 1.2 * (worst / target).powf(0.25)).ceil();
        flow.steps = if predicted.is_finite() && predicted > flow.steps as f64 {
            (predicted as usize)
                .min(16 * flow.steps)
                .min(MAX_FLOW_STEPS)
        } else {
            (2 * flow.steps).min(MAX_FLOW_STEPS)
        };
    }
    let unit = CoordinateSpace::new("TX", &["dt"])?;
    let fields = SmoothMap::new("d/dt", source, Arc::new(unit), &["1"])?;
    CompleteSlicing::new(
        &format!("straightened({})", sys.name()),
        time,
        n,
        Arc::new(flow),
        None,
        Some(Arc::new(fields)),
    )
}

/// `(φ*X)(x') = J_φ(x')⁻¹ X(φ(x'))`.
#[derive(Debug, Clone)]
pub struct PulledBackField {
    name: String,
    phi: Arc<dyn Map>,
    x: Arc<dyn Field>,
}

impl Field for PulledBackField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        self.phi.source()
    }
    fn eval(&self, xp: &[f64]) -> Result<Vec<f64>> {
        let j = best_jacobian(self.phi.as_ref(), xp)?;
        let v = self.x.eval(&self.phi.eval(xp)?)?;
        linalg::solve(&j, &v, "gauge map Jacobian")
    }
}

/// `(M', α∘φ, φ*X)` for a diffeomorphism `φ: M' → M`.
pub fn gauge_transform(s: &Slicing, phi: Arc<dyn Map>) -> Result<Slicing> {
    if phi.target().coords() != s.source().coords() || phi.source().dim() != phi.target().dim() {
        return Err(Error::precondition(
            "gauge_transform",
            format!(
                "`{}` must be a map between spaces of equal dimension onto `{}`",
                phi.name(),
                s.source().name()
            ),
        ));
    }
    let x = s.field.clone().ok_or_else(|| {
        Error::precondition("gauge_transform", "the slicing has no declared field X")
    })?;
    let alpha: Arc<dyn Map> = match (s.alpha.as_smooth(), phi.as_smooth()) {
        (Some(a), Some(p)) => Arc::new(a.compose(p)?),
        _ => Arc::new(crate::geometry::ComposedMap::new(
            s.alpha.clone(),
            phi.clone(),
        )?),
    };
    let field = PulledBackField {
        name: format!("{}*{}", phi.name(), x.name()),
        phi,
        x,
    };
    Slicing::new(&format!("{}∘φ", s.name), alpha, Some(Arc::new(field)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VectorField;
    use std::f64::consts::PI;

    fn plane() -> Arc<CoordinateSpace> {
        Arc::new(
            CoordinateSpace::new("P", &["z1", "z2"])
                .unwrap()
                .with_constraint("z1^2 + z2^2 > 0")
                .unwrap(),
        )
    }

    fn radial() -> Arc<VectorField> {
        Arc::new(VectorField::new("radial", plane(), &["z1", "z2"]).unwrap())
    }

    fn line() -> Arc<CoordinateSpace> {
        Arc::new(CoordinateSpace::new("M", &["x"]).unwrap())
    }

    fn radial_member(u: f64) -> Slicing {
        let a = SmoothMap::new(
            "alpha_u",
            line(),
            plane(),
            &[format!("exp(x)*cos({u})"), format!("exp(x)*sin({u})")],
        )
        .unwrap();
        let x = VectorField::new("d/dx", line(), &["1"]).unwrap();
        Slicing::new("radial", Arc::new(a), Some(Arc::new(x))).unwrap()
    }

    #[test]
    fn radial_members_are_slicings() {
        for u in [0.0, 1.0, 2.5, -2.0] {
            let s = radial_member(u);
            for x in [-1.0, 0.0, 0.7] {
                let r = slicing_residual(&s, radial().as_ref(), &[x]).unwrap();
                assert!(linalg::norm(&r) < 1e-14);
            }
        }
    }

    #[test]
    fn plane_in_r3_and_zero_fields() {
        let r3 = Arc::new(CoordinateSpace::new("R3", &["x", "y", "z"]).unwrap());
        let uv = Arc::new(CoordinateSpace::new("M", &["u", "v"]).unwrap());
        let a = SmoothMap::new("a", uv.clone(), r3.clone(), &["u", "0", "v"]).unwrap();
        let x = VectorField::new("du", uv.clone(), &["1", "0"]).unwrap();
        let z = VectorField::new("dx", r3.clone(), &["1", "0", "0"]).unwrap();
        let s = Slicing::new("s", Arc::new(a.clone()), Some(Arc::new(x))).unwrap();
        assert_eq!(slicing_residual(&s, &z, &[0.2, 3.0]).unwrap(), vec![0.0; 3]);
        let s0 = Slicing::new("s0", Arc::new(a), Some(Arc::new(VectorField::zero(uv)))).unwrap();
        let z0 = VectorField::zero(r3);
        assert_eq!(
            slicing_residual(&s0, &z0, &[1.0, 1.0]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn missing_field_needs_an_immersion() {
        let r3 = Arc::new(CoordinateSpace::new("R3", &["x", "y", "z"]).unwrap());
        let z = VectorField::new("dx", r3.clone(), &["1", "0", "0"]).unwrap();
        let a = SmoothMap::new("cusp", line(), r3, &["x^2", "x^3", "0"]).unwrap();
        let s = Slicing::new("s", Arc::new(a), None).unwrap();
        assert!(matches!(
            slicing_residual(&s, &z, &[0.0]),
            Err(Error::RankDeficient { .. })
        ));
        assert!(slicing_residual(&s, &z, &[1.0]).is_ok());
    }

    fn free_particle() -> (Arc<CoordinateSpace>, Arc<VectorField>, Arc<FibredStructure>) {
        let p = Arc::new(CoordinateSpace::new("T*R", &["q", "p"]).unwrap());
        let z = Arc::new(VectorField::new("Z", p.clone(), &["p", "0"]).unwrap());
        let fib = Arc::new(FibredStructure::adapted_projection("pi", p.clone(), "Q", 1).unwrap());
        (p, z, fib)
    }

    #[test]
    fn fibred_free_particle() {
        let (p, z, fib) = free_particle();
        let q = fib.base().clone();
        let dw = SmoothMap::new("dW", q.clone(), p.clone(), &["q", "0.7"]).unwrap();
        assert_eq!(
            induced_slicing_field(&fib, &dw, z.as_ref(), &[2.0]).unwrap(),
            vec![0.7]
        );
        let plan = SamplePlan::random(20, 0);
        assert!(check_fibred_slicing(&fib, &dw, z.as_ref(), &plan, 1e-8)
            .unwrap()
            .passed());
        let bad = SmoothMap::new("a", q, p, &["q", "q"]).unwrap();
        let r = check_fibred_slicing(&fib, &bad, z.as_ref(), &plan, 1e-8).unwrap();
        assert!(!r.passed());
        assert!(r.metrics["vertical_defect"] <= VERTICALITY);
    }

    #[test]
    fn non_section_is_rejected() {
        let (p, z, fib) = free_particle();
        let a = SmoothMap::new("a", fib.base().clone(), p, &["2*q", "0"]).unwrap();
        assert!(matches!(
            induced_slicing_field(&fib, &a, z.as_ref(), &[1.0]),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn vertical_field_induces_zero() {
        let (p, _, fib) = free_particle();
        let z = VectorField::new("V", p.clone(), &["0", "q"]).unwrap();
        let a = SmoothMap::new("a", fib.base().clone(), p, &["q", "q^2"]).unwrap();
        assert_eq!(
            induced_slicing_field(&fib, &a, &z, &[0.3]).unwrap(),
            vec![0.0]
        );
    }

    fn radial_family() -> CompleteSlicing {
        let u = Arc::new(
            CoordinateSpace::new("N", &["u"])
                .unwrap()
                .with_period("u", 2.0 * PI)
                .unwrap(),
        );
        let mn = Arc::new(
            CoordinateSpace::product("MxN", &line(), &u)
                .unwrap()
                .with_bounds(vec![(-1.0, 1.0), (0.0, 2.0 * PI)])
                .unwrap(),
        );
        let fam = SmoothMap::new(
            "abar",
            mn.clone(),
            plane(),
            &["exp(x)*cos(u)", "exp(x)*sin(u)"],
        )
        .unwrap();
        let inv = SmoothMap::new(
            "abar_inv",
            plane(),
            mn.clone(),
            &["ln(sqrt(z1^2 + z2^2))", "atan2(z2, z1)"],
        )
        .unwrap();
        let tm = Arc::new(CoordinateSpace::new("TM", &["dx"]).unwrap());
        let fields = SmoothMap::new("X", mn, tm, &["1"]).unwrap();
        CompleteSlicing::new(
            "radial",
            line(),
            u,
            Arc::new(fam),
            Some(Arc::new(inv)),
            Some(Arc::new(fields)),
        )
        .unwrap()
    }

    #[test]
    fn radial_complete_slicing_and_constant() {
        let cs = Arc::new(radial_family());
        let z = radial();
        let plan = SamplePlan::random(40, 0);
        let cov = SamplePlan::random(40, 1).with_bounds(vec![(-2.0, 2.0), (-2.0, 2.0)]);
        let r = check_complete_slicing(&cs, z.as_ref(), &plan, Some(&cov), 1e-10).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.metrics["coverage"], 1.0);
        assert!(r.metrics["left_inverse_defect"] < 1e-12);
        let sys = DynamicalSystem::new("radial", z);
        let (f, rep) = constant_from_complete(
            cs,
            &sys,
            &SamplePlan::random(30, 2),
            ConstantMode::Infinitesimal,
            1e-10,
        )
        .unwrap();
        assert!(rep.passed(), "{rep}");
        let c = f.eval(&[0.0, 2.0]).unwrap();
        assert!((c[0] - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn newton_inverse_without_declared_inverse() {
        let full = radial_family();
        let cs = Arc::new(
            CompleteSlicing::new(
                "radial-newton",
                full.base().clone(),
                full.params().clone(),
                full.family().clone(),
                None,
                None,
            )
            .unwrap(),
        );
        let sys = DynamicalSystem::new("radial", radial());
        let plan = SamplePlan::random(10, 4).with_bounds(vec![(-2.0, 2.0), (-2.0, 2.0)]);
        let (f, rep) =
            constant_from_complete(cs, &sys, &plan, ConstantMode::Infinitesimal, 1e-7).unwrap();
        assert!(rep.passed(), "{rep}");
        let c = f.eval(&[-1.0, -1.0]).unwrap();
        assert!((c[0] - 1.25 * PI).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn planar_family_has_no_coverage() {
        let r3 = Arc::new(CoordinateSpace::new("R3", &["x", "y", "z"]).unwrap());
        let z = VectorField::new("dx", r3.clone(), &["1", "0", "0"]).unwrap();
        let c = Arc::new(CoordinateSpace::new("N", &["c"]).unwrap());
        let mn = Arc::new(CoordinateSpace::product("MxN", &line(), &c).unwrap());
        let fam = SmoothMap::new("abar", mn, r3, &["x", "c", "0"]).unwrap();
        let cs = CompleteSlicing::new("plane", line(), c, Arc::new(fam), None, None).unwrap();
        let r = check_complete_slicing(
            &cs,
            &z,
            &SamplePlan::random(20, 0),
            Some(&SamplePlan::random(50, 5)),
            1e-8,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.metrics["coverage"], 0.0);
    }

    #[test]
    fn straightening_the_radial_field() {
        let circle = Arc::new(
            CoordinateSpace::new("S", &["u"])
                .unwrap()
                .with_bounds(vec![(0.0, 2.0 * PI)])
                .unwrap(),
        );
        let sigma = SmoothMap::new("sigma", circle, plane(), &["cos(u)", "sin(u)"]).unwrap();
        let sys = DynamicalSystem::new("radial", radial());
        let plan = SamplePlan::random(10, 0);
        let cs = straighten_local(&sys, Arc::new(sigma), (-1.0, 1.0), &plan, 1e-10).unwrap();
        let p = cs.family().eval(&[0.8, 1.1]).unwrap();
        assert!((p[0] - 0.8f64.exp() * 1.1f64.cos()).abs() < 1e-10);
        let r = check_complete_slicing(&cs, radial().as_ref(), &plan, None, 1e-9).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn straightening_rejects_critical_points() {
        let r3 = Arc::new(CoordinateSpace::new("R3", &["x", "y", "z"]).unwrap());
        let z = VectorField::zero(r3.clone());
        let uv = Arc::new(CoordinateSpace::new("N", &["u", "v"]).unwrap());
        let sigma = SmoothMap::new("sigma", uv, r3, &["0", "u", "v"]).unwrap();
        let sys = DynamicalSystem::new("zero", Arc::new(z));
        assert!(matches!(
            straighten_local(
                &sys,
                Arc::new(sigma),
                (0.0, 1.0),
                &SamplePlan::random(5, 0),
                1e-10
            ),
            Err(Error::Precondition { .. })
        ));
    }

    #[test]
    fn gauge_examples() {
        let s = radial_member(0.4);
        let id = Arc::new(SmoothMap::identity(line()));
        let g = gauge_transform(&s, id).unwrap();
        assert_eq!(g.field().unwrap().eval(&[0.3]).unwrap(), vec![1.0]);
        let line2 = Arc::new(CoordinateSpace::new("M'", &["xp"]).unwrap());
        let double = Arc::new(SmoothMap::new("phi", line2.clone(), line(), &["2*xp"]).unwrap());
        let g = gauge_transform(&s, double).unwrap();
        assert_eq!(g.field().unwrap().eval(&[0.3]).unwrap(), vec![0.5]);
        let r = slicing_residual(&g, radial().as_ref(), &[0.3]).unwrap();
        assert!(linalg::norm(&r) < 1e-14);
        let cube = Arc::new(SmoothMap::new("phi", line2, line(), &["xp^3"]).unwrap());
        let g = gauge_transform(&s, cube).unwrap();
        assert!(matches!(
            g.field().unwrap().eval(&[0.0]),
            Err(Error::Singular { .. })
        ));
    }
}
