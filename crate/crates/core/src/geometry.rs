//! Coordinate spaces, smooth maps, vector and two-tensor fields.
//!
//! Every manifold is modelled as a single chart: an open region of ℝⁿ cut
//! out by strict inequalities, with optional periodic coordinates.
//! Submanifolds only appear as images of explicit maps.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expr::{BinaryOp, Dual, Expression, Function, Node, Scalar};
use crate::linalg;
use crate::tolerances::{DOMAIN_MARGIN, FD_STEP, SKEW};

#[derive(Debug, Clone, PartialEq)]
struct Constraint {
    text: String,
    /// Satisfied when strictly above the domain margin.
    slack: Expression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSpace {
    name: String,
    coords: Vec<String>,
    periods: Vec<Option<f64>>,
    constraints: Vec<Constraint>,
    bounds: Option<Vec<(f64, f64)>>,
}

fn valid_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && Function::from_name(s).is_none()
}

impl CoordinateSpace {
    pub fn new<S: AsRef<str>>(name: &str, coords: &[S]) -> Result<Self> {
        let coords: Vec<String> = coords.iter().map(|c| c.as_ref().to_string()).collect();
        if coords.is_empty() {
            return Err(Error::definition(format!(
                "space `{name}` has no coordinates"
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            if !valid_identifier(c) {
                return Err(Error::definition(format!(
                    "space `{name}`: `{c}` is not a valid coordinate name"
                )));
            }
            if coords[..i].contains(c) {
                return Err(Error::definition(format!(
                    "space `{name}`: duplicate coordinate `{c}`"
                )));
            }
        }
        Ok(CoordinateSpace {
            name: name.to_string(),
            periods: vec![None; coords.len()],
            coords,
            constraints: Vec::new(),
            bounds: None,
        })
    }

    pub fn with_period(mut self, coord: &str, period: f64) -> Result<Self> {
        let i = self.index_of(coord)?;
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::definition(format!(
                "space `{}`: period of `{coord}` must be positive",
                self.name
            )));
        }
        self.periods[i] = Some(period);
        Ok(self)
    }

    /// Adds a strict inequality `lhs > rhs` or `lhs < rhs`.
    pub fn with_constraint(mut self, text: &str) -> Result<Self> {
        let (op_pos, greater) = match (text.find('>'), text.find('<')) {
            (Some(p), None) => (p, true),
            (None, Some(p)) => (p, false),
            _ => {
                return Err(Error::definition(format!(
                    "domain constraint `{text}` must contain exactly one of `>` or `<`"
                )))
            }
        };
        let lhs = Expression::parse(&text[..op_pos], &self.coords)?;
        let rhs = Expression::parse(&text[op_pos + 1..], &self.coords)?;
        let (a, b) = if greater { (lhs, rhs) } else { (rhs, lhs) };
        let slack = Expression::from_node(
            Node::Binary(
                BinaryOp::Sub,
                Box::new(a.root().clone()),
                Box::new(b.root().clone()),
            ),
            &self.coords,
        );
        self.constraints.push(Constraint {
            text: text.trim().to_string(),
            slack,
        });
        Ok(self)
    }

    /// Sampling box used by default plans over this space.
    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.len() != self.dim() {
            return Err(Error::dimension("space bounds", self.dim(), bounds.len()));
        }
        if bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::definition(format!(
                "space `{}`: bounds must satisfy lo <= hi",
                self.name
            )));
        }
        self.bounds = Some(bounds);
        Ok(self)
    }

    /// The product `a × b`, coordinates of `a` first.
    pub fn product(name: &str, a: &CoordinateSpace, b: &CoordinateSpace) -> Result<Self> {
        let coords: Vec<String> = a.coords.iter().chain(&b.coords).cloned().collect();
        let mut out = CoordinateSpace::new(name, &coords)?;
        out.periods = a.periods.iter().chain(&b.periods).copied().collect();
        for c in a.constraints.iter().chain(&b.constraints) {
            out.constraints.push(Constraint {
                text: c.text.clone(),
                slack: c.slack.rebind(&coords)?,
            });
        }
        out.bounds = match (&a.bounds, &b.bounds) {
            (Some(x), Some(y)) => Some(x.iter().chain(y).copied().collect()),
            _ => None,
        };
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[String] {
        &self.coords
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.periods
    }

    pub fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    pub fn constraint_texts(&self) -> Vec<&str> {
        self.constraints.iter().map(|c| c.text.as_str()).collect()
    }

    pub fn index_of(&self, coord: &str) -> Result<usize> {
        self.coords
            .iter()
            .position(|c| c == coord)
            .ok_or_else(|| Error::Unknown {
                kind: format!("coordinate of space `{}`", self.name),
                name: coord.to_string(),
            })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::dimension(
                &format!("point of space `{}`", self.name),
                self.dim(),
                x.len(),
            ));
        }
        let outside = |reason: String| Error::OutOfDomain {
            space: self.name.clone(),
            point: x.to_vec(),
            reason,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(outside("non-finite coordinate".into()));
        }
        for c in &self.constraints {
            match c.slack.eval(x) {
                Ok(s) if s > DOMAIN_MARGIN => {}
                Ok(_) => return Err(outside(format!("violates `{}`", c.text))),
                Err(e) => return Err(outside(format!("`{}` undefined: {e}", c.text))),
            }
        }
        Ok(())
    }

    /// Wraps periodic coordinates into `[0, period)`.
    pub fn canonicalize(&self, x: &mut [f64]) {
        for (v, p) in x.iter_mut().zip(&self.periods) {
            if let Some(p) = p {
                *v = v.rem_euclid(*p);
                if *v >= *p {
                    *v = 0.0;
                }
            }
        }
    }

    /// `a − b`, with periodic components reduced to `[−p/2, p/2)`.
    pub fn difference(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&self.periods)
            .map(|((x, y), p)| match p {
                Some(p) => (x - y + p / 2.0).rem_euclid(*p) - p / 2.0,
                None => x - y,
            })
            .collect()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        linalg::norm(&self.difference(a, b))
    }

    /// Validated point with canonical periodic coordinates.
    pub fn point(&self, coords: &[f64]) -> Result<Point> {
        let mut c = coords.to_vec();
        self.canonicalize(&mut c);
        self.check(&c)?;
        Ok(Point {
            space: self.name.clone(),
            coords: c,
        })
    }

    /// Binds a coordinate slice to names, for [`Expression::evaluate`].
    pub fn bindings(&self, x: &[f64]) -> HashMap<String, f64> {
        self.coords.iter().cloned().zip(x.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    space: String,
    coords: Vec<f64>,
}

impl Point {
    pub fn space(&self) -> &str {
        &self.space
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

impl std::ops::Deref for Point {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.coords
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffMode {
    Dual,
    FiniteDifference,
}

/// A map between coordinate spaces.
pub trait Map: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn source(&self) -> &Arc<CoordinateSpace>;
    fn target(&self) -> &Arc<CoordinateSpace>;
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>>;

    fn supports_dual(&self) -> bool {
        false
    }

    /// Evaluation on dual numbers; available when [`Map::supports_dual`].
    fn eval_dual(&self, _x: &[Dual]) -> Result<Vec<Dual>> {
        Err(Error::precondition(
            "dual evaluation",
            format!(
                "map `{}` is only differentiable by finite differences",
                self.name()
            ),
        ))
    }

    fn jacobian_dual(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.source().dim();
        if x.len() != n {
            return Err(Error::dimension("jacobian point", n, x.len()));
        }
        let mut jac = DMatrix::zeros(self.target().dim(), n);
        let mut seeded: Vec<Dual> = x.iter().map(|&a| Dual::new(a, 0.0)).collect();
        for i in 0..n {
            seeded[i].eps = 1.0;
            for (k, v) in self.eval_dual(&seeded)?.iter().enumerate() {
                jac[(k, i)] = v.eps;
            }
            seeded[i].eps = 0.0;
        }
        Ok(jac)
    }

    /// Expression components, when the map is declared symbolically.
    fn as_smooth(&self) -> Option<&SmoothMap> {
        None
    }
}

/// `(target-dim × source-dim)` Jacobian at `x`.
pub fn jacobian(f: &dyn Map, x: &[f64], mode: DiffMode) -> Result<DMatrix<f64>> {
    match mode {
        DiffMode::Dual => f.jacobian_dual(x),
        DiffMode::FiniteDifference => fd_jacobian(f, x),
    }
}

/// Dual mode when available, finite differences otherwise.
pub fn best_jacobian(f: &dyn Map, x: &[f64]) -> Result<DMatrix<f64>> {
    if f.supports_dual() {
        f.jacobian_dual(x)
    } else {
        fd_jacobian(f, x)
    }
}

/// Central differences with `h_i = 1e-5 · max(1, |x_i|)`; differences of
/// periodic target coordinates are taken modulo the period.
pub fn fd_jacobian(f: &dyn Map, x: &[f64]) -> Result<DMatrix<f64>> {
    let n = f.source().dim();
    if x.len() != n {
        return Err(Error::dimension("jacobian point", n, x.len()));
    }
    let m = f.target().dim();
    let mut jac = DMatrix::zeros(m, n);
    let mut probe = x.to_vec();
    for i in 0..n {
        let h = FD_STEP * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let plus = f.eval(&probe)?;
        probe[i] = x[i] - h;
        let minus = f.eval(&probe)?;
        probe[i] = x[i];
        let diff = f.target().difference(&plus, &minus);
        for k in 0..m {
            jac[(k, i)] = diff[k] / (2.0 * h);
        }
    }
    Ok(jac)
}

/// `J_f(x) · v`.
pub fn pushforward(f: &dyn Map, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let j = best_jacobian(f, x)?;
    if v.len() != j.ncols() {
        return Err(Error::dimension("pushforward vector", j.ncols(), v.len()));
    }
    Ok(linalg::to_vec(&(j * DVector::from_column_slice(v))))
}

/// Matrix of `α*(ω)` at `x`, namely `Jᵀ Ω(α(x)) J`.
pub fn pullback_two_form(
    alpha: &dyn Map,
    omega: &BilinearFormField,
    x: &[f64],
) -> Result<DMatrix<f64>> {
    if alpha.target().dim() != omega.space().dim() {
        return Err(Error::dimension(
            "pullback target",
            omega.space().dim(),
            alpha.target().dim(),
        ));
    }
    let z = alpha.eval(x)?;
    let j = best_jacobian(alpha, x)?;
    let w = omega.eval(&z)?;
    Ok(j.transpose() * w * j)
}

/// `H(α(x))` and the differential `d(α*H)(x) = Jᵀ ∇H(α(x))`.
pub fn pullback_function(alpha: &dyn Map, h: &Expression, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let z = alpha.eval(x)?;
    let value = h.eval(&z)?;
    let grad = h.gradient(&z)?;
    let j = best_jacobian(alpha, x)?;
    let d = j.transpose() * DVector::from_vec(grad);
    Ok((value, linalg::to_vec(&d)))
}

/// Map given by one expression per target coordinate, over the source
/// coordinates.
#[derive(Debug, Clone)]
pub struct SmoothMap {
    name: String,
    source: Arc<CoordinateSpace>,
    target: Arc<CoordinateSpace>,
    components: Vec<Expression>,
}

impl SmoothMap {
    pub fn new<S: AsRef<str>>(
        name: &str,
        source: Arc<CoordinateSpace>,
        target: Arc<CoordinateSpace>,
        components: &[S],
    ) -> Result<Self> {
        let exprs = components
            .iter()
            .map(|c| Expression::parse(c.as_ref(), source.coords()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_expressions(name, source, target, exprs)
    }

    pub fn from_expressions(
        name: &str,
        source: Arc<CoordinateSpace>,
        target: Arc<CoordinateSpace>,
        components: Vec<Expression>,
    ) -> Result<Self> {
        if components.len() != target.dim() {
            return Err(Error::dimension(
                &format!("components of map `{name}`"),
                target.dim(),
                components.len(),
            ));
        }
        for c in &components {
            if c.variables() != source.coords() {
                return Err(Error::definition(format!(
                    "map `{name}`: components must be expressed over the coordinates of `{}`",
                    source.name()
                )));
            }
        }
        Ok(SmoothMap {
            name: name.to_string(),
            source,
            target,
            components,
        })
    }

    pub fn identity(space: Arc<CoordinateSpace>) -> Self {
        let comps = (0..space.dim())
            .map(|i| Expression::from_node(Node::Var(i), space.coords()))
            .collect();
        SmoothMap {
            name: format!("id_{}", space.name()),
            source: space.clone(),
            target: space,
            components: comps,
        }
    }

    pub fn components(&self) -> &[Expression] {
        &self.components
    }

    /// `self ∘ inner` by substitution, so the result is still dual-differentiable.
    pub fn compose(&self, inner: &SmoothMap) -> Result<SmoothMap> {
        if inner.target.dim() != self.source.dim() {
            return Err(Error::dimension(
                "composition",
                self.source.dim(),
                inner.target.dim(),
            ));
        }
        let comps = self
            .components
            .iter()
            .map(|c| c.substitute(&inner.components))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(SmoothMap {
            name: format!("{}∘{}", self.name, inner.name),
            source: inner.source.clone(),
            target: self.target.clone(),
            components: comps,
        })
    }

    /// Components evaluated over any scalar type, without domain checks.
    pub fn eval_generic<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        self.components
            .iter()
            .map(|c| c.eval_generic(x).map_err(Error::from))
            .collect()
    }

    /// Values and `J(x)·v` in one dual pass.
    pub fn directional(&self, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.source.check(x)?;
        if v.len() != x.len() {
            return Err(Error::dimension("direction", x.len(), v.len()));
        }
        let seeded: Vec<Dual> = x.iter().zip(v).map(|(&a, &d)| Dual::new(a, d)).collect();
        let out = self.eval_generic(&seeded)?;
        Ok((
            out.iter().map(|d| d.re).collect(),
            out.iter().map(|d| d.eps).collect(),
        ))
    }
}

impl Map for SmoothMap {
    fn name(&self) -> &str {
        &self.name
    }
    fn source(&self) -> &Arc<CoordinateSpace> {
        &self.source
    }
    fn target(&self) -> &Arc<CoordinateSpace> {
        &self.target
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.source.check(x)?;
        self.eval_generic(x)
    }
    fn supports_dual(&self) -> bool {
        true
    }
    fn eval_dual(&self, x: &[Dual]) -> Result<Vec<Dual>> {
        let re: Vec<f64> = x.iter().map(|d| d.re).collect();
        self.source.check(&re)?;
        self.eval_generic(x)
    }
    fn jacobian_dual(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.source.check(x)?;
        let n = x.len();
        let mut jac = DMatrix::zeros(self.target.dim(), n);
        let mut seeded: Vec<Dual> = x.iter().map(|&a| Dual::new(a, 0.0)).collect();
        for i in 0..n {
            seeded[i].eps = 1.0;
            for (k, c) in self.components.iter().enumerate() {
                jac[(k, i)] = c.eval_generic(&seeded)?.eps;
            }
            seeded[i].eps = 0.0;
        }
        Ok(jac)
    }
    fn as_smooth(&self) -> Option<&SmoothMap> {
        Some(self)
    }
}

/// `outer ∘ inner` for maps that are not both symbolic.
#[derive(Debug, Clone)]
pub struct ComposedMap {
    name: String,
    outer: Arc<dyn Map>,
    inner: Arc<dyn Map>,
}

impl ComposedMap {
    pub fn new(outer: Arc<dyn Map>, inner: Arc<dyn Map>) -> Result<Self> {
        if inner.target().dim() != outer.source().dim() {
            return Err(Error::dimension(
                "composition",
                outer.source().dim(),
                inner.target().dim(),
            ));
        }
        Ok(ComposedMap {
            name: format!("{}∘{}", outer.name(), inner.name()),
            outer,
            inner,
        })
    }
}

impl Map for ComposedMap {
    fn name(&self) -> &str {
        &self.name
    }
    fn source(&self) -> &Arc<CoordinateSpace> {
        self.inner.source()
    }
    fn target(&self) -> &Arc<CoordinateSpace> {
        self.outer.target()
    }
    fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.outer.eval(&self.inner.eval(x)?)
    }
    fn supports_dual(&self) -> bool {
        self.outer.supports_dual() && self.inner.supports_dual()
    }
    fn eval_dual(&self, x: &[Dual]) -> Result<Vec<Dual>> {
        self.outer.eval_dual(&self.inner.eval_dual(x)?)
    }
    fn jacobian_dual(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let y = self.inner.eval(x)?;
        Ok(self.outer.jacobian_dual(&y)? * self.inner.jacobian_dual(x)?)
    }
}

/// A vector field on a coordinate space.
pub trait Field: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn space(&self) -> &Arc<CoordinateSpace>;
    fn eval(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn supports_dual(&self) -> bool {
        false
    }

    fn eval_dual(&self, _z: &[Dual]) -> Result<Vec<Dual>> {
        Err(Error::precondition(
            "dual evaluation",
            format!("field `{}` has no dual-number evaluation", self.name()),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct VectorField {
    name: String,
    space: Arc<CoordinateSpace>,
    components: Vec<Expression>,
}

impl VectorField {
    pub fn new<S: AsRef<str>>(
        name: &str,
        space: Arc<CoordinateSpace>,
        components: &[S],
    ) -> Result<Self> {
        if components.len() != space.dim() {
            return Err(Error::dimension(
                &format!("components of field `{name}`"),
                space.dim(),
                components.len(),
            ));
        }
        let components = components
            .iter()
            .map(|c| Expression::parse(c.as_ref(), space.coords()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(VectorField {
            name: name.to_string(),
            space,
            components,
        })
    }

    pub fn zero(space: Arc<CoordinateSpace>) -> Self {
        let components = vec![Expression::constant(0.0, space.coords()); space.dim()];
        VectorField {
            name: "0".into(),
            space,
            components,
        }
    }

    pub fn components(&self) -> &[Expression] {
        &self.components
    }
}

impl Field for VectorField {
    fn name(&self) -> &str {
        &self.name
    }
    fn space(&self) -> &Arc<CoordinateSpace> {
        &self.space
    }
    fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.space.check(z)?;
        self.components
            .iter()
            .map(|c| c.eval(z).map_err(Error::from))
            .collect()
    }
    fn supports_dual(&self) -> bool {
        true
    }
    fn eval_dual(&self, z: &[Dual]) -> Result<Vec<Dual>> {
        let re: Vec<f64> = z.iter().map(|d| d.re).collect();
        self.space.check(&re)?;
        self.components
            .iter()
            .map(|c| c.eval_generic(z).map_err(Error::from))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormKind {
    /// Matrix `(ω_kℓ)` of `ω = ½ ω_kℓ dz^k ∧ dz^ℓ`.
    Symplectic,
    /// Matrix `(Λ^ij)` of a bivector, `{f, g} = Λ^ij ∂_i f ∂_j g`.
    Poisson,
}

/// Point-dependent square matrix of expressions.
#[derive(Debug, Clone)]
pub struct BilinearFormField {
    name: String,
    space: Arc<CoordinateSpace>,
    entries: Vec<Vec<Expression>>,
    kind: FormKind,
}

impl BilinearFormField {
    pub fn new<S: AsRef<str>>(
        name: &str,
        space: Arc<CoordinateSpace>,
        rows: &[Vec<S>],
        kind: FormKind,
    ) -> Result<Self> {
        let n = space.dim();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(Error::definition(format!(
                "form `{name}` must be a {n}×{n} matrix"
            )));
        }
        let entries = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|e| Expression::parse(e.as_ref(), space.coords()))
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BilinearFormField {
            name: name.to_string(),
            space,
            entries,
            kind,
        })
    }

    pub fn constant(
        name: &str,
        space: Arc<CoordinateSpace>,
        matrix: &DMatrix<f64>,
        kind: FormKind,
    ) -> Result<Self> {
        let n = space.dim();
        if matrix.shape() != (n, n) {
            return Err(Error::dimension("constant form", n, matrix.nrows()));
        }
        let entries = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| Expression::constant(matrix[(i, j)], space.coords()))
                    .collect()
            })
            .collect();
        Ok(BilinearFormField {
            name: name.to_string(),
            space,
            entries,
            kind,
        })
    }

    /// `ω = Σ dq_i ∧ dp_i` for the given `(q, p)` coordinate pairs.
    pub fn canonical(
        name: &str,
        space: Arc<CoordinateSpace>,
        pairs: &[(usize, usize)],
    ) -> Result<Self> {
        let n = space.dim();
        let mut m = DMatrix::zeros(n, n);
        for &(q, p) in pairs {
            if q >= n || p >= n || q == p {
                return Err(Error::definition(format!(
                    "canonical form `{name}`: invalid pair ({q}, {p})"
                )));
            }
            m[(q, p)] = 1.0;
            m[(p, q)] = -1.0;
        }
        Self::constant(name, space, &m, FormKind::Symplectic)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn space(&self) -> &Arc<CoordinateSpace> {
        &self.space
    }

    pub fn kind(&self) -> FormKind {
        self.kind
    }

    pub fn entries(&self) -> &[Vec<Expression>] {
        &self.entries
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().flatten().all(Expression::is_constant)
    }

    pub fn eval(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.space.check(z)?;
        let n = self.space.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.entries[i][j].eval(z)?;
            }
        }
        Ok(m)
    }

    /// Row-major entries over any scalar type.
    pub fn eval_generic<T: Scalar>(&self, z: &[T]) -> Result<Vec<Vec<T>>> {
        self.entries
            .iter()
            .map(|row| {
                row.iter()
                    .map(|e| e.eval_generic(z).map_err(Error::from))
                    .collect()
            })
            .collect()
    }

    /// `∂_k` of the matrix, for each coordinate `k`.
    pub fn partials(&self, z: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.space.check(z)?;
        let n = self.space.dim();
        let mut out = Vec::with_capacity(n);
        let mut seeded: Vec<Dual> = z.iter().map(|&a| Dual::new(a, 0.0)).collect();
        for k in 0..n {
            seeded[k].eps = 1.0;
            let vals = self.eval_generic(&seeded)?;
            out.push(DMatrix::from_fn(n, n, |i, j| vals[i][j].eps));
            seeded[k].eps = 0.0;
        }
        Ok(out)
    }

    /// `max |A + Aᵀ|` at `z`.
    pub fn skew_defect(&self, z: &[f64]) -> Result<f64> {
        let m = self.eval(z)?;
        Ok(linalg::max_abs(&(&m + m.transpose())))
    }

    pub fn is_skew_at(&self, z: &[f64]) -> Result<bool> {
        Ok(self.skew_defect(z)? <= SKEW)
    }

    /// `max |∂_k ω_ℓm + ∂_ℓ ω_mk + ∂_m ω_kℓ|` at `z` (closedness of `ω`).
    pub fn closedness_defect(&self, z: &[f64]) -> Result<f64> {
        if self.is_constant() {
            return Ok(0.0);
        }
        let d = self.partials(z)?;
        let n = self.space.dim();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            for l in 0..n {
                for m in 0..n {
                    let c = d[k][(l, m)] + d[l][(m, k)] + d[m][(k, l)];
                    worst = worst.max(c.abs());
                }
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane() -> Arc<CoordinateSpace> {
        Arc::new(CoordinateSpace::new("R2", &["x", "y"]).unwrap())
    }

    #[test]
    fn domain_constraint_excludes_origin() {
        let p = CoordinateSpace::new("P", &["x", "y"])
            .unwrap()
            .with_constraint("x^2 + y^2 > 0")
            .unwrap();
        assert!(p.contains(&[1.0, 0.0]));
        assert!(!p.contains(&[0.0, 0.0]));
        assert!(!p.contains(&[1e-7, 0.0]));
        let q = CoordinateSpace::new("Q", &["q"])
            .unwrap()
            .with_constraint("q^2 < 1")
            .unwrap();
        assert!(q.contains(&[0.5]) && !q.contains(&[1.5]));
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        assert!(CoordinateSpace::new("P", &["x", "x"]).is_err());
        assert!(CoordinateSpace::new("P", &["sin"]).is_err());
        assert!(CoordinateSpace::new::<&str>("P", &[]).is_err());
        let p = CoordinateSpace::new("P", &["x"]).unwrap();
        assert!(p.clone().with_constraint("x").is_err());
        assert!(p.with_period("x", -1.0).is_err());
    }

    #[test]
    fn periodic_canonicalization_and_difference() {
        let t = CoordinateSpace::new("T", &["x", "y"])
            .unwrap()
            .with_period("x", 1.0)
            .unwrap();
        let p = t.point(&[2.25, 3.0]).unwrap();
        assert_eq!(p.coords(), &[0.25, 3.0]);
        let p = t.point(&[-0.25, 0.0]).unwrap();
        assert_eq!(p.coords(), &[0.75, 0.0]);
        let d = t.difference(&[0.95, 1.0], &[0.05, 0.0]);
        assert!((d[0] + 0.1).abs() < 1e-12 && d[1] == 1.0);
    }

    #[test]
    fn identity_jacobian() {
        let id = SmoothMap::identity(plane());
        let j = jacobian(&id, &[0.3, -2.0], DiffMode::Dual).unwrap();
        assert_eq!(j, DMatrix::identity(2, 2));
        assert_eq!(
            pushforward(&id, &[0.3, -2.0], &[4.0, 5.0]).unwrap(),
            vec![4.0, 5.0]
        );
    }

    #[test]
    fn radial_family_jacobian_at_origin_of_parameters() {
        let m = Arc::new(CoordinateSpace::new("MxN", &["x", "u"]).unwrap());
        let f = SmoothMap::new("abar", m, plane(), &["exp(x)*cos(u)", "exp(x)*sin(u)"]).unwrap();
        let j = jacobian(&f, &[0.0, 0.0], DiffMode::Dual).unwrap();
        assert_eq!(j, DMatrix::identity(2, 2));
    }

    #[test]
    fn radial_member_pushes_forward_to_radial_vector() {
        let line = Arc::new(CoordinateSpace::new("M", &["x"]).unwrap());
        let (c, s) = (0.6, 0.8);
        let a = SmoothMap::new(
            "alpha_u",
            line,
            plane(),
            &[format!("exp(x)*{c}"), format!("exp(x)*{s}")],
        )
        .unwrap();
        let x: f64 = 0.7;
        let v = pushforward(&a, &[x], &[1.0]).unwrap();
        let img = a.eval(&[x]).unwrap();
        assert!((v[0] - img[0]).abs() < 1e-15 && (v[1] - img[1]).abs() < 1e-15);
        assert!((img[0] - x.exp() * c).abs() < 1e-15);
    }

    #[test]
    fn linear_map_pushforward() {
        let f = SmoothMap::new("A", plane(), plane(), &["2*x - y", "3*y"]).unwrap();
        assert_eq!(
            pushforward(&f, &[1.0, 1.0], &[1.0, 2.0]).unwrap(),
            vec![0.0, 6.0]
        );
    }

    #[test]
    fn pullback_to_a_line_vanishes() {
        let line = Arc::new(CoordinateSpace::new("Q", &["q"]).unwrap());
        let a = SmoothMap::new("alpha", line, plane(), &["q", "sin(q) + q^3"]).unwrap();
        let w = BilinearFormField::canonical("w", plane(), &[(0, 1)]).unwrap();
        let pb = pullback_two_form(&a, &w, &[0.4]).unwrap();
        assert_eq!(pb.shape(), (1, 1));
        assert_eq!(pb[(0, 0)], 0.0);
    }

    #[test]
    fn isotropic_plane_in_r4() {
        let p = Arc::new(CoordinateSpace::new("P", &["x", "px", "y", "py"]).unwrap());
        let m = Arc::new(CoordinateSpace::new("M", &["u", "v"]).unwrap());
        let a = SmoothMap::new("alpha", m, p.clone(), &["u", "0", "v", "0"]).unwrap();
        let w = BilinearFormField::canonical("w", p, &[(0, 1), (2, 3)]).unwrap();
        let pb = pullback_two_form(&a, &w, &[0.3, 1.1]).unwrap();
        assert_eq!(pb, DMatrix::zeros(2, 2));
    }

    #[test]
    fn pullback_function_examples() {
        let p = Arc::new(CoordinateSpace::new("P", &["x", "px", "y", "py"]).unwrap());
        let m = Arc::new(
            CoordinateSpace::new("M", &["x"])
                .unwrap()
                .with_constraint("x^2 < 1")
                .unwrap(),
        );
        let a = SmoothMap::new(
            "alpha",
            m,
            p.clone(),
            &["x", "x", "sqrt(1 - x^2)", "sqrt(1 - x^2)"],
        )
        .unwrap();
        let h = Expression::parse("(x^2 + px^2 + y^2 + py^2)/2", p.coords()).unwrap();
        let (v, d) = pullback_function(&a, &h, &[0.3]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(d[0].abs() < 1e-15);

        let r3 = Arc::new(CoordinateSpace::new("P", &["x", "y", "z"]).unwrap());
        let uv = Arc::new(CoordinateSpace::new("M", &["u", "v"]).unwrap());
        let a = SmoothMap::new("alpha", uv, r3.clone(), &["u", "v", "0"]).unwrap();
        let f = Expression::parse("z", r3.coords()).unwrap();
        let (v, d) = pullback_function(&a, &f, &[1.0, -3.0]).unwrap();
        assert_eq!((v, d), (0.0, vec![0.0, 0.0]));

        let c = Expression::parse("7", r3.coords()).unwrap();
        assert_eq!(
            pullback_function(&a, &c, &[1.0, 2.0]).unwrap().1,
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn composition_by_substitution_matches_chain_rule() {
        let f = SmoothMap::new("f", plane(), plane(), &["x*y", "sin(x) + y^2"]).unwrap();
        let g = SmoothMap::new("g", plane(), plane(), &["exp(x) - y", "x*y^3"]).unwrap();
        let gf = g.compose(&f).unwrap();
        let x = [0.4, -0.9];
        let direct = gf.jacobian_dual(&x).unwrap();
        let chained = g.jacobian_dual(&f.eval(&x).unwrap()).unwrap() * f.jacobian_dual(&x).unwrap();
        assert!(linalg::max_abs(&(direct - chained)) < 1e-12);
    }

    #[test]
    fn fd_jacobian_respects_periodic_targets() {
        let circle = Arc::new(
            CoordinateSpace::new("S1", &["u"])
                .unwrap()
                .with_period("u", 2.0 * std::f64::consts::PI)
                .unwrap(),
        );
        let p = Arc::new(
            CoordinateSpace::new("P", &["x", "y"])
                .unwrap()
                .with_constraint("x^2 + y^2 > 0")
                .unwrap(),
        );
        let angle = SmoothMap::new("angle", p, circle, &["atan2(y, x)"]).unwrap();
        // across the branch cut of atan2
        let x = [-1.0, 0.0];
        let fd = fd_jacobian(&angle, &x).unwrap();
        assert!((fd[(0, 1)] + 1.0).abs() < 1e-8, "{fd}");
    }

    #[test]
    fn canonical_form_is_skew_and_closed() {
        let p = Arc::new(CoordinateSpace::new("P", &["q", "p"]).unwrap());
        let w = BilinearFormField::canonical("w", p, &[(0, 1)]).unwrap();
        let m = w.eval(&[0.0, 0.0]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert!(w.is_skew_at(&[1.0, 2.0]).unwrap());
        assert_eq!(w.closedness_defect(&[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn non_closed_form_is_detected() {
        let r3 = Arc::new(CoordinateSpace::new("P", &["x", "y", "z"]).unwrap());
        // ω = z dx∧dy has dω = dz∧dx∧dy ≠ 0
        let w = BilinearFormField::new(
            "w",
            r3,
            &[
                vec!["0", "z", "0"],
                vec!["-z", "0", "0"],
                vec!["0", "0", "0"],
            ],
            FormKind::Symplectic,
        )
        .unwrap();
        assert!((w.closedness_defect(&[0.1, 0.2, 0.3]).unwrap() - 1.0).abs() < 1e-15);
    }
}
