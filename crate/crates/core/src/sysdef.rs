//! Declarative system definitions (TOML) and the objects they build.
//!
//! ```toml
//! [[space]]
//! name = "P"
//! coords = ["x", "y"]
//! domain = ["x^2 + y^2 > 0"]
//! bounds = [[-2, 2], [-2, 2]]
//!
//! [[field]]
//! name = "Z"
//! space = "P"
//! components = ["x", "y"]
//! ```
//!
//! Vector fields share one namespace: declared `[[field]]`s, the Hamiltonian
//! field of every `[[structure]]` and the reconstructed field of every
//! `[[sode]]` are all looked up by name.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicalSystem, SamplePlan};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::geometry::{
    BilinearFormField, CoordinateSpace, Field, FormKind, Map, SmoothMap, VectorField,
};
use crate::poisson::PoissonSystem;
use crate::slicing::{CompleteSlicing, FibredStructure, Slicing};
use crate::sode::{ReconstructedSode, TangentBundleSpace};
use crate::symplectic::{Bracket, SymplecticSystem};
use crate::tolerances::SKEW;

/// A number written either as a literal or as a constant expression
/// such as `"2*pi"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Number {
    Value(f64),
    Expr(String),
}

impl Number {
    pub fn value(&self) -> Result<f64> {
        match self {
            Number::Value(v) => Ok(*v),
            Number::Expr(s) => {
                let none: [&str; 0] = [];
                Ok(Expression::parse(s, &none)?.eval(&[])?)
            }
        }
    }
}

impl From<f64> for Number {
    fn from(v: f64) -> Self {
        Number::Value(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub id: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub title: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coords: Vec<String>,
    /// Two earlier spaces whose product this space is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub periods: BTreeMap<String, Number>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub domain: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[Number; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDef {
    pub name: String,
    pub space: String,
    pub components: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormKindDef {
    Symplectic,
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormDef {
    pub name: String,
    pub space: String,
    pub kind: FormKindDef,
    /// Matrix entries, one expression per entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<String>>>,
    /// `(q, p)` coordinate pairs of `Σ dq ∧ dp` (symplectic only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<Vec<[String; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDef {
    pub name: String,
    pub source: String,
    pub target: String,
    pub components: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDef {
    pub name: String,
    pub form: String,
    pub hamiltonian: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicingDef {
    pub name: String,
    pub map: String,
    /// The field `X` on the source of `map`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteDef {
    pub name: String,
    pub base: String,
    pub params: String,
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FibrationDef {
    pub name: String,
    pub projection: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SodeDef {
    pub name: String,
    pub space: String,
    pub constants: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Pass,
    Fail,
    Error,
}

impl std::fmt::Display for Expectation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Expectation::Pass => "pass",
            Expectation::Fail => "fail",
            Expectation::Error => "error",
        })
    }
}

/// One operation with its arguments and, optionally, the verdict it should
/// reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub label: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slicing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fibration: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<String>,
    /// `infinitesimal` (default) or `integral`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `random` (default) or `grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[Number; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_samples: Option<usize>,
    /// Lower bound the maximum residual must reach (for expected failures
    /// that must fail by a margin).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_residual: Option<f64>,
    /// Required `[lo, hi]` ranges of report metrics.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, [f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
    #[serde(default, rename = "space", skip_serializing_if = "Vec::is_empty")]
    pub spaces: Vec<SpaceDef>,
    #[serde(default, rename = "form", skip_serializing_if = "Vec::is_empty")]
    pub forms: Vec<FormDef>,
    #[serde(default, rename = "field", skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldDef>,
    #[serde(default, rename = "map", skip_serializing_if = "Vec::is_empty")]
    pub maps: Vec<MapDef>,
    #[serde(default, rename = "structure", skip_serializing_if = "Vec::is_empty")]
    pub structures: Vec<StructureDef>,
    #[serde(default, rename = "slicing", skip_serializing_if = "Vec::is_empty")]
    pub slicings: Vec<SlicingDef>,
    #[serde(default, rename = "complete", skip_serializing_if = "Vec::is_empty")]
    pub completes: Vec<CompleteDef>,
    #[serde(default, rename = "fibration", skip_serializing_if = "Vec::is_empty")]
    pub fibrations: Vec<FibrationDef>,
    #[serde(default, rename = "sode", skip_serializing_if = "Vec::is_empty")]
    pub sodes: Vec<SodeDef>,
    #[serde(default, rename = "check", skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckSpec>,
}

impl SystemFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::definition(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone)]
pub enum Structure {
    Symplectic(Arc<SymplecticSystem>),
    Poisson(Arc<PoissonSystem>),
}

impl Structure {
    pub fn name(&self) -> &str {
        match self {
            Structure::Symplectic(s) => s.name(),
            Structure::Poisson(p) => p.name(),
        }
    }

    pub fn bracket(&self) -> &dyn Bracket {
        match self {
            Structure::Symplectic(s) => s.as_ref(),
            Structure::Poisson(p) => p.as_ref(),
        }
    }

    pub fn hamiltonian_field(&self) -> Arc<dyn Field> {
        match self {
            Structure::Symplectic(s) => Arc::new(s.hamiltonian_field()),
            Structure::Poisson(p) => Arc::new(p.hamiltonian_field()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sode {
    pub bundle: Arc<TangentBundleSpace>,
    pub constants: Vec<Expression>,
    pub field: Arc<ReconstructedSode>,
}

/// Every object of a [`SystemFile`], constructed and validated.
#[derive(Debug, Clone)]
pub struct Model {
    file: SystemFile,
    spaces: BTreeMap<String, Arc<CoordinateSpace>>,
    forms: BTreeMap<String, Arc<BilinearFormField>>,
    maps: BTreeMap<String, Arc<SmoothMap>>,
    fields: BTreeMap<String, Arc<dyn Field>>,
    structures: BTreeMap<String, Structure>,
    sodes: BTreeMap<String, Sode>,
    slicings: BTreeMap<String, Arc<Slicing>>,
    completes: BTreeMap<String, Arc<CompleteSlicing>>,
    fibrations: BTreeMap<String, Arc<FibredStructure>>,
}

fn lookup<'a, T>(table: &'a BTreeMap<String, T>, kind: &str, name: &str) -> Result<&'a T> {
    table.get(name).ok_or_else(|| Error::Unknown {
        kind: kind.to_string(),
        name: name.to_string(),
    })
}

fn insert_unique<T>(table: &mut BTreeMap<String, T>, kind: &str, name: &str, v: T) -> Result<()> {
    if table.insert(name.to_string(), v).is_some() {
        return Err(Error::definition(format!("duplicate {kind} `{name}`")));
    }
    Ok(())
}

pub(crate) fn resolve_bounds(bounds: &[[Number; 2]]) -> Result<Vec<(f64, f64)>> {
    bounds
        .iter()
        .map(|[lo, hi]| Ok((lo.value()?, hi.value()?)))
        .collect()
}

fn build_space(
    def: &SpaceDef,
    known: &BTreeMap<String, Arc<CoordinateSpace>>,
) -> Result<CoordinateSpace> {
    let mut space = match (&def.product, def.coords.is_empty()) {
        (Some([a, b]), true) => CoordinateSpace::product(
            &def.name,
            lookup(known, "space", a)?,
            lookup(known, "space", b)?,
        )?,
        (None, false) => CoordinateSpace::new(&def.name, &def.coords)?,
        _ => {
            return Err(Error::definition(format!(
                "space `{}` needs exactly one of `coords` or `product`",
                def.name
            )))
        }
    };
    for (coord, period) in &def.periods {
        space = space.with_period(coord, period.value()?)?;
    }
    for c in &def.domain {
        space = space.with_constraint(c)?;
    }
    if let Some(b) = &def.bounds {
        space = space.with_bounds(resolve_bounds(b)?)?;
    }
    Ok(space)
}

impl Model {
    pub fn load(file: SystemFile) -> Result<Self> {
        let mut m = Model {
            file: SystemFile::default(),
            spaces: BTreeMap::new(),
            forms: BTreeMap::new(),
            maps: BTreeMap::new(),
            fields: BTreeMap::new(),
            structures: BTreeMap::new(),
            sodes: BTreeMap::new(),
            slicings: BTreeMap::new(),
            completes: BTreeMap::new(),
            fibrations: BTreeMap::new(),
        };
        for d in &file.spaces {
            let s = Arc::new(build_space(d, &m.spaces)?);
            insert_unique(&mut m.spaces, "space", &d.name, s)?;
        }
        for d in &file.forms {
            let f = Arc::new(m.build_form(d)?);
            insert_unique(&mut m.forms, "form", &d.name, f)?;
        }
        for d in &file.fields {
            let space = m.space(&d.space)?.clone();
            let f: Arc<dyn Field> = Arc::new(VectorField::new(&d.name, space, &d.components)?);
            insert_unique(&mut m.fields, "field", &d.name, f)?;
        }
        for d in &file.maps {
            let f = SmoothMap::new(
                &d.name,
                m.space(&d.source)?.clone(),
                m.space(&d.target)?.clone(),
                &d.components,
            )?;
            insert_unique(&mut m.maps, "map", &d.name, Arc::new(f))?;
        }
        for d in &file.structures {
            let s = m.build_structure(d)?;
            let z = s.hamiltonian_field();
            insert_unique(&mut m.structures, "structure", &d.name, s)?;
            insert_unique(&mut m.fields, "field", &d.name, z)?;
        }
        for d in &file.sodes {
            let bundle = Arc::new(TangentBundleSpace::new(m.space(&d.space)?.clone())?);
            let constants = d
                .constants
                .iter()
                .map(|c| Expression::parse(c, bundle.space().coords()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let field = Arc::new(ReconstructedSode::new(&bundle, &constants)?.with_name(&d.name));
            insert_unique(
                &mut m.fields,
                "field",
                &d.name,
                field.clone() as Arc<dyn Field>,
            )?;
            let sode = Sode {
                bundle,
                constants,
                field,
            };
            insert_unique(&mut m.sodes, "sode", &d.name, sode)?;
        }
        for d in &file.slicings {
            let alpha: Arc<dyn Map> = m.map(&d.map)?.clone();
            let x = d
                .field
                .as_deref()
                .map(|f| m.field(f).cloned())
                .transpose()?;
            let s = Slicing::new(&d.name, alpha, x)?;
            insert_unique(&mut m.slicings, "slicing", &d.name, Arc::new(s))?;
        }
        for d in &file.completes {
            let as_map = |n: &Option<String>| -> Result<Option<Arc<dyn Map>>> {
                n.as_deref()
                    .map(|n| m.map(n).map(|f| f.clone() as Arc<dyn Map>))
                    .transpose()
            };
            let cs = CompleteSlicing::new(
                &d.name,
                m.space(&d.base)?.clone(),
                m.space(&d.params)?.clone(),
                m.map(&d.family)?.clone(),
                as_map(&d.inverse)?,
                as_map(&d.fields)?,
            )?;
            insert_unique(&mut m.completes, "complete slicing", &d.name, Arc::new(cs))?;
        }
        for d in &file.fibrations {
            let fib = FibredStructure::new(&d.name, m.map(&d.projection)?.clone(), d.adapted)?;
            insert_unique(&mut m.fibrations, "fibration", &d.name, Arc::new(fib))?;
        }
        m.file = file;
        Ok(m)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::load(SystemFile::from_toml(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::load(SystemFile::from_path(path)?)
    }

    fn build_form(&self, d: &FormDef) -> Result<BilinearFormField> {
        let space = self.space(&d.space)?.clone();
        let kind = match d.kind {
            FormKindDef::Symplectic => FormKind::Symplectic,
            FormKindDef::Poisson => FormKind::Poisson,
        };
        match (&d.rows, &d.canonical) {
            (Some(rows), None) => BilinearFormField::new(&d.name, space, rows, kind),
            (None, Some(pairs)) if kind == FormKind::Symplectic => {
                let pairs = pairs
                    .iter()
                    .map(|[q, p]| Ok((space.index_of(q)?, space.index_of(p)?)))
                    .collect::<Result<Vec<_>>>()?;
                BilinearFormField::canonical(&d.name, space, &pairs)
            }
            (None, Some(_)) => Err(Error::definition(format!(
                "form `{}`: `canonical` applies to symplectic forms only",
                d.name
            ))),
            _ => Err(Error::definition(format!(
                "form `{}` needs exactly one of `rows` or `canonical`",
                d.name
            ))),
        }
    }

    /// Builds the structure and validates its tensor at a few seeded points.
    fn build_structure(&self, d: &StructureDef) -> Result<Structure> {
        let form = self.form(&d.form)?.clone();
        let h = Expression::parse(&d.hamiltonian, form.space().coords())?;
        let plan = SamplePlan::random(16, 0);
        match form.kind() {
            FormKind::Symplectic => {
                let sys = SymplecticSystem::new(&d.name, form, h)?;
                let report = sys.check_structure(&plan)?;
                if !report.passed() {
                    return Err(Error::definition(format!(
                        "structure `{}` is not symplectic at the validation samples (defect {:.3e})",
                        d.name, report.max
                    )));
                }
                Ok(Structure::Symplectic(Arc::new(sys)))
            }
            FormKind::Poisson => {
                let sys = PoissonSystem::new(&d.name, form, h)?;
                let report = sys.check_skew(&plan, SKEW)?;
                if !report.passed() {
                    return Err(Error::definition(format!(
                        "structure `{}`: tensor is not skew at the validation samples (defect {:.3e})",
                        d.name, report.max
                    )));
                }
                Ok(Structure::Poisson(Arc::new(sys)))
            }
        }
    }

    pub fn file(&self) -> &SystemFile {
        &self.file
    }

    pub fn checks(&self) -> &[CheckSpec] {
        &self.file.checks
    }

    pub fn space(&self, name: &str) -> Result<&Arc<CoordinateSpace>> {
        lookup(&self.spaces, "space", name)
    }

    pub fn form(&self, name: &str) -> Result<&Arc<BilinearFormField>> {
        lookup(&self.forms, "form", name)
    }

    pub fn map(&self, name: &str) -> Result<&Arc<SmoothMap>> {
        lookup(&self.maps, "map", name)
    }

    pub fn maps(&self) -> impl Iterator<Item = &Arc<SmoothMap>> {
        self.maps.values()
    }

    pub fn field(&self, name: &str) -> Result<&Arc<dyn Field>> {
        lookup(&self.fields, "field", name)
    }

    pub fn structure(&self, name: &str) -> Result<&Structure> {
        lookup(&self.structures, "structure", name)
    }

    pub fn structures(&self) -> impl Iterator<Item = &Structure> {
        self.structures.values()
    }

    pub fn symplectic(&self, name: &str) -> Result<&Arc<SymplecticSystem>> {
        match self.structure(name)? {
            Structure::Symplectic(s) => Ok(s),
            Structure::Poisson(_) => Err(Error::precondition(
                "symplectic structure",
                format!("`{name}` is a Poisson structure"),
            )),
        }
    }

    pub fn poisson(&self, name: &str) -> Result<&Arc<PoissonSystem>> {
        match self.structure(name)? {
            Structure::Poisson(p) => Ok(p),
            Structure::Symplectic(_) => Err(Error::precondition(
                "poisson structure",
                format!("`{name}` is a symplectic structure"),
            )),
        }
    }

    pub fn sode(&self, name: &str) -> Result<&Sode> {
        lookup(&self.sodes, "sode", name)
    }

    pub fn slicing(&self, name: &str) -> Result<&Arc<Slicing>> {
        lookup(&self.slicings, "slicing", name)
    }

    pub fn complete(&self, name: &str) -> Result<&Arc<CompleteSlicing>> {
        lookup(&self.completes, "complete slicing", name)
    }

    pub fn fibration(&self, name: &str) -> Result<&Arc<FibredStructure>> {
        lookup(&self.fibrations, "fibration", name)
    }

    pub fn dynamical_system(&self, field: &str) -> Result<DynamicalSystem> {
        Ok(DynamicalSystem::new(field, self.field(field)?.clone()))
    }
}
