//! Expression strings: parsing, pretty-printing, evaluation and exact
//! forward-mode differentiation.
//!
//! Every map, field, form and Hamiltonian in a system definition is an
//! [`Expression`] over the coordinate names of some space. Variables are
//! resolved to indices at parse time, so evaluation takes a plain slice of
//! coordinate values. Evaluation is generic over [`Scalar`], which covers
//! `f64`, [`Dual`] and nested duals.

mod dual;
mod parser;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use dual::{Dual, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("domain error in `{subexpression}`: {reason}")]
    Domain {
        subexpression: String,
        reason: String,
    },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("expected {expected} coordinate values, got {actual}")]
    Arity { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Atan2,
}

impl Function {
    pub const ALL: [Function; 8] = [
        Function::Sin,
        Function::Cos,
        Function::Tan,
        Function::Exp,
        Function::Ln,
        Function::Sqrt,
        Function::Abs,
        Function::Atan2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Function::Sin => "sin",
            Function::Cos => "cos",
            Function::Tan => "tan",
            Function::Exp => "exp",
            Function::Ln => "ln",
            Function::Sqrt => "sqrt",
            Function::Abs => "abs",
            Function::Atan2 => "atan2",
        }
    }

    pub fn from_name(name: &str) -> Option<Function> {
        Function::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            Function::Atan2 => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    /// Index into the owning expression's variable list.
    Var(usize),
    Neg(Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
    Call(Function, Vec<Node>),
}

impl Node {
    fn precedence(&self) -> u8 {
        match self {
            Node::Binary(BinaryOp::Add | BinaryOp::Sub, ..) => 1,
            Node::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 2,
            Node::Neg(_) => 3,
            Node::Binary(BinaryOp::Pow, ..) => 4,
            Node::Num(_) | Node::Var(_) | Node::Call(..) => 5,
        }
    }

    fn constant_value(&self) -> Option<f64> {
        match self {
            Node::Num(v) => Some(*v),
            Node::Var(_) => None,
            Node::Neg(a) => a.constant_value().map(|v| -v),
            Node::Binary(op, a, b) => {
                let (a, b) = (a.constant_value()?, b.constant_value()?);
                Some(match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => a / b,
                    BinaryOp::Pow => a.powf(b),
                })
            }
            Node::Call(..) => None,
        }
    }

    fn visit_vars(&self, f: &mut impl FnMut(usize)) {
        match self {
            Node::Num(_) => {}
            Node::Var(i) => f(*i),
            Node::Neg(a) => a.visit_vars(f),
            Node::Binary(_, a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Node::Call(_, args) => args.iter().for_each(|a| a.visit_vars(f)),
        }
    }

    fn map_vars(&self, f: &impl Fn(usize) -> Node) -> Node {
        match self {
            Node::Num(v) => Node::Num(*v),
            Node::Var(i) => f(*i),
            Node::Neg(a) => Node::Neg(Box::new(a.map_vars(f))),
            Node::Binary(op, a, b) => {
                Node::Binary(*op, Box::new(a.map_vars(f)), Box::new(b.map_vars(f)))
            }
            Node::Call(func, args) => {
                Node::Call(*func, args.iter().map(|a| a.map_vars(f)).collect())
            }
        }
    }

    fn write(&self, vars: &[String], out: &mut String) {
        match self {
            Node::Num(v) => out.push_str(&format!("{v}")),
            Node::Var(i) => out.push_str(&vars[*i]),
            Node::Neg(a) => {
                out.push('-');
                a.write_child(vars, out, a.precedence() < 3);
            }
            Node::Binary(op, a, b) => {
                let prec = self.precedence();
                let sym = match op {
                    BinaryOp::Add => " + ",
                    BinaryOp::Sub => " - ",
                    BinaryOp::Mul => " * ",
                    BinaryOp::Div => " / ",
                    BinaryOp::Pow => "^",
                };
                if *op == BinaryOp::Pow {
                    a.write_child(vars, out, a.precedence() <= prec);
                    out.push_str(sym);
                    b.write_child(vars, out, b.precedence() < 3);
                } else {
                    a.write_child(vars, out, a.precedence() < prec);
                    out.push_str(sym);
                    b.write_child(vars, out, b.precedence() <= prec);
                }
            }
            Node::Call(func, args) => {
                out.push_str(func.name());
                out.push('(');
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    a.write(vars, out);
                }
                out.push(')');
            }
        }
    }

    fn write_child(&self, vars: &[String], out: &mut String, parens: bool) {
        if parens {
            out.push('(');
            self.write(vars, out);
            out.push(')');
        } else {
            self.write(vars, out);
        }
    }

    fn eval<T: Scalar>(&self, x: &[T], vars: &[String]) -> Result<T, EvalError> {
        let domain = |reason: String| EvalError::Domain {
            subexpression: {
                let mut s = String::new();
                self.write(vars, &mut s);
                s
            },
            reason,
        };
        let value = match self {
            Node::Num(v) => return Ok(T::constant(*v)),
            Node::Var(i) => return Ok(x[*i]),
            Node::Neg(a) => -a.eval(x, vars)?,
            Node::Binary(op, a, b) => {
                let lhs = a.eval(x, vars)?;
                match op {
                    BinaryOp::Add => lhs + b.eval(x, vars)?,
                    BinaryOp::Sub => lhs - b.eval(x, vars)?,
                    BinaryOp::Mul => lhs * b.eval(x, vars)?,
                    BinaryOp::Div => {
                        let rhs = b.eval(x, vars)?;
                        if rhs.re() == 0.0 {
                            return Err(domain("division by zero".into()));
                        }
                        lhs / rhs
                    }
                    BinaryOp::Pow => match b.constant_value() {
                        Some(c) if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 => {
                            if c < 0.0 && lhs.re() == 0.0 {
                                return Err(domain("zero raised to a negative power".into()));
                            }
                            lhs.powi(c as i32)
                        }
                        Some(c) => {
                            if lhs.re() < 0.0 {
                                return Err(domain(format!(
                                    "negative base {} with non-integer exponent",
                                    lhs.re()
                                )));
                            }
                            lhs.powc(c)
                        }
                        None => {
                            if lhs.re() <= 0.0 {
                                return Err(domain(format!(
                                    "non-positive base {} with variable exponent",
                                    lhs.re()
                                )));
                            }
                            lhs.powf(b.eval(x, vars)?)
                        }
                    },
                }
            }
            Node::Call(func, args) => {
                let a = args[0].eval(x, vars)?;
                match func {
                    Function::Sin => a.sin(),
                    Function::Cos => a.cos(),
                    Function::Tan => a.tan(),
                    Function::Exp => a.exp(),
                    Function::Ln => {
                        if a.re() <= 0.0 {
                            return Err(domain(format!("logarithm of {}", a.re())));
                        }
                        a.ln()
                    }
                    Function::Sqrt => {
                        if a.re() < 0.0 {
                            return Err(domain(format!("square root of {}", a.re())));
                        }
                        a.sqrt()
                    }
                    Function::Abs => a.abs(),
                    Function::Atan2 => {
                        let xarg = args[1].eval(x, vars)?;
                        if a.re() == 0.0 && xarg.re() == 0.0 {
                            return Err(domain("atan2(0, 0)".into()));
                        }
                        a.atan2(xarg)
                    }
                }
            }
        };
        if !value.re().is_finite() {
            return Err(domain(format!("non-finite result {}", value.re())));
        }
        Ok(value)
    }
}

/// Immutable parsed expression over a fixed, ordered list of variable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    root: Node,
    vars: Arc<Vec<String>>,
}

impl Expression {
    /// Parses `text`; every identifier that is not a whitelisted function must
    /// be one of `variables`.
    pub fn parse<S: AsRef<str>>(text: &str, variables: &[S]) -> Result<Self, ParseError> {
        let vars: Vec<String> = variables.iter().map(|s| s.as_ref().to_string()).collect();
        let root = parser::parse(text, &vars)?;
        Ok(Expression {
            root,
            vars: Arc::new(vars),
        })
    }

    pub fn from_node<S: AsRef<str>>(root: Node, variables: &[S]) -> Self {
        Expression {
            root,
            vars: Arc::new(variables.iter().map(|s| s.as_ref().to_string()).collect()),
        }
    }

    pub fn constant<S: AsRef<str>>(value: f64, variables: &[S]) -> Self {
        Self::from_node(Node::Num(value), variables)
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn variables(&self) -> &[String] {
        &self.vars
    }

    /// Indices of the variables the expression actually references.
    pub fn used_variables(&self) -> Vec<usize> {
        let mut used = vec![false; self.vars.len()];
        self.root.visit_vars(&mut |i| used[i] = true);
        used.iter()
            .enumerate()
            .filter_map(|(i, u)| u.then_some(i))
            .collect()
    }

    pub fn is_constant(&self) -> bool {
        self.used_variables().is_empty()
    }

    /// Evaluates with named bindings.
    pub fn evaluate(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        let x = self.bind(bindings)?;
        self.eval(&x)
    }

    /// Evaluates at a coordinate slice ordered like [`Self::variables`].
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.eval_generic(x)
    }

    pub fn eval_generic<T: Scalar>(&self, x: &[T]) -> Result<T, EvalError> {
        if x.len() != self.vars.len() {
            return Err(EvalError::Arity {
                expected: self.vars.len(),
                actual: x.len(),
            });
        }
        self.root.eval(x, &self.vars)
    }

    /// Value and exact directional derivative with named bindings; absent
    /// direction entries count as zero.
    pub fn directional_derivative(
        &self,
        bindings: &HashMap<String, f64>,
        direction: &HashMap<String, f64>,
    ) -> Result<(f64, f64), EvalError> {
        let x = self.bind(bindings)?;
        let v: Vec<f64> = self
            .vars
            .iter()
            .map(|n| direction.get(n).copied().unwrap_or(0.0))
            .collect();
        self.derivative_along(&x, &v)
    }

    /// `(e(x), De(x)·v)` in one dual pass.
    pub fn derivative_along(&self, x: &[f64], v: &[f64]) -> Result<(f64, f64), EvalError> {
        if v.len() != x.len() {
            return Err(EvalError::Arity {
                expected: x.len(),
                actual: v.len(),
            });
        }
        let seeded: Vec<Dual> = x.iter().zip(v).map(|(&a, &d)| Dual::new(a, d)).collect();
        let r = self.eval_generic(&seeded)?;
        Ok((r.re, r.eps))
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.gradient_generic(x)
    }

    /// Gradient over any scalar type, one dual pass per variable.
    pub fn gradient_generic<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>, EvalError> {
        let used = self.used_variables();
        if used.is_empty() {
            // constant expressions still surface their domain errors
            self.eval_generic(x)?;
        }
        let mut grad = vec![T::constant(0.0); x.len()];
        let mut seeded: Vec<Dual<T>> = x.iter().map(|&a| Dual::new(a, T::constant(0.0))).collect();
        for i in used {
            seeded[i].eps = T::constant(1.0);
            grad[i] = self.eval_generic(&seeded)?.eps;
            seeded[i].eps = T::constant(0.0);
        }
        Ok(grad)
    }

    /// Replaces each variable `i` with `replacements[i]`; the result lives over
    /// the replacements' (shared) variable list.
    pub fn substitute(&self, replacements: &[Expression]) -> Result<Expression, EvalError> {
        if replacements.len() != self.vars.len() {
            return Err(EvalError::Arity {
                expected: self.vars.len(),
                actual: replacements.len(),
            });
        }
        let vars = match replacements.first() {
            Some(r) => r.vars.clone(),
            None => Arc::new(Vec::new()),
        };
        if replacements.iter().any(|r| r.vars != vars) {
            return Err(EvalError::Unbound(
                "substitution requires a shared variable list".into(),
            ));
        }
        Ok(Expression {
            root: self.root.map_vars(&|i| replacements[i].root.clone()),
            vars,
        })
    }

    /// Re-expresses over another variable list, matching by name.
    pub fn rebind<S: AsRef<str>>(&self, variables: &[S]) -> Result<Expression, EvalError> {
        let names: Vec<String> = variables.iter().map(|s| s.as_ref().to_string()).collect();
        let mut map = vec![usize::MAX; self.vars.len()];
        for i in self.used_variables() {
            map[i] = names
                .iter()
                .position(|n| *n == self.vars[i])
                .ok_or_else(|| EvalError::Unbound(self.vars[i].clone()))?;
        }
        Ok(Expression {
            root: self.root.map_vars(&|i| Node::Var(map[i])),
            vars: Arc::new(names),
        })
    }

    fn bind(&self, bindings: &HashMap<String, f64>) -> Result<Vec<f64>, EvalError> {
        let used = self.used_variables();
        self.vars
            .iter()
            .enumerate()
            .map(|(i, n)| match bindings.get(n) {
                Some(v) => Ok(*v),
                None if !used.contains(&i) => Ok(0.0),
                None => Err(EvalError::Unbound(n.clone())),
            })
            .collect()
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.root.write(&self.vars, &mut s);
        f.write_str(&s)
    }
}
