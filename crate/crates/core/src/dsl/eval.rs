//! Column-vector evaluator.
//!
//! Lists are dense vectors of `(row, cell)` pairs in ascending row order.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::ast::{ArgKind, BinOp, Expr, ExprKind, Func, Program, Span};
use super::decimal::{Decimal, DecimalError};
use crate::answer::{fold_text, Answer};
use crate::domain::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalErrorKind {
    MissingColumn,
    TypeMismatch,
    DivisionByZero,
    EmptyAggregate,
    UnboundName,
    NumericOverflow,
}

impl fmt::Display for EvalErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EvalErrorKind::MissingColumn => "missing_column",
            EvalErrorKind::TypeMismatch => "type_mismatch",
            EvalErrorKind::DivisionByZero => "division_by_zero",
            EvalErrorKind::EmptyAggregate => "empty_aggregate",
            EvalErrorKind::UnboundName => "unbound_name",
            EvalErrorKind::NumericOverflow => "numeric_overflow",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at {}..{}: {message}", span.start, span.end)]
pub struct EvalError {
    pub kind: EvalErrorKind,
    pub span: Span,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Scalar {
    Num(Decimal),
    Text(String),
    Bool(bool),
}

impl Scalar {
    fn render(&self) -> String {
        match self {
            Scalar::Num(d) => d.to_string(),
            Scalar::Text(s) => s.clone(),
            Scalar::Bool(b) => b.to_string(),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Scalar::Num(_) => "number",
            Scalar::Text(_) => "text",
            Scalar::Bool(_) => "boolean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Scalar(Scalar),
    List(Vec<(usize, Scalar)>),
}

impl Value {
    fn into_answer(self) -> Answer {
        match self {
            Value::Scalar(s) => Answer::new(s.render()),
            Value::List(cells) => {
                let parts: Vec<String> = cells.iter().map(|(_, s)| s.render()).collect();
                Answer::new(parts.join("|"))
            }
        }
    }
}

struct Ctx<'a> {
    table: &'a Table,
    env: HashMap<&'a str, Value>,
}

fn err(kind: EvalErrorKind, span: Span, message: impl Into<String>) -> EvalError {
    EvalError {
        kind,
        span,
        message: message.into(),
    }
}

fn decimal_err(e: DecimalError, span: Span) -> EvalError {
    match e {
        DecimalError::Overflow => err(EvalErrorKind::NumericOverflow, span, "magnitude above 1e20"),
        DecimalError::DivisionByZero => err(EvalErrorKind::DivisionByZero, span, "division by zero"),
        DecimalError::Malformed => err(EvalErrorKind::TypeMismatch, span, "not a number"),
    }
}

/// Evaluate a program against a table.
pub fn eval_program(program: &Program, table: &Table) -> Result<Answer, EvalError> {
    let mut ctx = Ctx {
        table,
        env: HashMap::new(),
    };
    for b in &program.bindings {
        let v = ctx.eval(&b.value)?;
        ctx.env.insert(b.name.as_str(), v);
    }
    Ok(ctx.eval(&program.result)?.into_answer())
}

impl<'a> Ctx<'a> {
    fn eval(&self, e: &Expr) -> Result<Value, EvalError> {
        let span = e.span;
        match &e.kind {
            ExprKind::Number(text) => Decimal::parse(text)
                .map(|d| Value::Scalar(Scalar::Num(d)))
                .map_err(|x| decimal_err(x, span)),
            ExprKind::Text(s) => Ok(Value::Scalar(Scalar::Text(s.clone()))),
            ExprKind::Column(name) => {
                let idx = self.table.column_index(name).ok_or_else(|| {
                    err(EvalErrorKind::MissingColumn, span, format!("no column {name:?}"))
                })?;
                let cells = self
                    .table
                    .rows()
                    .iter()
                    .enumerate()
                    .map(|(r, row)| (r, Scalar::Text(row[idx].clone())))
                    .collect();
                Ok(Value::List(cells))
            }
            ExprKind::Name(n) => self
                .env
                .get(n.as_str())
                .cloned()
                .ok_or_else(|| err(EvalErrorKind::UnboundName, span, format!("{n} is not bound"))),
            ExprKind::Neg(inner) => {
                let v = self.eval(inner)?;
                map_unary(v, |s| match s {
                    Scalar::Num(d) => Ok(Scalar::Num(d.neg())),
                    other => Err(mismatch(span, "negate", &other)),
                })
            }
            ExprKind::Binary(op, lhs, rhs) => {
                let a = self.eval(lhs)?;
                let b = self.eval(rhs)?;
                map_binary(a, b, span, |x, y| scalar_binary(*op, x, y, span))
            }
            ExprKind::Call(func, args) => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a)?);
                }
                call(*func, vals, span)
            }
            ExprKind::Arg {
                which,
                values,
                keys,
            } => {
                let v = self.eval(values)?;
                let k = self.eval(keys)?;
                arg_extreme(*which, v, k, span)
            }
        }
    }
}

fn mismatch(span: Span, what: &str, s: &Scalar) -> EvalError {
    err(
        EvalErrorKind::TypeMismatch,
        span,
        format!("cannot {what} a {}", s.type_name()),
    )
}

fn map_unary(
    v: Value,
    f: impl Fn(Scalar) -> Result<Scalar, EvalError>,
) -> Result<Value, EvalError> {
    match v {
        Value::Scalar(s) => Ok(Value::Scalar(f(s)?)),
        Value::List(cells) => {
            let mut out = Vec::with_capacity(cells.len());
            for (r, s) in cells {
                out.push((r, f(s)?));
            }
            Ok(Value::List(out))
        }
    }
}

fn map_binary(
    a: Value,
    b: Value,
    span: Span,
    f: impl Fn(&Scalar, &Scalar) -> Result<Scalar, EvalError>,
) -> Result<Value, EvalError> {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Ok(Value::Scalar(f(&x, &y)?)),
        (Value::List(xs), Value::Scalar(y)) => {
            let mut out = Vec::with_capacity(xs.len());
            for (r, x) in &xs {
                out.push((*r, f(x, &y)?));
            }
            Ok(Value::List(out))
        }
        (Value::Scalar(x), Value::List(ys)) => {
            let mut out = Vec::with_capacity(ys.len());
            for (r, y) in &ys {
                out.push((*r, f(&x, y)?));
            }
            Ok(Value::List(out))
        }
        (Value::List(xs), Value::List(ys)) => {
            let aligned = xs.len() == ys.len() && xs.iter().zip(&ys).all(|(x, y)| x.0 == y.0);
            if !aligned {
                return Err(err(
                    EvalErrorKind::TypeMismatch,
                    span,
                    "lists cover different rows",
                ));
            }
            let mut out = Vec::with_capacity(xs.len());
            for ((r, x), (_, y)) in xs.iter().zip(&ys) {
                out.push((*r, f(x, y)?));
            }
            Ok(Value::List(out))
        }
    }
}

fn scalar_binary(op: BinOp, x: &Scalar, y: &Scalar, span: Span) -> Result<Scalar, EvalError> {
    use Scalar::{Bool, Num, Text};
    let bad = || {
        err(
            EvalErrorKind::TypeMismatch,
            span,
            format!("`{}` on {} and {}", op.symbol(), x.type_name(), y.type_name()),
        )
    };
    let arith = |r: Result<Decimal, DecimalError>| r.map(Num).map_err(|e| decimal_err(e, span));
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
            let (Num(a), Num(b)) = (x, y) else { return Err(bad()) };
            match op {
                BinOp::Add => arith(a.add(*b)),
                BinOp::Sub => arith(a.sub(*b)),
                BinOp::Mul => arith(a.mul(*b)),
                _ => arith(a.div(*b)),
            }
        }
        BinOp::Eq | BinOp::Ne => {
            let equal = match (x, y) {
                (Num(a), Num(b)) => a == b,
                (Text(a), Text(b)) => fold_text(a) == fold_text(b),
                (Bool(a), Bool(b)) => a == b,
                _ => return Err(bad()),
            };
            Ok(Bool(if op == BinOp::Eq { equal } else { !equal }))
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (x, y) {
                (Num(a), Num(b)) => a.cmp(b),
                (Text(a), Text(b)) => fold_text(a).cmp(&fold_text(b)),
                _ => return Err(bad()),
            };
            Ok(Bool(match op {
                BinOp::Lt => ord.is_lt(),
                BinOp::Le => ord.is_le(),
                BinOp::Gt => ord.is_gt(),
                _ => ord.is_ge(),
            }))
        }
        BinOp::Contains => match (x, y) {
            (Text(a), Text(b)) => Ok(Bool(fold_text(a).contains(&fold_text(b)))),
            _ => Err(bad()),
        },
        BinOp::And | BinOp::Or => match (x, y) {
            (Bool(a), Bool(b)) => Ok(Bool(if op == BinOp::And { *a && *b } else { *a || *b })),
            _ => Err(bad()),
        },
    }
}

fn expect_list(v: Value, span: Span, what: &str) -> Result<Vec<(usize, Scalar)>, EvalError> {
    match v {
        Value::List(cells) => Ok(cells),
        Value::Scalar(s) => Err(err(
            EvalErrorKind::TypeMismatch,
            span,
            format!("{what} needs a list, got a {}", s.type_name()),
        )),
    }
}

fn numbers(cells: &[(usize, Scalar)], span: Span, what: &str) -> Result<Vec<Decimal>, EvalError> {
    cells
        .iter()
        .map(|(_, s)| match s {
            Scalar::Num(d) => Ok(*d),
            other => Err(mismatch(span, what, other)),
        })
        .collect()
}

fn call(func: Func, mut args: Vec<Value>, span: Span) -> Result<Value, EvalError> {
    let num = |d: Decimal| Ok(Value::Scalar(Scalar::Num(d)));
    match func {
        Func::ToNumber => map_unary(args.remove(0), |s| match s {
            Scalar::Num(d) => Ok(Scalar::Num(d)),
            Scalar::Text(t) => Decimal::parse(&t)
                .map(Scalar::Num)
                .map_err(|e| decimal_err(e, span)),
            other => Err(mismatch(span, "convert", &other)),
        }),
        Func::Count => {
            let cells = expect_list(args.remove(0), span, "count")?;
            num(Decimal::from_int(cells.len() as i64).map_err(|e| decimal_err(e, span))?)
        }
        Func::Sum => {
            let cells = expect_list(args.remove(0), span, "sum")?;
            let mut total = Decimal::ZERO;
            for (_, s) in &cells {
                let Scalar::Num(d) = s else {
                    return Err(mismatch(span, "sum", s));
                };
                total = total.add(*d).map_err(|e| decimal_err(e, span))?;
            }
            num(total)
        }
        Func::Min | Func::Max | Func::Avg => {
            let cells = expect_list(args.remove(0), span, func.name())?;
            let xs = numbers(&cells, span, func.name())?;
            if xs.is_empty() {
                return Err(err(
                    EvalErrorKind::EmptyAggregate,
                    span,
                    format!("{} of an empty list", func.name()),
                ));
            }
            match func {
                Func::Min => num(*xs.iter().min().unwrap()),
                Func::Max => num(*xs.iter().max().unwrap()),
                _ => {
                    let mut total = Decimal::ZERO;
                    for x in &xs {
                        total = total.add(*x).map_err(|e| decimal_err(e, span))?;
                    }
                    num(total.div_count(xs.len()).map_err(|e| decimal_err(e, span))?)
                }
            }
        }
        Func::Filter => {
            let mask_val = args.pop().unwrap();
            let source = expect_list(args.pop().unwrap(), span, "filter source")?;
            let mask = expect_list(mask_val, span, "filter mask")?;
            let mut out = Vec::new();
            let mut j = 0;
            for (r, cell) in source {
                while j < mask.len() && mask[j].0 < r {
                    j += 1;
                }
                if j >= mask.len() || mask[j].0 != r {
                    return Err(err(
                        EvalErrorKind::TypeMismatch,
                        span,
                        format!("mask has no cell for row {r}"),
                    ));
                }
                match &mask[j].1 {
                    Scalar::Bool(true) => out.push((r, cell)),
                    Scalar::Bool(false) => {}
                    other => return Err(mismatch(span, "filter by", other)),
                }
            }
            Ok(Value::List(out))
        }
        Func::Concat => {
            let mut out = String::new();
            for a in args {
                match a {
                    Value::Scalar(s) => out.push_str(&s.render()),
                    Value::List(_) => {
                        return Err(err(EvalErrorKind::TypeMismatch, span, "concat of a list"))
                    }
                }
            }
            Ok(Value::Scalar(Scalar::Text(out)))
        }
    }
}

fn arg_extreme(which: ArgKind, values: Value, keys: Value, span: Span) -> Result<Value, EvalError> {
    let values = expect_list(values, span, which.name())?;
    let keys = expect_list(keys, span, which.name())?;
    let xs = numbers(&values, span, which.name())?;
    if xs.is_empty() {
        return Err(err(
            EvalErrorKind::EmptyAggregate,
            span,
            format!("{} of an empty list", which.name()),
        ));
    }
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        let better = match which {
            ArgKind::Min => *x < xs[best],
            ArgKind::Max => *x > xs[best],
        };
        if better {
            best = i;
        }
    }
    let row = values[best].0;
    let key = keys
        .binary_search_by_key(&row, |(r, _)| *r)
        .map_err(|_| err(EvalErrorKind::TypeMismatch, span, format!("keys have no cell for row {row}")))?;
    Ok(Value::Scalar(keys[key].1.clone()))
}
