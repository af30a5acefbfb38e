//! Reference interpreter for differential testing of [`super::eval_program`].
//!
//! Deliberately naive: numbers are exact big rationals rounded to the
//! micro grid after every operation, lists are `BTreeMap`s keyed by row and
//! every list operator is a plain scan over table rows. It shares only the
//! AST with the evaluator.

use std::collections::{BTreeMap, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use unicode_normalization::UnicodeNormalization;

use super::ast::{ArgKind, BinOp, Expr, ExprKind, Func, Program};
use super::eval::EvalErrorKind;
use crate::domain::Table;

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    N(BigRational),
    T(String),
    B(bool),
}

#[derive(Debug, Clone, PartialEq)]
enum Val {
    One(Cell),
    Many(BTreeMap<usize, Cell>),
}

type R<T> = Result<T, EvalErrorKind>;

fn micro() -> BigInt {
    BigInt::from(1_000_000)
}

fn limit() -> BigRational {
    BigRational::from_integer(BigInt::from(10).pow(20))
}

/// Snap an exact value to the 1e-6 grid (half away from zero) and bound it.
fn snap(v: BigRational) -> R<BigRational> {
    let scaled = (v * BigRational::from_integer(micro())).round();
    let out = scaled / BigRational::from_integer(micro());
    if out.abs() > limit() {
        Err(EvalErrorKind::NumericOverflow)
    } else {
        Ok(out)
    }
}

fn fold(s: &str) -> String {
    let a: String = s.nfc().collect();
    let b: String = a.to_lowercase().nfc().collect();
    b.trim().to_string()
}

fn parse_number(text: &str) -> R<BigRational> {
    let t = text.trim();
    let mut chars = t.chars().peekable();
    let mut negative = false;
    if let Some(&c) = chars.peek() {
        if c == '+' || c == '-' {
            negative = c == '-';
            chars.next();
        }
    }
    let rest: String = chars.collect();
    let (int_s, frac_s) = match rest.find('.') {
        Some(i) => (&rest[..i], Some(&rest[i + 1..])),
        None => (&rest[..], None),
    };
    // integer part: plain digits, or 1-3 digits then ",ddd" groups
    let mut int_digits = String::new();
    if int_s.is_empty() {
        return Err(EvalErrorKind::TypeMismatch);
    }
    if int_s.contains(',') {
        for (i, g) in int_s.split(',').enumerate() {
            let ok_len = if i == 0 { (1..=3).contains(&g.len()) } else { g.len() == 3 };
            if !ok_len || !g.chars().all(|c| c.is_ascii_digit()) {
                return Err(EvalErrorKind::TypeMismatch);
            }
            int_digits.push_str(g);
        }
    } else {
        if !int_s.chars().all(|c| c.is_ascii_digit()) {
            return Err(EvalErrorKind::TypeMismatch);
        }
        int_digits.push_str(int_s);
    }
    let mut value = BigRational::from_integer(int_digits.parse::<BigInt>().unwrap());
    if let Some(f) = frac_s {
        if f.is_empty() || !f.chars().all(|c| c.is_ascii_digit()) {
            return Err(EvalErrorKind::TypeMismatch);
        }
        let num: BigInt = f.parse().unwrap();
        let den = BigInt::from(10).pow(f.len() as u32);
        value += BigRational::new(num, den);
    }
    if negative {
        value = -value;
    }
    snap(value)
}

fn render_num(v: &BigRational) -> String {
    let scaled = (v * BigRational::from_integer(micro())).to_integer();
    let negative = scaled.is_negative();
    let abs = scaled.abs();
    let int = &abs / micro();
    let frac = &abs % micro();
    let mut s = String::new();
    if negative {
        s.push('-');
    }
    s.push_str(&int.to_string());
    if !frac.is_zero() {
        let f = format!("{:0>6}", frac.to_string());
        s.push('.');
        s.push_str(f.trim_end_matches('0'));
    }
    s
}

fn render(c: &Cell) -> String {
    match c {
        Cell::N(n) => render_num(n),
        Cell::T(t) => t.clone(),
        Cell::B(true) => "true".into(),
        Cell::B(false) => "false".into(),
    }
}

/// Answer text or error kind for `program` over `table`.
pub fn brute_force_oracle(program: &Program, table: &Table) -> Result<String, EvalErrorKind> {
    let mut env: HashMap<String, Val> = HashMap::new();
    for b in &program.bindings {
        let v = walk(&b.value, table, &env)?;
        env.insert(b.name.clone(), v);
    }
    Ok(match walk(&program.result, table, &env)? {
        Val::One(c) => render(&c),
        Val::Many(m) => m.values().map(render).collect::<Vec<_>>().join("|"),
    })
}

fn cell_op(op: BinOp, a: &Cell, b: &Cell) -> R<Cell> {
    use Cell::{B, N, T};
    let tm = Err(EvalErrorKind::TypeMismatch);
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
            let (N(x), N(y)) = (a, b) else { return tm };
            let exact = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                _ => {
                    if y.is_zero() {
                        return Err(EvalErrorKind::DivisionByZero);
                    }
                    x / y
                }
            };
            Ok(N(snap(exact)?))
        }
        BinOp::Eq | BinOp::Ne => {
            let same = match (a, b) {
                (N(x), N(y)) => x == y,
                (T(x), T(y)) => fold(x) == fold(y),
                (B(x), B(y)) => x == y,
                _ => return tm,
            };
            Ok(B(if op == BinOp::Eq { same } else { !same }))
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let (lt, eq) = match (a, b) {
                (N(x), N(y)) => (x < y, x == y),
                (T(x), T(y)) => {
                    let (fx, fy) = (fold(x), fold(y));
                    (fx.as_bytes() < fy.as_bytes(), fx == fy)
                }
                _ => return tm,
            };
            Ok(B(match op {
                BinOp::Lt => lt,
                BinOp::Le => lt || eq,
                BinOp::Gt => !lt && !eq,
                _ => !lt,
            }))
        }
        BinOp::Contains => match (a, b) {
            (T(x), T(y)) => Ok(B(fold(x).contains(fold(y).as_str()))),
            _ => tm,
        },
        BinOp::And => match (a, b) {
            (B(x), B(y)) => Ok(B(*x && *y)),
            _ => tm,
        },
        BinOp::Or => match (a, b) {
            (B(x), B(y)) => Ok(B(*x || *y)),
            _ => tm,
        },
    }
}

fn to_number(c: &Cell) -> R<Cell> {
    match c {
        Cell::N(n) => Ok(Cell::N(n.clone())),
        Cell::T(t) => Ok(Cell::N(parse_number(t)?)),
        Cell::B(_) => Err(EvalErrorKind::TypeMismatch),
    }
}

fn negate(c: &Cell) -> R<Cell> {
    match c {
        Cell::N(n) => Ok(Cell::N(-n.clone())),
        _ => Err(EvalErrorKind::TypeMismatch),
    }
}

fn many(v: Val) -> R<BTreeMap<usize, Cell>> {
    match v {
        Val::Many(m) => Ok(m),
        Val::One(_) => Err(EvalErrorKind::TypeMismatch),
    }
}

fn walk(e: &Expr, table: &Table, env: &HashMap<String, Val>) -> R<Val> {
    match &e.kind {
        ExprKind::Number(t) => Ok(Val::One(Cell::N(parse_number(t)?))),
        ExprKind::Text(t) => Ok(Val::One(Cell::T(t.clone()))),
        ExprKind::Column(name) => {
            let mut col = None;
            for (i, h) in table.headers().iter().enumerate() {
                if h == name {
                    col = Some(i);
                    break;
                }
            }
            let col = col.ok_or(EvalErrorKind::MissingColumn)?;
            let mut m = BTreeMap::new();
            for r in 0..table.rows().len() {
                m.insert(r, Cell::T(table.rows()[r][col].clone()));
            }
            Ok(Val::Many(m))
        }
        ExprKind::Name(n) => env.get(n).cloned().ok_or(EvalErrorKind::UnboundName),
        ExprKind::Neg(inner) => {
            let v = walk(inner, table, env)?;
            per_cell(v, negate)
        }
        ExprKind::Binary(op, lhs, rhs) => {
            let a = walk(lhs, table, env)?;
            let b = walk(rhs, table, env)?;
            match (a, b) {
                (Val::One(x), Val::One(y)) => Ok(Val::One(cell_op(*op, &x, &y)?)),
                (Val::Many(xs), Val::One(y)) => {
                    let mut out = BTreeMap::new();
                    for r in 0..table.rows().len() {
                        if let Some(x) = xs.get(&r) {
                            out.insert(r, cell_op(*op, x, &y)?);
                        }
                    }
                    Ok(Val::Many(out))
                }
                (Val::One(x), Val::Many(ys)) => {
                    let mut out = BTreeMap::new();
                    for r in 0..table.rows().len() {
                        if let Some(y) = ys.get(&r) {
                            out.insert(r, cell_op(*op, &x, y)?);
                        }
                    }
                    Ok(Val::Many(out))
                }
                (Val::Many(xs), Val::Many(ys)) => {
                    for r in 0..table.rows().len() {
                        if xs.contains_key(&r) != ys.contains_key(&r) {
                            return Err(EvalErrorKind::TypeMismatch);
                        }
                    }
                    let mut out = BTreeMap::new();
                    for r in 0..table.rows().len() {
                        if let (Some(x), Some(y)) = (xs.get(&r), ys.get(&r)) {
                            out.insert(r, cell_op(*op, x, y)?);
                        }
                    }
                    Ok(Val::Many(out))
                }
            }
        }
        ExprKind::Call(func, args) => {
            let mut vals = Vec::new();
            for a in args {
                vals.push(walk(a, table, env)?);
            }
            call(*func, vals, table.rows().len())
        }
        ExprKind::Arg {
            which,
            values,
            keys,
        } => {
            let v = walk(values, table, env)?;
            let k = walk(keys, table, env)?;
            let v = many(v)?;
            let k = many(k)?;
            let mut best: Option<(usize, BigRational)> = None;
            for r in 0..table.rows().len() {
                let Some(c) = v.get(&r) else { continue };
                let Cell::N(n) = c else {
                    return Err(EvalErrorKind::TypeMismatch);
                };
                let take = match &best {
                    None => true,
                    Some((_, cur)) => match which {
                        ArgKind::Min => n < cur,
                        ArgKind::Max => n > cur,
                    },
                };
                if take {
                    best = Some((r, n.clone()));
                }
            }
            let (row, _) = best.ok_or(EvalErrorKind::EmptyAggregate)?;
            k.get(&row)
                .cloned()
                .map(Val::One)
                .ok_or(EvalErrorKind::TypeMismatch)
        }
    }
}

fn per_cell(v: Val, f: fn(&Cell) -> R<Cell>) -> R<Val> {
    match v {
        Val::One(c) => Ok(Val::One(f(&c)?)),
        Val::Many(m) => {
            let mut out = BTreeMap::new();
            for (r, c) in &m {
                out.insert(*r, f(c)?);
            }
            Ok(Val::Many(out))
        }
    }
}

fn call(func: Func, mut vals: Vec<Val>, n_rows: usize) -> R<Val> {
    match func {
        Func::ToNumber => per_cell(vals.remove(0), to_number),
        Func::Count => {
            let m = many(vals.remove(0))?;
            Ok(Val::One(Cell::N(snap(BigRational::from_integer(BigInt::from(m.len())))?)))
        }
        Func::Sum => {
            let m = many(vals.remove(0))?;
            let mut acc = BigRational::zero();
            for r in 0..n_rows {
                match m.get(&r) {
                    None => {}
                    Some(Cell::N(n)) => acc = snap(acc + n)?,
                    Some(_) => return Err(EvalErrorKind::TypeMismatch),
                }
            }
            Ok(Val::One(Cell::N(acc)))
        }
        Func::Min | Func::Max | Func::Avg => {
            let m = many(vals.remove(0))?;
            let mut nums = Vec::new();
            for r in 0..n_rows {
                match m.get(&r) {
                    None => {}
                    Some(Cell::N(n)) => nums.push(n.clone()),
                    Some(_) => return Err(EvalErrorKind::TypeMismatch),
                }
            }
            if nums.is_empty() {
                return Err(EvalErrorKind::EmptyAggregate);
            }
            let out = match func {
                Func::Min => nums.iter().min().unwrap().clone(),
                Func::Max => nums.iter().max().unwrap().clone(),
                _ => {
                    let mut acc = BigRational::zero();
                    for n in &nums {
                        acc = snap(acc + n)?;
                    }
                    snap(acc / BigRational::from_integer(BigInt::from(nums.len())))?
                }
            };
            Ok(Val::One(Cell::N(out)))
        }
        Func::Filter => {
            let mask = vals.pop().unwrap();
            let src = many(vals.pop().unwrap())?;
            let mask = many(mask)?;
            let mut out = BTreeMap::new();
            for r in 0..n_rows {
                let Some(c) = src.get(&r) else { continue };
                match mask.get(&r) {
                    Some(Cell::B(true)) => {
                        out.insert(r, c.clone());
                    }
                    Some(Cell::B(false)) => {}
                    _ => return Err(EvalErrorKind::TypeMismatch),
                }
            }
            Ok(Val::Many(out))
        }
        Func::Concat => {
            let mut s = String::new();
            for v in vals {
                match v {
                    Val::One(c) => s += &render(&c),
                    Val::Many(_) => return Err(EvalErrorKind::TypeMismatch),
                }
            }
            Ok(Val::One(Cell::T(s)))
        }
    }
}
