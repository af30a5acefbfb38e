#![allow(dead_code)]

pub mod world;

use demo_forge::dsl::{ArgKind, BinOp, Binding, Expr, ExprKind, Func, Program, Span};
use demo_forge::Table;
use rand::seq::IndexedRandom;
use rand::Rng;

const WORDS: [&str; 8] = ["alpha", "Beta", " gamma ", "DELTA", "beta", "Alphabet", "x", ""];
const NUMS: [&str; 12] = [
    "0", "1", "2", "3.5", "-4", "10", "1,200", "0.25", "7", "-0.5", "99", "2.000",
];

pub fn random_table<R: Rng>(rng: &mut R) -> Table {
    let n_cols = rng.random_range(1..=6);
    let n_rows = rng.random_range(0..=8);
    let headers: Vec<String> = (0..n_cols).map(|i| format!("c{i}")).collect();
    // each column is mostly numeric or mostly text
    let numeric: Vec<bool> = (0..n_cols).map(|_| rng.random_bool(0.6)).collect();
    let rows = (0..n_rows)
        .map(|_| {
            (0..n_cols)
                .map(|c| {
                    let use_num = if rng.random_bool(0.9) { numeric[c] } else { !numeric[c] };
                    if use_num {
                        NUMS.choose(rng).unwrap().to_string()
                    } else {
                        WORDS.choose(rng).unwrap().to_string()
                    }
                })
                .collect()
        })
        .collect();
    Table::new(None, headers, rows).unwrap()
}

fn e(kind: ExprKind) -> Expr {
    Expr {
        kind,
        span: Span::default(),
    }
}

fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    e(ExprKind::Binary(op, Box::new(a), Box::new(b)))
}

fn call(f: Func, args: Vec<Expr>) -> Expr {
    e(ExprKind::Call(f, args))
}

struct Gen<'a, R> {
    rng: &'a mut R,
    n_cols: usize,
    names: Vec<String>,
}

impl<R: Rng> Gen<'_, R> {
    fn column(&mut self) -> Expr {
        // occasionally reference a column that does not exist
        let idx = if self.rng.random_bool(0.03) {
            self.n_cols + 1
        } else {
            self.rng.random_range(0..self.n_cols)
        };
        e(ExprKind::Column(format!("c{idx}")))
    }

    fn number(&mut self) -> Expr {
        let choices = ["0", "1", "2", "3", "0.5", "10", "100", "2.25", "0.000001", "7"];
        e(ExprKind::Number(choices.choose(self.rng).unwrap().to_string()))
    }

    fn text(&mut self) -> Expr {
        e(ExprKind::Text(WORDS.choose(self.rng).unwrap().to_string()))
    }

    fn name(&mut self) -> Option<Expr> {
        if self.names.is_empty() || self.rng.random_bool(0.5) {
            None
        } else {
            Some(e(ExprKind::Name(self.names.choose(self.rng).unwrap().clone())))
        }
    }

    fn num_list(&mut self, depth: u32) -> Expr {
        if depth == 0 {
            return call(Func::ToNumber, vec![self.column()]);
        }
        match self.rng.random_range(0..6) {
            0 => call(Func::ToNumber, vec![self.column()]),
            1 => {
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div].choose(self.rng).unwrap();
                let a = self.num_list(depth - 1);
                let b = if self.rng.random_bool(0.5) {
                    self.num_scalar(depth - 1)
                } else {
                    self.num_list(depth - 1)
                };
                bin(op, a, b)
            }
            2 => {
                let src = self.num_list(depth - 1);
                let mask = self.bool_list(depth - 1);
                call(Func::Filter, vec![src, mask])
            }
            3 => e(ExprKind::Neg(Box::new(self.num_list(depth - 1)))),
            4 => self.name().unwrap_or_else(|| call(Func::ToNumber, vec![self.column()])),
            _ => self.any(depth - 1),
        }
    }

    fn text_list(&mut self, depth: u32) -> Expr {
        if depth == 0 || self.rng.random_bool(0.6) {
            return self.column();
        }
        let src = self.text_list(depth - 1);
        let mask = self.bool_list(depth - 1);
        call(Func::Filter, vec![src, mask])
    }

    fn bool_list(&mut self, depth: u32) -> Expr {
        let d = depth.saturating_sub(1);
        match self.rng.random_range(0..4) {
            0 => {
                let op = *[BinOp::Eq, BinOp::Ne, BinOp::Contains, BinOp::Lt, BinOp::Ge]
                    .choose(self.rng)
                    .unwrap();
                let a = self.text_list(d);
                let b = self.text();
                bin(op, a, b)
            }
            1 if depth > 0 => {
                let op = if self.rng.random_bool(0.5) { BinOp::And } else { BinOp::Or };
                let a = self.bool_list(d);
                let b = self.bool_list(d);
                bin(op, a, b)
            }
            _ => {
                let op = *[BinOp::Lt, BinOp::Le, BinOp::Gt, BinOp::Ge, BinOp::Eq, BinOp::Ne]
                    .choose(self.rng)
                    .unwrap();
                let a = self.num_list(d);
                let b = self.num_scalar(d);
                bin(op, a, b)
            }
        }
    }

    fn num_scalar(&mut self, depth: u32) -> Expr {
        if depth == 0 {
            return self.number();
        }
        match self.rng.random_range(0..7) {
            0 => self.number(),
            1 => {
                let f = *[Func::Sum, Func::Min, Func::Max, Func::Avg, Func::Count]
                    .choose(self.rng)
                    .unwrap();
                let arg = self.num_list(depth - 1);
                call(f, vec![arg])
            }
            2 => {
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div].choose(self.rng).unwrap();
                let a = self.num_scalar(depth - 1);
                let b = self.num_scalar(depth - 1);
                bin(op, a, b)
            }
            3 => {
                let which = if self.rng.random_bool(0.5) { ArgKind::Min } else { ArgKind::Max };
                let values = self.num_list(depth - 1);
                let keys = self.num_list(depth - 1);
                e(ExprKind::Arg {
                    which,
                    values: Box::new(values),
                    keys: Box::new(keys),
                })
            }
            4 => call(Func::Count, vec![self.text_list(depth - 1)]),
            5 => e(ExprKind::Neg(Box::new(self.num_scalar(depth - 1)))),
            _ => self.name().unwrap_or_else(|| self.number()),
        }
    }

    fn text_scalar(&mut self, depth: u32) -> Expr {
        let d = depth.saturating_sub(1);
        match self.rng.random_range(0..3) {
            0 => self.text(),
            1 => {
                let which = if self.rng.random_bool(0.5) { ArgKind::Min } else { ArgKind::Max };
                let values = self.num_list(d);
                let keys = self.text_list(d);
                e(ExprKind::Arg {
                    which,
                    values: Box::new(values),
                    keys: Box::new(keys),
                })
            }
            _ => {
                let n = self.rng.random_range(1..=3);
                let args = (0..n)
                    .map(|_| {
                        if self.rng.random_bool(0.5) {
                            self.num_scalar(d)
                        } else {
                            self.text()
                        }
                    })
                    .collect();
                call(Func::Concat, args)
            }
        }
    }

    /// Anything at all, including ill-typed combinations.
    fn any(&mut self, depth: u32) -> Expr {
        let d = depth.saturating_sub(1);
        match self.rng.random_range(0..9) {
            0 => self.num_list(d),
            1 => self.text_list(d),
            2 => self.bool_list(d),
            3 => self.num_scalar(d),
            4 => self.text_scalar(d),
            5 => {
                let op = *BinOp::ALL.choose(self.rng).unwrap();
                let a = self.any(d);
                let b = self.any(d);
                bin(op, a, b)
            }
            6 => {
                let f = *Func::ALL.choose(self.rng).unwrap();
                let (min, max) = f.arity();
                let n = max.unwrap_or(min + 1);
                let args = (0..n).map(|_| self.any(d)).collect();
                call(f, args)
            }
            7 => e(ExprKind::Name(format!("v{}", self.rng.random_range(0..4)))),
            _ => self.text(),
        }
    }
}

pub fn random_program<R: Rng>(rng: &mut R, table: &Table) -> Program {
    let n_cols = table.headers().len();
    let mut g = Gen {
        rng,
        n_cols,
        names: Vec::new(),
    };
    let n_bindings = g.rng.random_range(0..=2);
    let mut bindings = Vec::new();
    for i in 0..n_bindings {
        let depth = g.rng.random_range(1..=3);
        let value = match g.rng.random_range(0..4) {
            0 => g.num_list(depth),
            1 => g.num_scalar(depth),
            2 => g.bool_list(depth),
            _ => g.any(depth),
        };
        let name = format!("v{i}");
        bindings.push(Binding {
            name: name.clone(),
            value,
            span: Span::default(),
        });
        g.names.push(name);
    }
    let depth = g.rng.random_range(1..=4);
    let result = match g.rng.random_range(0..6) {
        0 => g.num_scalar(depth),
        1 => g.text_scalar(depth),
        2 => g.num_list(depth),
        3 => g.text_list(depth),
        4 => g.bool_list(depth),
        _ => g.any(depth),
    };
    Program { bindings, result }
}
