//! Table program language: parser, evaluator, printer and a reference
//! interpreter. See `docs/dsl.md` for the grammar and evaluation rules.

mod ast;
pub mod decimal;
mod eval;
pub mod oracle;
mod parser;
mod print;

pub use ast::{ArgKind, BinOp, Binding, Expr, ExprKind, Func, Program, Span};
pub use eval::{eval_program, EvalError, EvalErrorKind};
pub use oracle::brute_force_oracle;
pub use parser::{is_reserved, parse_expr, parse_program, ParseError};
pub use print::{print_expr, print_program, quote};
