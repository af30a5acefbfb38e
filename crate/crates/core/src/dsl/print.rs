//! Canonical text form.

use super::ast::{Expr, ExprKind, Program};

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for b in &p.bindings {
        out.push_str(&b.name);
        out.push_str(" = ");
        out.push_str(&print_expr(&b.value));
        out.push_str("; ");
    }
    out.push_str(&print_expr(&p.result));
    out
}

pub fn print_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e);
    out
}

pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('\'');
    out
}

// Binding strength of an expression as an operand: binary ops by precedence,
// everything else binds tighter than any operator.
fn strength(e: &Expr) -> u8 {
    match &e.kind {
        ExprKind::Binary(op, _, _) => op.precedence(),
        ExprKind::Neg(_) => 6,
        _ => 7,
    }
}

fn write_operand(out: &mut String, e: &Expr, needs_parens: bool) {
    if needs_parens {
        out.push('(');
        write_expr(out, e);
        out.push(')');
    } else {
        write_expr(out, e);
    }
}

fn write_expr(out: &mut String, e: &Expr) {
    match &e.kind {
        ExprKind::Number(n) => out.push_str(n),
        ExprKind::Text(s) => out.push_str(&quote(s)),
        ExprKind::Column(c) => {
            out.push_str("w[");
            out.push_str(&quote(c));
            out.push(']');
        }
        ExprKind::Name(n) => out.push_str(n),
        ExprKind::Neg(inner) => {
            out.push('-');
            write_operand(out, inner, strength(inner) < 6);
        }
        ExprKind::Binary(op, lhs, rhs) => {
            let p = op.precedence();
            // comparisons do not chain, so either side at the same level needs parens
            let lhs_parens = strength(lhs) < p || (op.is_comparison() && strength(lhs) == p);
            let rhs_parens = strength(rhs) <= p;
            write_operand(out, lhs, lhs_parens);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_operand(out, rhs, rhs_parens);
        }
        ExprKind::Call(f, args) => {
            out.push_str(f.name());
            out.push('(');
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_expr(out, a);
            }
            out.push(')');
        }
        ExprKind::Arg {
            which,
            values,
            keys,
        } => {
            out.push_str(which.name());
            out.push('(');
            write_expr(out, values);
            out.push_str(" -> ");
            write_expr(out, keys);
            out.push(')');
        }
    }
}
