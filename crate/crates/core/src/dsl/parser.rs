//! Tokenizer and recursive-descent parser.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use super::ast::{ArgKind, BinOp, Binding, Expr, ExprKind, Func, Program, Span};

const MAX_DEPTH: usize = 96;

/// A positioned parse failure. Line and column are 1-based; the column
/// counts characters.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at {line}:{column}: expected {expected}, found {found}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Str(String),
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Assign,
    Arrow,
    Plus,
    Minus,
    Star,
    Slash,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Number(s) => write!(f, "number {s}"),
            Tok::Str(_) => f.write_str("string"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::LBracket => f.write_str("`[`"),
            Tok::RBracket => f.write_str("`]`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Assign => f.write_str("`=`"),
            Tok::Arrow => f.write_str("`->`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Slash => f.write_str("`/`"),
            Tok::EqEq => f.write_str("`==`"),
            Tok::NotEq => f.write_str("`!=`"),
            Tok::Lt => f.write_str("`<`"),
            Tok::Le => f.write_str("`<=`"),
            Tok::Gt => f.write_str("`>`"),
            Tok::Ge => f.write_str("`>=`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

const KEYWORDS: [&str; 6] = ["w", "and", "or", "contains", "argmin", "argmax"];

pub fn is_reserved(name: &str) -> bool {
    KEYWORDS.contains(&name) || Func::from_name(name).is_some()
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokenize(src: &'a str) -> Result<Vec<(Tok, Span)>, ParseError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        loop {
            lx.skip_ws();
            let start = lx.pos;
            let Some(c) = lx.peek() else {
                out.push((Tok::Eof, Span::new(start, start)));
                return Ok(out);
            };
            let tok = match c {
                '(' => lx.single(Tok::LParen),
                ')' => lx.single(Tok::RParen),
                '[' => lx.single(Tok::LBracket),
                ']' => lx.single(Tok::RBracket),
                ',' => lx.single(Tok::Comma),
                ';' => lx.single(Tok::Semi),
                '+' => lx.single(Tok::Plus),
                '*' => lx.single(Tok::Star),
                '/' => lx.single(Tok::Slash),
                '-' => {
                    lx.bump();
                    if lx.eat('>') {
                        Tok::Arrow
                    } else {
                        Tok::Minus
                    }
                }
                '=' => {
                    lx.bump();
                    if lx.eat('=') {
                        Tok::EqEq
                    } else {
                        Tok::Assign
                    }
                }
                '!' => {
                    lx.bump();
                    if lx.eat('=') {
                        Tok::NotEq
                    } else {
                        return Err(error_at(src, start, "`!=`", "`!`"));
                    }
                }
                '<' => {
                    lx.bump();
                    if lx.eat('=') {
                        Tok::Le
                    } else {
                        Tok::Lt
                    }
                }
                '>' => {
                    lx.bump();
                    if lx.eat('=') {
                        Tok::Ge
                    } else {
                        Tok::Gt
                    }
                }
                '\'' | '"' => lx.string(c)?,
                c if c.is_ascii_digit() => lx.number()?,
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let s = lx.take_while(|c| c.is_ascii_alphanumeric() || c == '_');
                    Tok::Ident(s.to_string())
                }
                other => {
                    return Err(error_at(src, start, "a token", &format!("`{other}`")));
                }
            };
            out.push((tok, Span::new(start, lx.pos)));
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn eat(&mut self, want: char) -> bool {
        if self.peek() == Some(want) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn single(&mut self, tok: Tok) -> Tok {
        self.bump();
        tok
    }

    fn skip_ws(&mut self) {
        self.take_while(char::is_whitespace);
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if !pred(c) {
                break;
            }
            self.bump();
        }
        &self.src[start..self.pos]
    }

    fn number(&mut self) -> Result<Tok, ParseError> {
        let start = self.pos;
        self.take_while(|c| c.is_ascii_digit());
        if self.peek() == Some('.') {
            self.bump();
            if self.take_while(|c| c.is_ascii_digit()).is_empty() {
                return Err(error_at(self.src, self.pos, "digit", &found_at(self.src, self.pos)));
            }
        }
        let text = &self.src[start..self.pos];
        let canon = crate::answer::canonical_decimal(text).unwrap_or_else(|| text.to_string());
        Ok(Tok::Number(canon))
    }

    fn string(&mut self, quote: char) -> Result<Tok, ParseError> {
        let start = self.pos;
        self.bump();
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(error_at(self.src, start, "closing quote", "end of input")),
                Some('\\') => {
                    let escape_at = self.pos - 1;
                    match self.bump() {
                    Some(c @ ('\\' | '\'' | '"')) => out.push(c),
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    _ => {
                        return Err(error_at(
                            self.src,
                            escape_at,
                            "escape sequence",
                            "invalid escape",
                        ))
                    }
                }
                }
                Some(c) if c == quote => return Ok(Tok::Str(out)),
                Some(c) => out.push(c),
            }
        }
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let line_start = before.rfind('\n').map(|i| i + 1).unwrap_or(0);
    let column = before[line_start..].chars().count() + 1;
    (line, column)
}

fn found_at(src: &str, offset: usize) -> String {
    match src[offset..].chars().next() {
        Some(c) => format!("`{c}`"),
        None => "end of input".to_string(),
    }
}

fn error_at(src: &str, offset: usize, expected: &str, found: &str) -> ParseError {
    let (line, column) = line_col(src, offset);
    ParseError {
        line,
        column,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, Span)>,
    pos: usize,
    depth: usize,
}

/// Parse program text into an AST. Never returns a partial tree.
pub fn parse_program(src: &str) -> Result<Program, ParseError> {
    let toks = Lexer::tokenize(src)?;
    let mut p = Parser {
        src,
        toks,
        pos: 0,
        depth: 0,
    };
    p.program()
}

/// Parse a single expression.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let toks = Lexer::tokenize(src)?;
    let mut p = Parser {
        src,
        toks,
        pos: 0,
        depth: 0,
    };
    let e = p.expr()?;
    p.expect(&Tok::Eof, "end of input")?;
    Ok(e)
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].0
    }

    fn span(&self) -> Span {
        self.toks[self.pos].1
    }

    fn advance(&mut self) -> (Tok, Span) {
        let t = self.toks[self.pos].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &str) -> Result<T, ParseError> {
        let (tok, span) = &self.toks[self.pos];
        Err(error_at(self.src, span.start, expected, &tok.to_string()))
    }

    fn expect(&mut self, want: &Tok, expected: &str) -> Result<Span, ParseError> {
        if self.peek() == want {
            Ok(self.advance().1)
        } else {
            self.fail(expected)
        }
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut bindings: Vec<Binding> = Vec::new();
        let mut names = HashSet::new();
        loop {
            let is_binding = matches!(self.peek(), Tok::Ident(n) if !is_reserved(n))
                && *self.peek_at(1) == Tok::Assign;
            if !is_binding {
                break;
            }
            let (tok, name_span) = self.advance();
            let Tok::Ident(name) = tok else { unreachable!() };
            if !names.insert(name.clone()) {
                let (line, column) = line_col(self.src, name_span.start);
                return Err(ParseError {
                    line,
                    column,
                    expected: "fresh binding name".into(),
                    found: format!("`{name}` (already bound)"),
                });
            }
            self.advance();
            let value = self.expr()?;
            let end = self.expect(&Tok::Semi, "`;`")?;
            bindings.push(Binding {
                name,
                value,
                span: name_span.join(end),
            });
        }
        let result = self.expr()?;
        if *self.peek() == Tok::Semi {
            self.advance();
        }
        if *self.peek() != Tok::Eof {
            return self.fail("end of program");
        }
        Ok(Program { bindings, result })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.fail("shallower nesting");
        }
        let e = self.or();
        self.depth -= 1;
        e
    }

    fn or(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.and()?;
        while matches!(self.peek(), Tok::Ident(k) if k == "or") {
            self.advance();
            let rhs = self.and()?;
            lhs = binary(BinOp::Or, lhs, rhs);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.cmp()?;
        while matches!(self.peek(), Tok::Ident(k) if k == "and") {
            self.advance();
            let rhs = self.cmp()?;
            lhs = binary(BinOp::And, lhs, rhs);
        }
        Ok(lhs)
    }

    fn cmp_op(&self) -> Option<BinOp> {
        Some(match self.peek() {
            Tok::EqEq => BinOp::Eq,
            Tok::NotEq => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            Tok::Ident(k) if k == "contains" => BinOp::Contains,
            _ => return None,
        })
    }

    fn cmp(&mut self) -> Result<Expr, ParseError> {
        let lhs = self.additive()?;
        if let Some(op) = self.cmp_op() {
            self.advance();
            let rhs = self.additive()?;
            if self.cmp_op().is_some() {
                return self.fail("no chained comparison");
            }
            return Ok(binary(op, lhs, rhs));
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.term()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.advance();
            let rhs = self.unary()?;
            lhs = binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            let start = self.advance().1;
            self.depth += 1;
            if self.depth > MAX_DEPTH {
                return self.fail("shallower nesting");
            }
            let inner = self.unary()?;
            self.depth -= 1;
            let span = start.join(inner.span);
            return Ok(Expr {
                kind: ExprKind::Neg(Box::new(inner)),
                span,
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let start = self.span();
        match self.peek().clone() {
            Tok::Number(n) => {
                self.advance();
                Ok(Expr {
                    kind: ExprKind::Number(n),
                    span: start,
                })
            }
            Tok::Str(s) => {
                self.advance();
                Ok(Expr {
                    kind: ExprKind::Text(s),
                    span: start,
                })
            }
            Tok::LParen => {
                self.advance();
                let mut e = self.expr()?;
                let end = self.expect(&Tok::RParen, "`)`")?;
                e.span = start.join(end);
                Ok(e)
            }
            Tok::Ident(name) if name == "w" => {
                self.advance();
                self.expect(&Tok::LBracket, "`[`")?;
                let col = match self.peek().clone() {
                    Tok::Str(s) => {
                        self.advance();
                        s
                    }
                    _ => return self.fail("column name string"),
                };
                let end = self.expect(&Tok::RBracket, "`]`")?;
                Ok(Expr {
                    kind: ExprKind::Column(col),
                    span: start.join(end),
                })
            }
            Tok::Ident(name) if name == "argmin" || name == "argmax" => {
                let which = if name == "argmin" { ArgKind::Min } else { ArgKind::Max };
                self.advance();
                self.expect(&Tok::LParen, "`(`")?;
                let values = self.expr()?;
                self.expect(&Tok::Arrow, "`->`")?;
                let keys = self.expr()?;
                let end = self.expect(&Tok::RParen, "`)`")?;
                Ok(Expr {
                    kind: ExprKind::Arg {
                        which,
                        values: Box::new(values),
                        keys: Box::new(keys),
                    },
                    span: start.join(end),
                })
            }
            Tok::Ident(name) => {
                if let Some(func) = Func::from_name(&name) {
                    self.advance();
                    return self.call(func, start);
                }
                if is_reserved(&name) {
                    return self.fail("expression");
                }
                self.advance();
                Ok(Expr {
                    kind: ExprKind::Name(name),
                    span: start,
                })
            }
            _ => self.fail("expression"),
        }
    }

    fn call(&mut self, func: Func, start: Span) -> Result<Expr, ParseError> {
        self.expect(&Tok::LParen, "`(`")?;
        let mut args = vec![self.expr()?];
        let (_, max) = func.arity();
        while *self.peek() == Tok::Comma {
            if max.is_some_and(|m| args.len() >= m) {
                return self.fail("`)`");
            }
            self.advance();
            args.push(self.expr()?);
        }
        let (min, _) = func.arity();
        if args.len() < min {
            return self.fail("`,`");
        }
        let end = self.expect(&Tok::RParen, "`)`")?;
        Ok(Expr {
            kind: ExprKind::Call(func, args),
            span: start.join(end),
        })
    }
}

fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
    let span = lhs.span.join(rhs.span);
    Expr {
        kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
        span,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_statement_program() {
        let p = parse_program("min_t = argmin(w['Tickets'] -> w['Day']); min_t").unwrap();
        assert_eq!(p.bindings.len(), 1);
        assert_eq!(p.bindings[0].name, "min_t");
        assert!(matches!(p.bindings[0].value.kind, ExprKind::Arg { which: ArgKind::Min, .. }));
        assert_eq!(p.result.kind, ExprKind::Name("min_t".into()));
        assert_eq!(p.result.span, Span::new(42, 47));
    }

    #[test]
    fn unterminated_call_points_past_end() {
        let err = parse_program("sum(").unwrap_err();
        assert_eq!((err.line, err.column), (1, 5));
        assert_eq!(err.found, "end of input");
    }

    #[test]
    fn positions_on_later_lines() {
        let err = parse_program("a = 1;\nb = ;\nb").unwrap_err();
        assert_eq!((err.line, err.column), (2, 5));
        assert_eq!(err.expected, "expression");
    }

    #[test]
    fn precedence_and_assoc() {
        let e = parse_expr("1 - 2 - 3 * 4").unwrap();
        let ExprKind::Binary(BinOp::Sub, lhs, rhs) = e.kind else { panic!() };
        assert!(matches!(lhs.kind, ExprKind::Binary(BinOp::Sub, _, _)));
        assert!(matches!(rhs.kind, ExprKind::Binary(BinOp::Mul, _, _)));
        let e = parse_expr("w['a'] == 'x' or w['b'] > 2 and w['c'] contains 'z'").unwrap();
        assert!(matches!(e.kind, ExprKind::Binary(BinOp::Or, _, _)));
    }

    #[test]
    fn rejects_bad_inputs() {
        for src in [
            "",
            ";",
            "1 +",
            "w[1]",
            "w['a'",
            "'abc",
            "a == b == c",
            "filter(w['a'])",
            "filter(w['a'], 1, 2)",
            "count(1, 2)",
            "concat()",
            "x = 1; x = 2; x",
            "sum = 3; sum",
            "1 ! 2",
            "1 2",
            "1.",
            "#",
            "argmin(w['a'], w['b'])",
        ] {
            assert!(parse_program(src).is_err(), "accepted {src:?}");
        }
    }

    #[test]
    fn deep_nesting_is_an_error_not_a_crash() {
        let src = "(".repeat(5000) + "1" + &")".repeat(5000);
        assert!(parse_program(&src).is_err());
        let src = "-".repeat(5000) + "1";
        assert!(parse_program(&src).is_err());
    }

    #[test]
    fn numbers_are_canonicalized() {
        let e = parse_expr("003.500").unwrap();
        assert_eq!(e.kind, ExprKind::Number("3.5".into()));
    }

    #[test]
    fn string_escapes() {
        let e = parse_expr(r#"'it\'s' == "a \"b\" \\""#).unwrap();
        let ExprKind::Binary(_, a, b) = e.kind else { panic!() };
        assert_eq!(a.kind, ExprKind::Text("it's".into()));
        assert_eq!(b.kind, ExprKind::Text("a \"b\" \\".into()));
    }
}
